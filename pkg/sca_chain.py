"""
SCA Lab - Diffusion Chain

This module implements the forward marginal, the first-order (DDPM) and
second-order (DPM-Solver++ SDE) reverse means, edit-friendly inversion into
noise maps {x_T, z_1..z_T}, and the chained denoiser D that replays those
maps from a perturbed x_T.

Binary container layout (little-endian):
    b"SCAB" | uint32 version | uint32 header length | JSON header | float64 body
The JSON header lists every array (name, shape) in body order together with
the sample shape, T and the schedule hash.
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Union

import numpy as np

from sca_denoiser import DenoiserModel
from sca_models import Condition, Sample
from sca_schedule import NoiseSchedule, ScheduleDegeneracyError

logger = logging.getLogger(__name__)

Solver = Literal["dpmpp-2m-sde", "ddpm"]
Prediction = Literal["data", "noise"]

CONTAINER_MAGIC = b"SCAB"
CONTAINER_VERSION = 1


class ChainError(ValueError):
    """Raised for shape, step or schedule mismatches along the chain"""


@dataclass(frozen=True)
class NoiseMapStack:
    """Edit-friendly latents produced by inversion; immutable"""

    x_T: Sample
    z: np.ndarray        # (T, d), row t-1 holds z_t
    aux_x: np.ndarray    # (T+1, d), row t holds the auxiliary x_t
    schedule_id: str
    T: int
    cond: Condition
    solver: str = "dpmpp-2m-sde"
    prediction: str = "noise"

    def __post_init__(self):
        d = self.x_T.size
        if self.z.shape != (self.T, d) or self.aux_x.shape != (self.T + 1, d):
            raise ChainError(f"noise map arrays do not match T={self.T} and dimension {d}")
        if not (np.all(np.isfinite(self.z)) and np.all(np.isfinite(self.aux_x))):
            raise ChainError("noise maps contain non-finite entries")
        self.z.setflags(write=False)
        self.aux_x.setflags(write=False)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.x_T.shape

    def z_sample(self, t: int) -> Sample:
        return Sample(self.z[t - 1], self.shape)

    def aux_sample(self, t: int) -> Sample:
        return Sample(self.aux_x[t], self.shape)


def _check_same_shape(a: Sample, b: Sample, what: str):
    if a.shape != b.shape:
        raise ChainError(f"{what}: shape {a.shape} does not match {b.shape}")


def forward_marginal_sample(x0: Sample, t: int, noise: Sample, schedule: NoiseSchedule) -> Sample:
    """sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise"""
    t = schedule.check_step(t)
    _check_same_shape(x0, noise, "forward_marginal_sample")
    return x0.with_data(schedule.signal(t) * x0.data + schedule.noise(t) * noise.data)


def _to_solver_input(eps: np.ndarray, x: np.ndarray, t: int, schedule: NoiseSchedule, prediction: str) -> np.ndarray:
    if prediction == "noise":
        return eps
    return (x - schedule.noise(t) * eps) / schedule.signal(t)


def _ddpm_mean(x: np.ndarray, eps: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    prev = schedule.alpha_bar[t - 1]
    sigma = schedule.sigma_ddpm[t]
    direction = 1.0 - prev - sigma ** 2
    if direction < 0:
        raise ChainError(f"1 - alpha_bar_{t - 1} - sigma_{t}^2 = {direction} < 0; eta_ddpm too large for this schedule")
    x0_hat = (x - schedule.noise(t) * eps) / schedule.signal(t)
    return np.sqrt(prev) * x0_hat + np.sqrt(direction) * eps


def _solver_mean(
    x: np.ndarray,
    pred: np.ndarray,
    pred_next: Optional[np.ndarray],
    t: int,
    schedule: NoiseSchedule,
) -> np.ndarray:
    h_prev = schedule.h[t - 1]
    if h_prev == 0:
        raise ScheduleDegeneracyError(f"h_{t - 1} = 0 at step {t}")
    a_prev = np.sqrt(schedule.alpha_bar[t - 1])
    b_prev = np.sqrt(1.0 - schedule.alpha_bar[t - 1])
    decay = np.exp(-h_prev)
    weight = a_prev * -np.expm1(-2.0 * h_prev)
    mean = (b_prev / schedule.noise(t)) * decay * x + weight * pred
    if pred_next is not None:
        ratio = -schedule.h[t] / h_prev
        mean = mean + 0.5 * weight * ratio * (pred_next - pred)
    return mean


def noise_scale(schedule: NoiseSchedule, t: int, solver: str = "dpmpp-2m-sde") -> float:
    """
    Coefficient of z_t in the reverse step

    The terminal step has no injected noise when alpha_bar_0 = 1; its residual
    is stored unscaled so replay stays exact. A vanishing scale anywhere else
    makes z_t unrecoverable.
    """
    sigma = schedule.sigma_ddpm[t] if solver == "ddpm" else schedule.sigma_solver[t]
    if sigma > 0:
        return float(sigma)
    if t == 1:
        return 1.0
    raise ScheduleDegeneracyError(f"noise scale vanishes at step {t} under solver '{solver}'; schedule rejected for inversion")


def ddpm_mu(model: DenoiserModel, x_t: Sample, t: int, cond: Condition, schedule: NoiseSchedule) -> Sample:
    """
    First-order DDPM mean

    Args:
        model: denoiser
        x_t: state at step t
        t: step in [1, T]
        cond: condition routed through classifier-free guidance
        schedule: noise schedule (sigma_ddpm gives sigma_t)

    Returns:
        mean of x_{t-1}
    """
    t = schedule.check_step(t)
    eps = model.guided_array(x_t.data, t, cond, schedule)
    return x_t.with_data(_ddpm_mean(x_t.data, eps, t, schedule))


def solver_mu(
    model: DenoiserModel,
    x_t: Sample,
    x_next: Optional[Sample],
    t: int,
    cond: Condition,
    schedule: NoiseSchedule,
    prediction: Prediction = "noise",
) -> Sample:
    """
    Second-order SDE solver mean from the states at t and t+1

    Args:
        model: denoiser
        x_t: state at step t
        x_next: state at step t+1, or None at t = T (first-order boundary step)
        t: step in [1, T]
        cond: condition routed through classifier-free guidance
        schedule: noise schedule
        prediction: 'noise' (default) feeds eps predictions to the solver, 'data' feeds x0 predictions

    Returns:
        mean of x_{t-1}
    """
    t = schedule.check_step(t)
    if x_next is None and t < schedule.T:
        raise ChainError(f"x_next is required below the top step (t={t} < T={schedule.T})")
    eps = model.guided_array(x_t.data, t, cond, schedule)
    pred = _to_solver_input(eps, x_t.data, t, schedule, prediction)
    pred_next = None
    if x_next is not None and t < schedule.T:
        _check_same_shape(x_t, x_next, "solver_mu")
        eps_next = model.guided_array(x_next.data, t + 1, cond, schedule)
        pred_next = _to_solver_input(eps_next, x_next.data, t + 1, schedule, prediction)
    return x_t.with_data(_solver_mean(x_t.data, pred, pred_next, t, schedule))


def _step_mean(
    solver: str,
    prediction: str,
    x: np.ndarray,
    eps: np.ndarray,
    pred_next: Optional[np.ndarray],
    t: int,
    schedule: NoiseSchedule,
) -> Tuple[np.ndarray, np.ndarray]:
    """Mean of x_{t-1} and the solver input at t (reused by step t-1)"""
    if solver == "ddpm":
        return _ddpm_mean(x, eps, t, schedule), eps
    pred = _to_solver_input(eps, x, t, schedule, prediction)
    return _solver_mean(x, pred, pred_next, t, schedule), pred


def invert(
    x0: Sample,
    cond: Condition,
    model: DenoiserModel,
    schedule: NoiseSchedule,
    rng_seed: int,
    solver: Solver = "dpmpp-2m-sde",
    prediction: Prediction = "noise",
) -> NoiseMapStack:
    """
    Edit-friendly inversion with independent per-step noise

    Args:
        x0: clean sample with entries in [0, 1]
        cond: condition used for every denoiser call
        model: denoiser
        schedule: noise schedule
        rng_seed: seed; step t draws from child t-1 of SeedSequence(rng_seed)
        solver: 'dpmpp-2m-sde' (second order) or 'ddpm' (first order)
        prediction: solver input for 'dpmpp-2m-sde', 'noise' by default

    Returns:
        NoiseMapStack whose replay with zero perturbation reproduces x0
    """
    if x0.shape != model.shape:
        raise ChainError(f"sample shape {x0.shape} does not match model shape {model.shape}")
    if np.any(x0.data < 0) or np.any(x0.data > 1):
        raise ChainError("x0 entries must lie in [0, 1]")
    model.validate_condition(cond)
    T, d = schedule.T, x0.size
    scales = [noise_scale(schedule, t, solver) for t in range(1, T + 1)]

    children = np.random.SeedSequence(rng_seed).spawn(T)
    aux = np.empty((T + 1, d))
    aux[0] = x0.data
    for t in range(1, T + 1):
        eps_tilde = np.random.default_rng(children[t - 1]).standard_normal(d)
        aux[t] = schedule.signal(t) * x0.data + schedule.noise(t) * eps_tilde

    z = np.empty((T, d))
    pred_next = None
    for t in range(T, 0, -1):
        eps = model.guided_array(aux[t], t, cond, schedule)
        mean, pred_next = _step_mean(solver, prediction, aux[t], eps, pred_next, t, schedule)
        z[t - 1] = (aux[t - 1] - mean) / scales[t - 1]

    if not np.all(np.isfinite(z)):
        raise ChainError("inversion produced non-finite noise maps")
    logger.debug(f"Inverted sample shape={x0.shape} T={T} solver={solver} seed={rng_seed}")
    return NoiseMapStack(
        x_T=Sample(aux[T], x0.shape),
        z=z,
        aux_x=aux,
        schedule_id=schedule.schedule_id,
        T=T,
        cond=cond,
        solver=solver,
        prediction=prediction,
    )


def replay_array(stack: NoiseMapStack, model: DenoiserModel, x_T: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Run the reverse chain from x_T holding every z_t fixed"""
    x = np.array(x_T, dtype=np.float64)
    pred_next = None
    for t in range(stack.T, 0, -1):
        eps = model.guided_array(x, t, stack.cond, schedule)
        mean, pred_next = _step_mean(stack.solver, stack.prediction, x, eps, pred_next, t, schedule)
        x = mean + noise_scale(schedule, t, stack.solver) * stack.z[t - 1]
    return x


def denoise_chain(
    stack: NoiseMapStack,
    model: DenoiserModel,
    delta: Optional[Sample],
    schedule: NoiseSchedule,
) -> Sample:
    """
    Chained denoiser D(x_T + delta, {z_t}, c, T)

    Args:
        stack: noise maps from invert
        model: denoiser
        delta: latent perturbation, or None for zero
        schedule: the schedule used by invert

    Returns:
        unclamped reconstruction x_0_hat
    """
    if stack.schedule_id != schedule.schedule_id or stack.T != schedule.T:
        raise ChainError(f"stack was built with schedule {stack.schedule_id}, got {schedule.schedule_id}")
    if model.shape != stack.shape:
        raise ChainError(f"model shape {model.shape} does not match stack shape {stack.shape}")
    start = stack.x_T.data
    if delta is not None:
        _check_same_shape(stack.x_T, delta, "denoise_chain")
        start = start + delta.data
    out = replay_array(stack, model, start, schedule)
    if not np.all(np.isfinite(out)):
        raise ChainError("chain output is not finite")
    return stack.x_T.with_data(out)


def z_variance(stack: NoiseMapStack) -> np.ndarray:
    """Per-step variance of z_t over components, index t-1"""
    return stack.z.var(axis=1)


# Binary container

def write_container(path: Union[str, Path], arrays: Dict[str, np.ndarray], header: Dict[str, Any]):
    """Write named float64 arrays with a JSON header"""
    entries = [{"name": name, "shape": list(np.shape(value))} for name, value in arrays.items()]
    meta = dict(header)
    meta["arrays"] = entries
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<II", CONTAINER_VERSION, len(blob)))
        f.write(blob)
        for value in arrays.values():
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    logger.debug(f"Wrote container {path} with arrays {[e['name'] for e in entries]}")


def read_container(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Read a container written by write_container"""
    raw = Path(path).read_bytes()
    if raw[:4] != CONTAINER_MAGIC:
        raise ChainError(f"{path}: not an SCAB container")
    if len(raw) < 12:
        raise ChainError(f"{path}: truncated header")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != CONTAINER_VERSION:
        raise ChainError(f"{path}: unsupported container version {version}")
    header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    offset = 12 + header_len
    arrays: Dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = offset + 8 * count
        if end > len(raw):
            raise ChainError(f"{path}: truncated body for array '{entry['name']}'")
        arrays[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(entry["shape"])
        offset = end
    if offset != len(raw):
        raise ChainError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays


def save_stack(stack: NoiseMapStack, path: Union[str, Path]):
    header = {
        "kind": "noise-map-stack",
        "shape": list(stack.shape),
        "T": stack.T,
        "schedule_id": stack.schedule_id,
        "cond": stack.cond.model_dump(),
        "solver": stack.solver,
        "prediction": stack.prediction,
    }
    write_container(path, {"x_T": stack.x_T.data, "z": stack.z, "aux_x": stack.aux_x}, header)


def load_stack(path: Union[str, Path]) -> NoiseMapStack:
    header, arrays = read_container(path)
    if header.get("kind") != "noise-map-stack":
        raise ChainError(f"{path}: container does not hold a noise-map stack")
    shape = tuple(header["shape"])
    return NoiseMapStack(
        x_T=Sample(arrays["x_T"], shape),
        z=arrays["z"],
        aux_x=arrays["aux_x"],
        schedule_id=header["schedule_id"],
        T=int(header["T"]),
        cond=Condition(**header["cond"]),
        solver=header["solver"],
        prediction=header["prediction"],
    )

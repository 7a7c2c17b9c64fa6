"""
SCA Lab - Analytic Denoiser

This module provides the noise predictor eps_theta(x_t, c) as the exact MMSE
predictor of a known class-conditional Gaussian-mixture data distribution,
together with classifier-free guidance.
"""

import logging
import threading
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from sca_models import Condition, Sample
from sca_schedule import NoiseSchedule

logger = logging.getLogger(__name__)


class DenoiserError(ValueError):
    """Raised for invalid mixtures, shape mismatches or numerical failure"""


class UnknownClassError(DenoiserError):
    """Raised when a condition names a class the model does not know"""


class GuidanceError(DenoiserError):
    """Raised when guidance is requested without a conditional branch"""


@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic Gaussian mixture over Sample-shaped vectors"""

    weights: np.ndarray   # (K,)
    means: np.ndarray     # (K, d)
    stds: np.ndarray      # (K,)
    shape: Tuple[int, int, int]
    label: Optional[int] = None

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        means = np.asarray(self.means, dtype=np.float64)
        stds = np.asarray(self.stds, dtype=np.float64).reshape(-1)
        if means.ndim == 1:
            means = means[None, :]
        shape = tuple(int(s) for s in self.shape)
        if weights.size == 0:
            raise DenoiserError("mixture needs at least one component")
        if means.shape != (weights.size, int(np.prod(shape))):
            raise DenoiserError(f"means shape {means.shape} does not match {weights.size} components of shape {shape}")
        if stds.size != weights.size:
            raise DenoiserError("one std per component is required")
        if np.any(weights <= 0) or np.any(weights > 1):
            raise DenoiserError("component weights must lie in (0, 1]")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise DenoiserError(f"component weights sum to {weights.sum()!r}, expected 1")
        if np.any(~(stds > 0)) or not np.all(np.isfinite(means)):
            raise DenoiserError("component stds must be positive and means finite")
        for name, value in (("weights", weights), ("means", means), ("stds", stds)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "shape", shape)

    @classmethod
    def single(cls, mean: Sample, std: float, label: Optional[int] = None) -> "GaussianMixture":
        return cls(np.ones(1), mean.data[None, :], np.array([std]), mean.shape, label)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _log_components(self, x: np.ndarray, a: float, b: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        var = a * a * self.stds ** 2 + b * b
        diff = x[None, :] - a * self.means
        sq = np.einsum("kd,kd->k", diff, diff)
        log_terms = np.log(self.weights) - 0.5 * self.dim * np.log(2.0 * np.pi * var) - sq / (2.0 * var)
        return log_terms, var, diff


def _check_vector(gmm: GaussianMixture, x: Sample) -> np.ndarray:
    if x.shape != gmm.shape:
        raise DenoiserError(f"sample shape {x.shape} does not match mixture shape {gmm.shape}")
    return x.data


def posterior_mean_array(gmm: GaussianMixture, x: np.ndarray, a: float, b: float) -> np.ndarray:
    """E[x_0 | x_t = x] for x_t = a*x_0 + b*noise, computed in the log domain"""
    log_terms, var, diff = gmm._log_components(x, a, b)
    log_r = log_terms - logsumexp(log_terms)
    resp = np.exp(log_r)
    total = resp.sum()
    if not np.isfinite(total) or total <= 0:
        raise DenoiserError("responsibilities vanished after stabilization")
    gain = a * gmm.stds ** 2 / var
    component_means = gmm.means + gain[:, None] * diff
    return resp @ component_means


def gmm_posterior_mean(gmm: GaussianMixture, x_t: Sample, t: int, schedule: NoiseSchedule) -> Sample:
    """
    Closed-form posterior mean of x_0 given x_t under the diffused mixture

    Args:
        gmm: data distribution
        x_t: noisy state
        t: step in [1, T]
        schedule: noise schedule giving alpha_bar_t

    Returns:
        posterior mean as a Sample
    """
    t = schedule.check_step(t)
    x = _check_vector(gmm, x_t)
    return x_t.with_data(posterior_mean_array(gmm, x, schedule.signal(t), schedule.noise(t)))


def log_marginal_density(gmm: GaussianMixture, x: np.ndarray, t: int, schedule: NoiseSchedule) -> float:
    """ln p_t(x) of the diffused mixture"""
    t = schedule.check_step(t)
    log_terms, _, _ = gmm._log_components(np.asarray(x, dtype=np.float64), schedule.signal(t), schedule.noise(t))
    return float(logsumexp(log_terms))


class DenoiserCallCounter:
    """Thread-safe tally of denoiser evaluations by branch"""

    def __init__(self):
        self._lock = threading.Lock()
        self.conditional = 0
        self.unconditional = 0

    def record(self, conditional: bool):
        with self._lock:
            if conditional:
                self.conditional += 1
            else:
                self.unconditional += 1

    def reset(self):
        with self._lock:
            self.conditional = 0
            self.unconditional = 0

    @property
    def total(self) -> int:
        return self.conditional + self.unconditional

    def snapshot(self) -> Dict[str, int]:
        with self._lock:
            return {"conditional": self.conditional, "unconditional": self.unconditional}


class DenoiserModel:
    """Class-conditional mixtures plus the prior-weighted null mixture"""

    def __init__(
        self,
        class_mixtures: Dict[int, GaussianMixture],
        priors: Dict[int, float],
        counter: Optional[DenoiserCallCounter] = None,
    ):
        if not class_mixtures:
            raise DenoiserError("model needs at least one class mixture")
        if set(class_mixtures) != set(priors):
            raise DenoiserError("priors must be given for exactly the model's classes")
        shapes = {gmm.shape for gmm in class_mixtures.values()}
        if len(shapes) != 1:
            raise DenoiserError(f"class mixtures disagree on shape: {sorted(shapes)}")
        total = sum(priors.values())
        if any(p <= 0 for p in priors.values()) or abs(total - 1.0) > 1e-9:
            raise DenoiserError(f"class priors must be positive and sum to 1, got {priors}")

        self.class_mixtures = dict(sorted(class_mixtures.items()))
        self.priors = {k: float(priors[k]) for k in self.class_mixtures}
        self.shape = shapes.pop()
        self.counter = counter
        self.null_mixture = self._build_null_mixture()

    def _build_null_mixture(self) -> GaussianMixture:
        weights: List[np.ndarray] = []
        means: List[np.ndarray] = []
        stds: List[np.ndarray] = []
        for class_id, gmm in self.class_mixtures.items():
            weights.append(self.priors[class_id] * gmm.weights)
            means.append(gmm.means)
            stds.append(gmm.stds)
        w = np.concatenate(weights)
        return GaussianMixture(w / w.sum(), np.vstack(means), np.concatenate(stds), self.shape)

    @property
    def class_ids(self) -> List[int]:
        return list(self.class_mixtures)

    def with_counter(self, counter: Optional[DenoiserCallCounter]) -> "DenoiserModel":
        """Same mixtures, different instrumentation"""
        clone = object.__new__(DenoiserModel)
        clone.__dict__.update(self.__dict__)
        clone.counter = counter
        return clone

    def validate_condition(self, cond: Condition):
        if cond.kind == "class" and cond.class_id not in self.class_mixtures:
            raise UnknownClassError(f"class id {cond.class_id} not in model classes {self.class_ids}")

    def mixture_for(self, cond: Condition) -> GaussianMixture:
        if cond.kind == "null":
            return self.null_mixture
        self.validate_condition(cond)
        return self.class_mixtures[cond.class_id]

    def noise_array(self, x: np.ndarray, t: int, cond: Condition, schedule: NoiseSchedule) -> np.ndarray:
        """Unguided eps prediction for a flat vector"""
        gmm = self.mixture_for(cond)
        if x.shape != (gmm.dim,):
            raise DenoiserError(f"vector of length {x.size} does not match model dimension {gmm.dim}")
        a, b = schedule.signal(t), schedule.noise(t)
        mean = posterior_mean_array(gmm, x, a, b)
        if self.counter is not None:
            self.counter.record(cond.kind == "class")
        return (x - a * mean) / b

    def guided_array(self, x: np.ndarray, t: int, cond: Condition, schedule: NoiseSchedule) -> np.ndarray:
        """uncond + s * (cond - uncond), evaluating only branches with non-zero weight"""
        if cond.kind == "null":
            if cond.guidance_scale != 0.0:
                raise GuidanceError("null condition cannot be guided with a non-zero scale")
            return self.noise_array(x, t, cond, schedule)
        scale = cond.guidance_scale
        if scale == 1.0:
            return self.noise_array(x, t, cond, schedule)
        uncond = self.noise_array(x, t, Condition.null(), schedule)
        if scale == 0.0:
            self.validate_condition(cond)
            return uncond
        cond_eps = self.noise_array(x, t, cond, schedule)
        return uncond + scale * (cond_eps - uncond)


def predict_noise(model: DenoiserModel, x_t: Sample, t: int, cond: Condition, schedule: NoiseSchedule) -> Sample:
    """
    MMSE noise prediction (x_t - sqrt(alpha_bar_t) * E[x_0|x_t]) / sqrt(1 - alpha_bar_t)

    Args:
        model: denoiser model
        x_t: noisy state
        t: step in [1, T]
        cond: selects the class mixture; null selects the prior mixture
        schedule: noise schedule

    Returns:
        predicted noise as a Sample
    """
    t = schedule.check_step(t)
    if x_t.shape != model.shape:
        raise DenoiserError(f"sample shape {x_t.shape} does not match model shape {model.shape}")
    return x_t.with_data(model.noise_array(x_t.data, t, cond, schedule))


def guided_noise(model: DenoiserModel, x_t: Sample, t: int, cond: Condition, schedule: NoiseSchedule) -> Sample:
    """Classifier-free guided prediction eps(x) + s_g * (eps(x, c) - eps(x))"""
    t = schedule.check_step(t)
    if cond.kind != "class":
        raise GuidanceError("guided_noise requires a class condition")
    if x_t.shape != model.shape:
        raise DenoiserError(f"sample shape {x_t.shape} does not match model shape {model.shape}")
    return x_t.with_data(model.guided_array(x_t.data, t, cond, schedule))


def model_from_templates(templates: Sequence[Sample], stds: Sequence[float], priors: Sequence[float]) -> DenoiserModel:
    """One isotropic Gaussian per class, class ids 0..K-1"""
    mixtures = {k: GaussianMixture.single(m, s, k) for k, (m, s) in enumerate(zip(templates, stds))}
    return DenoiserModel(mixtures, {k: float(p) for k, p in enumerate(priors)})

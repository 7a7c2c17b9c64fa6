"""
SCA Lab - Semantically Guided Perturbation

This module perturbs the inverted latent x_T inside an l-infinity ball so the
replayed chain output is misclassified. Gradients of the loss with respect to
x_T are estimated with random gradient-free (RGF) queries through the chain,
or with the scalar skip-gradient baseline, then accumulated with l1-normalized
momentum and applied as sign steps.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from sca_chain import NoiseMapStack, invert, replay_array
from sca_classifier import Classifier, forward_loss, input_gradient
from sca_denoiser import DenoiserModel
from sca_metrics import MetricReport, consistency_report
from sca_models import AttackConfig, Condition, Sample
from sca_schedule import NoiseSchedule

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["iter", "loss", "pred", "linf_delta", "l2_image"]


class AttackError(ValueError):
    """Raised when the chain produces non-finite output or an invariant breaks"""


def clamp01(x: Sample) -> Sample:
    """Boundary processing: clip every component to [0, 1]"""
    return x.with_data(np.clip(x.data, 0.0, 1.0))


def clamp_mask(x: Sample) -> np.ndarray:
    """Subgradient of clamp01: 1 on the open interior (0, 1), 0 elsewhere"""
    return ((x.data > 0.0) & (x.data < 1.0)).astype(np.float64)


def project_linf(delta: Sample, kappa: float) -> Sample:
    if not kappa > 0:
        raise AttackError(f"budget kappa must be positive, got {kappa}")
    return delta.with_data(np.clip(delta.data, -kappa, kappa))


def momentum_step(g_prev: Sample, grad: Sample, mu: float) -> Sample:
    """mu * g_prev + grad / ||grad||_1, with the normalized term 0 when grad = 0"""
    if g_prev.shape != grad.shape:
        raise AttackError(f"momentum shape {g_prev.shape} does not match gradient shape {grad.shape}")
    norm = np.abs(grad.data).sum()
    update = mu * g_prev.data
    if norm > 0:
        update = update + grad.data / norm
    return grad.with_data(update)


def sphere_directions(dim: int, count: int, seed: Sequence[int]) -> List[np.ndarray]:
    """
    Directions uniform on the radius-sqrt(dim) sphere, so E[u u^T] = I

    Query n draws from child n of SeedSequence(seed); the set does not depend
    on how queries are later scheduled.
    """
    children = np.random.SeedSequence(list(seed)).spawn(count)
    directions = []
    for child in children:
        v = np.random.default_rng(child).standard_normal(dim)
        directions.append(v * (np.sqrt(dim) / np.linalg.norm(v)))
    return directions


def rgf_estimate(
    func: Callable[[np.ndarray], np.ndarray],
    point: np.ndarray,
    base_value: np.ndarray,
    outer: np.ndarray,
    queries: int,
    sigma: float,
    seed: Sequence[int],
    max_workers: int = 1,
) -> np.ndarray:
    """
    (1 / (N sigma)) * sum_n <outer, func(point + sigma u_n) - func(point)> u_n

    Args:
        func: map whose Jacobian-transpose product with outer is estimated
        point: evaluation point
        base_value: func(point), computed once by the caller
        outer: upstream gradient dL/dfunc at the base point
        queries: N
        sigma: query radius
        seed: seed words for the direction substreams
        max_workers: threads used for the N queries

    Returns:
        estimate with the shape of point
    """
    if queries < 1 or not sigma > 0:
        raise AttackError(f"rgf needs N >= 1 and sigma > 0, got N={queries}, sigma={sigma}")
    directions = sphere_directions(point.size, queries, seed)

    def query(u: np.ndarray) -> float:
        return float(outer @ (func(point + sigma * u) - base_value))

    if max_workers > 1 and queries > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            projections = list(pool.map(query, directions))
    else:
        projections = [query(u) for u in directions]

    estimate = np.zeros(point.size)
    for coeff, u in zip(projections, directions):
        estimate += coeff * u
    return estimate / (queries * sigma)


@dataclass
class ChainPoint:
    """Chain output at one perturbation with the classifier's view of it"""

    delta: np.ndarray
    raw: np.ndarray
    image: Sample
    loss: float
    pred: int
    grad: np.ndarray


@dataclass
class AttackResult:
    """Outcome of one attacked image"""

    adversarial: Sample
    reconstruction: Sample
    delta: Sample
    label: int
    clean_pred: int
    final_pred: int
    success: bool
    iterations_used: int
    trace: pd.DataFrame
    metrics: MetricReport
    estimator: str
    denoiser_calls: Dict[str, int] = field(default_factory=dict)
    elapsed: float = 0.0

    @property
    def max_linf(self) -> float:
        return float(self.trace["linf_delta"].max()) if len(self.trace) else 0.0


class SemanticAttacker:
    """Runs inversion and the perturbation loop for one (model, classifier, schedule)"""

    def __init__(
        self,
        model: DenoiserModel,
        classifier: Classifier,
        schedule: NoiseSchedule,
        config: AttackConfig,
        max_workers: int = 1,
        solver: str = "dpmpp-2m-sde",
        prediction: str = "noise",
    ):
        if classifier.input_shape != model.shape:
            raise AttackError(f"classifier input {classifier.input_shape} does not match model shape {model.shape}")
        self.model = model
        self.classifier = classifier
        self.schedule = schedule
        self.config = config
        self.max_workers = max(1, int(max_workers))
        self.solver = solver
        self.prediction = prediction

    def chain(self, stack: NoiseMapStack, delta: np.ndarray) -> np.ndarray:
        if stack.schedule_id != self.schedule.schedule_id:
            raise AttackError(f"stack built with schedule {stack.schedule_id}, attacker uses {self.schedule.schedule_id}")
        out = replay_array(stack, self.model, stack.x_T.data + delta, self.schedule)
        if not np.all(np.isfinite(out)):
            raise AttackError(
                f"non-finite chain output at ||delta||_inf={np.abs(delta).max():.3g}; "
                f"check that the stack (schedule {stack.schedule_id}) matches schedule {self.schedule.schedule_id}"
            )
        return out

    def evaluate(self, stack: NoiseMapStack, delta: np.ndarray, y: int) -> ChainPoint:
        """Chain output, clamp, loss, prediction and the masked classifier gradient"""
        raw = self.chain(stack, delta)
        raw_sample = stack.x_T.with_data(raw)
        image = clamp01(raw_sample)
        loss, _, pred = forward_loss(self.classifier, image, y)
        grad = input_gradient(self.classifier, image, y).data * clamp_mask(raw_sample)
        return ChainPoint(delta=delta, raw=raw, image=image, loss=loss, pred=pred, grad=grad)

    def estimate(self, stack: NoiseMapStack, base: ChainPoint, iteration: int) -> np.ndarray:
        """Gradient of the loss w.r.t. x_T at base.delta under the configured estimator"""
        cfg = self.config
        if cfg.estimator == "none":
            return np.zeros_like(base.delta)
        if cfg.estimator == "skip-gradient":
            return base.grad / self.schedule.signal(self.schedule.T)
        return rgf_estimate(
            lambda d: self.chain(stack, d),
            base.delta,
            base.raw,
            base.grad,
            cfg.rgf_queries,
            cfg.rgf_sigma,
            (cfg.rng_seed, iteration),
            self.max_workers,
        )

    def run(self, x0: Sample, y: int, cond: Condition, stack: Optional[NoiseMapStack] = None) -> AttackResult:
        """
        Invert x0 (unless a stack is given) and run the momentum sign-step loop

        Args:
            x0: clean image in [0, 1]
            y: true label
            cond: condition used for inversion and replay
            stack: precomputed noise maps for x0

        Returns:
            AttackResult with one trace row per completed iteration
        """
        cfg = self.config
        started = time.perf_counter()
        calls_before = self.model.counter.snapshot() if self.model.counter is not None else None
        if stack is None:
            stack = invert(x0, cond, self.model, self.schedule, cfg.rng_seed, self.solver, self.prediction)

        delta = np.zeros(x0.size)
        momentum = Sample.zeros(x0.shape)
        point = self.evaluate(stack, delta, y)
        reconstruction = point.image
        clean_pred = point.pred
        logger.debug(f"Reconstruction prediction={clean_pred} label={y} loss={point.loss:.6g}")

        rows = []
        iterations_used = 0
        if not (cfg.early_stop and clean_pred != y):
            for k in range(1, cfg.iterations + 1):
                grad = momentum.with_data(self.estimate(stack, point, k))
                momentum = momentum_step(momentum, grad, cfg.momentum)
                step = momentum.with_data(delta + cfg.step_size * np.sign(momentum.data))
                delta = project_linf(step, cfg.budget).data
                linf = float(np.abs(delta).max())
                if linf > cfg.budget:
                    raise AttackError(f"budget violated at iteration {k}: {linf} > {cfg.budget}")
                point = self.evaluate(stack, delta, y)
                l2 = float(np.linalg.norm(point.image.data - x0.data))
                rows.append([k, point.loss, point.pred, linf, l2])
                iterations_used = k
                logger.debug(f"Iteration {k}: loss={point.loss:.6g} pred={point.pred} linf={linf:.4g} l2={l2:.4g}")
                if cfg.early_stop and point.pred != y:
                    break

        adversarial = point.image
        calls = {}
        if calls_before is not None:
            after = self.model.counter.snapshot()
            calls = {k: after[k] - calls_before[k] for k in after}
        result = AttackResult(
            adversarial=adversarial,
            reconstruction=reconstruction,
            delta=x0.with_data(delta),
            label=int(y),
            clean_pred=clean_pred,
            final_pred=point.pred,
            success=point.pred != y,
            iterations_used=iterations_used,
            trace=pd.DataFrame(rows, columns=TRACE_COLUMNS),
            metrics=consistency_report(x0, adversarial),
            estimator=cfg.estimator,
            denoiser_calls=calls,
            elapsed=time.perf_counter() - started,
        )
        logger.info(
            f"Attack finished: estimator={cfg.estimator} label={y} clean_pred={clean_pred} "
            f"final_pred={result.final_pred} success={result.success} iterations={iterations_used}"
        )
        return result


def rgf_gradient(
    stack: NoiseMapStack,
    model: DenoiserModel,
    classifier: Classifier,
    y: int,
    cfg: AttackConfig,
    delta: Sample,
    schedule: NoiseSchedule,
    iteration: int = 0,
    max_workers: int = 1,
) -> Sample:
    """
    RGF estimate of dL(clamp01(D(x_T + delta)), y)/d(delta)

    Args:
        stack: noise maps
        model: denoiser used for replay
        classifier: target model
        y: true label
        cfg: attack configuration (rgf_queries, rgf_sigma, rng_seed)
        delta: current latent perturbation
        schedule: schedule the stack was built with
        iteration: selects the direction substreams
        max_workers: threads for the queries

    Returns:
        gradient estimate with the shape of delta
    """
    attacker = SemanticAttacker(model, classifier, schedule, cfg.model_copy(update={"estimator": "rgf"}), max_workers)
    base = attacker.evaluate(stack, delta.data, y)
    return delta.with_data(attacker.estimate(stack, base, iteration))


def skip_gradient(
    stack: NoiseMapStack,
    model: DenoiserModel,
    classifier: Classifier,
    y: int,
    cfg: AttackConfig,
    delta: Sample,
    schedule: NoiseSchedule,
) -> Sample:
    """Classifier gradient at the base point scaled by 1 / sqrt(alpha_bar_T)"""
    attacker = SemanticAttacker(model, classifier, schedule, cfg.model_copy(update={"estimator": "skip-gradient"}))
    base = attacker.evaluate(stack, delta.data, y)
    return delta.with_data(attacker.estimate(stack, base, 0))


def run_attack(
    x0: Sample,
    y: int,
    model: DenoiserModel,
    classifier: Classifier,
    schedule: NoiseSchedule,
    cond: Condition,
    cfg: AttackConfig,
    max_workers: int = 1,
    solver: str = "dpmpp-2m-sde",
    prediction: str = "noise",
) -> AttackResult:
    """Invert x0 under cond and attack its latent; see SemanticAttacker.run"""
    return SemanticAttacker(model, classifier, schedule, cfg, max_workers, solver, prediction).run(x0, y, cond)

"""
SCA Lab - Noise Schedule

This module builds the time discretization shared by the forward process,
the first-order DDPM step and the second-order solver: variance increments,
cumulative products, both noise scales, half-log-SNR and solver step sizes.

Arrays are index-aligned with t: entry 0 is the clean state (alpha_bar = 1),
entries 1..T are the diffusion steps.
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from sca_models import ScheduleConfig

logger = logging.getLogger(__name__)

HFormula = Literal["log-snr-diff", "paper-ratio"]
H_FORMULAS = ("log-snr-diff", "paper-ratio")


class ScheduleError(ValueError):
    """Raised for invalid schedule parameters or out-of-range steps"""


class ScheduleDegeneracyError(ScheduleError):
    """Raised when a schedule quantity needed as a divisor vanishes"""


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable time discretization; all arrays float64"""

    T: int
    beta_start: float
    beta_end: float
    eta_ddpm: float
    h_formula: str
    beta: np.ndarray          # [0..T], beta[0] = 0
    alpha_bar: np.ndarray     # [0..T], alpha_bar[0] = 1
    sigma_ddpm: np.ndarray    # [0..T], sigma_ddpm[0] = 0
    sigma_solver: np.ndarray  # [0..T], sigma_solver[0] = 0
    lam: np.ndarray           # [0..T], lam[0] = +inf
    h: np.ndarray             # [0..T-1]

    def check_step(self, t: int) -> int:
        if not isinstance(t, (int, np.integer)) or t < 1 or t > self.T:
            raise ScheduleError(f"step t={t} outside [1, {self.T}]")
        return int(t)

    def signal(self, t: int) -> float:
        """sqrt(alpha_bar_t)"""
        return float(np.sqrt(self.alpha_bar[t]))

    def noise(self, t: int) -> float:
        """sqrt(1 - alpha_bar_t)"""
        return float(np.sqrt(1.0 - self.alpha_bar[t]))

    def to_config(self) -> ScheduleConfig:
        return ScheduleConfig(
            T=self.T,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            eta_ddpm=self.eta_ddpm,
            h_formula=self.h_formula,
        )

    @property
    def schedule_id(self) -> str:
        """Stable hash of the construction parameters"""
        payload = json.dumps(self.to_config().model_dump(), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def build_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    eta_ddpm: float = 0.0,
    h_formula: HFormula = "log-snr-diff",
) -> NoiseSchedule:
    """
    Build a linear-beta noise schedule

    Args:
        T: number of steps, 2 <= T <= 10000
        beta_start: first variance increment, in (0, 1)
        beta_end: last variance increment, beta_start <= beta_end < 1
        eta_ddpm: DDPM stochasticity for the first-order step
        h_formula: 'log-snr-diff' (difference of half-log-SNRs) or
            'paper-ratio' (difference of the ratio-of-logs expression)

    Returns:
        NoiseSchedule with every derived array populated
    """
    if not isinstance(T, (int, np.integer)) or T < 2 or T > 10000:
        raise ScheduleError(f"T must be an integer in [2, 10000], got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"beta endpoints must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    if eta_ddpm < 0:
        raise ScheduleError(f"eta_ddpm must be non-negative, got {eta_ddpm}")
    if h_formula not in H_FORMULAS:
        raise ScheduleError(f"unknown h_formula '{h_formula}', expected one of {H_FORMULAS}")

    T = int(T)
    beta = np.zeros(T + 1)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.cumprod(1.0 - beta)
    if np.any(np.diff(alpha_bar) >= 0):
        raise ScheduleError("alpha_bar is not strictly decreasing")

    one_minus = 1.0 - alpha_bar
    sigma_ddpm = np.zeros(T + 1)
    sigma_ddpm[1:] = eta_ddpm * beta[1:] * one_minus[:-1] / one_minus[1:]

    lam = np.full(T + 1, np.inf)
    lam[1:] = 0.5 * (np.log(alpha_bar[1:]) - np.log(one_minus[1:]))

    if h_formula == "log-snr-diff":
        # h_k = lambda_k - lambda_{k+1}; h_0 is +inf since lambda_0 is
        h = lam[:-1] - lam[1:]
    else:
        ratio = np.zeros(T + 1)
        ratio[1:] = np.log(np.sqrt(alpha_bar[1:])) / np.log(np.sqrt(one_minus[1:]))
        # the ratio grows with t, so orient the difference to keep steps positive
        h = ratio[1:] - ratio[:-1]

    if np.any(~(h > 0)):
        bad = int(np.argmax(~(h > 0)))
        raise ScheduleDegeneracyError(f"non-positive solver step h_{bad}={h[bad]} under '{h_formula}'")

    sigma_solver = np.zeros(T + 1)
    sigma_solver[1:] = np.sqrt(one_minus[:-1]) * np.sqrt(-np.expm1(-2.0 * h))

    schedule = NoiseSchedule(
        T=T,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        eta_ddpm=float(eta_ddpm),
        h_formula=h_formula,
        beta=beta,
        alpha_bar=alpha_bar,
        sigma_ddpm=sigma_ddpm,
        sigma_solver=sigma_solver,
        lam=lam,
        h=h,
    )
    for array in (beta, alpha_bar, sigma_ddpm, sigma_solver, lam, h):
        array.setflags(write=False)
    logger.debug(f"Built schedule T={T} h_formula={h_formula} alpha_bar_T={alpha_bar[-1]:.6g}")
    return schedule


def schedule_from_config(config: ScheduleConfig) -> NoiseSchedule:
    return build_schedule(
        config.T, config.beta_start, config.beta_end, config.eta_ddpm, config.h_formula
    )


def half_log_snr(schedule: NoiseSchedule, t: int) -> float:
    """lambda_t = ln sqrt(alpha_bar_t) - ln sqrt(1 - alpha_bar_t)"""
    t = schedule.check_step(t)
    a = schedule.alpha_bar[t]
    return float(0.5 * (np.log(a) - np.log(1.0 - a)))

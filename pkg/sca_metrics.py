"""
SCA Lab - Consistency Metrics

This module computes reference-based similarity between clean and
adversarial images (PSNR, SSIM, MSE, l2, l-infinity) and the attack
accounting used in run summaries (attack success rate and clean error).
"""

import logging
import math
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.signal import convolve2d

from sca_models import Sample

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 1.0


class MetricError(ValueError):
    """Raised for shape mismatches or empty inputs"""


class MetricReport(BaseModel):
    """Similarity of one image pair; asr is filled at aggregate level only"""

    psnr_db: float = Field(..., description="PSNR in dB; +inf when the images are identical")
    ssim: float = Field(..., le=1.0, description="mean local SSIM")
    mse: float = Field(..., ge=0.0, description="mean squared difference")
    l2: float = Field(..., ge=0.0, description="l2 distance")
    linf: float = Field(..., ge=0.0, description="l-infinity distance")
    asr: Optional[float] = Field(None, ge=0.0, le=1.0, description="attack success rate")


def _check_pair(a: Sample, b: Sample):
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")


def mse(a: Sample, b: Sample) -> float:
    _check_pair(a, b)
    diff = a.data - b.data
    return float(np.mean(diff * diff))


def psnr(a: Sample, b: Sample) -> float:
    """10 log10(1 / MSE) with unit dynamic range; identical images give +inf"""
    error = mse(a, b)
    if error == 0.0:
        return math.inf
    return float(10.0 * np.log10(DATA_RANGE ** 2 / error))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    y, x = np.ogrid[-half:half + 1, -half:half + 1]
    window = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return window / window.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, window: Optional[np.ndarray]) -> float:
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    if window is None:
        mu_x, mu_y = x.mean(), y.mean()
        var_x = np.mean((x - mu_x) ** 2)
        var_y = np.mean((y - mu_y) ** 2)
        cov = np.mean((x - mu_x) * (y - mu_y))
    else:
        # window is symmetric so convolution equals correlation
        mu_x = convolve2d(x, window, mode="valid")
        mu_y = convolve2d(y, window, mode="valid")
        var_x = convolve2d(x * x, window, mode="valid") - mu_x * mu_x
        var_y = convolve2d(y * y, window, mode="valid") - mu_y * mu_y
        cov = convolve2d(x * y, window, mode="valid") - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return float(np.mean(ssim_map))


def ssim(a: Sample, b: Sample) -> float:
    """
    Mean local SSIM with an 11x11 Gaussian window (std 1.5), averaged over channels

    Images smaller than the window are compared with one global window over
    the whole image.
    """
    _check_pair(a, b)
    h, w, channels = a.shape
    window = gaussian_window()
    if min(h, w) < SSIM_WINDOW:
        logger.warning(f"Image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window; using global statistics")
        window = None
    x, y = a.image(), b.image()
    values = [_ssim_channel(x[:, :, c], y[:, :, c], window) for c in range(channels)]
    return float(np.mean(values))


def consistency_report(clean: Sample, other: Sample) -> MetricReport:
    _check_pair(clean, other)
    diff = clean.data - other.data
    return MetricReport(
        psnr_db=psnr(clean, other),
        ssim=min(ssim(clean, other), 1.0),
        mse=mse(clean, other),
        l2=float(np.linalg.norm(diff)),
        linf=float(np.abs(diff).max()),
    )


def attack_success_rate(results: Sequence[Any], clean_preds: Sequence[int], labels: Sequence[int]) -> Tuple[float, float]:
    """
    Fraction of successful attacks and the clean error rate

    Args:
        results: AttackResult-like objects with a boolean 'success'
        clean_preds: classifier predictions on the unperturbed reconstructions
        labels: true labels

    Returns:
        (asr, clean_error)
    """
    if not results:
        raise MetricError("no attack results to score")
    if not len(results) == len(clean_preds) == len(labels):
        raise MetricError(f"length mismatch: {len(results)} results, {len(clean_preds)} predictions, {len(labels)} labels")
    asr = sum(1 for r in results if r.success) / len(results)
    clean_error = sum(1 for p, y in zip(clean_preds, labels) if p != y) / len(labels)
    return asr, clean_error


class SCAResultsProcessor:
    """Turns attack results into summary tables and aggregate statistics"""

    SUMMARY_COLUMNS = [
        "index", "label", "clean_pred", "final_pred", "success", "iterations_used",
        "psnr_db", "ssim", "mse", "l2", "linf", "max_linf_delta", "estimator",
    ]

    def __init__(self, budget: Optional[float] = None):
        self.budget = budget
        self.summary_df = pd.DataFrame(columns=self.SUMMARY_COLUMNS)

    def build_summary(self, results: Sequence[Any]) -> pd.DataFrame:
        """
        One row per attacked image, in input order

        Args:
            results: AttackResult objects

        Returns:
            summary DataFrame with fixed column order
        """
        rows: List[Dict[str, Any]] = []
        for i, r in enumerate(results):
            rows.append({
                "index": i,
                "label": r.label,
                "clean_pred": r.clean_pred,
                "final_pred": r.final_pred,
                "success": bool(r.success),
                "iterations_used": r.iterations_used,
                "psnr_db": r.metrics.psnr_db,
                "ssim": r.metrics.ssim,
                "mse": r.metrics.mse,
                "l2": r.metrics.l2,
                "linf": r.metrics.linf,
                "max_linf_delta": r.max_linf,
                "estimator": r.estimator,
            })
        self.summary_df = pd.DataFrame(rows, columns=self.SUMMARY_COLUMNS)
        return self.summary_df

    def analyze_results(self, summary_df: Optional[pd.DataFrame] = None) -> Dict[str, Any]:
        """Aggregate ASR, clean error, similarity over successes and budget violations"""
        df = self.summary_df if summary_df is None else summary_df
        if df.empty:
            raise MetricError("summary is empty")
        successes = df[df["success"]]
        finite_psnr = successes["psnr_db"].replace([np.inf], np.nan).dropna()
        analysis = {
            "images": int(len(df)),
            "asr": float(df["success"].mean()),
            "clean_error": float((df["clean_pred"] != df["label"]).mean()),
            "successes": int(len(successes)),
            "mean_ssim_success": float(successes["ssim"].mean()) if len(successes) else float("nan"),
            "median_ssim_success": float(successes["ssim"].median()) if len(successes) else float("nan"),
            "mean_psnr_success": float(finite_psnr.mean()) if len(finite_psnr) else float("nan"),
            "median_psnr_success": float(finite_psnr.median()) if len(finite_psnr) else float("nan"),
        }
        if self.budget is not None:
            analysis["budget_violations"] = int((df["max_linf_delta"] > self.budget).sum())
        return analysis

    def ablation_table(self, analyses: Dict[str, Dict[str, Any]]) -> pd.DataFrame:
        """One row per estimator from analyze_results outputs"""
        rows = []
        for estimator, a in analyses.items():
            rows.append({
                "estimator": estimator,
                "asr": a["asr"],
                "clean_error": a["clean_error"],
                "mean_ssim_success": a["mean_ssim_success"],
                "mean_psnr_success": a["mean_psnr_success"],
            })
        return pd.DataFrame(rows, columns=["estimator", "asr", "clean_error", "mean_ssim_success", "mean_psnr_success"])

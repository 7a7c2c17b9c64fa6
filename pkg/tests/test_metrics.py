"""
Test cases for similarity metrics and run summaries
"""

import logging
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sca_metrics import (
    MetricError,
    MetricReport,
    SCAResultsProcessor,
    attack_success_rate,
    consistency_report,
    gaussian_window,
    mse,
    psnr,
    ssim,
)
from sca_models import Sample


def checkerboard(n=16):
    grid = (np.add.outer(np.arange(n), np.arange(n)) % 2).astype(float)
    return Sample.from_image(grid)


def loop_ssim(x, y):
    """Per-window SSIM written out pixel by pixel"""
    window = gaussian_window()
    size = window.shape[0]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    values = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            px = x[i:i + size, j:j + size]
            py = y[i:i + size, j:j + size]
            mx = np.sum(window * px)
            my = np.sum(window * py)
            vx = np.sum(window * (px - mx) ** 2)
            vy = np.sum(window * (py - my) ** 2)
            cxy = np.sum(window * (px - mx) * (py - my))
            values.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(values))


class TestPsnr:
    """Test cases for mse and psnr"""

    def test_twenty_decibels(self):
        a = Sample(np.zeros(4), (2, 2, 1))
        b = Sample(np.full(4, 0.1), (2, 2, 1))
        assert mse(a, b) == pytest.approx(0.01)
        assert psnr(a, b) == pytest.approx(20.0, rel=1e-12)

    def test_identical_is_infinite(self):
        a = Sample(np.full(4, 0.3), (2, 2, 1))
        assert psnr(a, a) == math.inf

    def test_matches_exact_sum(self):
        rng = np.random.default_rng(0)
        a = Sample(rng.uniform(0, 1, 64), (8, 8, 1))
        b = Sample(rng.uniform(0, 1, 64), (8, 8, 1))
        error = math.fsum((p - q) ** 2 for p, q in zip(a.data, b.data)) / 64
        assert psnr(a, b) == pytest.approx(10 * math.log10(1 / error), rel=1e-12)
        assert psnr(a, b) == psnr(b, a)

    def test_decreases_with_noise(self):
        rng = np.random.default_rng(1)
        clean = Sample(rng.uniform(0.2, 0.8, 64), (8, 8, 1))
        noise = rng.normal(0, 1, 64)
        values = [psnr(clean, clean.with_data(clean.data + s * noise)) for s in (0.01, 0.05, 0.1, 0.3)]
        assert all(a > b for a, b in zip(values, values[1:]))

    @settings(max_examples=50, deadline=None)
    @given(
        a=st.lists(st.floats(min_value=0, max_value=1), min_size=4, max_size=4),
        b=st.lists(st.floats(min_value=0, max_value=1), min_size=4, max_size=4),
    )
    def test_symmetric(self, a, b):
        x, y = Sample(np.array(a), (2, 2, 1)), Sample(np.array(b), (2, 2, 1))
        assert psnr(x, y) == psnr(y, x)
        assert psnr(x, y) >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            mse(Sample.zeros((2, 2, 1)), Sample.zeros((1, 4, 1)))


class TestSsim:
    """Test cases for windowed SSIM"""

    def test_window_normalized(self):
        window = gaussian_window()
        assert window.shape == (11, 11)
        assert window.sum() == pytest.approx(1.0, rel=1e-14)
        assert window[5, 5] == window.max()

    def test_identical_images(self):
        rng = np.random.default_rng(2)
        a = Sample(rng.uniform(0, 1, 256), (16, 16, 1))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_constant_images_with_equal_means(self):
        a = Sample(np.full(256, 0.4), (16, 16, 1))
        assert ssim(a, a.with_data(a.data.copy())) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_checkerboard(self):
        a = checkerboard()
        assert ssim(a, a.with_data(1.0 - a.data)) < 0.5

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        a = Sample(rng.uniform(0, 1, 256), (16, 16, 1))
        b = a.with_data(np.clip(a.data + rng.normal(0, 0.1, 256), 0, 1))
        expected = loop_ssim(a.image()[:, :, 0], b.image()[:, :, 0])
        assert ssim(a, b) == pytest.approx(expected, rel=1e-9, abs=1e-12)

    def test_channels_are_averaged(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(0, 1, (16, 16, 2))
        b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
        per_channel = [
            ssim(Sample.from_image(a[:, :, c]), Sample.from_image(b[:, :, c])) for c in range(2)
        ]
        assert ssim(Sample.from_image(a), Sample.from_image(b)) == pytest.approx(np.mean(per_channel), rel=1e-12)

    def test_small_image_falls_back_to_global_window(self, caplog):
        rng = np.random.default_rng(5)
        a = Sample(rng.uniform(0, 1, 16), (4, 4, 1))
        with caplog.at_level(logging.WARNING, logger="sca_metrics"):
            value = ssim(a, a.with_data(a.data * 0.9))
        assert "smaller than" in caplog.text
        assert -1.0 <= value <= 1.0


class TestConsistencyReport:
    """Test cases for the per-image report"""

    def test_fields(self):
        a = Sample(np.zeros(4), (2, 2, 1))
        b = Sample(np.array([0.0, 0.1, -0.2, 0.0]), (2, 2, 1))
        report = consistency_report(a, b)
        assert isinstance(report, MetricReport)
        assert report.linf == pytest.approx(0.2)
        assert report.l2 == pytest.approx(np.sqrt(0.05))
        assert report.mse == pytest.approx(0.0125)
        assert report.asr is None


class TestAttackSuccessRate:
    """Test cases for attack_success_rate"""

    def test_counts(self):
        results = [SimpleNamespace(success=i < 7) for i in range(10)]
        labels = [0] * 10
        clean_preds = [0] * 8 + [1] * 2
        asr, clean_error = attack_success_rate(results, clean_preds, labels)
        assert asr == pytest.approx(0.7)
        assert clean_error == pytest.approx(0.2)

    def test_empty(self):
        with pytest.raises(MetricError):
            attack_success_rate([], [], [])

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            attack_success_rate([SimpleNamespace(success=True)], [0, 1], [0])


def fake_result(label, clean_pred, final_pred, ssim_value, psnr_value, max_linf, estimator="rgf"):
    metrics = SimpleNamespace(psnr_db=psnr_value, ssim=ssim_value, mse=0.01, l2=0.4, linf=0.1)
    return SimpleNamespace(
        label=label,
        clean_pred=clean_pred,
        final_pred=final_pred,
        success=final_pred != label,
        iterations_used=10,
        metrics=metrics,
        max_linf=max_linf,
        estimator=estimator,
    )


class TestSCAResultsProcessor:
    """Test cases for SCAResultsProcessor"""

    def setup_method(self):
        self.processor = SCAResultsProcessor(budget=0.1)
        self.results = [
            fake_result(0, 0, 1, 0.8, 30.0, 0.1),
            fake_result(1, 1, 0, 0.6, 20.0, 0.1),
            fake_result(0, 0, 0, 0.99, 45.0, 0.1),
            fake_result(1, 0, 0, 0.7, math.inf, 0.12),
        ]

    def test_build_summary(self):
        df = self.processor.build_summary(self.results)
        assert list(df.columns) == SCAResultsProcessor.SUMMARY_COLUMNS
        assert list(df["index"]) == [0, 1, 2, 3]
        assert list(df["success"]) == [True, True, False, True]

    def test_analyze_results(self):
        self.processor.build_summary(self.results)
        analysis = self.processor.analyze_results()
        assert analysis["images"] == 4
        assert analysis["asr"] == pytest.approx(0.75)
        assert analysis["clean_error"] == pytest.approx(0.25)
        assert analysis["successes"] == 3
        assert analysis["mean_ssim_success"] == pytest.approx(0.7)
        assert analysis["median_ssim_success"] == pytest.approx(0.7)
        assert analysis["mean_psnr_success"] == pytest.approx(25.0)
        assert analysis["budget_violations"] == 1

    def test_no_successes(self):
        df = self.processor.build_summary([fake_result(0, 0, 0, 0.9, 40.0, 0.05)])
        analysis = self.processor.analyze_results(df)
        assert analysis["asr"] == 0.0
        assert math.isnan(analysis["mean_ssim_success"])

    def test_empty_summary(self):
        with pytest.raises(MetricError):
            SCAResultsProcessor().analyze_results()

    def test_ablation_table(self):
        self.processor.build_summary(self.results)
        analysis = self.processor.analyze_results()
        table = self.processor.ablation_table({"rgf": analysis, "none": analysis})
        assert list(table["estimator"]) == ["rgf", "none"]
        assert table.loc[0, "asr"] == pytest.approx(0.75)

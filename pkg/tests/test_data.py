"""
Test cases for synthetic data, IDX ingestion and image files
"""

import numpy as np
import pytest

from sca_classifier import LabeledDataset, train_classifier
from sca_data import (
    DataIOError,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
    ImageFormatError,
    TEMPLATES,
    UnknownTemplateError,
    fit_denoiser,
    load_idx,
    quantize,
    read_image,
    render_template,
    synth_dataset,
    write_image,
)
from sca_models import Sample, SynthSpec


def stripes_spec(std=0.1, samples=50, shape=(8, 8, 1)):
    return SynthSpec(
        image_shape=shape,
        classes=[
            {"template": "horizontal-stripes", "std": std, "prior": 0.5},
            {"template": "vertical-stripes", "std": std, "prior": 0.5},
        ],
        samples_per_class=samples,
    )


def idx_bytes(magic, dims, payload):
    header = magic.to_bytes(4, "big") + b"".join(d.to_bytes(4, "big") for d in dims)
    return header + bytes(payload)


IMAGE_PIXELS = [
    0, 255, 0, 255,
    10, 20, 30, 40,
    255, 255, 255, 255,
    0, 0, 0, 51,
]
LABELS = [0, 1, 2, 1]


class TestTemplates:
    """Test cases for the named pattern generators"""

    def test_all_templates_render(self):
        for name in TEMPLATES:
            x = render_template(name, (8, 8, 1))
            assert set(np.unique(x.data)) <= {0.25, 0.75}
            assert len(np.unique(x.data)) == 2

    def test_horizontal_stripes(self):
        x = render_template("horizontal-stripes", (8, 8, 1), 0.0, 1.0).image()[:, :, 0]
        np.testing.assert_array_equal(x[:, 0], [0, 0, 1, 1, 0, 0, 1, 1])
        assert np.all(x == x[:, :1])

    def test_channels_repeat(self):
        x = render_template("checkerboard", (4, 4, 3)).image()
        assert np.array_equal(x[:, :, 0], x[:, :, 2])

    def test_unknown_template(self):
        with pytest.raises(UnknownTemplateError):
            render_template("spiral", (8, 8, 1))


class TestSynthDataset:
    """Test cases for synthetic dataset generation"""

    def test_tiny_noise_reproduces_templates(self):
        data, model = synth_dataset(stripes_spec(std=1e-12, samples=5), rng_seed=0)
        templates = [render_template(n, (8, 8, 1)) for n in ("horizontal-stripes", "vertical-stripes")]
        for sample, label in zip(data.samples, data.labels):
            np.testing.assert_allclose(sample.data, templates[label].data, atol=1e-10)
        np.testing.assert_array_equal(model.class_mixtures[1].means[0], templates[1].data)

    def test_counts_and_shuffle(self):
        data, model = synth_dataset(stripes_spec(samples=30), rng_seed=1)
        assert len(data) == 60
        assert data.class_counts() == {0: 30, 1: 30}
        assert data.labels[:30] != [0] * 30
        assert model.priors == {0: 0.5, 1: 0.5}

    def test_deterministic(self):
        a, _ = synth_dataset(stripes_spec(), rng_seed=4)
        b, _ = synth_dataset(stripes_spec(), rng_seed=4)
        c, _ = synth_dataset(stripes_spec(), rng_seed=5)
        assert a.labels == b.labels
        assert np.array_equal(a.matrix(), b.matrix())
        assert not np.array_equal(a.matrix(), c.matrix())

    def test_noise_is_centred(self):
        std, n = 0.05, 200
        data, _ = synth_dataset(stripes_spec(std=std, samples=n), rng_seed=2)
        templates = [render_template(t, (8, 8, 1)) for t in ("horizontal-stripes", "vertical-stripes")]
        residual = data.matrix() - np.stack([templates[k].data for k in data.labels])
        assert abs(residual.mean()) <= 3 * std / np.sqrt(residual.size)

    def test_values_in_unit_interval(self):
        data, _ = synth_dataset(stripes_spec(std=0.5), rng_seed=3)
        X = data.matrix()
        assert X.min() >= 0.0 and X.max() <= 1.0

    def test_linearly_separable(self):
        data, _ = synth_dataset(stripes_spec(samples=200), rng_seed=0)
        model = train_classifier(data, "softmax-linear")
        assert model.train_accuracy >= 0.95


class TestFitDenoiser:
    """Test cases for fitting a denoiser to ingested data"""

    def test_means_std_and_priors(self):
        shape = (1, 2, 1)
        samples = [Sample(np.array(v), shape) for v in ([0.0, 0.0], [0.2, 0.2], [1.0, 1.0])]
        model = fit_denoiser(LabeledDataset(samples, [0, 0, 1], 2))
        np.testing.assert_allclose(model.class_mixtures[0].means[0], [0.1, 0.1])
        np.testing.assert_allclose(model.class_mixtures[1].means[0], [1.0, 1.0])
        # residuals are +-0.1 on four of six pixels
        assert model.class_mixtures[0].stds[0] == pytest.approx(np.sqrt(0.04 / 6))
        assert model.priors[0] == pytest.approx(2 / 3)

    def test_std_floor(self):
        shape = (1, 2, 1)
        samples = [Sample(np.full(2, v), shape) for v in (0.2, 0.2, 0.8)]
        model = fit_denoiser(LabeledDataset(samples, [0, 0, 1], 2))
        assert model.class_mixtures[0].stds[0] == 1e-3

    def test_missing_class(self):
        samples = [Sample(np.zeros(2), (1, 2, 1))]
        with pytest.raises(DataIOError):
            fit_denoiser(LabeledDataset(samples, [0], 2))


class TestLoadIdx:
    """Test cases for IDX ingestion"""

    def write_pair(self, tmp_path, images=None, labels=None):
        images_path = tmp_path / "images.idx"
        labels_path = tmp_path / "labels.idx"
        images_path.write_bytes(images if images is not None else idx_bytes(0x803, [4, 2, 2], IMAGE_PIXELS))
        labels_path.write_bytes(labels if labels is not None else idx_bytes(0x801, [4], LABELS))
        return images_path, labels_path

    def test_loads_fixture(self, tmp_path):
        data = load_idx(*self.write_pair(tmp_path))
        assert len(data) == 4
        assert data.shape == (2, 2, 1)
        assert data.num_classes == 3
        assert data.labels == LABELS
        np.testing.assert_allclose(data.samples[0].data, [0.0, 1.0, 0.0, 1.0])
        np.testing.assert_allclose(data.samples[3].data, [0.0, 0.0, 0.0, 0.2])
        assert data.samples[1].image()[1, 0, 0] == pytest.approx(30 / 255)

    def test_bad_magic(self, tmp_path):
        with pytest.raises(IdxMagicError):
            load_idx(*self.write_pair(tmp_path, images=idx_bytes(0x801, [4, 2, 2], IMAGE_PIXELS)))

    def test_truncated_payload(self, tmp_path):
        with pytest.raises(IdxTruncatedError):
            load_idx(*self.write_pair(tmp_path, images=idx_bytes(0x803, [4, 2, 2], IMAGE_PIXELS[:-1])))

    def test_trailing_bytes(self, tmp_path):
        with pytest.raises(IdxTruncatedError):
            load_idx(*self.write_pair(tmp_path, labels=idx_bytes(0x801, [4], LABELS + [0])))

    def test_count_mismatch(self, tmp_path):
        with pytest.raises(IdxCountMismatchError):
            load_idx(*self.write_pair(tmp_path, labels=idx_bytes(0x801, [3], LABELS[:3])))

    def test_short_header(self, tmp_path):
        with pytest.raises(IdxTruncatedError):
            load_idx(*self.write_pair(tmp_path, images=(0x803).to_bytes(4, "big") + b"\x00\x00"))


class TestImages:
    """Test cases for PGM/PPM output"""

    def test_pgm_bytes(self, tmp_path):
        path = tmp_path / "zero.pgm"
        write_image(Sample.zeros((2, 2, 1)), path)
        assert path.read_bytes() == b"P5\n2 2\n255\n" + bytes(4)

    def test_quantization(self):
        x = Sample(np.array([0.0, 0.5, 1.0, 1 / 255]), (2, 2, 1))
        np.testing.assert_array_equal(quantize(x).reshape(-1), [0, 128, 255, 1])

    def test_quantize_rejects_out_of_range(self):
        with pytest.raises(ImageFormatError):
            quantize(Sample(np.array([1.5]), (1, 1, 1)))

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        x = Sample(rng.uniform(0, 1, 3 * 5), (3, 5, 1))
        path = tmp_path / "x.pgm"
        write_image(x, path)
        back = read_image(path)
        assert back.shape == (3, 5, 1)
        assert np.max(np.abs(back.data - x.data)) <= 1 / 510 + 1e-12

    def test_colour_is_ppm(self, tmp_path):
        x = Sample(np.full(2 * 2 * 3, 0.5), (2, 2, 3))
        path = tmp_path / "x.ppm"
        write_image(x, path)
        assert path.read_bytes().startswith(b"P6\n2 2\n255\n")
        assert read_image(path).shape == (2, 2, 3)

    def test_two_channels_rejected(self, tmp_path):
        with pytest.raises(ImageFormatError):
            write_image(Sample.zeros((2, 2, 2)), tmp_path / "x.pgm")

    def test_unreadable_image(self, tmp_path):
        path = tmp_path / "junk.pgm"
        path.write_bytes(b"not an image")
        with pytest.raises(ImageFormatError):
            read_image(path)

"""
SCA Lab - Data Input/Output

This module generates synthetic labeled datasets together with the exactly
matching analytic denoiser, fits a denoiser to ingested data, reads IDX
(MNIST-style) files and writes/reads binary PGM/PPM images.
"""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Tuple, Union

import numpy as np
from PIL import Image

from sca_classifier import LabeledDataset
from sca_denoiser import DenoiserModel, model_from_templates
from sca_models import Sample, SynthSpec

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MIN_FITTED_STD = 1e-3


class DataIOError(ValueError):
    """Raised for dataset and image file problems"""


class UnknownTemplateError(DataIOError):
    """Raised when a synthetic class names an unregistered template"""


class IdxMagicError(DataIOError):
    """Raised when an IDX file starts with the wrong magic number"""


class IdxTruncatedError(DataIOError):
    """Raised when an IDX payload is shorter or longer than its header says"""


class IdxCountMismatchError(DataIOError):
    """Raised when image and label files disagree on the item count"""


class ImageFormatError(DataIOError):
    """Raised for unsupported channel counts, out-of-range values or unreadable images"""


# Templates return an (H, W) mask in [0, 1]; 1 marks 'on' pixels

def _horizontal_stripes(h: int, w: int) -> np.ndarray:
    band = max(1, h // 4)
    rows = (np.arange(h) // band) % 2
    return np.repeat(rows[:, None], w, axis=1).astype(np.float64)


def _vertical_stripes(h: int, w: int) -> np.ndarray:
    return _horizontal_stripes(w, h).T


def _centered_blob(h: int, w: int) -> np.ndarray:
    y, x = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    radius = max(1.0, min(h, w) / 4.0)
    return (((y - cy) ** 2 + (x - cx) ** 2) <= radius ** 2).astype(np.float64)


def _checkerboard(h: int, w: int) -> np.ndarray:
    cell = max(1, min(h, w) // 4)
    y, x = np.mgrid[0:h, 0:w]
    return ((y // cell + x // cell) % 2).astype(np.float64)


def _diagonal(h: int, w: int) -> np.ndarray:
    y, x = np.mgrid[0:h, 0:w]
    return (np.abs(y * (w / h) - x) <= max(1.0, w / 8.0)).astype(np.float64)


def _frame(h: int, w: int) -> np.ndarray:
    mask = np.ones((h, w))
    inset = max(1, min(h, w) // 4)
    mask[inset:h - inset, inset:w - inset] = 0.0
    return mask


TEMPLATES: Dict[str, Callable[[int, int], np.ndarray]] = {
    "horizontal-stripes": _horizontal_stripes,
    "vertical-stripes": _vertical_stripes,
    "centered-blob": _centered_blob,
    "checkerboard": _checkerboard,
    "diagonal": _diagonal,
    "frame": _frame,
}


def render_template(name: str, shape: Tuple[int, int, int], low: float = 0.25, high: float = 0.75) -> Sample:
    """
    Render a named pattern at the given shape

    Args:
        name: registered template name
        shape: (height, width, channels)
        low: value of 'off' pixels
        high: value of 'on' pixels

    Returns:
        template Sample, identical across channels
    """
    if name not in TEMPLATES:
        raise UnknownTemplateError(f"unknown template '{name}', expected one of {sorted(TEMPLATES)}")
    h, w, c = shape
    mask = TEMPLATES[name](h, w)
    image = low + (high - low) * mask
    return Sample.from_image(np.repeat(image[:, :, None], c, axis=2))


def synth_dataset(spec: SynthSpec, rng_seed: int) -> Tuple[LabeledDataset, DenoiserModel]:
    """
    Draw clamp01(template + std * noise) per class and build the matching model

    The returned model is the pre-clamp law: one isotropic Gaussian per class
    centred on its template, weighted by the class priors. Samples are
    shuffled with the same seed so any prefix mixes classes.

    Args:
        spec: image shape, per-class template/std/prior, samples per class
        rng_seed: seed for noise and shuffling

    Returns:
        (dataset, denoiser model)
    """
    shape = tuple(spec.image_shape)
    templates = [render_template(c.template, shape, c.low, c.high) for c in spec.classes]
    rng = np.random.default_rng(rng_seed)
    samples: List[np.ndarray] = []
    labels: List[int] = []
    clipped = 0
    for class_id, (cls, template) in enumerate(zip(spec.classes, templates)):
        draws = template.data[None, :] + cls.std * rng.standard_normal((spec.samples_per_class, template.size))
        clipped += int(np.count_nonzero((draws < 0) | (draws > 1)))
        samples.extend(np.clip(draws, 0.0, 1.0))
        labels.extend([class_id] * spec.samples_per_class)

    total = len(samples) * templates[0].size
    if clipped / total > 0.01:
        logger.warning(f"{clipped / total:.2%} of synthetic pixels were clipped to [0, 1]; the denoiser prior is approximate")

    order = rng.permutation(len(samples))
    dataset = LabeledDataset(
        samples=[Sample(samples[i], shape) for i in order],
        labels=[labels[i] for i in order],
        num_classes=len(spec.classes),
    )
    model = model_from_templates(templates, [c.std for c in spec.classes], [c.prior for c in spec.classes])
    logger.info(f"Generated synthetic dataset: {len(dataset)} samples, {dataset.num_classes} classes, shape {shape}")
    return dataset, model


def fit_denoiser(dataset: LabeledDataset) -> DenoiserModel:
    """Class means, pooled isotropic std and empirical priors"""
    X = dataset.matrix()
    y = dataset.label_array()
    counts = np.bincount(y, minlength=dataset.num_classes)
    if np.any(counts == 0):
        missing = [k for k, n in enumerate(counts) if n == 0]
        raise DataIOError(f"cannot fit a denoiser: classes {missing} have no samples")
    means = [X[y == k].mean(axis=0) for k in range(dataset.num_classes)]
    residual = X - np.stack(means)[y]
    std = max(float(np.sqrt(np.mean(residual * residual))), MIN_FITTED_STD)
    priors = counts / counts.sum()
    logger.info(f"Fitted denoiser: {dataset.num_classes} classes, pooled std={std:.4g}")
    return model_from_templates(
        [Sample(m, dataset.shape) for m in means],
        [std] * dataset.num_classes,
        priors.tolist(),
    )


def _read_idx_header(raw: bytes, magic: int, dims: int, path) -> List[int]:
    header_len = 4 + 4 * dims
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX magic number")
    found = int.from_bytes(raw[0:4], "big")
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header_len:
        raise IdxTruncatedError(f"{path}: header needs {header_len} bytes, file has {len(raw)}")
    return [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(dims)]


def _check_payload(raw: bytes, offset: int, expected: int, path):
    actual = len(raw) - offset
    if actual != expected:
        raise IdxTruncatedError(f"{path}: payload has {actual} bytes, header implies {expected}")


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path]) -> LabeledDataset:
    """
    Load an IDX image file (unsigned bytes, count x rows x cols) and its labels

    Args:
        images_path: file with magic 0x00000803
        labels_path: file with magic 0x00000801

    Returns:
        LabeledDataset with pixels scaled to [0, 1] and shape (rows, cols, 1)
    """
    images_raw = Path(images_path).read_bytes()
    labels_raw = Path(labels_path).read_bytes()

    count, rows, cols = _read_idx_header(images_raw, IDX_IMAGES_MAGIC, 3, images_path)
    _check_payload(images_raw, 16, count * rows * cols, images_path)
    (label_count,) = _read_idx_header(labels_raw, IDX_LABELS_MAGIC, 1, labels_path)
    _check_payload(labels_raw, 8, label_count, labels_path)
    if count != label_count:
        raise IdxCountMismatchError(f"{count} images in {images_path} but {label_count} labels in {labels_path}")
    if count == 0:
        raise DataIOError(f"{images_path}: no images")

    pixels = np.frombuffer(images_raw, dtype=np.uint8, offset=16).reshape(count, rows * cols) / 255.0
    labels = np.frombuffer(labels_raw, dtype=np.uint8, offset=8).astype(int)
    shape = (rows, cols, 1)
    logger.info(f"Loaded {count} IDX images of shape {shape} from {images_path}")
    return LabeledDataset(
        samples=[Sample(p, shape) for p in pixels],
        labels=labels.tolist(),
        num_classes=int(labels.max()) + 1,
    )


def quantize(x: Sample) -> np.ndarray:
    """8-bit (H, W, C) array with byte = floor(255 v + 0.5)"""
    if np.any(x.data < 0) or np.any(x.data > 1):
        raise ImageFormatError("image values must lie in [0, 1]")
    return np.floor(255.0 * x.image() + 0.5).astype(np.uint8)


def write_image(x: Sample, path: Union[str, Path]):
    """Binary PGM (1 channel) or PPM (3 channels)"""
    channels = x.shape[2]
    if channels not in (1, 3):
        raise ImageFormatError(f"cannot write {channels}-channel image; PGM/PPM need 1 or 3")
    pixels = quantize(x)
    image = Image.fromarray(pixels[:, :, 0] if channels == 1 else pixels)
    try:
        image.save(Path(path), format="PPM")
    except OSError as e:
        raise DataIOError(f"could not write image {path}: {e}") from e


def read_image(path: Union[str, Path]) -> Sample:
    try:
        with Image.open(Path(path)) as image:
            image.load()
            mode = image.mode
            pixels = np.asarray(image)
    except OSError as e:
        raise ImageFormatError(f"could not read image {path}: {e}") from e
    if mode not in ("L", "RGB"):
        raise ImageFormatError(f"{path}: unsupported image mode {mode}")
    return Sample.from_image(pixels / 255.0)

"""
SCA Lab - Shared Models

This module holds the value types shared by every stage of the pipeline
(samples and conditions) and the pydantic configuration models that the
experiment runner validates configuration files against.
"""

from dataclasses import dataclass
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class SampleError(ValueError):
    """Raised when a Sample is built from inconsistent data"""


@dataclass(frozen=True)
class Sample:
    """Flat float64 vector with image shape metadata (height, width, channels)"""

    data: np.ndarray
    shape: Tuple[int, int, int]

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64).reshape(-1))
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or any(s < 1 for s in shape):
            raise SampleError(f"Sample shape must be (height, width, channels) with all entries >= 1, got {shape}")
        if data.size != int(np.prod(shape)):
            raise SampleError(f"Sample data length {data.size} does not match shape {shape}")
        if not np.all(np.isfinite(data)):
            raise SampleError("Sample data contains non-finite entries")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "shape", shape)

    @classmethod
    def zeros(cls, shape: Tuple[int, int, int]) -> "Sample":
        return cls(np.zeros(int(np.prod(shape))), shape)

    @classmethod
    def from_image(cls, image: np.ndarray) -> "Sample":
        """Build a Sample from an (H, W) or (H, W, C) array"""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            image = image[:, :, None]
        if image.ndim != 3:
            raise SampleError(f"Expected a 2-D or 3-D image array, got {image.ndim} dimensions")
        return cls(image.reshape(-1), image.shape)

    @property
    def size(self) -> int:
        return self.data.size

    def image(self) -> np.ndarray:
        """Return the data as an (H, W, C) array"""
        return self.data.reshape(self.shape)

    def with_data(self, data: np.ndarray) -> "Sample":
        """New Sample with the same shape and different data"""
        return Sample(data, self.shape)


class Condition(BaseModel):
    """Discrete class condition (or the null token) plus guidance scale s_g"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["null", "class"] = Field("null", description="null token or a class condition")
    class_id: Optional[int] = Field(None, description="class identifier when kind is 'class'")
    guidance_scale: float = Field(1.0, ge=0.0, description="classifier-free guidance scale s_g")

    @model_validator(mode="after")
    def _check_class_id(self):
        if self.kind == "class" and self.class_id is None:
            raise ValueError("class condition requires class_id")
        if self.kind == "null" and self.class_id is not None:
            raise ValueError("null condition must not carry a class_id")
        return self

    @classmethod
    def null(cls, guidance_scale: float = 0.0) -> "Condition":
        return cls(kind="null", guidance_scale=guidance_scale)

    @classmethod
    def for_class(cls, class_id: int, guidance_scale: float = 1.0) -> "Condition":
        return cls(kind="class", class_id=class_id, guidance_scale=guidance_scale)


# Configuration blocks

class ScheduleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    T: int = Field(10, ge=2, le=10000, description="number of diffusion steps")
    beta_start: float = Field(1e-4, gt=0.0, lt=1.0, description="first variance increment")
    beta_end: float = Field(0.02, gt=0.0, lt=1.0, description="last variance increment")
    eta_ddpm: float = Field(0.0, ge=0.0, description="DDPM stochasticity for the first-order step")
    h_formula: Literal["log-snr-diff", "paper-ratio"] = Field("log-snr-diff", description="step size definition")

    @model_validator(mode="after")
    def _check_monotone(self):
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        return self


class ChainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    solver: Literal["dpmpp-2m-sde", "ddpm"] = Field("dpmpp-2m-sde", description="reverse step used for inversion and replay")
    prediction: Literal["data", "noise"] = Field("noise", description="quantity fed to the second-order solver mean")


class AttackConfig(BaseModel):
    """Hyperparameters of the latent perturbation loop"""

    model_config = ConfigDict(extra="forbid")

    iterations: int = Field(10, ge=1, description="attack iterations N_a")
    step_size: float = Field(0.04, gt=0.0, description="sign step size eta")
    budget: float = Field(0.1, gt=0.0, description="l-infinity budget kappa on the latent perturbation")
    momentum: float = Field(1.0, ge=0.0, description="momentum factor mu")
    rgf_queries: int = Field(64, ge=1, description="number of random queries N")
    rgf_sigma: float = Field(1e-3, gt=0.0, description="query radius sigma")
    estimator: Literal["rgf", "skip-gradient", "none"] = Field("rgf", description="gradient estimator")
    early_stop: bool = Field(False, description="stop at the first misclassified iterate")
    rng_seed: int = Field(0, ge=0, description="seed for query directions")


class ClassifierConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["softmax-linear", "mlp-1-hidden"] = Field("softmax-linear", description="target model family")
    hidden: int = Field(16, ge=1, description="hidden width for the mlp")
    activation: Literal["tanh", "relu"] = Field("tanh", description="hidden activation for the mlp")
    epochs: int = Field(300, ge=1, description="full-batch gradient descent epochs")
    lr: float = Field(0.5, ge=0.0, description="learning rate")
    rng_seed: int = Field(0, ge=0, description="initialisation seed")


class SynthClassConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    template: str = Field(..., description="named pattern generator")
    std: float = Field(0.1, gt=0.0, description="isotropic pixel noise std")
    prior: float = Field(..., gt=0.0, le=1.0, description="class prior")
    low: float = Field(0.25, ge=0.0, le=1.0, description="pattern level for 'off' pixels")
    high: float = Field(0.75, ge=0.0, le=1.0, description="pattern level for 'on' pixels")


class SynthSpec(BaseModel):
    """Synthetic dataset description matched to the analytic denoiser"""

    model_config = ConfigDict(extra="forbid")

    image_shape: Tuple[int, int, int] = Field((8, 8, 1), description="(height, width, channels)")
    classes: List[SynthClassConfig] = Field(..., min_length=2, description="one entry per class")
    samples_per_class: int = Field(200, ge=1, description="samples drawn per class")

    @field_validator("image_shape")
    @classmethod
    def _check_shape(cls, value):
        if any(s < 1 for s in value):
            raise ValueError("image_shape entries must be >= 1")
        return value

    @model_validator(mode="after")
    def _check_priors(self):
        total = sum(c.prior for c in self.classes)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"class priors must sum to 1, got {total}")
        return self


class IdxDatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    images_path: str = Field(..., description="IDX image file (magic 0x00000803)")
    labels_path: str = Field(..., description="IDX label file (magic 0x00000801)")


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    synth: Optional[SynthSpec] = None
    idx: Optional[IdxDatasetConfig] = None

    @model_validator(mode="after")
    def _exactly_one(self):
        if (self.synth is None) == (self.idx is None):
            raise ValueError("dataset needs exactly one of 'synth' or 'idx'")
        return self


class ConditionConfig(BaseModel):
    """How each attacked image is conditioned: its own label, or the null token"""

    model_config = ConfigDict(extra="forbid")

    mode: Literal["label", "null"] = Field("label", description="condition on the image label or on the null token")
    guidance_scale: float = Field(1.0, ge=0.0, description="classifier-free guidance scale s_g")

    @model_validator(mode="after")
    def _null_guidance(self):
        if self.mode == "null" and self.guidance_scale != 0.0:
            raise ValueError("null conditioning requires guidance_scale = 0")
        return self

    def condition_for(self, label: int) -> Condition:
        if self.mode == "null":
            return Condition.null()
        return Condition.for_class(label, self.guidance_scale)


class BenchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    step_counts: List[int] = Field(default_factory=lambda: [20, 200], description="T values to time")
    images: int = Field(2, ge=1, description="adversarial examples generated per T")


class ExperimentConfig(BaseModel):
    """Top-level experiment configuration"""

    model_config = ConfigDict(extra="forbid")

    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    chain: ChainConfig = Field(default_factory=ChainConfig)
    dataset: DatasetConfig
    classifier: ClassifierConfig = Field(default_factory=ClassifierConfig)
    condition: ConditionConfig = Field(default_factory=ConditionConfig)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)
    output_dir: str = Field("runs", description="parent directory for run directories")
    seed: int = Field(0, ge=0, description="global seed")
    num_images: int = Field(10, ge=1, description="images attacked per run")
    write_images: bool = Field(True, description="dump clean, reconstruction and adversarial images")


__all__ = [
    'Sample',
    'SampleError',
    'Condition',
    'ScheduleConfig',
    'ChainConfig',
    'AttackConfig',
    'ClassifierConfig',
    'SynthClassConfig',
    'SynthSpec',
    'IdxDatasetConfig',
    'DatasetConfig',
    'ConditionConfig',
    'BenchConfig',
    'ExperimentConfig',
]

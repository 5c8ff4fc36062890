"""
Federated sCT Simulator - Configuration Schemas

Pydantic models for every experiment setting: centre (phantom) specifications,
preprocessing, network shape, training paradigm, federation strategy, metrics,
and the top-level experiment record read from a JSON config file. Also holds
the volume file sidecar and the built-in presets.

Defaults follow the published training setup (Adam, LR 1e-4, batch 32, one
local epoch, 30 rounds, FedProx mu = 3). The desk presets scale the geometry
down to 64^3 volumes so a full experiment runs on a CPU.
"""

import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

import utils
from volume import STANDARD_ORIENTATION, Modality, Plane, parse_orientation

logger = utils.logger


class _BaseSchema(BaseModel):
    """Shared configuration for all schema models."""

    model_config = ConfigDict(extra="forbid", frozen=True, str_strip_whitespace=True)


__all__ = [
    "CentreSpec",
    "PreprocessConfig",
    "UNetConfig",
    "ParadigmConfig",
    "FedAvgMParams",
    "FedYogiParams",
    "StrategyConfig",
    "FederationConfig",
    "TrainingConfig",
    "MetricConfig",
    "ExperimentConfig",
    "VolumeSidecar",
    "CohortManifest",
    "CT_MIN_HU",
    "CT_MAX_HU",
    "MIN_BOTTLENECK",
    "strategy_label",
    "strategy_presets",
    "paradigm_presets",
    "desk_centre_presets",
    "desk_unet_config",
    "desk_patch_size",
    "full_scale_unet_config",
    "desk_experiment_config",
    "load_experiment_config",
    "dump_experiment_config",
]

CT_MIN_HU = -1000.0
CT_MAX_HU = 3000.0
# Smallest feature map a 3x3 convolution accepts.
MIN_BOTTLENECK = 3

ParadigmKind = Literal["random_multi_2d", "multi_2d", "two_d_plus", "patches_2d"]
StrategyBase = Literal["fedavg", "fedavgm", "fedyogi"]

# ============================================================================
# Data Generation
# ============================================================================


class CentreSpec(_BaseSchema):
    """One simulated centre: cohort size and its acquisition characteristics."""

    centre_id: str = Field(..., min_length=1, max_length=32, description="Centre identifier, e.g. 'A'")
    n_patients: int = Field(..., ge=5, description="Cohort size: 2 validation + 2 test + at least 1 training")
    noise_sigma: float = Field(0.02, ge=0, description="Additive MRI noise, normalized intensity units")
    bias_amplitude: float = Field(0.1, ge=0, description="Log-amplitude of the multiplicative bias field")
    bias_smoothness: float = Field(1.0, gt=0, description="Bias field wavelength scale; max cycles = 1/value")
    fov_cut_fraction: float = Field(0.0, ge=0, lt=0.5, description="Fraction of inferior slices removed")
    ct_slice_thickness_factor: int = Field(1, ge=1, le=8, description="CT slice averaging factor along axis 0")
    contrast_gain: float = Field(1.0, gt=0, description="Multiplier on the MRI tissue response")
    contrast_offset: float = Field(0.0, ge=0, description="Additive MRI offset inside the head")
    voxel_size: float = Field(1.0, gt=0, description="Isotropic acquisition voxel size in mm")
    shape: Tuple[int, int, int] = Field((64, 64, 64), description="Acquired volume extents in voxels")
    orientation: str = Field(STANDARD_ORIENTATION, description="Stored axis orientation code")

    @field_validator("shape")
    @classmethod
    def _check_shape(cls, value: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if any(extent < 16 for extent in value):
            raise ValueError(f"phantom extents must be at least 16 voxels, got {value}")
        return value

    @field_validator("orientation")
    @classmethod
    def _check_orientation(cls, value: str) -> str:
        return parse_orientation(value)


# ============================================================================
# Preprocessing
# ============================================================================


class PreprocessConfig(_BaseSchema):
    """Per-centre preprocessing (bias correction, geometry, normalization)."""

    target_dim: int = Field(64, ge=8, description="Voxels per axis after resizing/padding")
    crop_dims: Optional[Tuple[int, int, int]] = Field(
        None, description="Pre-resize crop extents; derived from 328x256x328 scaled by target_dim/256 when unset"
    )
    target_voxel: float = Field(1.0, gt=0, description="Isotropic resampling voxel size in mm")
    pad_ct: float = Field(CT_MIN_HU, description="CT padding value in HU")
    pad_mri: float = Field(0.0, description="MRI padding value")
    bias_poly_degree: int = Field(3, ge=0, le=5, description="Total degree of the bias-field polynomial")
    bias_iters: int = Field(4, ge=1, le=50, description="Fit/classify iterations of the bias corrector")
    bias_classes: int = Field(4, ge=1, le=8, description="Tissue classes used by the bias corrector")
    mask_source: Literal["phantom", "threshold"] = Field("phantom", description="Where the body mask comes from")
    mask_threshold_hu: float = Field(-500.0, description="CT threshold for threshold masking")

    @field_validator("pad_ct")
    @classmethod
    def _check_pad_ct(cls, value: float) -> float:
        if value != CT_MIN_HU:
            raise ValueError(f"pad_ct is fixed at {CT_MIN_HU} HU, got {value}")
        return value

    @field_validator("pad_mri")
    @classmethod
    def _check_pad_mri(cls, value: float) -> float:
        if value != 0.0:
            raise ValueError(f"pad_mri is fixed at 0, got {value}")
        return value

    def effective_crop_dims(self) -> Tuple[int, int, int]:
        """Crop extents, scaled from 328x256x328 and rounded to even when not configured."""
        if self.crop_dims is not None:
            return self.crop_dims
        scale = self.target_dim / 256.0

        def _even(value: float) -> int:
            return max(2, 2 * int(round(value / 2.0)))

        return (_even(328 * scale), _even(256 * scale), _even(328 * scale))


# ============================================================================
# Model and Training
# ============================================================================


class UNetConfig(_BaseSchema):
    """Residual U-Net shape."""

    input_size: int = Field(64, ge=4, description="Square input extent in pixels")
    depth: int = Field(3, ge=1, le=7, description="Number of pool/upsample levels")
    base_channels: int = Field(8, ge=1, le=128, description="Filters at level 0")
    stem_kernel: Literal[7] = Field(7, description="Stem convolution kernel")
    blocks_per_level: int = Field(1, ge=1, le=4, description="Residual blocks per resolution")

    @model_validator(mode="after")
    def _check_divisible(self) -> "UNetConfig":
        if self.input_size % (2**self.depth):
            raise ValueError(f"input_size {self.input_size} is not divisible by 2**depth = {2 ** self.depth}")
        if self.input_size // 2**self.depth < MIN_BOTTLENECK:
            raise ValueError(
                f"input_size {self.input_size} at depth {self.depth} leaves a bottleneck below {MIN_BOTTLENECK} pixels"
            )
        return self

    @property
    def conv_count(self) -> int:
        """Convolutions in the built graph: stem, encoder, decoder and the 1x1 projection."""
        per_level = 1 + 2 * self.blocks_per_level
        return 2 + 2 * self.blocks_per_level + 2 * self.depth * per_level


class ParadigmConfig(_BaseSchema):
    """Training paradigm: how slices are pooled into batches and merged at inference."""

    kind: ParadigmKind = Field("random_multi_2d", description="Slice pooling paradigm")
    plane: Optional[Plane] = Field(None, description="Single plane restriction (2D+ tracks)")
    patch_size: int = Field(32, ge=4, description="Patch extent for patches_2d")
    patches_per_slice: int = Field(1, ge=1, le=16, description="Random crops drawn per slice per epoch")


class TrainingConfig(_BaseSchema):
    """Client optimizer and data-loading settings."""

    lr: float = Field(1e-4, gt=0, description="Client Adam learning rate")
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    batch_size: int = Field(32, ge=1)
    augmentation: Literal["none", "minimal", "extended"] = Field("minimal", description="Augmentation pipeline")
    rotation_degrees: float = Field(10.0, ge=0, le=45, description="Rotation angle (minimal) or range (extended)")
    translation_fraction: float = Field(0.05, ge=0, le=0.25, description="Extended-pipeline shift, share of extent")
    bn_momentum: float = Field(0.1, gt=0, le=1)
    bn_eps: float = Field(1e-5, gt=0)
    slice_stride: int = Field(1, ge=1, description="Use every n-th slice per plane for training")


# ============================================================================
# Federation
# ============================================================================


class FedAvgMParams(_BaseSchema):
    beta: float = Field(0.3, ge=0, lt=1, description="Server momentum coefficient")
    eta_s: float = Field(0.2, ge=0, description="Server learning rate")


class FedYogiParams(_BaseSchema):
    eta: float = Field(0.03, gt=0, description="Server learning rate")
    eta_l: Optional[float] = Field(None, gt=0, description="Client learning rate under FedYogi; None uses training.lr")
    beta1: float = Field(0.6, ge=0, lt=1)
    beta2: float = Field(0.6, ge=0, lt=1)
    tau: float = Field(0.01, gt=0, description="Adaptivity floor; v starts at tau**2")


class StrategyConfig(_BaseSchema):
    """Server aggregation plus the orthogonal FedProx and FedBN modifiers."""

    base: StrategyBase = Field("fedavg", description="Server update rule")
    fedavgm: FedAvgMParams = Field(default_factory=FedAvgMParams)
    fedyogi: FedYogiParams = Field(default_factory=FedYogiParams)
    prox_mu: float = Field(0.0, ge=0, description="FedProx coefficient; 0 disables the proximal term")
    fedbn: bool = Field(False, description="Keep batch-norm entries out of the broadcast")


class FederationConfig(_BaseSchema):
    num_clients: int = Field(..., ge=2, description="Number of training centres K")
    rounds: int = Field(30, ge=0, description="Communication rounds; 0 evaluates the initialized model only")
    local_epochs: int = Field(1, ge=1)
    strategy: StrategyConfig = Field(default_factory=StrategyConfig)
    seed: int = Field(0, ge=0, description="Seed for initialization, client streams and shuffles")


# ============================================================================
# Metrics
# ============================================================================


class MetricConfig(_BaseSchema):
    k1: float = Field(0.01, gt=0)
    k2: float = Field(0.03, gt=0)
    dynamic_range: float = Field(CT_MAX_HU - CT_MIN_HU, gt=0, description="SSIM L in HU")
    window: int = Field(7, ge=1, description="SSIM window extent per axis")
    max_ct: float = Field(CT_MAX_HU - CT_MIN_HU, gt=0, description="PSNR peak value in HU")
    mask_policy: Literal["body_mask", "full_volume"] = Field("body_mask")


# ============================================================================
# Experiment
# ============================================================================


class ExperimentConfig(_BaseSchema):
    """Everything needed to reproduce an experiment from a seed."""

    seed: int = Field(0, ge=0, description="Master seed for phantom generation")
    federation: FederationConfig
    centres: List[CentreSpec] = Field(..., min_length=2)
    unseen: CentreSpec
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    model: UNetConfig = Field(default_factory=UNetConfig)
    paradigm: ParadigmConfig = Field(default_factory=ParadigmConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    metrics: MetricConfig = Field(default_factory=MetricConfig)
    output_dir: str = Field("", description="Output directory; FEDSYNTH_OUTPUT_DIR overrides it")

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        if len(self.centres) != self.federation.num_clients:
            raise ValueError(
                f"federation.num_clients = {self.federation.num_clients} but {len(self.centres)} centres are listed"
            )
        ids = [c.centre_id for c in self.centres] + [self.unseen.centre_id]
        if len(set(ids)) != len(ids):
            raise ValueError(f"centre ids must be unique, got {ids}")
        if self.model.input_size != self.preprocess.target_dim:
            raise ValueError(
                f"model.input_size {self.model.input_size} must equal "
                f"preprocess.target_dim {self.preprocess.target_dim}"
            )
        if self.paradigm.kind == "patches_2d":
            patch = self.paradigm.patch_size
            if patch > self.model.input_size:
                raise ValueError(f"paradigm.patch_size {patch} exceeds model.input_size {self.model.input_size}")
            if patch % (2**self.model.depth):
                raise ValueError(f"paradigm.patch_size {patch} is not divisible by 2**depth = {2 ** self.model.depth}")
            if patch // 2**self.model.depth < MIN_BOTTLENECK:
                raise ValueError(f"paradigm.patch_size {patch} leaves a bottleneck below {MIN_BOTTLENECK} pixels")
        return self


# ============================================================================
# Volume File Sidecar
# ============================================================================


class VolumeSidecar(_BaseSchema):
    """JSON sidecar describing a raw little-endian float32 voxel buffer."""

    format_version: int = Field(1, ge=1)
    shape: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    modality: Modality
    orientation: str = Field(STANDARD_ORIENTATION)
    dtype: Literal["<f4"] = "<f4"
    mask_file: Optional[str] = Field(None, description="Raw file of the paired body mask, relative to the sidecar")
    patient_id: Optional[str] = None

    @field_validator("orientation")
    @classmethod
    def _check_orientation(cls, value: str) -> str:
        return parse_orientation(value)


class CohortManifest(_BaseSchema):
    """Index of a stored centre: patient ids in generation order and the split over them."""

    format_version: int = Field(1, ge=1)
    centre_id: str = Field(..., min_length=1)
    stage: Literal["raw", "prepared"]
    patients: List[str] = Field(..., min_length=1)
    train: List[int]
    val: List[int]
    test: List[int]

    @model_validator(mode="after")
    def _check_split(self) -> "CohortManifest":
        indices = self.train + self.val + self.test
        if sorted(indices) != list(range(len(self.patients))):
            raise ValueError(f"split does not partition {len(self.patients)} patients: {indices}")
        return self


# ============================================================================
# Labels and Presets
# ============================================================================

_BASE_LABELS = {"fedavg": "FedAvg", "fedavgm": "FedAvgM", "fedyogi": "FedYogi"}


def strategy_label(strategy: StrategyConfig) -> str:
    """Human-readable strategy name, e.g. ``FedAvg + FedProx + FedBN``."""
    parts = [_BASE_LABELS[strategy.base]]
    if strategy.prox_mu > 0:
        parts.append("FedProx")
    if strategy.fedbn:
        parts.append("FedBN")
    return " + ".join(parts)


def strategy_presets(prox_mu: float = 3.0) -> List[StrategyConfig]:
    """The six compared strategies, in comparison-table order."""
    return [
        StrategyConfig(base="fedavg"),
        StrategyConfig(base="fedavgm"),
        StrategyConfig(base="fedyogi"),
        StrategyConfig(base="fedavg", fedbn=True),
        StrategyConfig(base="fedavg", prox_mu=prox_mu, fedbn=True),
        StrategyConfig(base="fedavg", prox_mu=prox_mu),
    ]


def paradigm_presets(patch_size: int = 32) -> List[ParadigmConfig]:
    """The four compared training paradigms."""
    return [
        ParadigmConfig(kind="random_multi_2d"),
        ParadigmConfig(kind="multi_2d"),
        ParadigmConfig(kind="two_d_plus"),
        ParadigmConfig(kind="patches_2d", patch_size=patch_size),
    ]


def desk_centre_presets(n_patients: int = 6, shape: int = 64) -> Dict[str, CentreSpec]:
    """Centres A-D (training) and E (unseen).

    A: inferior field-of-view cut. B: thick CT slices and a distinct contrast.
    C: strong bias field, coarser voxels, transposed storage. D: mild baseline.
    E: intermediate parameters.
    """
    cube = (shape, shape, shape)
    coarse = max(16, 2 * int(round(shape / 1.25 / 2)))
    return {
        "A": CentreSpec(
            centre_id="A",
            n_patients=n_patients,
            noise_sigma=0.02,
            bias_amplitude=0.1,
            fov_cut_fraction=0.2,
            shape=cube,
            orientation="SAR",
        ),
        "B": CentreSpec(
            centre_id="B",
            n_patients=n_patients,
            noise_sigma=0.03,
            bias_amplitude=0.15,
            ct_slice_thickness_factor=3,
            contrast_gain=1.3,
            contrast_offset=0.05,
            shape=cube,
            orientation="IAR",
        ),
        "C": CentreSpec(
            centre_id="C",
            n_patients=n_patients,
            noise_sigma=0.02,
            bias_amplitude=0.5,
            bias_smoothness=0.7,
            voxel_size=1.25,
            shape=(coarse, coarse, coarse),
            orientation="ASL",
        ),
        "D": CentreSpec(
            centre_id="D",
            n_patients=n_patients,
            noise_sigma=0.01,
            bias_amplitude=0.05,
            shape=cube,
            orientation="SAR",
        ),
        "E": CentreSpec(
            centre_id="E",
            n_patients=max(5, n_patients - 1),
            noise_sigma=0.025,
            bias_amplitude=0.25,
            fov_cut_fraction=0.1,
            ct_slice_thickness_factor=2,
            contrast_gain=0.85,
            shape=cube,
            orientation="SPR",
        ),
    }


def full_scale_unet_config() -> UNetConfig:
    """256x256 network with 34 convolutions."""
    return UNetConfig(input_size=256, depth=5, base_channels=16, blocks_per_level=1)


def desk_unet_config(input_size: int = 64) -> UNetConfig:
    return UNetConfig(input_size=input_size, depth=3, base_channels=8, blocks_per_level=1)


def desk_patch_size(shape: int = 64, depth: int = 3) -> int:
    """Half the slice extent, raised to the smallest patch the desk network accepts."""
    unit = 2**depth
    return min(shape, max(MIN_BOTTLENECK * unit, (shape // 2) // unit * unit))


def desk_experiment_config(seed: int = 0, rounds: int = 10, shape: int = 64, output_dir: str = "") -> ExperimentConfig:
    """Four centres, unseen centre E, 64^3 volumes, FedAvg + FedProx (mu = 3)."""
    presets = desk_centre_presets(shape=shape)
    return ExperimentConfig(
        seed=seed,
        federation=FederationConfig(
            num_clients=4,
            rounds=rounds,
            local_epochs=1,
            strategy=StrategyConfig(base="fedavg", prox_mu=3.0),
            seed=seed,
        ),
        centres=[presets[c] for c in ("A", "B", "C", "D")],
        unseen=presets["E"],
        preprocess=PreprocessConfig(target_dim=shape),
        model=desk_unet_config(shape),
        paradigm=ParadigmConfig(kind="random_multi_2d", patch_size=desk_patch_size(shape)),
        # Desk runs take far fewer optimizer steps than full-size ones.
        training=TrainingConfig(lr=2e-3, slice_stride=2),
        metrics=MetricConfig(),
        output_dir=output_dir,
    )


# ============================================================================
# Config File I/O
# ============================================================================


def load_experiment_config(path: Path) -> ExperimentConfig:
    """
    Load and validate an experiment config file (JSON).

    Raises:
        FileNotFoundError: if the file does not exist
        pydantic.ValidationError: on malformed JSON or invalid fields
    """
    text = Path(path).read_text(encoding="utf-8")
    cfg = ExperimentConfig.model_validate_json(text)
    logger.debug("Loaded experiment config from %s (%d centres)", path, len(cfg.centres))
    return cfg


def dump_experiment_config(cfg: ExperimentConfig, path: Path) -> None:
    """Write ``cfg`` as indented JSON with stable key order."""
    payload = json.dumps(json.loads(cfg.model_dump_json()), indent=2, sort_keys=True) + "\n"
    utils.atomic_write_text(Path(path), payload)

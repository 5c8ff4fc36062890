"""
Federated sCT Simulator - Phantom Generation

Procedurally generated paired MRI/CT head phantoms standing in for real
multi-centre cohorts. Each centre's ``CentreSpec`` controls the heterogeneity
axes: MRI noise, a smooth multiplicative bias field, an inferior field-of-view
cut, thick-slice CT partial-volume averaging, MRI contrast, voxel size and the
stored axis orientation.

The anatomy is a set of randomized nested ellipsoids: scalp, skull, brain, two
CSF ventricles and an air cavity. Generation is a pure function of
``(seed, spec)``.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List

import numpy as np

import config
import utils
from schemas import CT_MAX_HU, CT_MIN_HU, CentreSpec
from volume import STANDARD_ORIENTATION, Modality, Volume, reorient_array

logger = utils.logger

__all__ = [
    "Tissue",
    "PhantomPair",
    "CentreCohort",
    "generate_phantom",
    "generate_centre",
    "TISSUE_HU",
    "TISSUE_MRI_RESPONSE",
]


class Tissue:
    """Integer tissue labels."""

    BACKGROUND = 0
    SCALP = 1
    SKULL = 2
    BRAIN = 3
    CSF = 4
    AIR = 5


# Nominal HU per tissue (skull and soft tissue are jittered per patient).
TISSUE_HU = {
    Tissue.BACKGROUND: CT_MIN_HU,
    Tissue.SCALP: 40.0,
    Tissue.SKULL: 1000.0,
    Tissue.BRAIN: 30.0,
    Tissue.CSF: 10.0,
    Tissue.AIR: CT_MIN_HU,
}

# Normalized MRI response before contrast gain/offset.
TISSUE_MRI_RESPONSE = {
    Tissue.BACKGROUND: 0.0,
    Tissue.SCALP: 0.9,
    Tissue.SKULL: 0.05,
    Tissue.BRAIN: 0.6,
    Tissue.CSF: 0.2,
    Tissue.AIR: 0.0,
}

_BIAS_TERMS = 6


@dataclass
class PhantomPair:
    """Co-registered MRI/CT pair plus the ground truth used by the oracles."""

    patient_id: str
    mri: Volume
    ct: Volume
    mask: Volume
    true_bias: Volume
    clean_mri: Volume
    labels: np.ndarray


@dataclass
class CentreCohort:
    """All phantoms of one centre and the train/validation/test split (patient indices)."""

    spec: CentreSpec
    pairs: List[PhantomPair]
    train: List[int]
    val: List[int]
    test: List[int]

    def subset(self, indices: List[int]) -> List[PhantomPair]:
        return [self.pairs[i] for i in indices]


# ============================================================================
# Geometry
# ============================================================================


def _grid(shape):
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    return np.meshgrid(*axes, indexing="ij")


def _inside(grid, centre, semi_axes) -> np.ndarray:
    z, y, x = grid
    return (
        ((z - centre[0]) / semi_axes[0]) ** 2
        + ((y - centre[1]) / semi_axes[1]) ** 2
        + ((x - centre[2]) / semi_axes[2]) ** 2
    ) <= 1.0


def _tissue_labels(shape, rng: np.random.Generator) -> np.ndarray:
    """Nested ellipsoid anatomy in the standard SAR frame."""
    grid = _grid(shape)
    centre = rng.uniform(-0.03, 0.03, size=3)
    head = np.array([0.85, 0.75, 0.65]) * rng.uniform(0.92, 1.05, size=3)
    scalp = rng.uniform(0.05, 0.08)
    skull = rng.uniform(0.07, 0.11)

    labels = np.zeros(shape, dtype=np.int8)
    labels[_inside(grid, centre, head)] = Tissue.SCALP
    labels[_inside(grid, centre, head * (1.0 - scalp))] = Tissue.SKULL
    brain = _inside(grid, centre, head * (1.0 - scalp - skull))
    labels[brain] = Tissue.BRAIN

    for side in (-1.0, 1.0):
        offset = centre + np.array([0.05, -0.05, side * rng.uniform(0.09, 0.14)])
        axes = np.array([0.18, 0.08, 0.05]) * rng.uniform(0.85, 1.15, size=3)
        labels[_inside(grid, offset, axes) & brain] = Tissue.CSF

    sinus_centre = centre + np.array([-0.45, 0.45, 0.0]) + rng.uniform(-0.04, 0.04, size=3)
    sinus_axes = np.array([0.12, 0.10, 0.15]) * rng.uniform(0.8, 1.2, size=3)
    labels[_inside(grid, sinus_centre, sinus_axes) & (labels > 0)] = Tissue.AIR
    return labels


def _bias_field(shape, amplitude: float, smoothness: float, rng: np.random.Generator) -> np.ndarray:
    """exp(amplitude * s) with s a sum of low-frequency cosines scaled to max |s| = 1."""
    z, y, x = _grid(shape)
    max_cycles = 1.0 / smoothness
    s = np.zeros(shape, dtype=np.float64)
    for _ in range(_BIAS_TERMS):
        fz, fy, fx = rng.uniform(-max_cycles, max_cycles, size=3)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        weight = rng.uniform(0.5, 1.0)
        s += weight * np.cos(math.pi * (fz * z + fy * y + fx * x) + phase)
    peak = float(np.max(np.abs(s)))
    if peak > 0:
        s /= peak
    return np.exp(amplitude * s)


def _thick_slice_average(ct: np.ndarray, factor: int) -> np.ndarray:
    """Replace each run of ``factor`` axial slices by its mean."""
    if factor <= 1:
        return ct
    out = np.empty_like(ct)
    for start in range(0, ct.shape[0], factor):
        block = ct[start : start + factor]
        out[start : start + factor] = block.mean(axis=0, keepdims=True)
    return out


# ============================================================================
# Generation
# ============================================================================


def generate_phantom(seed: int, spec: CentreSpec, patient_id: str = "") -> PhantomPair:
    """
    Generate one paired phantom.

    Args:
        seed: Patient seed
        spec: Centre specification
        patient_id: Identifier stored on the pair

    Returns:
        PhantomPair in the centre's stored orientation
    """
    rng = np.random.default_rng(seed)
    shape = tuple(spec.shape)
    labels = _tissue_labels(shape, rng)
    mask = labels > 0

    hu = dict(TISSUE_HU)
    hu[Tissue.SKULL] *= rng.uniform(0.9, 1.1)
    hu[Tissue.SCALP] += rng.uniform(-5.0, 5.0)
    hu[Tissue.BRAIN] += rng.uniform(-3.0, 3.0)
    hu[Tissue.CSF] += rng.uniform(-2.0, 2.0)
    ct = np.zeros(shape, dtype=np.float64)
    clean = np.zeros(shape, dtype=np.float64)
    for tissue, value in hu.items():
        region = labels == tissue
        ct[region] = value
        clean[region] = spec.contrast_gain * TISSUE_MRI_RESPONSE[tissue]
    clean[mask] += spec.contrast_offset

    field = _bias_field(shape, spec.bias_amplitude, spec.bias_smoothness, rng)
    noise = rng.normal(0.0, spec.noise_sigma, size=shape) if spec.noise_sigma > 0 else np.zeros(shape)
    mri = np.clip(clean * field + noise * mask, 0.0, None)

    n_cut = int(round(spec.fov_cut_fraction * shape[0]))
    if n_cut:
        mri[:n_cut] = 0.0
        clean[:n_cut] = 0.0
        ct[:n_cut] = CT_MIN_HU
        mask[:n_cut] = False
        labels[:n_cut] = Tissue.BACKGROUND

    ct = _thick_slice_average(ct, spec.ct_slice_thickness_factor)
    ct[~mask] = CT_MIN_HU
    ct = np.clip(ct, CT_MIN_HU, CT_MAX_HU)
    mri[~mask] = 0.0

    spacing = (spec.voxel_size,) * 3

    def _stored(data: np.ndarray, dtype=np.float32) -> np.ndarray:
        out, _ = reorient_array(data.astype(dtype), spacing, STANDARD_ORIENTATION, spec.orientation)
        return out

    mask_data = _stored(mask)

    def _volume(data: np.ndarray, modality: Modality, with_mask: bool = True) -> Volume:
        return Volume(
            data=_stored(data),
            spacing=spacing,
            modality=modality,
            orientation=spec.orientation,
            mask=mask_data if with_mask else None,
        )

    return PhantomPair(
        patient_id=patient_id,
        mri=_volume(mri, Modality.MRI),
        ct=_volume(ct, Modality.CT),
        mask=Volume(mask_data, spacing, Modality.MASK, spec.orientation),
        true_bias=_volume(field, Modality.MRI, with_mask=False),
        clean_mri=_volume(clean, Modality.MRI),
        labels=_stored(labels, np.int8),
    )


def generate_centre(spec: CentreSpec, master_seed: int) -> CentreCohort:
    """
    Generate a centre's cohort and its 2 validation / 2 test / rest training split.

    Patient seeds derive from ``(master_seed, centre_id, patient_index)``.

    Raises:
        ValueError: if the cohort has fewer than 5 patients
    """
    if spec.n_patients < 5:
        raise ValueError(f"centre {spec.centre_id} needs at least 5 patients, got {spec.n_patients}")

    def _one(index: int) -> PhantomPair:
        seed = utils.derive_seed(master_seed, spec.centre_id, index)
        return generate_phantom(seed, spec, patient_id=f"{spec.centre_id}{index:03d}")

    with ThreadPoolExecutor(max_workers=config.MAX_CLIENT_WORKERS) as pool:
        pairs = list(pool.map(_one, range(spec.n_patients)))

    n = spec.n_patients
    cohort = CentreCohort(
        spec=spec,
        pairs=pairs,
        train=list(range(0, n - 4)),
        val=list(range(n - 4, n - 2)),
        test=list(range(n - 2, n)),
    )
    logger.info(
        "Generated centre %s: %d patients (%d train / %d val / %d test), shape %s, orientation %s",
        spec.centre_id,
        n,
        len(cohort.train),
        len(cohort.val),
        len(cohort.test),
        spec.shape,
        spec.orientation,
    )
    return cohort

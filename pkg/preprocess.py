"""
Federated sCT Simulator - Preprocessing

Per-centre pipeline applied to every MRI/CT pair before slicing:

1. bias-field correction of the MRI
2. orientation standardization (to ``SAR``)
3. isotropic resampling
4. centre crop + isotropic resize, then symmetric padding, to ``target_dim`` per axis
5. body mask application
6. MRI min-max normalization; CT clipped to [-1000, 3000] HU

The bias corrector is a compact log-domain polynomial fit: it alternates
between a 1D k-means tissue classification of the log-intensities and a
least-squares fit of a low-degree 3D polynomial to what the classes leave
unexplained.
"""

import itertools
import warnings
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.cluster.vq import kmeans2

import utils
from schemas import CT_MAX_HU, CT_MIN_HU, PreprocessConfig
from volume import STANDARD_ORIENTATION, Modality, Volume, reorient_array

logger = utils.logger

__all__ = [
    "PreparedPatient",
    "bias_correct",
    "orient_standardize",
    "resample_to_isotropic",
    "crop_resize_pad",
    "minmax_normalize",
    "apply_mask",
    "threshold_mask",
    "preprocess_pair",
]

# Voxels dimmer than this share of the robust maximum are left out of the bias fit.
_BIAS_FLOOR = 0.1
_MAX_FIT_SAMPLES = 200_000


@dataclass
class PreparedPatient:
    """A preprocessed, standardized pair ready for slicing."""

    patient_id: str
    mri: Volume
    ct: Volume
    mask: np.ndarray


def _pad_value(modality: Modality) -> float:
    return CT_MIN_HU if modality == Modality.CT else 0.0


# ============================================================================
# Bias Field Correction
# ============================================================================


def _monomials(degree: int) -> List[Tuple[int, int, int]]:
    return [
        (a, b, c)
        for a, b, c in itertools.product(range(degree + 1), repeat=3)
        if a + b + c <= degree
    ]


def _evaluate_polynomial(shape, exponents, coefficients) -> np.ndarray:
    z, y, x = (np.linspace(-1.0, 1.0, n) for n in shape)
    out = np.zeros(shape, dtype=np.float64)
    for (a, b, c), coef in zip(exponents, coefficients):
        out += coef * (z[:, None, None] ** a) * (y[None, :, None] ** b) * (x[None, None, :] ** c)
    return out


def bias_correct(
    mri: Volume,
    mask: Optional[np.ndarray] = None,
    degree: int = 3,
    iters: int = 4,
    classes: int = 4,
) -> Tuple[Volume, np.ndarray]:
    """
    Estimate and remove a smooth multiplicative bias field.

    Args:
        mri: Nonnegative MRI volume
        mask: Head mask; defaults to ``mri.mask``
        degree: Total degree of the log-field polynomial
        iters: Classification/fit alternations
        classes: Number of intensity classes

    Returns:
        ``(corrected volume, estimated field)``; the field is positive with
        geometric mean 1 inside the mask

    Raises:
        ValueError: on an empty mask, a shape mismatch or negative intensities
    """
    if mask is None:
        mask = mri.mask
    if mask is None:
        raise ValueError("bias_correct needs a mask")
    mask = np.asarray(mask) > 0.5
    if mask.shape != mri.shape:
        raise ValueError(f"mask shape {mask.shape} does not match MRI shape {mri.shape}")
    if not mask.any():
        raise ValueError("bias_correct got an all-zero mask")
    data = mri.data.astype(np.float64)
    if np.any(data < 0):
        raise ValueError("bias_correct expects nonnegative MRI intensities")

    robust_max = float(np.percentile(data[mask], 99.0))
    fit_region = mask & (data > _BIAS_FLOOR * robust_max)
    if not fit_region.any():
        logger.warning("No voxels above the bias-fit floor; returning the MRI unchanged")
        return mri.replace(data=mri.data.copy()), np.ones(mri.shape, dtype=np.float32)

    coords = np.nonzero(fit_region)
    stride = max(1, coords[0].size // _MAX_FIT_SAMPLES)
    coords = tuple(c[::stride] for c in coords)
    log_i = np.log(data[coords])
    axes = [np.linspace(-1.0, 1.0, n)[c] for n, c in zip(mri.shape, coords)]
    exponents = _monomials(degree)
    design = np.stack([axes[0] ** a * axes[1] ** b * axes[2] ** c for a, b, c in exponents], axis=1)

    field_log_samples = np.zeros_like(log_i)
    coefficients = np.zeros(len(exponents))
    k = min(classes, np.unique(log_i).size)
    for _ in range(iters):
        residual = log_i - field_log_samples
        # seeds span the residual range
        init = np.linspace(residual.min(), residual.max(), k)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            centroids, assignment = kmeans2(residual[:, None], init[:, None], iter=10, minit="matrix")
        target = log_i - centroids[assignment, 0]
        coefficients, *_ = np.linalg.lstsq(design, target, rcond=None)
        field_log_samples = design @ coefficients

    field_log = _evaluate_polynomial(mri.shape, exponents, coefficients)
    field_log -= field_log[mask].mean()
    field = np.exp(field_log)
    corrected = (data / field).astype(mri.data.dtype)
    logger.debug("Bias field range inside mask: %.4f..%.4f", field[mask].min(), field[mask].max())
    return mri.replace(data=corrected), field.astype(np.float32)


# ============================================================================
# Geometry
# ============================================================================


def orient_standardize(volume: Volume) -> Volume:
    """Reorder and flip axes to the standard ``SAR`` layout."""
    if volume.orientation == STANDARD_ORIENTATION:
        return volume.replace(data=volume.data.copy())
    data, spacing = reorient_array(volume.data, volume.spacing, volume.orientation, STANDARD_ORIENTATION)
    mask = None
    if volume.mask is not None:
        mask, _ = reorient_array(volume.mask, volume.spacing, volume.orientation, STANDARD_ORIENTATION)
    return Volume(data, spacing, volume.modality, STANDARD_ORIENTATION, mask)


def _zoom(data: np.ndarray, factors, order: int) -> np.ndarray:
    return ndimage.zoom(data, factors, order=order, mode="nearest")


def resample_to_isotropic(volume: Volume, target_voxel: float = 1.0) -> Volume:
    """
    Resample to an isotropic grid: linear for intensities, nearest for masks.

    Raises:
        ValueError: if ``target_voxel`` is not positive
    """
    if not target_voxel > 0:
        raise ValueError(f"degenerate target voxel size {target_voxel}")
    factors = tuple(s / target_voxel for s in volume.spacing)
    if all(f == 1.0 for f in factors):
        mask = None if volume.mask is None else volume.mask.copy()
        return volume.replace(data=volume.data.copy(), mask=mask)
    order = 0 if volume.modality == Modality.MASK else 1
    data = _zoom(volume.data, factors, order)
    mask = None if volume.mask is None else _zoom(volume.mask, factors, 0)
    return Volume(data, (target_voxel,) * 3, volume.modality, volume.orientation, mask)


def _centre_crop(data: np.ndarray, extents) -> np.ndarray:
    slices = []
    for size, extent in zip(data.shape, extents):
        keep = min(size, extent)
        start = (size - keep) // 2
        slices.append(slice(start, start + keep))
    return data[tuple(slices)]


def _symmetric_pad(data: np.ndarray, target: int, value: float) -> np.ndarray:
    widths = []
    for size in data.shape:
        total = max(0, target - size)
        widths.append((total // 2, total - total // 2))
    return np.pad(data, widths, mode="constant", constant_values=value)


def crop_resize_pad(volume: Volume, cfg: PreprocessConfig, modality: Optional[Modality] = None) -> Volume:
    """
    Bring a volume to ``target_dim`` voxels per axis.

    Any extent above the target: centre crop to ``crop_dims``, resize with a
    single factor so the largest extent becomes ``target_dim``, then pad the
    shorter axes. Otherwise any extent below: symmetric pad with the
    modality's value (CT -1000 HU, MRI and mask 0). Exact-size input passes
    through unchanged.
    """
    modality = Modality(modality or volume.modality)
    target = cfg.target_dim
    shape = volume.shape
    order = 0 if modality == Modality.MASK else 1
    fill = _pad_value(modality)

    if any(s > target for s in shape):
        crop = cfg.effective_crop_dims()
        data = _centre_crop(volume.data, crop)
        mask = None if volume.mask is None else _centre_crop(volume.mask, crop)
        scale = target / max(data.shape)
        if scale != 1.0:
            data = _zoom(data, (scale,) * 3, order)
            mask = None if mask is None else _zoom(mask, (scale,) * 3, 0)
        # isotropic zoom may round one voxel past the target
        data = _symmetric_pad(_centre_crop(data, (target,) * 3), target, fill)
        if mask is not None:
            mask = _symmetric_pad(_centre_crop(mask, (target,) * 3), target, 0.0)
    elif any(s < target for s in shape):
        data = _symmetric_pad(volume.data, target, fill)
        mask = None if volume.mask is None else _symmetric_pad(volume.mask, target, 0.0)
    else:
        data = volume.data.copy()
        mask = None if volume.mask is None else volume.mask.copy()

    if data.shape != (target,) * 3:
        raise ValueError(f"crop_resize_pad produced {data.shape}, expected {(target,) * 3}")
    return volume.replace(data=data, mask=mask)


# ============================================================================
# Intensity and Masking
# ============================================================================


def minmax_normalize(mri: Volume) -> Volume:
    """Affinely map the volume onto [0, 1]; a constant volume maps to zeros."""
    lo = float(mri.data.min())
    hi = float(mri.data.max())
    if hi == lo:
        logger.warning("Min-max normalization of a constant volume; returning zeros")
        return mri.replace(data=np.zeros_like(mri.data))
    return mri.replace(data=((mri.data - lo) / (hi - lo)).astype(mri.data.dtype))


def apply_mask(volume: Volume, mask: np.ndarray) -> Volume:
    """Set voxels outside ``mask`` to the modality's background value.

    Raises:
        ValueError: on shape mismatch
    """
    mask = np.asarray(mask)
    if mask.shape != volume.shape:
        raise ValueError(f"mask shape {mask.shape} does not match volume shape {volume.shape}")
    inside = mask > 0.5
    data = np.where(inside, volume.data, np.asarray(_pad_value(volume.modality), dtype=volume.data.dtype))
    return volume.replace(data=data.astype(volume.data.dtype, copy=False), mask=inside.astype(np.float32))


def threshold_mask(ct: Volume, threshold_hu: float = -500.0) -> np.ndarray:
    """Head mask from CT: threshold, fill holes, keep the largest connected component."""
    mask = ndimage.binary_fill_holes(ct.data > threshold_hu)
    labelled, count = ndimage.label(mask)
    if count == 0:
        return np.zeros(ct.shape, dtype=bool)
    sizes = ndimage.sum_labels(mask, labelled, index=np.arange(1, count + 1))
    largest = int(np.argmax(sizes)) + 1
    return labelled == largest


# ============================================================================
# Pipeline
# ============================================================================


def preprocess_pair(
    mri: Volume,
    ct: Volume,
    mask: Optional[Volume],
    cfg: PreprocessConfig,
    patient_id: str = "",
) -> PreparedPatient:
    """
    Run the full pipeline on one co-registered pair.

    Args:
        mri: Raw MRI
        ct: Raw CT in HU
        mask: Body mask; ignored when ``cfg.mask_source == "threshold"``
        cfg: Preprocessing settings
        patient_id: Carried through to the result

    Returns:
        PreparedPatient with ``target_dim``-cubed SAR volumes
    """
    if mri.shape != ct.shape:
        raise ValueError(f"MRI shape {mri.shape} does not match CT shape {ct.shape}")
    if cfg.mask_source == "threshold" or mask is None:
        mask_data = threshold_mask(ct, cfg.mask_threshold_hu).astype(np.float32)
    else:
        mask_data = (mask.data > 0.5).astype(np.float32)

    mri = mri.replace(mask=mask_data)
    mri, _ = bias_correct(mri, mask_data, cfg.bias_poly_degree, cfg.bias_iters, cfg.bias_classes)
    ct = ct.replace(mask=mask_data)

    def _geometry(volume: Volume) -> Volume:
        volume = orient_standardize(volume)
        volume = resample_to_isotropic(volume, cfg.target_voxel)
        return crop_resize_pad(volume, cfg)

    mri = _geometry(mri)
    ct = _geometry(ct)
    final_mask = mri.mask > 0.5

    mri = minmax_normalize(apply_mask(mri, final_mask))
    ct = apply_mask(ct, final_mask)
    ct = ct.replace(data=np.clip(ct.data, CT_MIN_HU, CT_MAX_HU))
    return PreparedPatient(patient_id=patient_id, mri=mri, ct=ct, mask=final_mask)

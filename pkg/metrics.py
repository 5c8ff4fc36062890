"""
Federated sCT Simulator - Image Similarity Metrics

MAE, windowed SSIM and PSNR between a ground-truth CT and a synthetic CT, both
in Hounsfield units, plus the affine conversion between the network's
normalized output space and HU, and cohort summaries (median and quartiles).
"""

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from schemas import CT_MAX_HU, CT_MIN_HU, MetricConfig

__all__ = [
    "PatientMetrics",
    "MetricSummary",
    "to_hu",
    "from_hu",
    "mae",
    "ssim",
    "psnr",
    "evaluate_patient",
    "summarize",
]

_HU_SPAN = CT_MAX_HU - CT_MIN_HU


@dataclass(frozen=True)
class PatientMetrics:
    patient_id: str
    mae: float
    ssim: float
    psnr: float


@dataclass(frozen=True)
class MetricSummary:
    median: float
    q1: float
    q3: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


# ============================================================================
# HU Conversion
# ============================================================================


def to_hu(normalized: np.ndarray) -> Tuple[np.ndarray, int]:
    """
    Map normalized intensities in [0, 1] onto [-1000, 3000] HU.

    Returns:
        ``(hu, clamped)`` where ``clamped`` counts inputs outside [0, 1]
    """
    normalized = np.asarray(normalized)
    clamped = int(np.count_nonzero((normalized < 0.0) | (normalized > 1.0)))
    hu = np.clip(normalized, 0.0, 1.0) * _HU_SPAN + CT_MIN_HU
    return hu, clamped


def from_hu(hu: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_hu` for in-range values."""
    return (np.asarray(hu) - CT_MIN_HU) / _HU_SPAN


# ============================================================================
# Metrics
# ============================================================================


def _region(shape, mask: Optional[np.ndarray], policy: str) -> np.ndarray:
    if policy == "full_volume":
        return np.ones(shape, dtype=bool)
    if mask is None:
        raise ValueError("body_mask policy needs a mask")
    region = np.asarray(mask) > 0.5
    if region.shape != tuple(shape):
        raise ValueError(f"mask shape {region.shape} does not match image shape {tuple(shape)}")
    return region


def _check_pair(ct: np.ndarray, sct: np.ndarray) -> None:
    if ct.shape != sct.shape:
        raise ValueError(f"shape mismatch: ct {ct.shape} vs sct {sct.shape}")


def mae(ct: np.ndarray, sct: np.ndarray, mask: Optional[np.ndarray] = None, policy: str = "body_mask") -> float:
    """Mean absolute error in HU over the policy's voxel set."""
    _check_pair(ct, sct)
    region = _region(ct.shape, mask, policy)
    if not region.any():
        raise ValueError("MAE over an empty region")
    diff = np.abs(ct.astype(np.float64) - sct.astype(np.float64))
    return float(diff[region].mean())


def ssim(ct: np.ndarray, sct: np.ndarray, cfg: MetricConfig, mask: Optional[np.ndarray] = None) -> float:
    """
    Mean structural similarity over all valid ``window``-sized neighbourhoods.

    Works on 2D and 3D arrays. Statistics are uniform-window means with
    population (co)variances. Under the body-mask policy only windows centred
    on a mask voxel are averaged.

    Raises:
        ValueError: on shape mismatch, an even window, a window larger than the
            image, or no window left to average
    """
    _check_pair(ct, sct)
    w = cfg.window
    if w % 2 == 0:
        raise ValueError(f"SSIM window must be odd, got {w}")
    if any(n < w for n in ct.shape):
        raise ValueError(f"SSIM window {w} larger than image shape {ct.shape}")

    x = ct.astype(np.float64)
    y = sct.astype(np.float64)
    half = w // 2
    valid = tuple(slice(half, n - half) for n in ct.shape)

    def local_mean(a: np.ndarray) -> np.ndarray:
        return ndimage.uniform_filter(a, size=w, mode="constant")[valid]

    mu_x = local_mean(x)
    mu_y = local_mean(y)
    var_x = local_mean(x * x) - mu_x * mu_x
    var_y = local_mean(y * y) - mu_y * mu_y
    cov = local_mean(x * y) - mu_x * mu_y

    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))

    if cfg.mask_policy == "body_mask":
        region = _region(ct.shape, mask, "body_mask")[valid]
        if not region.any():
            raise ValueError("SSIM: no window centred inside the mask")
        return float(ssim_map[region].mean())
    return float(ssim_map.mean())


def psnr(ct: np.ndarray, sct: np.ndarray, cfg: MetricConfig, mask: Optional[np.ndarray] = None) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``math.inf``."""
    _check_pair(ct, sct)
    region = _region(ct.shape, mask, cfg.mask_policy)
    if not region.any():
        raise ValueError("PSNR over an empty region")
    diff = ct.astype(np.float64) - sct.astype(np.float64)
    mse = float(np.mean(diff[region] ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(cfg.max_ct**2 / mse)


def evaluate_patient(
    patient_id: str, ct_hu: np.ndarray, sct_hu: np.ndarray, mask: Optional[np.ndarray], cfg: MetricConfig
) -> PatientMetrics:
    return PatientMetrics(
        patient_id=patient_id,
        mae=mae(ct_hu, sct_hu, mask, cfg.mask_policy),
        ssim=ssim(ct_hu, sct_hu, cfg, mask),
        psnr=psnr(ct_hu, sct_hu, cfg, mask),
    )


# ============================================================================
# Cohort Summary
# ============================================================================


def _quartiles(values: Sequence[float]) -> MetricSummary:
    arr = np.asarray(values, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        q1, median, q3 = np.quantile(arr, [0.25, 0.5, 0.75], method="linear")
    # inf - inf interpolation yields NaN; the bound is still infinite
    results = [math.inf if math.isnan(v) and np.isinf(arr).any() else float(v) for v in (q1, median, q3)]
    return MetricSummary(median=results[1], q1=results[0], q3=results[2])


def summarize(cohort: List[PatientMetrics]) -> Dict[str, MetricSummary]:
    """Median and linear-interpolation quartiles of each metric.

    Raises:
        ValueError: on an empty cohort
    """
    if not cohort:
        raise ValueError("cannot summarize an empty cohort")
    return {
        "mae": _quartiles([m.mae for m in cohort]),
        "ssim": _quartiles([m.ssim for m in cohort]),
        "psnr": _quartiles([m.psnr for m in cohort]),
    }

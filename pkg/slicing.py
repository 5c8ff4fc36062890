"""
Federated sCT Simulator - Slicing, Batching and Voting

Turns standardized volumes into paired 2D slices for the four training
paradigms, augments them, and rebuilds volumes from slice-wise predictions:

* ``random_multi_2d``: axial, coronal and sagittal slices in one globally
  shuffled stream for a single model
* ``multi_2d``: the same pool, batched plane by plane in fixed plane order
* ``two_d_plus``: one plane per model (three models, voted at inference)
* ``patches_2d``: random square crops; tiled inference merged by averaging

Full-slice paradigms predict every slice of all three planes and take the
voxelwise median in HU.
"""

import math
from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

import config
import metrics
import utils
from preprocess import PreparedPatient
from schemas import ParadigmConfig
from unet import UNet
from volume import Modality, Plane, Volume

logger = utils.logger

__all__ = [
    "PLANES",
    "SliceRecord",
    "Batch",
    "extract_slices",
    "reconstruct_volume",
    "make_epoch_batches",
    "augment",
    "flip_record",
    "median_vote",
    "overlap_average",
    "tile_origins",
    "predict_volume",
    "single_model_map",
]

PLANES: Tuple[Plane, ...] = (Plane.AXIAL, Plane.CORONAL, Plane.SAGITTAL)


@dataclass(frozen=True)
class SliceRecord:
    """A paired MRI/CT slice; both arrays are ``[1, S, S]`` in normalized intensity."""

    patient_id: str
    plane: Plane
    slice_index: int
    mri_slice: np.ndarray
    ct_slice: np.ndarray


@dataclass(frozen=True)
class Batch:
    mri: np.ndarray
    ct: np.ndarray
    planes: Tuple[Plane, ...]

    def __len__(self) -> int:
        return int(self.mri.shape[0])


# ============================================================================
# Extraction and Reconstruction
# ============================================================================


def extract_slices(patient: PreparedPatient, plane: Plane, stride: int = 1) -> List[SliceRecord]:
    """
    Slice a standardized pair along ``plane``.

    The CT target is mapped to normalized intensity with :func:`metrics.from_hu`.
    ``stride`` keeps every n-th slice.
    """
    if patient.mri.shape != patient.ct.shape:
        raise ValueError(f"MRI shape {patient.mri.shape} does not match CT shape {patient.ct.shape}")
    axis = plane.axis
    ct_norm = metrics.from_hu(patient.ct.data).astype(np.float32)
    mri = patient.mri.data.astype(np.float32, copy=False)
    records = []
    for index in range(0, mri.shape[axis], stride):
        records.append(
            SliceRecord(
                patient_id=patient.patient_id,
                plane=plane,
                slice_index=index,
                mri_slice=np.take(mri, index, axis=axis)[None].copy(),
                ct_slice=np.take(ct_norm, index, axis=axis)[None].copy(),
            )
        )
    return records


def reconstruct_volume(
    slices: Sequence[Tuple[int, np.ndarray]],
    plane: Plane,
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0),
    modality: Modality = Modality.CT,
) -> Volume:
    """
    Stack ``(slice_index, array)`` pairs back into a volume along ``plane``.

    Arrays may be ``[S, S]`` or ``[1, S, S]``.

    Raises:
        ValueError: on an empty input, a duplicate or missing index
    """
    if not slices:
        raise ValueError("no slices to reconstruct")
    by_index: Dict[int, np.ndarray] = {}
    for index, array in slices:
        if index in by_index:
            raise ValueError(f"duplicate slice index {index} for plane {plane.value}")
        by_index[index] = np.asarray(array).reshape(np.asarray(array).shape[-2:])
    missing = sorted(set(range(len(by_index))) - set(by_index))
    if missing:
        raise ValueError(f"missing slice index {missing[0]} for plane {plane.value}")
    data = np.stack([by_index[i] for i in range(len(by_index))], axis=plane.axis)
    return Volume(data=data, spacing=spacing, modality=modality)


# ============================================================================
# Batching
# ============================================================================


def _chunks(indices: Sequence[int], batch_size: int) -> List[List[int]]:
    return [list(indices[i : i + batch_size]) for i in range(0, len(indices), batch_size)]


def _stack(records: Sequence[SliceRecord]) -> Batch:
    return Batch(
        mri=np.stack([r.mri_slice for r in records]),
        ct=np.stack([r.ct_slice for r in records]),
        planes=tuple(r.plane for r in records),
    )


def _random_patch(record: SliceRecord, size: int, rng: np.random.Generator) -> SliceRecord:
    extent = record.mri_slice.shape[-1]
    if size > extent:
        raise ValueError(f"patch size {size} exceeds slice extent {extent}")
    top, left = (int(v) for v in rng.integers(0, extent - size + 1, size=2))
    window = (slice(None), slice(top, top + size), slice(left, left + size))
    return replace(record, mri_slice=record.mri_slice[window].copy(), ct_slice=record.ct_slice[window].copy())


def make_epoch_batches(
    records: Sequence[SliceRecord],
    paradigm: ParadigmConfig,
    batch_size: int,
    seed: int,
    augmentation: str = "none",
    rotation_degrees: float = 10.0,
    translation_fraction: float = 0.05,
) -> List[Batch]:
    """
    Order one epoch of records into batches for ``paradigm``.

    Every selected record appears exactly once (``patches_per_slice`` times for
    patches); the last batch may be short. Multi-2D batches never mix planes.

    Raises:
        ValueError: on empty input or a 2D+ paradigm without a plane
    """
    if not records:
        raise ValueError("no records to batch")
    rng = np.random.default_rng(seed)
    pool = list(records)

    if paradigm.kind == "two_d_plus":
        if paradigm.plane is None:
            raise ValueError("two_d_plus batching needs paradigm.plane")
        pool = [r for r in pool if r.plane == paradigm.plane]
        if not pool:
            raise ValueError(f"no records for plane {paradigm.plane.value}")

    if paradigm.kind == "patches_2d":
        pool = [
            _random_patch(r, paradigm.patch_size, rng) for r in pool for _ in range(paradigm.patches_per_slice)
        ]

    if paradigm.kind == "multi_2d":
        groups = []
        for plane in PLANES:
            members = [i for i, r in enumerate(pool) if r.plane == plane]
            order = [members[j] for j in rng.permutation(len(members))]
            groups.extend(_chunks(order, batch_size))
    else:
        groups = _chunks([int(i) for i in rng.permutation(len(pool))], batch_size)

    batches = []
    for position, group in enumerate(groups):
        chosen = [pool[i] for i in group]
        if augmentation != "none":
            chosen = [
                augment(
                    r,
                    augmentation,
                    utils.derive_seed(seed, "augment", position, k),
                    rotation_degrees,
                    translation_fraction,
                )
                for k, r in enumerate(chosen)
            ]
        batches.append(_stack(chosen))
    return batches


# ============================================================================
# Augmentation
# ============================================================================


def flip_record(record: SliceRecord) -> SliceRecord:
    """Mirror both slices along their last axis."""
    return replace(
        record,
        mri_slice=np.ascontiguousarray(record.mri_slice[..., ::-1]),
        ct_slice=np.ascontiguousarray(record.ct_slice[..., ::-1]),
    )


def _rotate(array: np.ndarray, angle: float) -> np.ndarray:
    return ndimage.rotate(array, angle, axes=(-2, -1), reshape=False, order=1, mode="constant", cval=0.0)


def _shift(array: np.ndarray, offset: Tuple[float, float]) -> np.ndarray:
    return ndimage.shift(array, (0.0,) + tuple(offset), order=1, mode="constant", cval=0.0)


def augment(
    record: SliceRecord,
    pipeline: str,
    seed: int,
    rotation_degrees: float = 10.0,
    translation_fraction: float = 0.05,
) -> SliceRecord:
    """
    Apply the same random geometric transform to the MRI and CT slice.

    ``minimal``: random flip and an in-plane rotation by +/- ``rotation_degrees``.
    ``extended``: random flip, a uniform random angle in
    [-``rotation_degrees``, ``rotation_degrees``] and a translation of
    ``translation_fraction`` of the extent with random signs.
    Exposed pixels are 0 for both slices (-1000 HU for CT).
    """
    if pipeline == "none":
        return record
    if pipeline not in ("minimal", "extended"):
        raise ValueError(f"unknown augmentation pipeline {pipeline!r}")
    rng = np.random.default_rng(seed)
    out = flip_record(record) if rng.random() < 0.5 else record

    if pipeline == "minimal":
        angle = rotation_degrees if rng.random() < 0.5 else -rotation_degrees
        offset = (0.0, 0.0)
    else:
        angle = float(rng.uniform(-rotation_degrees, rotation_degrees))
        extent = record.mri_slice.shape[-1]
        step = round(translation_fraction * extent)
        signs = rng.choice([-1.0, 1.0], size=2)
        offset = (float(signs[0] * step), float(signs[1] * step))

    mri = out.mri_slice
    ct = out.ct_slice
    if angle != 0.0:
        mri = _rotate(mri, angle)
        ct = _rotate(ct, angle)
    if offset != (0.0, 0.0):
        mri = _shift(mri, offset)
        ct = _shift(ct, offset)
    return replace(out, mri_slice=mri.astype(np.float32, copy=False), ct_slice=ct.astype(np.float32, copy=False))


# ============================================================================
# Voting and Merging
# ============================================================================


def _data(v) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v)


def median_vote(ax, cor, sag) -> np.ndarray:
    """Voxelwise median of three same-shaped volumes (arrays or :class:`Volume`)."""
    a, c, s = _data(ax), _data(cor), _data(sag)
    if not (a.shape == c.shape == s.shape):
        raise ValueError(f"median_vote shape mismatch: {a.shape}, {c.shape}, {s.shape}")
    return np.median(np.stack([a, c, s]), axis=0)


def overlap_average(patches: Sequence[Tuple[Tuple[int, int], np.ndarray]], shape: Tuple[int, int]) -> np.ndarray:
    """
    Merge ``((top, left), patch)`` predictions by per-pixel averaging.

    Raises:
        ValueError: naming the first uncovered pixel, or a patch outside the image
    """
    total = np.zeros(shape, dtype=np.float64)
    count = np.zeros(shape, dtype=np.int64)
    for (top, left), patch in patches:
        patch = np.asarray(patch).reshape(np.asarray(patch).shape[-2:])
        h, w = patch.shape
        if top < 0 or left < 0 or top + h > shape[0] or left + w > shape[1]:
            raise ValueError(f"patch at ({top}, {left}) of size {h}x{w} leaves the {shape} image")
        total[top : top + h, left : left + w] += patch
        count[top : top + h, left : left + w] += 1
    uncovered = np.argwhere(count == 0)
    if uncovered.size:
        row, col = (int(v) for v in uncovered[0])
        raise ValueError(f"pixel ({row}, {col}) is not covered by any patch")
    return total / count


def tile_origins(extent: int, patch: int) -> List[int]:
    """Half-patch-stride origins covering ``[0, extent)``, last tile flush with the edge."""
    if patch > extent:
        raise ValueError(f"patch size {patch} exceeds extent {extent}")
    stride = max(1, patch // 2)
    origins = list(range(0, extent - patch + 1, stride))
    if origins[-1] != extent - patch:
        origins.append(extent - patch)
    return origins


# ============================================================================
# Inference
# ============================================================================


def single_model_map(model: UNet) -> Dict[Plane, UNet]:
    return {plane: model for plane in PLANES}


def _predict_stack(model: UNet, stack: np.ndarray, batch_size: int) -> np.ndarray:
    outputs = []
    for start in range(0, stack.shape[0], batch_size):
        outputs.append(model.forward(stack[start : start + batch_size], train=False))
    return np.concatenate(outputs, axis=0)


def _predict_plane(model: UNet, mri: np.ndarray, plane: Plane, batch_size: int) -> np.ndarray:
    axis = plane.axis
    stack = np.moveaxis(mri, axis, 0)[:, None].astype(np.float32)
    pred = _predict_stack(model, stack, batch_size)[:, 0]
    volume = reconstruct_volume(list(enumerate(pred)), plane)
    return volume.data


def _predict_patches(model: UNet, mri: np.ndarray, patch: int, batch_size: int) -> np.ndarray:
    extent = mri.shape[1]
    origins = [(top, left) for top in tile_origins(extent, patch) for left in tile_origins(mri.shape[2], patch)]
    out = np.empty(mri.shape, dtype=np.float64)
    for index in range(mri.shape[0]):
        tiles = np.stack([mri[index, t : t + patch, c : c + patch] for t, c in origins])[:, None].astype(np.float32)
        pred = _predict_stack(model, tiles, batch_size)[:, 0]
        out[index] = overlap_average(list(zip(origins, pred)), mri.shape[1:])
    return out


def predict_volume(
    models: Mapping[Plane, UNet],
    mri: np.ndarray,
    paradigm: ParadigmConfig,
    batch_size: Optional[int] = None,
) -> np.ndarray:
    """
    Predict a CT volume in HU from a standardized, normalized MRI volume.

    Full-slice paradigms predict every slice of each plane with that plane's
    model and take the voxelwise median in HU. ``patches_2d`` tiles each axial
    slice with half-overlapping patches and averages them.
    """
    batch_size = batch_size or config.PREDICT_BATCH_SIZE
    if mri.ndim != 3:
        raise ValueError(f"predict_volume expects a 3D volume, got rank {mri.ndim}")

    if paradigm.kind == "patches_2d":
        hu, clamped = metrics.to_hu(_predict_patches(models[Plane.AXIAL], mri, paradigm.patch_size, batch_size))
    else:
        votes = []
        clamped = 0
        for plane in PLANES:
            hu_plane, n = metrics.to_hu(_predict_plane(models[plane], mri, plane, batch_size))
            votes.append(hu_plane)
            clamped += n
        hu = median_vote(*votes)
    if clamped:
        share = 100.0 * clamped / math.prod(mri.shape)
        logger.debug("Clamped %d predicted voxels outside [0, 1] (%.2f%%)", clamped, share)
    return hu

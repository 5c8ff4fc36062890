"""
Federated sCT Simulator - Storage

File formats used by the CLI:

- Volumes: a raw little-endian float32 buffer (C order) next to a JSON
  sidecar (``schemas.VolumeSidecar``). A body mask, when present, is a second
  raw buffer named by the sidecar.
- Cohorts: one directory per centre holding the volumes and a
  ``cohort.json`` manifest with the patient split.
- Checkpoints: ``FSCT`` magic, format version, a JSON header (experiment
  config, round index, RNG cursor) and the tagged parameter tensors.
- Round logs: ``rounds.csv`` (one row per round and centre) and
  ``summary.json``.

All writes go through the atomic helpers in ``utils``.
"""

import csv
import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

import metrics
import utils
from autograd import LayerTag, ParamKind
from phantom import CentreCohort
from preprocess import PreparedPatient
from schemas import CohortManifest, ExperimentConfig, VolumeSidecar
from unet import NamedParameterSet
from volume import Modality, Volume

logger = utils.logger

__all__ = [
    "VolumeFormatError",
    "CheckpointError",
    "Checkpoint",
    "save_volume",
    "load_volume",
    "save_raw_cohort",
    "load_raw_cohort",
    "save_prepared_cohort",
    "load_prepared_cohort",
    "list_cohorts",
    "save_checkpoint",
    "load_checkpoint",
    "write_rounds_csv",
    "write_summary",
    "summary_payload",
    "json_safe",
    "ROUND_COLUMNS",
]

CHECKPOINT_MAGIC = b"FSCT"
CHECKPOINT_VERSION = 1
MANIFEST_NAME = "cohort.json"
ROUND_COLUMNS = ("round_index", "centre_id", "mae", "ssim", "psnr", "loss")

_F4 = np.dtype("<f4")


class VolumeFormatError(ValueError):
    """A volume file pair is missing, malformed or inconsistent with its sidecar."""


class CheckpointError(ValueError):
    """A checkpoint is truncated, has a wrong magic/version or an invalid header."""


# ============================================================================
# Volumes
# ============================================================================


def _raw_bytes(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype=_F4).tobytes(order="C")


def save_volume(volume: Volume, stem: Path, patient_id: Optional[str] = None) -> Path:
    """
    Write ``<stem>.raw`` and ``<stem>.json`` (plus ``<stem>_mask.raw``).

    Returns:
        Path of the sidecar
    """
    stem.parent.mkdir(parents=True, exist_ok=True)
    raw_path = stem.with_name(stem.name + ".raw")
    mask_name = None
    if volume.mask is not None:
        mask_name = stem.name + "_mask.raw"
        utils.atomic_write_binary(stem.with_name(mask_name), _raw_bytes(volume.mask))
    utils.atomic_write_binary(raw_path, _raw_bytes(volume.data))

    sidecar = VolumeSidecar(
        shape=volume.shape,
        spacing=volume.spacing,
        modality=volume.modality,
        orientation=volume.orientation,
        mask_file=mask_name,
        patient_id=patient_id,
    )
    sidecar_path = stem.with_name(stem.name + ".json")
    utils.atomic_write_text(sidecar_path, sidecar.model_dump_json(indent=2) + "\n")
    return sidecar_path


def _read_raw(path: Path, shape: Tuple[int, int, int]) -> np.ndarray:
    if not path.is_file():
        raise VolumeFormatError(f"raw file not found: {path}")
    payload = path.read_bytes()
    expected = math.prod(shape) * _F4.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(f"{path.name}: {len(payload)} bytes, sidecar shape {shape} needs {expected}")
    return np.frombuffer(payload, dtype=_F4).reshape(shape).astype(np.float32)


def load_volume(sidecar_path: Path) -> Volume:
    """
    Read a volume written by :func:`save_volume`.

    Raises:
        VolumeFormatError: on a missing file, an invalid sidecar or a size mismatch
    """
    if not sidecar_path.is_file():
        raise VolumeFormatError(f"sidecar not found: {sidecar_path}")
    try:
        sidecar = VolumeSidecar.model_validate_json(sidecar_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise VolumeFormatError(f"invalid sidecar {sidecar_path.name}: {e}") from e

    data = _read_raw(sidecar_path.with_suffix(".raw"), sidecar.shape)
    mask = None
    if sidecar.mask_file:
        mask = _read_raw(sidecar_path.parent / sidecar.mask_file, sidecar.shape)
    try:
        return Volume(
            data=data,
            spacing=sidecar.spacing,
            modality=sidecar.modality,
            orientation=sidecar.orientation,
            mask=mask,
        )
    except ValueError as e:
        raise VolumeFormatError(f"{sidecar_path.name}: {e}") from e


# ============================================================================
# Cohorts
# ============================================================================

CohortTuple = Tuple[List[PreparedPatient], List[int], List[int], List[int]]


def _write_manifest(directory: Path, manifest: CohortManifest) -> None:
    utils.atomic_write_text(directory / MANIFEST_NAME, manifest.model_dump_json(indent=2) + "\n")


def _read_manifest(directory: Path, stage: str) -> CohortManifest:
    path = directory / MANIFEST_NAME
    if not path.is_file():
        raise VolumeFormatError(f"no {MANIFEST_NAME} in {directory}")
    try:
        manifest = CohortManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise VolumeFormatError(f"invalid manifest {path}: {e}") from e
    if manifest.stage != stage:
        raise VolumeFormatError(f"{directory} holds a {manifest.stage} cohort, expected {stage}")
    return manifest


def save_raw_cohort(directory: Path, cohort: CentreCohort) -> Path:
    """Store a generated centre (MRI with its mask, CT) under ``directory``."""
    directory.mkdir(parents=True, exist_ok=True)
    for pair in cohort.pairs:
        save_volume(pair.mri.replace(mask=pair.mask.data), directory / f"{pair.patient_id}_mri", pair.patient_id)
        save_volume(pair.ct.replace(mask=None), directory / f"{pair.patient_id}_ct", pair.patient_id)
    manifest = CohortManifest(
        centre_id=cohort.spec.centre_id,
        stage="raw",
        patients=[p.patient_id for p in cohort.pairs],
        train=cohort.train,
        val=cohort.val,
        test=cohort.test,
    )
    _write_manifest(directory, manifest)
    logger.info("Saved raw cohort %s (%d patients) to %s", manifest.centre_id, len(manifest.patients), directory)
    return directory


def load_raw_cohort(directory: Path) -> Tuple[CohortManifest, List[Tuple[str, Volume, Volume, Volume]]]:
    """
    Read a raw cohort.

    Returns:
        ``(manifest, [(patient_id, mri, ct, mask), ...])`` in manifest order
    """
    manifest = _read_manifest(directory, "raw")
    pairs = []
    for patient_id in manifest.patients:
        mri = load_volume(directory / f"{patient_id}_mri.json")
        ct = load_volume(directory / f"{patient_id}_ct.json")
        if mri.mask is None:
            raise VolumeFormatError(f"{patient_id}: MRI sidecar names no mask")
        mask = Volume(mri.mask, mri.spacing, Modality.MASK, mri.orientation)
        pairs.append((patient_id, mri.replace(mask=None), ct, mask))
    return manifest, pairs


def save_prepared_cohort(
    directory: Path, centre_id: str, patients: Sequence[PreparedPatient], train, val, test
) -> Path:
    """Store preprocessed patients; the body mask travels with the MRI."""
    directory.mkdir(parents=True, exist_ok=True)
    for patient in patients:
        mask = patient.mask.astype(np.float32)
        save_volume(patient.mri.replace(mask=mask), directory / f"{patient.patient_id}_mri", patient.patient_id)
        save_volume(patient.ct.replace(mask=None), directory / f"{patient.patient_id}_ct", patient.patient_id)
    manifest = CohortManifest(
        centre_id=centre_id,
        stage="prepared",
        patients=[p.patient_id for p in patients],
        train=list(train),
        val=list(val),
        test=list(test),
    )
    _write_manifest(directory, manifest)
    logger.info("Saved prepared cohort %s (%d patients) to %s", centre_id, len(patients), directory)
    return directory


def load_prepared_cohort(directory: Path) -> Tuple[str, CohortTuple]:
    """Read a prepared cohort as ``(centre_id, (patients, train, val, test))``."""
    manifest = _read_manifest(directory, "prepared")
    patients = []
    for patient_id in manifest.patients:
        mri = load_volume(directory / f"{patient_id}_mri.json")
        ct = load_volume(directory / f"{patient_id}_ct.json")
        if mri.mask is None:
            raise VolumeFormatError(f"{patient_id}: MRI sidecar names no mask")
        mask = mri.mask > 0.5
        patients.append(PreparedPatient(patient_id=patient_id, mri=mri, ct=ct.replace(mask=None), mask=mask))
    return manifest.centre_id, (patients, manifest.train, manifest.val, manifest.test)


def list_cohorts(root: Path, stage: str) -> Dict[str, Path]:
    """Map centre id to directory for every ``stage`` cohort directly under ``root``."""
    found = {}
    if not root.is_dir():
        return found
    for child in sorted(root.iterdir()):
        if (child / MANIFEST_NAME).is_file():
            manifest = _read_manifest(child, stage)
            found[manifest.centre_id] = child
    return found


# ============================================================================
# Checkpoints
# ============================================================================


@dataclass
class Checkpoint:
    config: ExperimentConfig
    params: NamedParameterSet
    round_index: int
    rng_cursor: int
    format_version: int = CHECKPOINT_VERSION


def save_checkpoint(
    path: Path, cfg: ExperimentConfig, params: NamedParameterSet, round_index: int, rng_cursor: int
) -> Path:
    """
    Serialize global parameters with the experiment that produced them.

    Layout (little endian): magic, u16 version, u32 header length, JSON header,
    u32 tensor count, then per tensor: u16 name length, name, u8 kind code,
    u32 layer index, u8 rank, u32 extents, float32 payload.
    """
    header = json.dumps(
        {"config": cfg.model_dump(mode="json"), "round_index": round_index, "rng_cursor": rng_cursor},
        sort_keys=True,
    ).encode("utf-8")

    buffer = io.BytesIO()
    buffer.write(CHECKPOINT_MAGIC)
    buffer.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
    buffer.write(header)
    buffer.write(struct.pack("<I", len(params)))
    for name, value, tag in params:
        encoded = name.encode("utf-8")
        buffer.write(struct.pack("<H", len(encoded)))
        buffer.write(encoded)
        buffer.write(struct.pack("<BIB", tag.kind.code, tag.layer_index, value.ndim))
        buffer.write(struct.pack(f"<{value.ndim}I", *value.shape))
        buffer.write(_raw_bytes(value))

    path.parent.mkdir(parents=True, exist_ok=True)
    utils.atomic_write_binary(path, buffer.getvalue())
    logger.info("Saved checkpoint (round %d, %d tensors) to %s", round_index, len(params), path)
    return path


class _Reader:
    def __init__(self, payload: bytes):
        self._payload = payload
        self._offset = 0

    def take(self, size: int) -> bytes:
        end = self._offset + size
        if end > len(self._payload):
            raise CheckpointError(f"truncated checkpoint: needed {size} bytes at offset {self._offset}")
        chunk = self._payload[self._offset : end]
        self._offset = end
        return chunk

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def remaining(self) -> int:
        return len(self._payload) - self._offset


def load_checkpoint(path: Path) -> Checkpoint:
    """
    Read a checkpoint written by :func:`save_checkpoint`.

    Raises:
        CheckpointError: on a wrong magic or version, truncation, trailing
            bytes or an invalid header
    """
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    reader = _Reader(path.read_bytes())
    magic = reader.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path.name}: bad magic {magic!r}")
    version, header_len = reader.unpack("<HI")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path.name}: unsupported format version {version}")

    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
        cfg = ExperimentConfig.model_validate(header["config"])
        round_index = int(header["round_index"])
        rng_cursor = int(header["rng_cursor"])
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path.name}: invalid header: {e}") from e

    (count,) = reader.unpack("<I")
    entries = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, layer_index, rank = reader.unpack("<BIB")
        try:
            kind = ParamKind.from_code(code)
        except ValueError as e:
            raise CheckpointError(f"{path.name}: tensor {name!r}: {e}") from e
        shape = reader.unpack(f"<{rank}I")
        size = math.prod(shape) * _F4.itemsize
        value = np.frombuffer(reader.take(size), dtype=_F4).reshape(shape).astype(np.float32)
        entries.append((name, value, LayerTag(kind, layer_index)))
    if reader.remaining:
        raise CheckpointError(f"{path.name}: {reader.remaining} trailing bytes")

    try:
        params = NamedParameterSet(entries)
    except ValueError as e:
        raise CheckpointError(f"{path.name}: {e}") from e
    return Checkpoint(config=cfg, params=params, round_index=round_index, rng_cursor=rng_cursor, format_version=version)


# ============================================================================
# Round Logs
# ============================================================================


def _format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value) if math.isfinite(value) else ("inf" if value > 0 else "-inf")
    return str(value)


def write_rounds_csv(path: Path, records: Sequence[Any]) -> Path:
    """Write one row per (round, centre) with a fixed column order."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(ROUND_COLUMNS)
    for record in records:
        for row in record.rows():
            writer.writerow([_format_cell(row[column]) for column in ROUND_COLUMNS])
    path.parent.mkdir(parents=True, exist_ok=True)
    utils.atomic_write_text(path, out.getvalue(), newline="")
    return path


def json_safe(value: Any) -> Any:
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {str(k): json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    return value


def summary_payload(result: Any) -> Dict[str, Any]:
    """Summary of an experiment result; non-finite floats become null."""
    last = result.records[-1]
    payload = {
        "strategy": last.strategy,
        "paradigm": result.config.paradigm.kind,
        "rounds": result.config.federation.rounds,
        "seed": result.config.seed,
        "federation_seed": result.config.federation.seed,
        "best_round": result.best_round,
        "best_unseen_mae": result.best_mae,
        "final_unseen": {k: v.to_dict() for k, v in metrics.summarize(last.unseen).items()},
        "final_validation": {
            centre: {k: v.to_dict() for k, v in metrics.summarize(cohort).items()}
            for centre, cohort in last.validation.items()
        },
        "final_test": {
            centre: {k: v.to_dict() for k, v in metrics.summarize(cohort).items()}
            for centre, cohort in result.final_test.items()
            if cohort
        },
    }
    return json_safe(payload)


def write_summary(path: Path, result: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    utils.atomic_write_text(path, json.dumps(summary_payload(result), indent=2, sort_keys=True) + "\n")
    return path

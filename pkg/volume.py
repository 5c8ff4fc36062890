"""
Federated sCT Simulator - Volume Record

A ``Volume`` is the unit of patient data: a 3D scalar grid with voxel spacing,
a modality tag, an anatomical orientation code and an optional body mask.

Orientation codes are three letters, one per array axis, naming the direction
in which the index increases: S/I (superior/inferior), A/P (anterior/posterior)
and R/L (right/left). The standard layout is ``SAR``: axis 0 stacks axial
slices from inferior to superior, axis 1 stacks coronal slices from posterior to
anterior and axis 2 stacks sagittal slices from left to right.
"""

import dataclasses
import enum
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

__all__ = [
    "Modality",
    "Plane",
    "Volume",
    "STANDARD_ORIENTATION",
    "parse_orientation",
    "reorient_array",
]

STANDARD_ORIENTATION = "SAR"

# Anatomical axis id and the letter for the increasing direction in SAR.
_LETTERS = {
    "S": (0, 1),
    "I": (0, -1),
    "A": (1, 1),
    "P": (1, -1),
    "R": (2, 1),
    "L": (2, -1),
}


class Modality(str, enum.Enum):
    MRI = "mri"
    CT = "ct"
    MASK = "mask"


class Plane(str, enum.Enum):
    """Slicing plane of a standardized (``SAR``) volume."""

    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"

    @property
    def axis(self) -> int:
        return {Plane.AXIAL: 0, Plane.CORONAL: 1, Plane.SAGITTAL: 2}[self]


def parse_orientation(code: str) -> str:
    """Validate and upper-case an orientation code.

    Raises:
        ValueError: if the code is not three letters covering each anatomical axis once
    """
    normalized = str(code).strip().upper()
    if len(normalized) != 3 or any(letter not in _LETTERS for letter in normalized):
        raise ValueError(f"orientation code {code!r} must be three letters from S/I, A/P, R/L")
    axes = sorted(_LETTERS[letter][0] for letter in normalized)
    if axes != [0, 1, 2]:
        raise ValueError(f"orientation code {code!r} repeats an anatomical axis")
    return normalized


def _orientation_transform(source: str, target: str) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    """Axis permutation and flip list taking a ``source`` array to ``target`` layout."""
    src = [_LETTERS[letter] for letter in parse_orientation(source)]
    dst = [_LETTERS[letter] for letter in parse_orientation(target)]
    perm = []
    flips = []
    for out_axis, (anatomical, sign) in enumerate(dst):
        in_axis = next(i for i, (a, _) in enumerate(src) if a == anatomical)
        perm.append(in_axis)
        if src[in_axis][1] != sign:
            flips.append(out_axis)
    return tuple(perm), tuple(flips)


def reorient_array(
    data: np.ndarray, spacing: Tuple[float, float, float], source: str, target: str
) -> Tuple[np.ndarray, Tuple[float, float, float]]:
    """Transpose and flip ``data`` from ``source`` to ``target`` orientation.

    Returns the reoriented array (a contiguous copy) and the permuted spacing.
    """
    perm, flips = _orientation_transform(source, target)
    out = np.transpose(data, perm)
    for axis in flips:
        out = np.flip(out, axis=axis)
    new_spacing = tuple(float(spacing[i]) for i in perm)
    return np.ascontiguousarray(out), new_spacing  # type: ignore[return-value]


@dataclass
class Volume:
    """3D scalar grid plus geometry metadata."""

    data: np.ndarray
    spacing: Tuple[float, float, float]
    modality: Modality
    orientation: str = STANDARD_ORIENTATION
    mask: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got rank {self.data.ndim}")
        if len(self.spacing) != 3:
            raise ValueError(f"volume spacing must have 3 entries, got {len(self.spacing)}")
        for axis, value in enumerate(self.spacing):
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"degenerate spacing {value} on axis {axis}")
        self.spacing = tuple(float(s) for s in self.spacing)  # type: ignore[assignment]
        self.modality = Modality(self.modality)
        self.orientation = parse_orientation(self.orientation)
        if self.mask is not None and self.mask.shape != self.data.shape:
            raise ValueError(f"mask shape {self.mask.shape} does not match volume shape {self.data.shape}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)  # type: ignore[return-value]

    def replace(self, **changes) -> "Volume":
        """Return a copy with the given fields replaced (see :func:`dataclasses.replace`)."""
        return dataclasses.replace(self, **changes)

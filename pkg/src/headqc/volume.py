"""Volume representation, affine geometry, orientation, and resampling.

Arrays are indexed [x, y, z]; the grid-to-world affine maps voxel indices to
mm world coordinates (world z is the superior-inferior axis).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .nifti import read_nifti, write_nifti

# |direction cosine| needed before a slice axis counts as axis-aligned;
# tolerates small gantry obliquity, rejects genuinely oblique acquisitions.
ORIENTATION_COSINE_MIN = 0.9

LOCALISER_MAX_SLICES = 5
LOCALISER_ASPECT_MAX = 2.0
LOCALISER_TAG_MARKERS = ("LOCALIZER", "LOCALISER", "SCOUT")


class SingularTransformError(ValueError):
    """Affine with a non-invertible 3x3 block."""


class GridMismatchError(ValueError):
    """Operation requires volumes/masks on the same grid."""


class Orientation(Enum):
    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"
    OBLIQUE = "oblique"


def _validate_affine(affine: np.ndarray) -> np.ndarray:
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got {affine.shape}")
    if not np.allclose(affine[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValueError(f"affine bottom row must be (0,0,0,1), got {affine[3]}")
    if np.linalg.det(affine[:3, :3]) == 0.0:
        raise SingularTransformError("affine 3x3 block is singular")
    return affine


@dataclass(frozen=True)
class AffineTransform:
    """4x4 world-to-world affine (source world -> target world, mm)."""

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _validate_affine(self.matrix))

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    @classmethod
    def from_file(cls, path: str | Path) -> "AffineTransform":
        """Load a whitespace-separated 4x4 matrix (FLIRT-style .mat)."""
        matrix = np.loadtxt(path)
        if matrix.shape != (4, 4):
            raise ValueError(f"{path}: expected a 4x4 matrix, got {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise ValueError(f"{path}: matrix has non-finite entries")
        return cls(matrix)

    def to_file(self, path: str | Path) -> None:
        np.savetxt(path, self.matrix, fmt="%.12g")

    def inverse(self) -> "AffineTransform":
        return AffineTransform(np.linalg.inv(self.matrix))

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """Transform applying `other` first, then self."""
        return AffineTransform(self.matrix @ other.matrix)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 3) world points through the transform."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        homo = np.hstack([pts, np.ones((pts.shape[0], 1))])
        return (self.matrix @ homo.T).T[:, :3]


@dataclass(frozen=True)
class GridSpec:
    """Target sampling grid: extents, voxel size, and grid-to-world affine."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    affine: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "affine", _validate_affine(self.affine))
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ValueError(f"invalid grid dims {self.dims}")
        if any(not np.isfinite(s) or s <= 0 for s in self.spacing):
            raise ValueError(f"invalid grid spacing {self.spacing}")

    @classmethod
    def from_affine(cls, dims: Sequence[int], affine: np.ndarray) -> "GridSpec":
        affine = np.asarray(affine, dtype=np.float64)
        spacing = tuple(float(s) for s in np.linalg.norm(affine[:3, :3], axis=0))
        return cls(tuple(int(d) for d in dims), spacing, affine)

    def matches(self, other: "GridSpec", atol: float = 1e-3) -> bool:
        return self.dims == other.dims and np.allclose(self.affine, other.affine, atol=atol)


@dataclass(frozen=True)
class Volume:
    """3D grid of calibrated attenuation values (HU) with world geometry."""

    data: np.ndarray
    affine: np.ndarray
    series_id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if any(d < 1 for d in data.shape):
            raise ValueError(f"volume has an empty axis: {data.shape}")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", _validate_affine(self.affine))
        if any(not np.isfinite(s) or s <= 0 for s in self.spacing):
            raise ValueError(f"non-positive voxel spacing {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(float(s) for s in np.linalg.norm(self.affine[:3, :3], axis=0))

    @property
    def grid(self) -> GridSpec:
        return GridSpec.from_affine(self.dims, self.affine)

    def slice_world_z(self) -> np.ndarray:
        """World z coordinate (mm) of each slice along the third grid axis."""
        k = np.arange(self.dims[2], dtype=np.float64)
        return self.affine[2, 2] * k + self.affine[2, 3]


@dataclass(frozen=True)
class BinaryMask:
    """Boolean grid sharing the geometry of the space it lives in."""

    data: np.ndarray
    affine: np.ndarray
    source_series_id: str = ""
    # Total voxels the source region maps to in an unbounded target frame;
    # voxels falling off-grid are part of this count but not of `data`.
    mapped_voxel_total: Optional[int] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask data must be 3D, got shape {data.shape}")
        data = data.astype(bool).copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", _validate_affine(self.affine))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def grid(self) -> GridSpec:
        return GridSpec.from_affine(self.dims, self.affine)

    def cardinality(self) -> int:
        return int(np.count_nonzero(self.data))


def load_volume(path: str | Path, series_id: str = "") -> Volume:
    """Load a NIfTI-1 volume; header scale/intercept is honored."""
    data, affine = read_nifti(path)
    return Volume(data=data, affine=affine, series_id=series_id or Path(path).name)


def save_volume(path: str | Path, volume: Volume) -> None:
    write_nifti(path, volume.data, volume.affine)


def save_mask(path: str | Path, mask: BinaryMask) -> None:
    write_nifti(path, mask.data.astype(np.uint8), mask.affine, dtype=np.uint8)


def load_mask(path: str | Path, source_series_id: str = "") -> BinaryMask:
    data, affine = read_nifti(path)
    return BinaryMask(data=data > 0.5, affine=affine, source_series_id=source_series_id)


def classify_orientation(volume: Volume) -> Orientation:
    """Classify by the slice axis' dominant world direction cosine.

    Axial iff the grid axis best aligned with world superior-inferior is the
    third grid axis and its |cosine| >= 0.9; coronal/sagittal analogous for
    the anterior-posterior / left-right world axes. Invariant to uniform
    positive scaling of the affine.
    """
    block = volume.affine[:3, :3]
    cosines = np.abs(block / np.linalg.norm(block, axis=0))  # [world, grid]
    slice_axis = 2
    for world_axis, orient in (
        (2, Orientation.AXIAL),
        (1, Orientation.CORONAL),
        (0, Orientation.SAGITTAL),
    ):
        best_grid_axis = int(np.argmax(cosines[world_axis]))
        if best_grid_axis == slice_axis and cosines[world_axis, slice_axis] >= ORIENTATION_COSINE_MIN:
            return orient
    return Orientation.OBLIQUE


def detect_localiser(volume: Volume, image_type_tags: Sequence[str] = ()) -> bool:
    """Heuristic scout/localiser detection.

    True when the slice count is < 5, the in-plane physical extents have
    aspect ratio > 2, or an image-type tag carries a localiser marker.
    """
    if volume.dims[2] < LOCALISER_MAX_SLICES:
        return True
    extent_x = volume.dims[0] * volume.spacing[0]
    extent_y = volume.dims[1] * volume.spacing[1]
    aspect = max(extent_x, extent_y) / min(extent_x, extent_y)
    if aspect > LOCALISER_ASPECT_MAX:
        return True
    for tag in image_type_tags:
        upper = tag.upper()
        if any(marker in upper for marker in LOCALISER_TAG_MARKERS):
            return True
    return False


def resample(
    volume: Volume,
    transform: AffineTransform,
    grid: GridSpec,
    interp: str = "trilinear",
    fill: Optional[float] = None,
) -> Volume:
    """Resample onto `grid` through a source-world -> target-world transform.

    Each target voxel takes the source value at the transform-mapped world
    point; out-of-field points get `fill` (default: source minimum, i.e. air
    outside the scanner field of view).
    """
    if interp not in ("nearest", "trilinear"):
        raise ValueError(f"unknown interpolation {interp!r}")
    if fill is None:
        fill = float(np.nanmin(volume.data))
    # target index -> source index, as one 4x4 composition
    m = (
        np.linalg.inv(volume.affine)
        @ np.linalg.inv(transform.matrix)
        @ grid.affine
    )
    out = ndimage.affine_transform(
        np.asarray(volume.data, dtype=np.float64),
        matrix=m[:3, :3],
        offset=m[:3, 3],
        output_shape=grid.dims,
        order=0 if interp == "nearest" else 1,
        mode="constant",
        cval=fill,
        prefilter=False,
    )
    return Volume(data=out, affine=grid.affine, series_id=volume.series_id)


def resample_mask(
    mask: BinaryMask,
    transform: AffineTransform,
    grid: GridSpec,
) -> BinaryMask:
    """Nearest-neighbor mask resampling; binarity is preserved."""
    m = np.linalg.inv(mask.affine) @ np.linalg.inv(transform.matrix) @ grid.affine
    out = ndimage.affine_transform(
        mask.data.astype(np.uint8),
        matrix=m[:3, :3],
        offset=m[:3, 3],
        output_shape=grid.dims,
        order=0,
        mode="constant",
        cval=0,
        prefilter=False,
    )
    return BinaryMask(data=out > 0, affine=grid.affine, source_series_id=mask.source_series_id)


def apply_window(values: np.ndarray, center: float, width: float) -> np.ndarray:
    """Window/level HU values into uint8 [0, 255] for display."""
    lower = center - width / 2.0
    upper = center + width / 2.0
    clipped = np.clip(values, lower, upper)
    scaled = (clipped - lower) / (upper - lower)
    return np.round(scaled * 255.0).astype(np.uint8)

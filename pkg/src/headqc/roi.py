"""Artery regions of interest and their transfer to native series space.

ROIs live on the template grid (anterior circle: cavernous ICA and both M1
segments; posterior circle: vertebral arteries up to the basilar merger).
After co-registration they are pushed through the inverse transform into the
native space of the original scans with nearest-neighbor interpolation, and a
series is retained only when at least half the volume of one ROI lands
inside its acquired grid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .volume import (
    AffineTransform,
    BinaryMask,
    GridMismatchError,
    GridSpec,
    Volume,
    load_mask,
    resample_mask,
)

ROI_IDS = ("cavernous_ica", "left_m1", "right_m1", "basilar", "vertebral")
RETAIN_MIN_FRACTION = 0.5


@dataclass(frozen=True)
class RoiDefinition:
    roi_id: str
    mask: BinaryMask
    template_id: str

    def __post_init__(self):
        if self.roi_id not in ROI_IDS:
            raise ValueError(f"unknown roi_id {self.roi_id!r}, expected one of {ROI_IDS}")
        if self.mask.cardinality() == 0:
            raise ValueError(f"ROI {self.roi_id!r} has an empty mask")


@dataclass(frozen=True)
class RoiCoverage:
    series_id: str
    roi_id: str
    covered_fraction: float
    retained: bool


def load_roi_set(
    roi_dir: str | Path,
    template_id: str,
    template_grid: Optional[GridSpec] = None,
) -> list[RoiDefinition]:
    """Load the five artery ROIs for a template from <roi_dir>/<template_id>/.

    Raises on missing ROIs, empty masks, or grids that disagree with the
    template.
    """
    base = Path(roi_dir) / template_id
    rois = []
    for roi_id in ROI_IDS:
        path = base / f"{roi_id}.nii.gz"
        if not path.exists():
            path = base / f"{roi_id}.nii"
        if not path.exists():
            raise FileNotFoundError(f"missing ROI mask {roi_id!r} under {base}")
        mask = load_mask(path, source_series_id=roi_id)
        if template_grid is not None and not mask.grid.matches(template_grid):
            raise GridMismatchError(
                f"ROI {roi_id!r} grid {mask.dims} does not match template grid "
                f"{template_grid.dims}"
            )
        rois.append(RoiDefinition(roi_id=roi_id, mask=mask, template_id=template_id))
    return rois


def transfer_roi(
    roi: RoiDefinition,
    registration: AffineTransform,
    native_grid: GridSpec,
) -> BinaryMask:
    """Transfer a template-space ROI into native space.

    `registration` maps native world to template world; the ROI travels
    through its inverse, sampled nearest-neighbor on the native lattice. The
    returned mask carries `mapped_voxel_total`: the ROI's footprint on an
    unbounded extension of the native lattice, so voxels that fall off the
    actual grid still count toward the ROI's own volume.
    """
    template_to_native = registration.inverse()

    set_idx = np.argwhere(roi.mask.data)
    if set_idx.size == 0:
        empty = np.zeros(native_grid.dims, dtype=bool)
        return BinaryMask(
            data=empty,
            affine=native_grid.affine,
            source_series_id=roi.roi_id,
            mapped_voxel_total=0,
        )

    # Map the ROI bounding-box corners into continuous native indices; the
    # affine image of the box bounds the ROI footprint.
    lo_idx = set_idx.min(axis=0).astype(np.float64)
    hi_idx = set_idx.max(axis=0).astype(np.float64)
    corners = np.array(
        [[lo_idx[i] if bit & (1 << i) == 0 else hi_idx[i] for i in range(3)] for bit in range(8)]
    )
    world = AffineTransform(roi.mask.affine).apply(corners)
    native_world = template_to_native.apply(world)
    native_idx = AffineTransform(native_grid.affine).inverse().apply(native_world)

    box_lo = np.floor(native_idx.min(axis=0)).astype(int) - 1
    box_hi = np.ceil(native_idx.max(axis=0)).astype(int) + 2
    virtual_dims = tuple(int(n) for n in (box_hi - box_lo))
    virtual_affine = np.array(native_grid.affine, dtype=np.float64)
    virtual_affine[:3, 3] += virtual_affine[:3, :3] @ box_lo
    virtual_grid = GridSpec.from_affine(virtual_dims, virtual_affine)

    on_virtual = resample_mask(roi.mask, template_to_native, virtual_grid)
    mapped_total = on_virtual.cardinality()

    native = np.zeros(native_grid.dims, dtype=bool)
    dst_lo = np.maximum(box_lo, 0)
    dst_hi = np.minimum(box_hi, np.asarray(native_grid.dims))
    if np.all(dst_hi > dst_lo):
        src_lo = dst_lo - box_lo
        src_hi = dst_hi - box_lo
        native[
            dst_lo[0] : dst_hi[0], dst_lo[1] : dst_hi[1], dst_lo[2] : dst_hi[2]
        ] = on_virtual.data[
            src_lo[0] : src_hi[0], src_lo[1] : src_hi[1], src_lo[2] : src_hi[2]
        ]
    return BinaryMask(
        data=native,
        affine=native_grid.affine,
        source_series_id=roi.roi_id,
        mapped_voxel_total=mapped_total,
    )


def roi_coverage(
    native_roi: BinaryMask,
    series: Volume,
    roi_id: Optional[str] = None,
    require_presence: bool = False,
    presence_threshold: float = -500.0,
) -> RoiCoverage:
    """Fraction of the transferred ROI inside the series' acquired extent.

    The denominator is the ROI's full footprint (off-grid voxels count as
    uncovered). With `require_presence`, covered voxels must additionally hold
    data above `presence_threshold` HU.
    """
    if native_roi.dims != series.dims or not np.allclose(
        native_roi.affine, series.affine, atol=1e-3
    ):
        raise GridMismatchError("ROI mask and series must share the native grid")
    covered = native_roi.data
    if require_presence:
        covered = covered & (series.data > presence_threshold)
    n_covered = int(np.count_nonzero(covered))
    total = native_roi.mapped_voxel_total
    if total is None:
        total = native_roi.cardinality()
    fraction = (n_covered / total) if total > 0 else 0.0
    return RoiCoverage(
        series_id=series.series_id,
        roi_id=roi_id or native_roi.source_series_id,
        covered_fraction=fraction,
        retained=fraction >= RETAIN_MIN_FRACTION,
    )


def series_retained(coverages: Sequence[RoiCoverage]) -> bool:
    """A series survives when any single ROI is at least half covered."""
    return any(c.retained for c in coverages)


def export_coverage_csv(coverages: Sequence[RoiCoverage], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["series_id", "roi_id", "covered_fraction", "retained"])
        for c in coverages:
            writer.writerow(
                [c.series_id, c.roi_id, f"{c.covered_fraction:.4f}", str(c.retained).lower()]
            )

"""Subgrouping of co-registered series by their z-profile coverage.

Series are assigned to one of five categories (complete, skull base, medial,
skull vault, incomplete) from where along the template z-extent their slices
carry information. The template extent is split into low/mid/high bands; a
band counts as covered when enough of its slices reach the presence floor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .presence import ZProfile


class Subgroup(Enum):
    COMPLETE = "complete"
    SKULL_BASE = "skull_base"
    MEDIAL = "medial"
    SKULL_VAULT = "skull_vault"
    INCOMPLETE = "incomplete"


@dataclass(frozen=True)
class CoverageParams:
    presence_floor: float = 0.05
    low_band: tuple[float, float] = (0.0, 0.33)
    mid_band: tuple[float, float] = (0.33, 0.66)
    high_band: tuple[float, float] = (0.66, 1.0)
    band_coverage_min: float = 0.5
    gap_max: int = 3  # longest tolerated run of uncovered interior slices

    def __post_init__(self):
        bands = (self.low_band, self.mid_band, self.high_band)
        if self.low_band[0] != 0.0 or self.high_band[1] != 1.0:
            raise ValueError("bands must span [0, 1]")
        if self.low_band[1] != self.mid_band[0] or self.mid_band[1] != self.high_band[0]:
            raise ValueError("bands must partition [0, 1] without gaps")
        for lo, hi in bands:
            if not 0.0 <= lo < hi <= 1.0:
                raise ValueError(f"invalid band ({lo}, {hi})")
        if not 0.0 <= self.presence_floor <= 1.0:
            raise ValueError("presence_floor must be in [0, 1]")
        if not 0.0 <= self.band_coverage_min <= 1.0:
            raise ValueError("band_coverage_min must be in [0, 1]")
        if self.gap_max < 0:
            raise ValueError("gap_max must be >= 0")


@dataclass(frozen=True)
class CompletenessResult:
    subgroup: Subgroup
    band_fractions: tuple[float, float, float]  # covered fraction of low/mid/high
    note: Optional[str] = None


def _fractional_z(profile: ZProfile, template_z_range: tuple[float, float]) -> np.ndarray:
    z_lo, z_hi = template_z_range
    if z_hi == z_lo:
        raise ValueError("degenerate template z range")
    return (np.asarray(profile.slice_world_z) - z_lo) / (z_hi - z_lo)


def _band_coverage(
    frac: np.ndarray,
    covered: np.ndarray,
    in_extent: np.ndarray,
    band: tuple[float, float],
    last: bool,
) -> tuple[float, bool]:
    # Denominator counts only slices inside the informative extent, so that
    # zero-presence padding never dilutes a band.
    lo, hi = band
    in_band = (frac >= lo) & ((frac <= hi) if last else (frac < hi)) & in_extent
    n = int(np.count_nonzero(in_band))
    if n == 0:
        return 0.0, False
    fraction = int(np.count_nonzero(covered & in_band)) / n
    return fraction, True


def classify_detail(
    profile: ZProfile,
    template_z_range: tuple[float, float],
    params: CoverageParams = CoverageParams(),
) -> CompletenessResult:
    """Classification plus per-band covered fractions and any rule note."""
    frac = _fractional_z(profile, template_z_range)
    covered = np.asarray(profile.values) >= params.presence_floor

    if not covered.any():
        return CompletenessResult(Subgroup.INCOMPLETE, (0.0, 0.0, 0.0), "no_coverage")
    idx = np.flatnonzero(covered)
    in_extent = np.zeros_like(covered)
    in_extent[idx[0] : idx[-1] + 1] = True

    fractions = []
    band_ok = []
    bands = (params.low_band, params.mid_band, params.high_band)
    for i, band in enumerate(bands):
        fraction, has_slices = _band_coverage(frac, covered, in_extent, band, last=(i == 2))
        fractions.append(fraction)
        band_ok.append(has_slices and fraction >= params.band_coverage_min)
    fractions = tuple(fractions)

    # Covered slices far outside the template extent (beyond one band width).
    slack_below = params.low_band[1] - params.low_band[0]
    slack_above = params.high_band[1] - params.high_band[0]
    covered_frac = frac[covered]
    if np.any(covered_frac < -slack_below) or np.any(covered_frac > 1.0 + slack_above):
        return CompletenessResult(Subgroup.INCOMPLETE, fractions, "range_violation")

    # Interior gap: longest uncovered run between first and last covered slice.
    interior = covered[idx[0] : idx[-1] + 1]
    gap = run = 0
    for hit in interior:
        run = 0 if hit else run + 1
        gap = max(gap, run)
    if gap > params.gap_max:
        return CompletenessResult(Subgroup.INCOMPLETE, fractions, "interior_gap")

    low, mid, high = band_ok
    if low and mid and high:
        subgroup = Subgroup.COMPLETE
    elif low and not high:
        subgroup = Subgroup.SKULL_BASE
    elif high and not low:
        subgroup = Subgroup.SKULL_VAULT
    elif mid:
        subgroup = Subgroup.MEDIAL
    else:
        subgroup = Subgroup.INCOMPLETE
    return CompletenessResult(subgroup, fractions, None)


def classify_completeness(
    profile: ZProfile,
    template_z_range: tuple[float, float],
    params: CoverageParams = CoverageParams(),
) -> Subgroup:
    """Assign the series to exactly one of the five subgroups."""
    return classify_detail(profile, template_z_range, params).subgroup


def export_subgroups_csv(
    rows: Sequence[tuple[str, CompletenessResult]], path: str | Path
) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["series_id", "subgroup", "low_covered", "mid_covered", "high_covered"]
        )
        for series_id, result in rows:
            low, mid, high = result.band_fractions
            writer.writerow(
                [series_id, result.subgroup.value, f"{low:.4f}", f"{mid:.4f}", f"{high:.4f}"]
            )

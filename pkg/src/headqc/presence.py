"""Per-slice information presence.

For a series A, the threshold is a_min = min(A) + (max(A) - min(A)) * t with
tolerance t (default 0.05). A slice's presence is the fraction of its voxels
strictly above a_min, a [0, 1] measure of how much patient imaging the slice
holds. NaN values count as non-informative.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .volume import Volume

DEFAULT_PRESENCE_BINS = 50


@dataclass(frozen=True)
class PresenceParams:
    """Tolerance constant for the informative-voxel threshold."""

    t: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.t < 1.0:
            raise ValueError(f"tolerance t must be in [0, 1), got {self.t}")


@dataclass(frozen=True)
class ZProfile:
    """Per-slice presence values with world z positions along the slice axis."""

    values: np.ndarray
    slice_world_z: np.ndarray
    series_id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        z = np.asarray(self.slice_world_z, dtype=np.float64)
        if values.ndim != 1 or z.shape != values.shape:
            raise ValueError("values and slice_world_z must be 1D and equal length")
        if values.size == 0:
            raise ValueError("empty profile")
        if np.any(values < 0.0) or np.any(values > 1.0):
            raise ValueError("presence values must lie in [0, 1]")
        dz = np.diff(z)
        if z.size > 1 and not (np.all(dz > 0) or np.all(dz < 0)):
            raise ValueError("slice_world_z must be strictly monotone")
        values = values.copy()
        values.flags.writeable = False
        z = z.copy()
        z.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "slice_world_z", z)

    def __len__(self) -> int:
        return int(self.values.size)


def compute_a_min(volume: Volume, params: PresenceParams = PresenceParams()) -> float:
    """Informative-voxel threshold: min(A) + (max(A) - min(A)) * t."""
    vmin = float(np.nanmin(volume.data))
    vmax = float(np.nanmax(volume.data))
    return vmin + (vmax - vmin) * params.t


def slice_presence(slice_values: np.ndarray, a_min: float) -> float:
    """Fraction of slice voxels strictly above a_min."""
    slice_values = np.asarray(slice_values)
    if slice_values.size == 0:
        raise ValueError("empty slice")
    informative = np.count_nonzero(slice_values > a_min)  # NaN compares False
    return informative / slice_values.size


def presence_profile(volume: Volume, params: PresenceParams = PresenceParams()) -> ZProfile:
    """Presence of every slice along the third grid axis.

    a_min is computed once from the whole volume, not per slice.
    """
    a_min = compute_a_min(volume, params)
    counts = np.count_nonzero(volume.data > a_min, axis=(0, 1))
    per_slice = volume.dims[0] * volume.dims[1]
    return ZProfile(
        values=counts / per_slice,
        slice_world_z=volume.slice_world_z(),
        series_id=volume.series_id,
    )


@dataclass(frozen=True)
class PresenceHeatmap:
    """2D histogram of (slice z, presence) observations over many series."""

    counts: np.ndarray  # [z_bin, presence_bin]
    z_edges: np.ndarray
    presence_edges: np.ndarray

    @property
    def log_counts(self) -> np.ndarray:
        """log(1 + count) rendering values, making rare anomalies visible."""
        return np.log1p(self.counts.astype(np.float64))

    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path: str | Path) -> None:
        """Counts matrix, one row per z bin."""
        np.savetxt(path, self.counts, fmt="%d", delimiter=",")

    def metadata(self) -> dict:
        return {
            "z_edges": [float(e) for e in self.z_edges],
            "presence_edges": [float(e) for e in self.presence_edges],
            "log_scale": True,
        }

    def metadata_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.metadata(), indent=2) + "\n")


def presence_heatmap(
    profiles: Iterable[ZProfile],
    z_bins: Optional[int] = None,
    presence_bins: int = DEFAULT_PRESENCE_BINS,
    z_range: Optional[tuple[float, float]] = None,
) -> PresenceHeatmap:
    """Bin all (slice, series) observations over a common z range.

    Profiles must already be aligned (template space). z_bins defaults to the
    longest profile (one bin per template slice), presence bins are uniform
    on [0, 1]. Empty input yields an all-zero histogram.
    """
    profiles = list(profiles)
    zs = [np.asarray(p.slice_world_z) for p in profiles]
    if z_range is None:
        if profiles:
            z_range = (min(z.min() for z in zs), max(z.max() for z in zs))
        else:
            z_range = (0.0, 1.0)
    if z_bins is None:
        z_bins = max((len(p) for p in profiles), default=1)
    z_lo, z_hi = z_range
    if z_hi <= z_lo:
        z_hi = z_lo + 1.0
    z_edges = np.linspace(z_lo, z_hi, z_bins + 1)
    presence_edges = np.linspace(0.0, 1.0, presence_bins + 1)
    if profiles:
        all_z = np.concatenate(zs)
        all_p = np.concatenate([np.asarray(p.values) for p in profiles])
        counts, _, _ = np.histogram2d(all_z, all_p, bins=[z_edges, presence_edges])
    else:
        counts = np.zeros((z_bins, presence_bins))
    return PresenceHeatmap(
        counts=counts.astype(np.int64),
        z_edges=z_edges,
        presence_edges=presence_edges,
    )


def export_profiles_csv(profiles: Sequence[ZProfile], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["series_id", "slice_index", "world_z_mm", "presence"])
        for profile in profiles:
            for idx, (z, value) in enumerate(zip(profile.slice_world_z, profile.values)):
                writer.writerow([profile.series_id, idx, f"{z:.3f}", f"{value:.6f}"])

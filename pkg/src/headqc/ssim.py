"""Grouped structural-similarity quality control.

SSIM of each registered series against its age-matched template, computed
per axial slice in 2D with Gaussian-weighted local statistics and averaged
over the slices the series actually acquired. Comparing raw scores across
series that cover different parts of the head is meaningless, so flagging
for visual inspection happens per subgroup: percentile subgroups send their
lowest tail to inspection, the medial and incomplete subgroups are always
inspected in full.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage, stats

from .completeness import Subgroup
from .volume import GridMismatchError, Volume

HU_CLAMP = (-1024.0, 3071.0)


class Flag(Enum):
    AUTO_ACCEPT = "auto_accept"
    INSPECT = "inspect"


@dataclass(frozen=True)
class SsimParams:
    """Window and stabilizer constants of the local SSIM kernel."""

    sigma: float = 1.5
    support: int = 11
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: Optional[float] = None  # HU; only used without rank normalization
    normalization: str = "rank"  # "rank" | "none"
    clamp: tuple[float, float] = HU_CLAMP

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")
        if self.support % 2 != 1 or self.support < 3:
            raise ValueError("window support must be odd and >= 3")
        if self.normalization not in ("rank", "none"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass(frozen=True)
class SsimScore:
    series_id: str
    score: float
    template_id: str = ""
    subgroup: Optional[Subgroup] = None

    def __post_init__(self):
        if not -1.0 <= self.score <= 1.0:
            raise ValueError(f"SSIM score out of [-1, 1]: {self.score}")


def _gaussian_kernel(sigma: float, support: int) -> np.ndarray:
    half = support // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    kernel = np.exp(-(x**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def _local_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, kernel, axis=0, mode="reflect")
    return ndimage.correlate1d(out, kernel, axis=1, mode="reflect")


def _rank_normalize(plane: np.ndarray) -> np.ndarray:
    """Fractional ranks in [0, 1]; constant planes map to 0.5."""
    flat = plane.ravel()
    ranks = stats.rankdata(flat, method="average")
    if flat.size == 1:
        return np.full_like(plane, 0.5, dtype=np.float64)
    return ((ranks - 1.0) / (flat.size - 1.0)).reshape(plane.shape)


def local_ssim_map(
    x: np.ndarray,
    y: np.ndarray,
    params: SsimParams = SsimParams(),
    dynamic_range: float = 1.0,
) -> np.ndarray:
    """Local SSIM of two equally-shaped 2D planes; values lie in [-1, 1]."""
    if x.shape != y.shape:
        raise GridMismatchError(f"plane shapes differ: {x.shape} vs {y.shape}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    kernel = _gaussian_kernel(params.sigma, params.support)

    mu_x = _local_mean(x, kernel)
    mu_y = _local_mean(y, kernel)
    # clamp tiny negative variances from floating-point cancellation
    var_x = np.maximum(_local_mean(x * x, kernel) - mu_x * mu_x, 0.0)
    var_y = np.maximum(_local_mean(y * y, kernel) - mu_y * mu_y, 0.0)
    cov_xy = _local_mean(x * y, kernel) - mu_x * mu_y

    c1 = (params.k1 * dynamic_range) ** 2
    c2 = (params.k2 * dynamic_range) ** 2
    luminance = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    contrast_structure = (2.0 * cov_xy + c2) / (var_x + var_y + c2)
    return np.clip(luminance * contrast_structure, -1.0, 1.0)


def _prepare_planes(
    x: np.ndarray, y: np.ndarray, params: SsimParams
) -> tuple[np.ndarray, np.ndarray, float]:
    if params.normalization == "rank":
        return _rank_normalize(x), _rank_normalize(y), 1.0
    lo, hi = params.clamp
    x = np.clip(x, lo, hi)
    y = np.clip(y, lo, hi)
    if params.dynamic_range is not None:
        span = params.dynamic_range
    else:
        span = float(max(x.max(), y.max()) - min(x.min(), y.min()))
    return x, y, max(span, 1e-6)


def valid_slice_mask(registered: Volume) -> np.ndarray:
    """Slices inside the acquired z-extent.

    After resampling, out-of-field slices are uniformly at the source
    minimum; any slice with structure above that floor counts as acquired.
    """
    floor = float(np.nanmin(registered.data))
    return np.asarray(
        [bool(np.any(registered.data[:, :, z] > floor)) for z in range(registered.dims[2])]
    )


def compute_ssim(
    registered: Volume,
    template: Volume,
    params: SsimParams = SsimParams(),
    valid_slices: Optional[np.ndarray] = None,
    subgroup: Optional[Subgroup] = None,
) -> SsimScore:
    """Mean per-slice SSIM over the series' acquired slices.

    Both volumes must share the template grid. Slices the series never
    acquired are excluded so that e.g. a skull-base series is not penalized
    for absent vault anatomy.
    """
    if registered.dims != template.dims or not np.allclose(
        registered.affine, template.affine, atol=1e-3
    ):
        raise GridMismatchError(
            f"registered and template grids differ: "
            f"{registered.dims} vs {template.dims}"
        )
    if valid_slices is None:
        valid_slices = valid_slice_mask(registered)
    valid_slices = np.asarray(valid_slices, dtype=bool)
    if valid_slices.shape != (registered.dims[2],):
        raise ValueError("valid_slices must have one entry per slice")
    if not valid_slices.any():
        raise ValueError(f"series {registered.series_id!r} has an empty valid region")

    slice_means = []
    for z in np.flatnonzero(valid_slices):
        x, y, span = _prepare_planes(
            registered.data[:, :, z], template.data[:, :, z], params
        )
        slice_means.append(float(local_ssim_map(x, y, params, span).mean()))
    return SsimScore(
        series_id=registered.series_id,
        score=float(np.mean(slice_means)),
        template_id=template.series_id,
        subgroup=subgroup,
    )


@dataclass(frozen=True)
class FlagPolicy:
    percentile: float = 0.05
    all_inspect: frozenset = frozenset({Subgroup.MEDIAL, Subgroup.INCOMPLETE})

    def __post_init__(self):
        if not 0.0 <= self.percentile <= 1.0:
            raise ValueError("percentile must be in [0, 1]")


def flag_for_inspection(
    scores: Sequence[SsimScore], policy: FlagPolicy = FlagPolicy()
) -> dict[str, Flag]:
    """Per-series inspection flags.

    Medial and incomplete series are always inspected; the other subgroups
    send their ceil(percentile * n) lowest scores, ties broken toward
    inspecting.
    """
    by_subgroup: dict[Subgroup, list[SsimScore]] = {}
    for score in scores:
        if score.subgroup is None:
            raise ValueError(f"score for {score.series_id!r} has no subgroup")
        by_subgroup.setdefault(score.subgroup, []).append(score)

    flags: dict[str, Flag] = {}
    for subgroup, members in by_subgroup.items():
        if subgroup in policy.all_inspect:
            for s in members:
                flags[s.series_id] = Flag.INSPECT
            continue
        k = math.ceil(policy.percentile * len(members))
        if k <= 0:
            for s in members:
                flags[s.series_id] = Flag.AUTO_ACCEPT
            continue
        cutoff = sorted(s.score for s in members)[k - 1]
        for s in members:
            flags[s.series_id] = Flag.INSPECT if s.score <= cutoff else Flag.AUTO_ACCEPT
    return flags


@dataclass(frozen=True)
class SubgroupHistogram:
    bin_edges: np.ndarray
    inspected: np.ndarray
    accepted: np.ndarray


def ssim_histogram(
    scores: Sequence[SsimScore],
    flags: Mapping[str, Flag],
    bins: int = 40,
    value_range: tuple[float, float] = (-1.0, 1.0),
) -> dict[Subgroup, SubgroupHistogram]:
    """Per-subgroup score histograms split by inspected/accepted partition."""
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    out: dict[Subgroup, SubgroupHistogram] = {}
    for subgroup in Subgroup:
        members = [s for s in scores if s.subgroup == subgroup]
        if not members:
            continue
        inspected = [s.score for s in members if flags[s.series_id] == Flag.INSPECT]
        accepted = [s.score for s in members if flags[s.series_id] == Flag.AUTO_ACCEPT]
        out[subgroup] = SubgroupHistogram(
            bin_edges=edges,
            inspected=np.histogram(inspected, bins=edges)[0],
            accepted=np.histogram(accepted, bins=edges)[0],
        )
    return out


def export_scores_csv(
    scores: Sequence[SsimScore], flags: Mapping[str, Flag], path: str | Path
) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["series_id", "subgroup", "template_id", "score", "flag"])
        for s in scores:
            writer.writerow(
                [
                    s.series_id,
                    s.subgroup.value if s.subgroup else "",
                    s.template_id,
                    f"{s.score:.6f}",
                    flags[s.series_id].value,
                ]
            )


def export_histograms_json(
    histograms: Mapping[Subgroup, SubgroupHistogram], path: str | Path
) -> None:
    doc = {
        subgroup.value: {
            "bin_edges": [float(e) for e in h.bin_edges],
            "inspected": [int(c) for c in h.inspected],
            "accepted": [int(c) for c in h.accepted],
        }
        for subgroup, h in histograms.items()
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

"""Batched superimposition of thresholded binary masks for anomaly inspection.

Registered series are binarized above a HU threshold (default +100, keeping
calcifications) and summed voxel-wise into count volumes of up to 100 series,
so one scroll through a batch inspects them all in parallel. Member masks are
kept bit-packed per slice; per-voxel attribution is materialized on demand
rather than stored volumetrically. Inspector verdicts go to an append-only
JSON-lines log; on replay, the last verdict per series wins.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .nifti import read_nifti, write_nifti
from .volume import BinaryMask, GridMismatchError, Volume

DEFAULT_BATCH_SIZE = 100
DEFAULT_HU_THRESHOLD = 100.0

VERDICT_ACCEPT = "accept"
VERDICT_REJECT = "reject"


@dataclass(frozen=True)
class ThresholdParams:
    thresh: float = DEFAULT_HU_THRESHOLD

    def __post_init__(self):
        if not np.isfinite(self.thresh):
            raise ValueError("threshold must be finite")


def binarize(registered: Volume, params: ThresholdParams = ThresholdParams()) -> BinaryMask:
    """Mask of voxels strictly above the threshold."""
    return BinaryMask(
        data=registered.data > params.thresh,
        affine=registered.affine,
        source_series_id=registered.series_id,
    )


class _PackedMask:
    """Bit-packed mask, one packed row per slice for cheap slice access."""

    def __init__(self, mask: np.ndarray):
        x, y, z = mask.shape
        self.dims = (x, y, z)
        planes = mask.transpose(2, 0, 1).reshape(z, x * y)
        self.packed = np.packbits(planes, axis=1)

    def plane(self, z: int) -> np.ndarray:
        x, y, _ = self.dims
        bits = np.unpackbits(self.packed[z], count=x * y)
        return bits.reshape(x, y)

    def bit(self, x: int, y: int, z: int) -> bool:
        flat = x * self.dims[1] + y
        byte = self.packed[z, flat >> 3]
        return bool((byte >> (7 - (flat & 7))) & 1)


@dataclass
class SuperimposedBatch:
    """Count volume plus per-voxel attribution over the member masks."""

    batch_id: str
    members: list[str]
    count_volume: np.ndarray  # uint16, [x, y, z]
    affine: np.ndarray
    _packed: list[_PackedMask] = field(default_factory=list, repr=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.count_volume.shape

    def _check_bounds(self, voxel: tuple[int, int, int]) -> tuple[int, int, int]:
        x, y, z = (int(v) for v in voxel)
        for value, extent in zip((x, y, z), self.dims):
            if not 0 <= value < extent:
                raise IndexError(f"voxel {voxel} outside grid {self.dims}")
        return x, y, z

    def query_voxel(self, voxel: tuple[int, int, int]) -> list[str]:
        """Series whose mask is set at the voxel, in member order."""
        x, y, z = self._check_bounds(voxel)
        if not self._packed:
            raise ValueError("batch has no attribution masks loaded")
        flat = x * self.dims[1] + y
        byte_idx, shift = flat >> 3, 7 - (flat & 7)
        stacked = np.array([p.packed[z, byte_idx] for p in self._packed])
        hits = (stacked >> shift) & 1
        return [self.members[i] for i in np.flatnonzero(hits)]

    def attribution_slice(self, z: int) -> dict[tuple[int, int], tuple[int, ...]]:
        """Member indices per set voxel of slice z; keys only where count > 0."""
        self._check_bounds((0, 0, z))
        planes = np.stack([p.plane(z) for p in self._packed])  # [member, x, y]
        out: dict[tuple[int, int], tuple[int, ...]] = {}
        for x, y in zip(*np.nonzero(planes.any(axis=0))):
            hits = np.flatnonzero(planes[:, x, y])
            out[(int(x), int(y))] = tuple(int(i) for i in hits)
        return out

    def recount(self) -> np.ndarray:
        """Recompute counts from the packed masks (the query_voxel path)."""
        total = np.zeros(self.dims, dtype=np.uint16)
        for z in range(self.dims[2]):
            for packed in self._packed:
                total[:, :, z] += packed.plane(z).astype(np.uint16)
        return total


def build_batch(
    masks: Sequence[BinaryMask],
    batch_id: str,
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> SuperimposedBatch:
    """Voxel-wise sum of up to `batch_size` masks sharing one grid."""
    if not masks:
        raise ValueError("cannot build an empty batch")
    if len(masks) > batch_size:
        raise ValueError(f"batch of {len(masks)} exceeds batch size {batch_size}")
    reference = masks[0].grid
    counts = np.zeros(reference.dims, dtype=np.uint16)
    packed = []
    for mask in masks:
        if not mask.grid.matches(reference):
            raise GridMismatchError(
                f"mask {mask.source_series_id!r} is not on the shared grid"
            )
        counts += mask.data.astype(np.uint16)
        packed.append(_PackedMask(mask.data))
    return SuperimposedBatch(
        batch_id=batch_id,
        members=[m.source_series_id for m in masks],
        count_volume=counts,
        affine=np.asarray(masks[0].affine, dtype=np.float64),
        _packed=packed,
    )


def save_batch(batch: SuperimposedBatch, out_dir: str | Path) -> None:
    """Persist as count volume (NIfTI, template grid) plus members JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_nifti(
        out_dir / f"{batch.batch_id}.nii.gz",
        batch.count_volume.astype(np.uint16),
        batch.affine,
        dtype=np.uint16,
    )
    doc = {
        "batch_id": batch.batch_id,
        "members": batch.members,
        "dims": list(batch.dims),
    }
    (out_dir / f"{batch.batch_id}.members.json").write_text(
        json.dumps(doc, indent=2) + "\n"
    )


def load_batch(
    out_dir: str | Path,
    batch_id: str,
    masks: Optional[Sequence[BinaryMask]] = None,
) -> SuperimposedBatch:
    """Load a persisted batch; pass member masks to restore attribution."""
    out_dir = Path(out_dir)
    counts, affine = read_nifti(out_dir / f"{batch_id}.nii.gz")
    doc = json.loads((out_dir / f"{batch_id}.members.json").read_text())
    packed = []
    if masks is not None:
        by_series = {m.source_series_id: m for m in masks}
        packed = [_PackedMask(by_series[sid].data) for sid in doc["members"]]
    return SuperimposedBatch(
        batch_id=doc["batch_id"],
        members=list(doc["members"]),
        count_volume=counts.astype(np.uint16),
        affine=affine,
        _packed=packed,
    )


@dataclass(frozen=True)
class Annotation:
    timestamp: str
    inspector: str
    batch_id: str
    series_id: str
    voxel: tuple[int, int, int]
    verdict: str
    comment: str = ""

    def __post_init__(self):
        if self.verdict not in (VERDICT_ACCEPT, VERDICT_REJECT):
            raise ValueError(f"verdict must be accept|reject, got {self.verdict!r}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "timestamp": self.timestamp,
                "inspector": self.inspector,
                "batch_id": self.batch_id,
                "series_id": self.series_id,
                "voxel": list(self.voxel),
                "verdict": self.verdict,
                "comment": self.comment,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "Annotation":
        doc = json.loads(line)
        return cls(
            timestamp=doc["timestamp"],
            inspector=doc["inspector"],
            batch_id=doc["batch_id"],
            series_id=doc["series_id"],
            voxel=tuple(int(v) for v in doc["voxel"]),
            verdict=doc["verdict"],
            comment=doc.get("comment", ""),
        )


class AnnotationLog:
    """Append-only JSON-lines log of inspector decisions."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, annotation: Annotation) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as f:
            f.write(annotation.to_json() + "\n")
            f.flush()

    def __iter__(self) -> Iterator[Annotation]:
        if not self.path.exists():
            return
        with open(self.path) as f:
            for line in f:
                line = line.strip()
                if line:
                    yield Annotation.from_json(line)

    def final_verdicts(self) -> dict[str, Annotation]:
        """Last verdict per series; replaying the log is deterministic."""
        verdicts: dict[str, Annotation] = {}
        for annotation in self:
            verdicts[annotation.series_id] = annotation
        return verdicts

    def rejected_series(self) -> list[str]:
        return [
            sid
            for sid, annotation in self.final_verdicts().items()
            if annotation.verdict == VERDICT_REJECT
        ]


def record_annotation(
    log: AnnotationLog,
    batch: SuperimposedBatch,
    series_id: str,
    voxel: tuple[int, int, int],
    verdict: str,
    comment: str = "",
    inspector: str = "inspector",
    timestamp: Optional[str] = None,
) -> Annotation:
    """Validate against the batch and append durably."""
    if series_id not in batch.members:
        raise ValueError(f"series {series_id!r} is not a member of batch {batch.batch_id!r}")
    batch._check_bounds(voxel)
    annotation = Annotation(
        timestamp=timestamp or datetime.now(timezone.utc).isoformat(),
        inspector=inspector,
        batch_id=batch.batch_id,
        series_id=series_id,
        voxel=tuple(int(v) for v in voxel),
        verdict=verdict,
        comment=comment,
    )
    log.append(annotation)
    return annotation

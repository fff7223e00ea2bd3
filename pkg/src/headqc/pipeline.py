"""Staged QC pipeline: ingest, filter, register, score, inspect, retain.

Series flow through the stages of the summary ledger (NIfTI conversion gate,
axial restriction, localiser removal, affine co-registration via an external
command, grouped similarity QC, superimposition QC, ROI retention). A series
rejected at any stage is never touched by later stages. Superimposition QC
either replays an existing annotation log or pauses for interactive
inspection through the HTTP service.
"""

from __future__ import annotations

import concurrent.futures
import csv
import json
import logging
import shlex
import shutil
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from . import completeness, presence, roi, ssim, superimpose
from .ledger import PipelineLedger, Report, emit_report
from .volume import (
    AffineTransform,
    Orientation,
    Volume,
    classify_orientation,
    detect_localiser,
    load_volume,
    save_mask,
    save_volume,
)

logger = logging.getLogger(__name__)

TEMPLATE_YOUNGER = "younger_65_70"
TEMPLATE_OLDER = "older_75_80"

STAGE_SOURCE = "Source CT series"
STAGE_LABELS = {
    "conversion": "Conversion to NIfTI",
    "axial": "Limit to axial series",
    "localiser": "Remove localiser series",
    "registration": "Affine co-registration",
    "similarity_qc": "Similarity QC",
    "superimposition_qc": "Superimposition QC",
    "roi_coverage": "Containing >=1 ROI",
}
STAGE_ORDER = tuple(STAGE_LABELS)

STATUS_PENDING = "pending"
STATUS_PASSED = "passed"


class RegistrationError(Exception):
    """External registration command failed or produced invalid outputs."""


@dataclass
class SeriesRecord:
    """Identity, metadata, and QC state of one series moving through the run."""

    series_id: str
    patient_id: str
    source_path: str
    age: Optional[float] = None
    kernel: Optional[str] = None
    image_type: tuple[str, ...] = ()
    stage_status: dict[str, str] = field(
        default_factory=lambda: {stage: STATUS_PENDING for stage in STAGE_ORDER}
    )
    template_id: Optional[str] = None
    subgroup: Optional[completeness.Subgroup] = None
    ssim_score: Optional[float] = None
    flag: Optional[ssim.Flag] = None
    rejected_stage: Optional[str] = None
    rejected_reason: Optional[str] = None

    @property
    def rejected(self) -> bool:
        return self.rejected_stage is not None

    def mark_passed(self, stage: str) -> None:
        if self.rejected:
            raise RuntimeError(
                f"series {self.series_id} was rejected at {self.rejected_stage} "
                f"and must not reach {stage}"
            )
        self.stage_status[stage] = STATUS_PASSED

    def mark_rejected(self, stage: str, reason: str) -> None:
        self.stage_status[stage] = f"rejected:{reason}"
        self.rejected_stage = stage
        self.rejected_reason = reason


@dataclass
class PipelineConfig:
    template_dir: str
    roi_dir: str
    out_dir: str
    registration_cmd: str
    batch_size: int = superimpose.DEFAULT_BATCH_SIZE
    ssim_percentile: float = 0.05
    presence_tolerance: float = 0.05
    hu_threshold: float = superimpose.DEFAULT_HU_THRESHOLD
    age_cut: float = 73.0
    default_template: str = TEMPLATE_OLDER
    replay_annotations: Optional[str] = None
    ssim_review: Optional[str] = None
    workers: int = 1

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "PipelineConfig":
        path = Path(path)
        if path.suffix == ".toml":
            import tomllib

            doc = tomllib.loads(path.read_text())
        else:
            doc = json.loads(path.read_text())
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**doc)


def load_manifest(path: str | Path) -> list[SeriesRecord]:
    """Read series seeds from CSV or JSON-lines.

    CSV columns: series_id, patient_id, path, age, kernel, image_type
    (pipe-separated tags). JSONL objects use the same keys with image_type
    as a list.
    """
    path = Path(path)
    records = []
    if path.suffix in (".jsonl", ".ndjson"):
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            doc = json.loads(line)
            records.append(
                SeriesRecord(
                    series_id=doc["series_id"],
                    patient_id=doc["patient_id"],
                    source_path=doc["path"],
                    age=float(doc["age"]) if doc.get("age") not in (None, "") else None,
                    kernel=doc.get("kernel"),
                    image_type=tuple(doc.get("image_type", [])),
                )
            )
    else:
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                tags = row.get("image_type", "")
                records.append(
                    SeriesRecord(
                        series_id=row["series_id"],
                        patient_id=row["patient_id"],
                        source_path=row["path"],
                        age=float(row["age"]) if row.get("age") else None,
                        kernel=row.get("kernel") or None,
                        image_type=tuple(t for t in tags.split("|") if t),
                    )
                )
    if not records:
        raise ValueError(f"manifest {path} holds no series")
    return records


def select_template(age: Optional[float], config: PipelineConfig) -> str:
    """Younger template below the age cut, older at or above; default when absent."""
    if age is None:
        logger.warning(
            "series without age: defaulting to template %s", config.default_template
        )
        return config.default_template
    return TEMPLATE_YOUNGER if age < config.age_cut else TEMPLATE_OLDER


def invoke_registration(
    series: Volume,
    template: Volume,
    command_template: str,
    work_dir: str | Path,
    series_path: Optional[str | Path] = None,
    template_path: Optional[str | Path] = None,
) -> tuple[Volume, AffineTransform]:
    """Run the external affine registration command.

    `command_template` must contain {input}, {reference}, {output}, and
    {transform} placeholders. The command is expected to write the registered
    volume on the template grid and a whitespace 4x4 native-to-template world
    transform. Failures raise RegistrationError.
    """
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    if series_path is None:
        series_path = work_dir / "input.nii.gz"
        save_volume(series_path, series)
    if template_path is None:
        template_path = work_dir / "reference.nii.gz"
        save_volume(template_path, template)
    output_path = work_dir / "registered.nii.gz"
    transform_path = work_dir / "transform.mat"

    command = command_template.format(
        input=str(series_path),
        reference=str(template_path),
        output=str(output_path),
        transform=str(transform_path),
    )
    try:
        result = subprocess.run(
            shlex.split(command), capture_output=True, text=True, timeout=600
        )
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise RegistrationError(f"registration command failed to run: {exc}") from exc
    if result.returncode != 0:
        raise RegistrationError(
            f"registration exited {result.returncode}: {result.stderr.strip()[:500]}"
        )
    if not output_path.exists() or not transform_path.exists():
        raise RegistrationError("registration command left no output/transform file")
    try:
        registered = load_volume(output_path, series_id=series.series_id)
        transform = AffineTransform.from_file(transform_path)
    except Exception as exc:
        raise RegistrationError(f"invalid registration outputs: {exc}") from exc
    if not registered.grid.matches(template.grid):
        raise RegistrationError(
            f"registered volume is not on the template grid "
            f"({registered.dims} vs {template.dims})"
        )
    return registered, transform


@dataclass
class RunResult:
    ledger: PipelineLedger
    report: Optional[Report]
    out_dir: Path
    pending_annotations: bool = False
    records: list[SeriesRecord] = field(default_factory=list)


def _surviving(records: Sequence[SeriesRecord]) -> list[SeriesRecord]:
    return [r for r in records if not r.rejected]


def _patients(records: Sequence[SeriesRecord]) -> int:
    return len({r.patient_id for r in records if not r.rejected})


def _checkpoint(records: Sequence[SeriesRecord], out_dir: Path, stage: str) -> None:
    doc = [
        {"series_id": r.series_id, "status": r.stage_status[stage]}
        for r in records
    ]
    path = out_dir / "checkpoints" / f"{stage}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _close_stage(
    ledger: PipelineLedger,
    records: Sequence[SeriesRecord],
    out_dir: Path,
    stage: str,
) -> None:
    for record in _surviving(records):
        if record.stage_status[stage] == STATUS_PENDING:
            record.mark_passed(stage)
    ledger.append_stage(STAGE_LABELS[stage], len(_surviving(records)), _patients(records))
    _checkpoint(records, out_dir, stage)


def run_pipeline(records: Sequence[SeriesRecord], config: PipelineConfig) -> RunResult:
    """Run every stage over the manifest and emit the rejection ledger.

    Without `replay_annotations`, the run builds and persists superimposition
    batches, then stops for interactive inspection (resume by re-running with
    the annotation log). Stage-level tool crashes reject the series with
    reason tool_failure and the run continues.
    """
    if not records:
        raise ValueError("manifest is empty")
    records = list(records)
    out_dir = Path(config.out_dir)
    for sub in ("registered", "transforms", "masks", "batches", "tables", "work"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    ledger = PipelineLedger()
    ledger.append_stage(STAGE_SOURCE, len(records), _patients(records))

    # Conversion gate: the series must load as a valid 3D NIfTI volume.
    volumes: dict[str, Volume] = {}
    for record in records:
        try:
            volumes[record.series_id] = load_volume(
                record.source_path, series_id=record.series_id
            )
        except Exception as exc:
            record.mark_rejected("conversion", "conversion_failure")
            ledger.reject(record.series_id, "conversion", "conversion_failure", str(exc)[:200])
    _close_stage(ledger, records, out_dir, "conversion")

    for record in _surviving(records):
        if classify_orientation(volumes[record.series_id]) != Orientation.AXIAL:
            record.mark_rejected("axial", "non_axial")
            ledger.reject(record.series_id, "axial", "non_axial")
    _close_stage(ledger, records, out_dir, "axial")

    for record in _surviving(records):
        if detect_localiser(volumes[record.series_id], record.image_type):
            record.mark_rejected("localiser", "localiser")
            ledger.reject(record.series_id, "localiser", "localiser")
    _close_stage(ledger, records, out_dir, "localiser")

    # Affine co-registration through the external command.
    template_dir = Path(config.template_dir)
    templates: dict[str, Volume] = {}
    template_paths: dict[str, Path] = {}
    for record in _surviving(records):
        tid = select_template(record.age, config)
        record.template_id = tid
        if tid not in templates:
            tpath = template_dir / f"{tid}.nii.gz"
            templates[tid] = load_volume(tpath, series_id=tid)
            template_paths[tid] = tpath

    registered: dict[str, Volume] = {}
    transforms: dict[str, AffineTransform] = {}

    def _register(record: SeriesRecord):
        return invoke_registration(
            volumes[record.series_id],
            templates[record.template_id],
            config.registration_cmd,
            work_dir=out_dir / "work" / record.series_id,
            series_path=record.source_path,
            template_path=template_paths[record.template_id],
        )

    to_register = _surviving(records)
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(config.workers, 1)) as pool:
        futures = [(record, pool.submit(_register, record)) for record in to_register]
        for record, future in futures:
            try:
                reg_volume, transform = future.result()
            except RegistrationError as exc:
                record.mark_rejected("registration", "registration_failure")
                ledger.reject(
                    record.series_id, "registration", "registration_failure", str(exc)[:200]
                )
                continue
            registered[record.series_id] = reg_volume
            transforms[record.series_id] = transform
            save_volume(out_dir / "registered" / f"{record.series_id}.nii.gz", reg_volume)
            transform.to_file(out_dir / "transforms" / f"{record.series_id}.mat")
    _close_stage(ledger, records, out_dir, "registration")

    # Similarity QC: subgroup from the z-profile, SSIM vs the template,
    # grouped flagging; flagged series are rejected unless reviewed as accept.
    presence_params = presence.PresenceParams(t=config.presence_tolerance)
    profiles: list[presence.ZProfile] = []
    details: list[tuple[str, completeness.CompletenessResult]] = []
    scores: list[ssim.SsimScore] = []
    for record in _surviving(records):
        template = templates[record.template_id]
        z = template.slice_world_z()
        z_range = (float(z.min()), float(z.max()))
        try:
            profile = presence.presence_profile(registered[record.series_id], presence_params)
            detail = completeness.classify_detail(profile, z_range)
            score = ssim.compute_ssim(
                registered[record.series_id],
                template,
                subgroup=detail.subgroup,
            )
        except Exception as exc:
            record.mark_rejected("similarity_qc", "tool_failure")
            ledger.reject(
                record.series_id,
                "similarity_qc",
                "tool_failure",
                f"similarity_qc: {str(exc)[:200]}",
            )
            continue
        record.subgroup = detail.subgroup
        record.ssim_score = score.score
        profiles.append(profile)
        details.append((record.series_id, detail))
        scores.append(score)

    policy = ssim.FlagPolicy(percentile=config.ssim_percentile)
    flags = ssim.flag_for_inspection(scores, policy)
    review: dict[str, str] = {}
    if config.ssim_review:
        review = json.loads(Path(config.ssim_review).read_text())
    for record in _surviving(records):
        record.flag = flags.get(record.series_id)
        if record.flag == ssim.Flag.INSPECT and review.get(record.series_id) != "accept":
            record.mark_rejected("similarity_qc", "similarity_qc")
            ledger.reject(record.series_id, "similarity_qc", "similarity_qc")
    _close_stage(ledger, records, out_dir, "similarity_qc")

    tables = out_dir / "tables"
    presence.export_profiles_csv(profiles, tables / "profiles.csv")
    completeness.export_subgroups_csv(details, tables / "subgroups.csv")
    ssim.export_scores_csv(scores, flags, tables / "scores.csv")
    ssim.export_histograms_json(
        ssim.ssim_histogram(scores, flags), tables / "ssim_histograms.json"
    )
    heatmap = presence.presence_heatmap(profiles)
    heatmap.to_csv(tables / "presence_heatmap.csv")
    heatmap.metadata_json(tables / "presence_heatmap.json")

    # Superimposition QC: thresholded masks summed into inspection batches.
    threshold = superimpose.ThresholdParams(thresh=config.hu_threshold)
    survivors = _surviving(records)
    masks = {}
    for record in survivors:
        mask = superimpose.binarize(registered[record.series_id], threshold)
        masks[record.series_id] = mask
        save_mask(out_dir / "masks" / f"{record.series_id}.nii.gz", mask)

    batch_of: dict[str, str] = {}
    for start in range(0, len(survivors), config.batch_size):
        chunk = survivors[start : start + config.batch_size]
        batch_id = f"batch_{start // config.batch_size:03d}"
        batch = superimpose.build_batch(
            [masks[r.series_id] for r in chunk], batch_id, config.batch_size
        )
        superimpose.save_batch(batch, out_dir / "batches")
        for r in chunk:
            batch_of[r.series_id] = batch_id

    (out_dir / "templates").mkdir(exist_ok=True)
    for tid, tpath in template_paths.items():
        shutil.copyfile(tpath, out_dir / "templates" / f"{tid}.nii.gz")
    index = {
        r.series_id: {
            "patient_id": r.patient_id,
            "template_id": r.template_id,
            "batch_id": batch_of[r.series_id],
            "registered": f"registered/{r.series_id}.nii.gz",
            "mask": f"masks/{r.series_id}.nii.gz",
        }
        for r in survivors
    }
    (out_dir / "series_index.json").write_text(
        json.dumps(index, indent=2, sort_keys=True) + "\n"
    )

    if config.replay_annotations is None:
        logger.info(
            "batches persisted to %s; serve them for inspection and re-run with "
            "--replay-annotations",
            out_dir / "batches",
        )
        return RunResult(
            ledger=ledger,
            report=None,
            out_dir=out_dir,
            pending_annotations=True,
            records=records,
        )

    log = superimpose.AnnotationLog(config.replay_annotations)
    rejected_ids = set(log.rejected_series())
    for record in _surviving(records):
        if record.series_id in rejected_ids:
            record.mark_rejected("superimposition_qc", "superimposition_qc")
            ledger.reject(record.series_id, "superimposition_qc", "superimposition_qc")
    _close_stage(ledger, records, out_dir, "superimposition_qc")

    # ROI retention: at least half of one artery ROI inside the native grid.
    roi_sets = {
        tid: roi.load_roi_set(config.roi_dir, tid, templates[tid].grid)
        for tid in sorted(templates)
    }
    coverages: list[roi.RoiCoverage] = []
    for record in _surviving(records):
        native = volumes[record.series_id]
        try:
            series_coverages = []
            for definition in roi_sets[record.template_id]:
                native_roi = roi.transfer_roi(
                    definition, transforms[record.series_id], native.grid
                )
                series_coverages.append(
                    roi.roi_coverage(native_roi, native, roi_id=definition.roi_id)
                )
        except Exception as exc:
            record.mark_rejected("roi_coverage", "tool_failure")
            ledger.reject(
                record.series_id,
                "roi_coverage",
                "tool_failure",
                f"roi_coverage: {str(exc)[:200]}",
            )
            continue
        coverages.extend(series_coverages)
        if not roi.series_retained(series_coverages):
            record.mark_rejected("roi_coverage", "roi_coverage")
            ledger.reject(record.series_id, "roi_coverage", "roi_coverage")
    _close_stage(ledger, records, out_dir, "roi_coverage")
    roi.export_coverage_csv(coverages, tables / "roi_coverage.csv")

    report = emit_report(ledger)
    report.write(out_dir)
    return RunResult(
        ledger=ledger, report=report, out_dir=out_dir, records=records
    )

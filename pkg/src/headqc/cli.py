"""Command-line entry points for the QC pipeline."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import completeness, presence, ssim as ssim_mod, superimpose, pipeline
from .ledger import PipelineLedger, emit_report
from .volume import load_volume


def _add_pipeline_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", required=True, help="series manifest (CSV or JSONL)")
    parser.add_argument("--config", help="JSON/TOML config file mirroring the flags")
    parser.add_argument("--template-dir", help="directory with <template_id>.nii.gz")
    parser.add_argument("--roi-dir", help="directory with <template_id>/<roi_id>.nii.gz")
    parser.add_argument("--out-dir", help="pipeline output directory")
    parser.add_argument(
        "--registration-cmd",
        help="command template with {input} {reference} {output} {transform}",
    )
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--ssim-percentile", type=float, default=None)
    parser.add_argument("--presence-tolerance", type=float, default=None)
    parser.add_argument("--hu-threshold", type=float, default=None)
    parser.add_argument("--replay-annotations", help="annotation log to replay")
    parser.add_argument("--ssim-review", help="JSON map of inspected series to accept/reject")
    parser.add_argument("--workers", type=int, default=None)


def _build_config(args: argparse.Namespace) -> pipeline.PipelineConfig:
    overrides = {
        "template_dir": args.template_dir,
        "roi_dir": args.roi_dir,
        "out_dir": args.out_dir,
        "registration_cmd": args.registration_cmd,
        "batch_size": args.batch_size,
        "ssim_percentile": args.ssim_percentile,
        "presence_tolerance": args.presence_tolerance,
        "hu_threshold": args.hu_threshold,
        "replay_annotations": args.replay_annotations,
        "ssim_review": args.ssim_review,
        "workers": args.workers,
    }
    if args.config:
        return pipeline.PipelineConfig.from_file(args.config, **overrides)
    required = ("template_dir", "roi_dir", "out_dir", "registration_cmd")
    missing = [name for name in required if overrides.get(name) is None]
    if missing:
        raise SystemExit(f"missing required flags without --config: {missing}")
    return pipeline.PipelineConfig(
        **{k: v for k, v in overrides.items() if v is not None}
    )


def cmd_run(args: argparse.Namespace) -> int:
    config = _build_config(args)
    records = pipeline.load_manifest(args.manifest)
    result = pipeline.run_pipeline(records, config)
    if result.pending_annotations:
        print(
            "superimposition batches built; inspect with `headqc serve "
            f"--data-dir {result.out_dir}` and re-run with --replay-annotations"
        )
        return 0
    print(result.report.render_text())
    return 0


def cmd_profile(args: argparse.Namespace) -> int:
    records = pipeline.load_manifest(args.manifest)
    params = presence.PresenceParams(t=args.presence_tolerance)
    profiles = []
    for record in records:
        volume = load_volume(record.source_path, series_id=record.series_id)
        profiles.append(presence.presence_profile(volume, params))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    presence.export_profiles_csv(profiles, out_dir / "profiles.csv")
    heatmap = presence.presence_heatmap(profiles)
    heatmap.to_csv(out_dir / "presence_heatmap.csv")
    heatmap.metadata_json(out_dir / "presence_heatmap.json")
    print(f"wrote {len(profiles)} profiles to {out_dir}")
    return 0


def cmd_classify(args: argparse.Namespace) -> int:
    records = pipeline.load_manifest(args.manifest)
    template = load_volume(args.template)
    z = template.slice_world_z()
    z_range = (float(z.min()), float(z.max()))
    rows = []
    for record in records:
        volume = load_volume(record.source_path, series_id=record.series_id)
        profile = presence.presence_profile(
            volume, presence.PresenceParams(t=args.presence_tolerance)
        )
        rows.append((record.series_id, completeness.classify_detail(profile, z_range)))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    completeness.export_subgroups_csv(rows, out_dir / "subgroups.csv")
    print(f"classified {len(rows)} series -> {out_dir / 'subgroups.csv'}")
    return 0


def cmd_ssim(args: argparse.Namespace) -> int:
    records = pipeline.load_manifest(args.manifest)
    template = load_volume(args.template, series_id=Path(args.template).stem)
    z = template.slice_world_z()
    z_range = (float(z.min()), float(z.max()))
    scores = []
    for record in records:
        volume = load_volume(record.source_path, series_id=record.series_id)
        profile = presence.presence_profile(volume)
        subgroup = completeness.classify_completeness(profile, z_range)
        scores.append(ssim_mod.compute_ssim(volume, template, subgroup=subgroup))
    flags = ssim_mod.flag_for_inspection(
        scores, ssim_mod.FlagPolicy(percentile=args.ssim_percentile)
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ssim_mod.export_scores_csv(scores, flags, out_dir / "scores.csv")
    ssim_mod.export_histograms_json(
        ssim_mod.ssim_histogram(scores, flags), out_dir / "ssim_histograms.json"
    )
    print(f"scored {len(scores)} series -> {out_dir / 'scores.csv'}")
    return 0


def cmd_superimpose(args: argparse.Namespace) -> int:
    records = pipeline.load_manifest(args.manifest)
    threshold = superimpose.ThresholdParams(thresh=args.hu_threshold)
    masks = []
    for record in records:
        volume = load_volume(record.source_path, series_id=record.series_id)
        masks.append(superimpose.binarize(volume, threshold))
    out_dir = Path(args.out_dir)
    for start in range(0, len(masks), args.batch_size):
        batch_id = f"batch_{start // args.batch_size:03d}"
        batch = superimpose.build_batch(
            masks[start : start + args.batch_size], batch_id, args.batch_size
        )
        superimpose.save_batch(batch, out_dir / "batches")
        print(f"built {batch_id} with {len(batch.members)} members")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.data_dir, read_only=args.read_only)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    doc = json.loads(Path(args.ledger).read_text())
    ledger = PipelineLedger.from_rows(
        [
            (
                row["name"],
                row["series_remaining"],
                row["series_change"],
                row["patients_remaining"],
                row["patients_change"],
            )
            for row in doc["stages"]
        ]
    )
    report = emit_report(ledger)
    if args.out_dir:
        report.write(args.out_dir)
    print(report.render_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="headqc",
        description="Quality control pipeline for co-registered CT head volumes",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full staged pipeline")
    _add_pipeline_args(run)
    run.set_defaults(func=cmd_run)

    profile = sub.add_parser("profile", help="information presence profiles + heat map")
    profile.add_argument("--manifest", required=True)
    profile.add_argument("--out-dir", required=True)
    profile.add_argument("--presence-tolerance", type=float, default=0.05)
    profile.set_defaults(func=cmd_profile)

    classify = sub.add_parser("classify", help="completeness subgroups from profiles")
    classify.add_argument("--manifest", required=True)
    classify.add_argument("--template", required=True, help="template NIfTI for the z range")
    classify.add_argument("--out-dir", required=True)
    classify.add_argument("--presence-tolerance", type=float, default=0.05)
    classify.set_defaults(func=cmd_classify)

    ssim_cmd = sub.add_parser("ssim", help="SSIM scores and inspection flags")
    ssim_cmd.add_argument("--manifest", required=True)
    ssim_cmd.add_argument("--template", required=True)
    ssim_cmd.add_argument("--out-dir", required=True)
    ssim_cmd.add_argument("--ssim-percentile", type=float, default=0.05)
    ssim_cmd.set_defaults(func=cmd_ssim)

    superimpose_cmd = sub.add_parser("superimpose", help="build superimposition batches")
    superimpose_cmd.add_argument("--manifest", required=True)
    superimpose_cmd.add_argument("--out-dir", required=True)
    superimpose_cmd.add_argument("--batch-size", type=int, default=100)
    superimpose_cmd.add_argument("--hu-threshold", type=float, default=100.0)
    superimpose_cmd.set_defaults(func=cmd_superimpose)

    serve = sub.add_parser("serve", help="HTTP API for the inspection UI")
    serve.add_argument("--data-dir", required=True, help="pipeline out-dir to serve")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8080)
    serve.add_argument("--read-only", action="store_true")
    serve.set_defaults(func=cmd_serve)

    report = sub.add_parser("report", help="render a ledger JSON as the summary table")
    report.add_argument("--ledger", required=True, help="report.json from a run")
    report.add_argument("--out-dir")
    report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

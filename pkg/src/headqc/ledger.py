"""Staged rejection ledger and report rendering.

Tracks series and distinct-patient counts through every pipeline stage with
per-series rejection reasons, and renders the summary table (stage, series
remaining, change, patients remaining, change) plus a per-reason breakdown.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

REJECTION_REASONS = (
    "non_axial",
    "localiser",
    "conversion_failure",
    "registration_failure",
    "similarity_qc",
    "superimposition_qc",
    "roi_coverage",
    "tool_failure",
)


@dataclass(frozen=True)
class Rejection:
    series_id: str
    stage: str
    reason: str
    detail: str = ""

    def __post_init__(self):
        if self.reason not in REJECTION_REASONS:
            raise ValueError(f"unknown rejection reason {self.reason!r}")


@dataclass(frozen=True)
class StageRow:
    name: str
    series_remaining: int
    series_change: int
    patients_remaining: int
    patients_change: int


@dataclass
class PipelineLedger:
    rows: list[StageRow] = field(default_factory=list)
    rejections: list[Rejection] = field(default_factory=list)

    def append_stage(
        self, name: str, series_remaining: int, patients_remaining: int
    ) -> StageRow:
        if self.rows:
            prev = self.rows[-1]
            series_change = series_remaining - prev.series_remaining
            patients_change = patients_remaining - prev.patients_remaining
        else:
            series_change = 0
            patients_change = 0
        row = StageRow(name, series_remaining, series_change, patients_remaining, patients_change)
        self.rows.append(row)
        self.validate()
        return row

    def reject(self, series_id: str, stage: str, reason: str, detail: str = "") -> None:
        self.rejections.append(Rejection(series_id, stage, reason, detail))

    def validate(self) -> None:
        for prev, row in zip(self.rows, self.rows[1:]):
            if row.series_remaining > prev.series_remaining:
                raise ValueError(f"series count increased at stage {row.name!r}")
            if row.patients_remaining > prev.patients_remaining:
                raise ValueError(f"patient count increased at stage {row.name!r}")
            if prev.series_remaining + row.series_change != row.series_remaining:
                raise ValueError(f"series change arithmetic broken at {row.name!r}")
            if prev.patients_remaining + row.patients_change != row.patients_remaining:
                raise ValueError(f"patient change arithmetic broken at {row.name!r}")
        for row in self.rows:
            if row.patients_remaining > row.series_remaining:
                raise ValueError(f"more patients than series at stage {row.name!r}")

    def totals(self) -> dict:
        if len(self.rows) < 2:
            return {
                "series_change": 0,
                "series_change_pct": 0,
                "patients_change": 0,
                "patients_change_pct": 0,
            }
        first, last = self.rows[0], self.rows[-1]
        series_change = last.series_remaining - first.series_remaining
        patients_change = last.patients_remaining - first.patients_remaining
        series_pct = (
            round(100.0 * series_change / first.series_remaining)
            if first.series_remaining
            else 0
        )
        patients_pct = (
            round(100.0 * patients_change / first.patients_remaining)
            if first.patients_remaining
            else 0
        )
        return {
            "series_change": series_change,
            "series_change_pct": int(series_pct),
            "patients_change": patients_change,
            "patients_change_pct": int(patients_pct),
        }

    def rejections_by_reason(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for rejection in self.rejections:
            counts[rejection.reason] = counts.get(rejection.reason, 0) + 1
        return dict(sorted(counts.items()))

    @classmethod
    def from_rows(
        cls, rows: Sequence[tuple[str, int, int, int, int]]
    ) -> "PipelineLedger":
        """Build from (name, series, series_change, patients, patients_change)."""
        ledger = cls(rows=[StageRow(*row) for row in rows])
        ledger.validate()
        return ledger


@dataclass(frozen=True)
class Report:
    ledger: PipelineLedger

    def to_dict(self) -> dict:
        return {
            "stages": [
                {
                    "name": row.name,
                    "series_remaining": row.series_remaining,
                    "series_change": row.series_change,
                    "patients_remaining": row.patients_remaining,
                    "patients_change": row.patients_change,
                }
                for row in self.ledger.rows
            ],
            "totals": self.ledger.totals(),
            "rejections_by_reason": self.ledger.rejections_by_reason(),
            "rejections": [
                {
                    "series_id": r.series_id,
                    "stage": r.stage,
                    "reason": r.reason,
                    "detail": r.detail,
                }
                for r in self.ledger.rejections
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def render_text(self) -> str:
        headers = ("Step", "No. of series", "Change", "No. of patients", "Change")
        body = [
            (
                row.name,
                f"{row.series_remaining:,}",
                f"{row.series_change:,}",
                f"{row.patients_remaining:,}",
                f"{row.patients_change:,}",
            )
            for row in self.ledger.rows
        ]
        totals = self.ledger.totals()
        body.append(
            (
                "Total change",
                f"{totals['series_change_pct']}%",
                f"{totals['series_change']:,}",
                f"{totals['patients_change_pct']}%",
                f"{totals['patients_change']:,}",
            )
        )
        widths = [
            max(len(headers[i]), max((len(row[i]) for row in body), default=0))
            for i in range(5)
        ]
        lines = [
            "  ".join(
                h.ljust(widths[0]) if i == 0 else h.rjust(widths[i])
                for i, h in enumerate(headers)
            )
        ]
        for row in body:
            lines.append(
                "  ".join(
                    cell.ljust(widths[0]) if i == 0 else cell.rjust(widths[i])
                    for i, cell in enumerate(row)
                )
            )
        breakdown = self.ledger.rejections_by_reason()
        if breakdown:
            lines.append("")
            lines.append("Rejections by reason")
            for reason, count in breakdown.items():
                lines.append(f"  {reason:<24}{count:>8,}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / "report.json"
        text_path = out_dir / "report.txt"
        json_path.write_text(self.to_json())
        text_path.write_text(self.render_text())
        return json_path, text_path


def emit_report(ledger: PipelineLedger) -> Report:
    """Machine- and human-readable report for a finished or checkpointed run."""
    ledger.validate()
    return Report(ledger=ledger)

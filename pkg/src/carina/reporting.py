"""Persistence: run logs, summaries, frontier tables, and the dashboard.

The run log is line-delimited JSON with a version header so multi-day runs
can be tailed live; every write is flushed as one line. Summaries keep a
human-rendered block (2 decimals) next to a full-precision raw block, and
parse back bit-identical from the raw block. The dashboard is one static
HTML file with inline SVG charts and an embedded JSON data block; it
references no external resource.
"""

from __future__ import annotations

import csv
import html
import io
import json
import threading
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .model import (
    FormatError,
    Phase,
    grid_from_doc,
    grid_to_doc,
    profile_from_doc,
    profile_to_doc,
)
from .simulator import PolicyComparison
from .tracker import PhaseTotals, RunSummary, SliceRecord, TrackedUnitRecord, UnitKind

LOG_FORMAT = "carina-run-log"
LOG_VERSION = 1
SUMMARY_FORMAT = "carina-summary"
SUMMARY_VERSION = 1

PHASE_ORDER = (Phase.PEAK, Phase.LOAD_SENSITIVE, Phase.SHOULDER, Phase.NIGHT)

FRONTIER_HEADER = ("policy", "runtime_penalty_pct", "energy_savings_pct")


def record_to_doc(record: TrackedUnitRecord) -> dict:
    return {
        "unit_id": record.unit_id,
        "kind": record.kind.value,
        "start_ts": record.start_ts.isoformat(),
        "end_ts": record.end_ts.isoformat(),
        "runtime_s": record.runtime_s,
        "workers_used": record.workers_used,
        "phase_slices": [[s.phase.value, s.seconds, s.energy_kwh] for s in record.phase_slices],
        "energy_kwh": record.energy_kwh,
        "carbon_kg": record.carbon_kg,
        "controls_applied": list(record.controls_applied),
        "metadata": dict(record.metadata),
    }


def record_from_doc(doc: dict) -> TrackedUnitRecord:
    try:
        return TrackedUnitRecord(
            unit_id=int(doc["unit_id"]),
            kind=UnitKind(doc["kind"]),
            start_ts=datetime.fromisoformat(doc["start_ts"]),
            end_ts=datetime.fromisoformat(doc["end_ts"]),
            runtime_s=float(doc["runtime_s"]),
            workers_used=int(doc["workers_used"]),
            phase_slices=tuple(
                SliceRecord(Phase(p), float(s), float(e)) for p, s, e in doc["phase_slices"]),
            energy_kwh=float(doc["energy_kwh"]),
            carbon_kg=float(doc["carbon_kg"]),
            controls_applied=tuple(doc.get("controls_applied", ())),
            metadata=dict(doc.get("metadata", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad run-log record: {exc}") from None


class RunLogWriter:
    """Append-only structured log, one flushed JSON line per record.

    Creates the versioned header line when pointed at a new or empty file;
    appending to an existing log (resume) keeps the original header.
    """

    def __init__(self, path: str | Path, meta: Mapping[str, str] | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = self.path.open("a", encoding="utf-8")
        if fresh:
            header = {"format": LOG_FORMAT, "version": LOG_VERSION, **(meta or {})}
            self._emit(header)

    def _emit(self, doc: dict) -> None:
        line = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()

    def write(self, record: TrackedUnitRecord) -> None:
        self._emit(record_to_doc(record))

    def close(self) -> None:
        with self._lock:
            self._fh.close()

    def __enter__(self) -> "RunLogWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_run_log(records: Sequence[TrackedUnitRecord], path: str | Path,
                  meta: Mapping[str, str] | None = None) -> int:
    """One-shot log write in unit_id order; returns lines written (header included)."""
    path = Path(path)
    if path.exists():
        path.unlink()
    ordered = sorted(records, key=lambda r: r.unit_id)
    with RunLogWriter(path, meta) as writer:
        for record in ordered:
            writer.write(record)
    return len(ordered) + 1


def read_run_log(path: str | Path) -> tuple[dict, list[TrackedUnitRecord]]:
    """Parse a run log back into (header, records).

    A torn final line (killed writer) is skipped; anything malformed before
    that is an error.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FormatError(f"run log not found: {path}") from None
    lines = raw.split("\n")
    ends_clean = raw.endswith("\n")
    if ends_clean:
        lines = lines[:-1]
    if not lines:
        raise FormatError(f"{path}: empty run log")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad log header: {exc}") from None
    if header.get("format") != LOG_FORMAT:
        raise FormatError(f"{path}: not a {LOG_FORMAT} file")
    if header.get("version") != LOG_VERSION:
        raise FormatError(f"{path}: unsupported log version {header.get('version')!r}")
    records = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            records.append(record_from_doc(json.loads(line)))
        except (json.JSONDecodeError, FormatError) as exc:
            last = (i == len(lines)) and not ends_clean
            if last:
                break  # torn tail from an interrupted writer
            raise FormatError(f"{path}:{i}: {exc}") from None
    return header, records


# --- summary ------------------------------------------------------------------


def _phase_doc(totals: PhaseTotals) -> dict:
    return {
        "runtime_h": totals.runtime_h,
        "energy_kwh": totals.energy_kwh,
        "carbon_kg": totals.carbon_kg,
    }


def summary_to_doc(summary: RunSummary, generated_at: datetime | None = None) -> dict:
    rendered_phase = {
        phase.value: {
            "runtime_h": f"{totals.runtime_h:.2f}",
            "energy_kwh": f"{totals.energy_kwh:.2f}",
            "carbon_kg": f"{totals.carbon_kg:.2f}",
        }
        for phase, totals in summary.per_phase.items()
    }
    return {
        "format": SUMMARY_FORMAT,
        "version": SUMMARY_VERSION,
        "generated_at": generated_at.isoformat() if generated_at else None,
        "run_id": summary.run_id,
        "policy_name": summary.policy_name,
        "rendered": {
            "total_runtime_h": f"{summary.total_runtime_h:.2f}",
            "total_energy_kwh": f"{summary.total_energy_kwh:.2f}",
            "total_carbon_kg": f"{summary.total_carbon_kg:.2f}",
            "unit_count": summary.unit_count,
            "per_phase": rendered_phase,
        },
        "raw": {
            "machine": profile_to_doc(summary.machine),
            "grid": grid_to_doc(summary.grid),
            "unit_count": summary.unit_count,
            "total_runtime_h": summary.total_runtime_h,
            "total_energy_kwh": summary.total_energy_kwh,
            "total_carbon_kg": summary.total_carbon_kg,
            "per_phase": {p.value: _phase_doc(t) for p, t in summary.per_phase.items()},
        },
    }


def summary_from_doc(doc: dict) -> RunSummary:
    if doc.get("format") != SUMMARY_FORMAT:
        raise FormatError(f"not a {SUMMARY_FORMAT} document")
    try:
        raw = doc["raw"]
        per_phase = {
            Phase(name): PhaseTotals(
                runtime_h=float(v["runtime_h"]),
                energy_kwh=float(v["energy_kwh"]),
                carbon_kg=float(v["carbon_kg"]),
            )
            for name, v in raw["per_phase"].items()
        }
        return RunSummary(
            run_id=str(doc["run_id"]),
            policy_name=str(doc["policy_name"]),
            machine=profile_from_doc(raw["machine"]),
            grid=grid_from_doc(raw["grid"]),
            unit_count=int(raw["unit_count"]),
            total_runtime_h=float(raw["total_runtime_h"]),
            total_energy_kwh=float(raw["total_energy_kwh"]),
            total_carbon_kg=float(raw["total_carbon_kg"]),
            per_phase=per_phase,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad summary document: {exc}") from None


def write_summary(summary: RunSummary, path: str | Path,
                  generated_at: datetime | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(summary_to_doc(summary, generated_at), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")


def read_summary(path: str | Path) -> RunSummary:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"summary not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from None
    return summary_from_doc(doc)


# --- frontier -----------------------------------------------------------------


def emit_frontier_csv(comparison: PolicyComparison, path: str | Path) -> None:
    """Baseline row (exact zeros) first, then candidates in comparison order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FRONTIER_HEADER)
    for name, penalty, savings in comparison.frontier_rows():
        writer.writerow([name, f"{penalty:.4f}", f"{savings:.4f}"])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_frontier_csv(path: str | Path) -> list[tuple[str, float, float]]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != FRONTIER_HEADER:
        raise FormatError(f"{path}: missing frontier header {','.join(FRONTIER_HEADER)}")
    return [(name, float(pen), float(sav)) for name, pen, sav in rows[1:]]


# --- dashboard ----------------------------------------------------------------

_CSS = """
body { font-family: sans-serif; margin: 2em auto; max-width: 60em; color: #222; }
h1 { border-bottom: 2px solid #356; padding-bottom: 0.2em; }
h2 { color: #356; margin-top: 1.6em; }
table { border-collapse: collapse; margin: 0.6em 0; }
th, td { border: 1px solid #bbc; padding: 0.25em 0.7em; text-align: right; }
th:first-child, td:first-child { text-align: left; }
.absent { color: #888; font-style: italic; }
.meta { color: #666; font-size: 0.9em; }
svg { margin: 0.4em 0; }
"""

_PHASE_COLORS = {
    Phase.PEAK: "#c0504d",
    Phase.LOAD_SENSITIVE: "#e8a33d",
    Phase.SHOULDER: "#6d8f3c",
    Phase.NIGHT: "#35567d",
}


def _phase_bar_svg(per_phase: Mapping[Phase, PhaseTotals]) -> str:
    phases = [p for p in PHASE_ORDER if p in per_phase]
    if not phases:
        return ""
    peak_kwh = max(per_phase[p].energy_kwh for p in phases) or 1.0
    width, bar_h, gap, label_w = 640, 24, 8, 130
    height = len(phases) * (bar_h + gap) + gap
    parts = [f'<svg width="{width}" height="{height}" role="img" '
             f'aria-label="energy by phase">']
    for i, phase in enumerate(phases):
        y = gap + i * (bar_h + gap)
        kwh = per_phase[phase].energy_kwh
        w = max(1.0, (width - label_w - 90) * kwh / peak_kwh)
        parts.append(
            f'<text x="{label_w - 8}" y="{y + bar_h - 7}" text-anchor="end" '
            f'font-size="13">{html.escape(phase.value)}</text>'
            f'<rect x="{label_w}" y="{y}" width="{w:.1f}" height="{bar_h}" '
            f'fill="{_PHASE_COLORS[phase]}"></rect>'
            f'<text x="{label_w + w + 6:.1f}" y="{y + bar_h - 7}" font-size="12">'
            f'{kwh:.2f} kWh</text>')
    parts.append("</svg>")
    return "".join(parts)


def _frontier_scatter_svg(rows: Sequence[tuple[str, float, float]]) -> str:
    if not rows:
        return ""
    width, height, pad = 640, 360, 52
    xs = [r[1] for r in rows]
    ys = [r[2] for r in rows]
    x_lo, x_hi = min(xs + [0.0]), max(xs + [0.0])
    y_lo, y_hi = min(ys + [0.0]), max(ys + [0.0])
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0
    x_lo -= 0.08 * x_span; x_hi += 0.08 * x_span
    y_lo -= 0.08 * y_span; y_hi += 0.08 * y_span

    def sx(v: float) -> float:
        return pad + (v - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

    def sy(v: float) -> float:
        return height - pad - (v - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

    parts = [f'<svg width="{width}" height="{height}" role="img" aria-label="policy frontier">',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
             f'stroke="#888"></line>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="#888"></line>',
             f'<line x1="{sx(0):.1f}" y1="{pad}" x2="{sx(0):.1f}" y2="{height - pad}" '
             f'stroke="#ccd" stroke-dasharray="4 3"></line>',
             f'<line x1="{pad}" y1="{sy(0):.1f}" x2="{width - pad}" y2="{sy(0):.1f}" '
             f'stroke="#ccd" stroke-dasharray="4 3"></line>',
             f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" font-size="13">'
             f'runtime penalty (%)</text>',
             f'<text x="16" y="{height / 2:.0f}" text-anchor="middle" font-size="13" '
             f'transform="rotate(-90 16 {height / 2:.0f})">energy savings (%)</text>']
    for lo, hi, fmt in ((x_lo, x_hi, "x"), (y_lo, y_hi, "y")):
        for v in (lo, hi):
            if fmt == "x":
                parts.append(f'<text x="{sx(v):.1f}" y="{height - pad + 16}" '
                             f'text-anchor="middle" font-size="11">{v:.1f}</text>')
            else:
                parts.append(f'<text x="{pad - 6}" y="{sy(v):.1f}" text-anchor="end" '
                             f'font-size="11">{v:.1f}</text>')
    for name, penalty, savings in rows:
        parts.append(
            f'<circle cx="{sx(penalty):.1f}" cy="{sy(savings):.1f}" r="5" fill="#356"></circle>'
            f'<text x="{sx(penalty) + 8:.1f}" y="{sy(savings) - 6:.1f}" font-size="12">'
            f'{html.escape(name)}</text>')
    parts.append("</svg>")
    return "".join(parts)


def _absent(what: str) -> str:
    return f'<p class="absent">No {what} available for this report.</p>'


def emit_dashboard(
    summary: RunSummary | None,
    comparison: PolicyComparison | None,
    path: str | Path,
    *,
    controls: Iterable[str] | None = None,
    generated_at: datetime | None = None,
    title: str = "carina report",
) -> None:
    """Write the self-contained static dashboard.

    Sections without data are rendered with an explicit absence marker
    rather than dropped, so a report always has the same shape.
    """
    if summary is None and comparison is None:
        raise ValueError("need at least one of summary or comparison")
    out: list[str] = [
        "<!DOCTYPE html>", '<html lang="en">', "<head>", '<meta charset="utf-8">',
        f"<title>{html.escape(title)}</title>", f"<style>{_CSS}</style>", "</head>", "<body>",
        f"<h1>{html.escape(title)}</h1>",
    ]
    if generated_at is not None:
        out.append(f'<p class="meta">generated {html.escape(generated_at.isoformat())}</p>')

    out.append("<h2>Run totals</h2>")
    if summary is not None:
        out.append(
            '<table><tr><th>run</th><th>policy</th><th>units</th><th>runtime (h)</th>'
            '<th>energy (kWh)</th><th>carbon (kg CO2e)</th></tr>'
            f"<tr><td>{html.escape(summary.run_id)}</td>"
            f"<td>{html.escape(summary.policy_name)}</td>"
            f"<td>{summary.unit_count}</td><td>{summary.total_runtime_h:.2f}</td>"
            f"<td>{summary.total_energy_kwh:.2f}</td>"
            f"<td>{summary.total_carbon_kg:.2f}</td></tr></table>")
        out.append(
            f'<p class="meta">machine {html.escape(summary.machine.host_id)} '
            f"({summary.machine.logical_cores} cores, {summary.machine.nominal_workers} "
            f"nominal workers); grid {html.escape(summary.grid.region)} at "
            f"{summary.grid.kg_co2e_per_kwh} kg CO2e/kWh</p>")
    else:
        out.append(_absent("run summary"))

    out.append("<h2>Per-phase breakdown</h2>")
    if summary is not None and summary.per_phase:
        out.append("<table><tr><th>phase</th><th>runtime (h)</th><th>energy (kWh)</th>"
                   "<th>carbon (kg)</th></tr>")
        for phase in PHASE_ORDER:
            if phase not in summary.per_phase:
                continue
            t = summary.per_phase[phase]
            out.append(f"<tr><td>{html.escape(phase.value)}</td><td>{t.runtime_h:.2f}</td>"
                       f"<td>{t.energy_kwh:.2f}</td><td>{t.carbon_kg:.2f}</td></tr>")
        out.append("</table>")
        out.append(_phase_bar_svg(summary.per_phase))
    else:
        out.append(_absent("per-phase breakdown"))

    out.append("<h2>Policy frontier</h2>")
    if comparison is not None:
        rows = comparison.frontier_rows()
        out.append("<table><tr><th>policy</th><th>runtime penalty (%)</th>"
                   "<th>energy savings (%)</th></tr>")
        for name, penalty, savings in rows:
            out.append(f"<tr><td>{html.escape(name)}</td><td>{penalty:.2f}</td>"
                       f"<td>{savings:.2f}</td></tr>")
        out.append("</table>")
        out.append(_frontier_scatter_svg(rows))
        if comparison.failures:
            out.append("<table><tr><th>failed policy</th><th>reason</th></tr>")
            for name, reason in comparison.failures:
                out.append(f"<tr><td>{html.escape(name)}</td><td>{html.escape(reason)}</td></tr>")
            out.append("</table>")
    else:
        out.append(_absent("policy comparison"))

    out.append("<h2>Applied controls</h2>")
    control_list = list(controls or ())
    if control_list:
        out.append("<ul>")
        out.extend(f"<li>{html.escape(c)}</li>" for c in control_list)
        out.append("</ul>")
    else:
        out.append(_absent("controls audit"))

    data = {
        "summary": summary_to_doc(summary, generated_at) if summary is not None else None,
        "frontier": (
            [{"policy": n, "runtime_penalty_pct": p, "energy_savings_pct": s}
             for n, p, s in comparison.frontier_rows()]
            if comparison is not None else None),
        "failures": list(comparison.failures) if comparison is not None else None,
        "controls": control_list,
    }
    blob = json.dumps(data, sort_keys=True).replace("</", "<\\/")
    out.append(f'<script type="application/json" id="carina-data">{blob}</script>')
    out.append("</body></html>")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(out) + "\n", encoding="utf-8")


def read_dashboard_data(path: str | Path) -> dict:
    """Extract the embedded JSON block back out of a dashboard file."""
    text = Path(path).read_text(encoding="utf-8")
    marker = '<script type="application/json" id="carina-data">'
    start = text.find(marker)
    if start < 0:
        raise FormatError(f"{path}: no embedded data block")
    start += len(marker)
    end = text.find("</script>", start)
    if end < 0:
        raise FormatError(f"{path}: unterminated data block")
    return json.loads(text[start:end].replace("<\\/", "</"))


__all__ = [
    "LOG_FORMAT", "LOG_VERSION", "SUMMARY_FORMAT", "PHASE_ORDER", "FRONTIER_HEADER",
    "record_to_doc", "record_from_doc", "RunLogWriter", "write_run_log",
    "read_run_log", "summary_to_doc", "summary_from_doc", "write_summary",
    "read_summary", "emit_frontier_csv", "read_frontier_csv", "emit_dashboard",
    "read_dashboard_data",
]

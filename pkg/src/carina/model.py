"""Core data model: time bands, pacing policies, machine profiles, workloads.

Everything here is a frozen dataclass plus strict JSON (de)serialization.
Parsers reject unknown keys so a typo in a config file fails loudly instead
of silently falling back to a default. Clock times use minutes since local
midnight internally and "HH:MM" strings on disk ("24:00" is accepted as the
exclusive end of day).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

MINUTES_PER_DAY = 1440


class FormatError(ValueError):
    """A document on disk does not match the expected shape."""


class Phase(str, Enum):
    PEAK = "peak"
    LOAD_SENSITIVE = "load_sensitive"
    SHOULDER = "shoulder"
    NIGHT = "night"


class PriorityClass(str, Enum):
    NORMAL = "normal"
    BELOW_NORMAL = "below_normal"
    LOW = "low"


class DetectionSource(str, Enum):
    AUTO = "auto"
    MANUAL = "manual"


class Granularity(str, Enum):
    WHOLE_RUN = "whole_run"
    STEP_LEVEL = "step_level"


def _enum_value(enum_cls: type[Enum], raw: Any, what: str) -> Enum:
    try:
        return enum_cls(raw)
    except ValueError:
        allowed = ", ".join(m.value for m in enum_cls)
        raise FormatError(f"{what} must be one of: {allowed} (got {raw!r})") from None


def parse_minute(text: str) -> int:
    """Parse "HH:MM" into minutes since midnight. "24:00" maps to 1440."""
    if not isinstance(text, str) or len(text.split(":")) != 2:
        raise FormatError(f"expected HH:MM clock time, got {text!r}")
    hh, _, mm = text.partition(":")
    if not (hh.isdigit() and mm.isdigit() and len(mm) == 2):
        raise FormatError(f"expected HH:MM clock time, got {text!r}")
    hours, minutes = int(hh), int(mm)
    total = hours * 60 + minutes
    if minutes > 59 or total > MINUTES_PER_DAY:
        raise FormatError(f"clock time out of range: {text!r}")
    return total


def format_minute(minute: int) -> str:
    if not 0 <= minute <= MINUTES_PER_DAY:
        raise ValueError(f"minute out of range: {minute}")
    return f"{minute // 60:02d}:{minute % 60:02d}"


@dataclass(frozen=True)
class TimeBand:
    """One span of the daily clock with its pacing settings.

    ``start_minute`` is inclusive, ``end_minute`` exclusive; bands never wrap
    midnight in memory (a wrapping file entry is split on load). ``affinity``
    restricts the run to the first N logical cores; None means all cores.
    """

    phase: Phase
    start_minute: int
    end_minute: int
    intensity: float
    priority_class: PriorityClass = PriorityClass.NORMAL
    thread_cap: int | None = None
    affinity: int | None = None

    def settings_key(self) -> tuple:
        """Everything that makes two bands behave identically."""
        return (
            self.phase,
            self.intensity,
            self.priority_class,
            self.thread_cap,
            self.affinity,
        )


@dataclass(frozen=True)
class TimingPolicy:
    """A named set of bands covering the day, plus run-wide knobs.

    ``lowprio_slowdown`` is the modelled throughput divisor whenever the
    active band runs below normal priority. ``batch_size_override`` lets a
    policy replace the workload's batch size (used by the batch-size variants
    so one workload file can be compared across batch sizes).
    """

    name: str
    bands: tuple[TimeBand, ...]
    lowprio_slowdown: float = 1.0
    batch_size_override: int | None = None


@dataclass(frozen=True)
class MachineProfile:
    """Execution host description used for pacing and power estimation."""

    host_id: str
    logical_cores: int
    nominal_workers: int
    idle_power_w: float
    per_worker_power_w: float
    concurrency_power_exponent: float
    contention_factor: float
    detection_source: DetectionSource = DetectionSource.MANUAL


@dataclass(frozen=True)
class GridFactor:
    region: str
    kg_co2e_per_kwh: float
    source_note: str = ""


@dataclass(frozen=True)
class WorkloadSpec:
    """A batch workload: how many scenarios, how costly, how it is chunked."""

    name: str
    total_scenarios: int
    per_scenario_worker_seconds: float
    batch_size: int
    per_batch_overhead_seconds: float
    granularity: Granularity = Granularity.STEP_LEVEL


# --- validation -------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    rule: str
    subject: str
    message: str

    def __str__(self) -> str:
        return f"{self.subject}: {self.message} [{self.rule}]"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        if self.ok:
            return "ok"
        return "\n".join(str(v) for v in self.violations)


class ValidationFailure(ValueError):
    """Raised by entry points that refuse to run with invalid inputs."""

    def __init__(self, report: ValidationReport):
        super().__init__(report.summary())
        self.report = report


def _check_finite(value: float) -> bool:
    return isinstance(value, (int, float)) and math.isfinite(value)


def validate_policy(policy: TimingPolicy) -> ValidationReport:
    out: list[Violation] = []
    subject = f"policy {policy.name!r}" if policy.name else "policy"

    def bad(rule: str, message: str) -> None:
        out.append(Violation(rule, subject, message))

    if not policy.name or not policy.name.strip():
        bad("policy.name", "name must be non-empty")
    if not _check_finite(policy.lowprio_slowdown) or policy.lowprio_slowdown < 1.0:
        bad("policy.lowprio_slowdown", f"lowprio_slowdown must be >= 1 (got {policy.lowprio_slowdown})")
    if policy.batch_size_override is not None and policy.batch_size_override < 1:
        bad("policy.batch_size_override", f"batch_size_override must be >= 1 (got {policy.batch_size_override})")
    if not policy.bands:
        bad("policy.coverage", "policy has no bands")
        return ValidationReport(tuple(out))

    for i, band in enumerate(policy.bands):
        where = f"band {i} ({band.phase.value})"
        if not (0 <= band.start_minute < band.end_minute <= MINUTES_PER_DAY):
            bad("band.range", f"{where}: start/end must satisfy 0 <= start < end <= 1440 "
                              f"(got [{band.start_minute}, {band.end_minute}))")
        if not _check_finite(band.intensity) or band.intensity < 0:
            bad("band.intensity", f"{where}: intensity must be >= 0 (got {band.intensity})")
        if band.thread_cap is not None and band.thread_cap < 1:
            bad("band.thread_cap", f"{where}: thread_cap must be >= 1 (got {band.thread_cap})")
        if band.affinity is not None and band.affinity < 1:
            bad("band.affinity", f"{where}: affinity core count must be >= 1 (got {band.affinity})")

    # Coverage: every minute of the day claimed by exactly one band.
    owners = [0] * MINUTES_PER_DAY
    for band in policy.bands:
        lo = max(0, band.start_minute)
        hi = min(MINUTES_PER_DAY, band.end_minute)
        for m in range(lo, hi):
            owners[m] += 1
    for m, count in enumerate(owners):
        if count > 1:
            bad("policy.coverage", f"overlap at minute {m}")
            break
    m = 0
    while m < MINUTES_PER_DAY:
        if owners[m] == 0:
            start = m
            while m < MINUTES_PER_DAY and owners[m] == 0:
                m += 1
            bad("policy.coverage", f"uncovered range [{start},{m})")
        else:
            m += 1
    return ValidationReport(tuple(out))


def validate_machine_profile(profile: MachineProfile) -> ValidationReport:
    out: list[Violation] = []
    subject = f"profile {profile.host_id!r}" if profile.host_id else "profile"

    def bad(rule: str, message: str) -> None:
        out.append(Violation(rule, subject, message))

    if not profile.host_id or not profile.host_id.strip():
        bad("profile.host_id", "host_id must be non-empty")
    if profile.logical_cores < 1:
        bad("profile.logical_cores", f"logical_cores must be >= 1 (got {profile.logical_cores})")
    if not 1 <= profile.nominal_workers <= max(profile.logical_cores, 1):
        bad("profile.nominal_workers",
            f"nominal_workers must be in [1, logical_cores] (got {profile.nominal_workers} "
            f"with {profile.logical_cores} cores)")
    if not _check_finite(profile.idle_power_w) or profile.idle_power_w < 0:
        bad("profile.idle_power_w", f"idle_power_w must be >= 0 (got {profile.idle_power_w})")
    if not _check_finite(profile.per_worker_power_w) or profile.per_worker_power_w <= 0:
        bad("profile.per_worker_power_w",
            f"per_worker_power_w must be > 0 (got {profile.per_worker_power_w})")
    if not _check_finite(profile.concurrency_power_exponent) or profile.concurrency_power_exponent < 0:
        bad("profile.concurrency_power_exponent",
            f"concurrency_power_exponent must be >= 0 (got {profile.concurrency_power_exponent})")
    if not _check_finite(profile.contention_factor) or profile.contention_factor < 0:
        bad("profile.contention_factor",
            f"contention_factor must be >= 0 (got {profile.contention_factor})")
    return ValidationReport(tuple(out))


def validate_workload(workload: WorkloadSpec) -> ValidationReport:
    out: list[Violation] = []
    subject = f"workload {workload.name!r}" if workload.name else "workload"

    def bad(rule: str, message: str) -> None:
        out.append(Violation(rule, subject, message))

    if not workload.name or not workload.name.strip():
        bad("workload.name", "name must be non-empty")
    if workload.total_scenarios < 1:
        bad("workload.total_scenarios", f"total_scenarios must be >= 1 (got {workload.total_scenarios})")
    if not _check_finite(workload.per_scenario_worker_seconds) or workload.per_scenario_worker_seconds <= 0:
        bad("workload.per_scenario_worker_seconds",
            f"per_scenario_worker_seconds must be > 0 (got {workload.per_scenario_worker_seconds})")
    if workload.batch_size < 1:
        bad("workload.batch_size", f"batch_size must be >= 1 (got {workload.batch_size})")
    if not _check_finite(workload.per_batch_overhead_seconds) or workload.per_batch_overhead_seconds < 0:
        bad("workload.per_batch_overhead_seconds",
            f"per_batch_overhead_seconds must be >= 0 (got {workload.per_batch_overhead_seconds})")
    return ValidationReport(tuple(out))


def require_valid(report: ValidationReport) -> None:
    if not report.ok:
        raise ValidationFailure(report)


# --- JSON (de)serialization --------------------------------------------------


def _require_keys(doc: dict, required: Iterable[str], optional: Iterable[str], what: str) -> None:
    if not isinstance(doc, dict):
        raise FormatError(f"{what} must be a JSON object, got {type(doc).__name__}")
    required = set(required)
    allowed = required | set(optional)
    missing = required - doc.keys()
    unknown = doc.keys() - allowed
    if missing:
        raise FormatError(f"{what} missing keys: {', '.join(sorted(missing))}")
    if unknown:
        raise FormatError(f"{what} has unknown keys: {', '.join(sorted(unknown))}")


def _number(doc: dict, key: str, what: str) -> float:
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FormatError(f"{what}.{key} must be a number, got {value!r}")
    return float(value)


def _integer(doc: dict, key: str, what: str) -> int:
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise FormatError(f"{what}.{key} must be an integer, got {value!r}")
    return value


def _string(doc: dict, key: str, what: str) -> str:
    value = doc[key]
    if not isinstance(value, str):
        raise FormatError(f"{what}.{key} must be a string, got {value!r}")
    return value


def band_to_doc(band: TimeBand) -> dict:
    doc: dict[str, Any] = {
        "phase": band.phase.value,
        "start": format_minute(band.start_minute),
        "end": format_minute(band.end_minute),
        "intensity": band.intensity,
    }
    if band.priority_class is not PriorityClass.NORMAL:
        doc["priority"] = band.priority_class.value
    if band.thread_cap is not None:
        doc["thread_cap"] = band.thread_cap
    if band.affinity is not None:
        doc["affinity"] = band.affinity
    return doc


def bands_from_doc(raw: Any, what: str) -> tuple[TimeBand, ...]:
    """Parse a band list; entries wrapping midnight are split in two."""
    if not isinstance(raw, list) or not raw:
        raise FormatError(f"{what} must be a non-empty array of bands")
    bands: list[TimeBand] = []
    for i, item in enumerate(raw):
        where = f"{what}[{i}]"
        _require_keys(item, ("phase", "start", "end", "intensity"),
                      ("priority", "thread_cap", "affinity"), where)
        phase = _enum_value(Phase, item["phase"], f"{where}.phase")
        start = parse_minute(_string(item, "start", where))
        end = parse_minute(_string(item, "end", where))
        intensity = _number(item, "intensity", where)
        priority = PriorityClass.NORMAL
        if "priority" in item:
            priority = _enum_value(PriorityClass, item["priority"], f"{where}.priority")
        thread_cap = _integer(item, "thread_cap", where) if "thread_cap" in item else None
        affinity = _integer(item, "affinity", where) if "affinity" in item else None
        if start == end:
            raise FormatError(f"{where}: zero-length band (start == end == {item['start']!r})")

        def piece(lo: int, hi: int) -> TimeBand:
            return TimeBand(phase, lo, hi, intensity, priority, thread_cap, affinity)

        if start < end:
            bands.append(piece(start, end))
        else:
            # Wraps midnight: store as an evening piece and a morning piece.
            if end == MINUTES_PER_DAY:
                raise FormatError(f"{where}: end may be 24:00 only when start precedes it")
            bands.append(piece(start, MINUTES_PER_DAY))
            bands.append(piece(0, end))
    return tuple(bands)


def policy_to_doc(policy: TimingPolicy, grid: GridFactor | None = None) -> dict:
    doc: dict[str, Any] = {
        "name": policy.name,
        "lowprio_slowdown": policy.lowprio_slowdown,
        "bands": [band_to_doc(b) for b in policy.bands],
    }
    if policy.batch_size_override is not None:
        doc["batch_size_override"] = policy.batch_size_override
    if grid is not None:
        doc["grid"] = grid_to_doc(grid)
    return doc


def policy_from_doc(doc: dict) -> tuple[TimingPolicy, GridFactor | None]:
    """Returns the policy and the optional embedded default grid factor."""
    _require_keys(doc, ("name", "bands"),
                  ("lowprio_slowdown", "batch_size_override", "grid"), "policy")
    name = _string(doc, "name", "policy")
    slowdown = _number(doc, "lowprio_slowdown", "policy") if "lowprio_slowdown" in doc else 1.0
    override = _integer(doc, "batch_size_override", "policy") if "batch_size_override" in doc else None
    bands = bands_from_doc(doc["bands"], "policy.bands")
    grid = grid_from_doc(doc["grid"]) if "grid" in doc else None
    return TimingPolicy(name, bands, slowdown, override), grid


def grid_to_doc(grid: GridFactor) -> dict:
    return {
        "region": grid.region,
        "kg_co2e_per_kwh": grid.kg_co2e_per_kwh,
        "source_note": grid.source_note,
    }


def grid_from_doc(doc: dict) -> GridFactor:
    _require_keys(doc, ("region", "kg_co2e_per_kwh"), ("source_note",), "grid")
    note = _string(doc, "source_note", "grid") if "source_note" in doc else ""
    return GridFactor(_string(doc, "region", "grid"), _number(doc, "kg_co2e_per_kwh", "grid"), note)


def profile_to_doc(profile: MachineProfile) -> dict:
    return {
        "host_id": profile.host_id,
        "logical_cores": profile.logical_cores,
        "nominal_workers": profile.nominal_workers,
        "idle_power_w": profile.idle_power_w,
        "per_worker_power_w": profile.per_worker_power_w,
        "concurrency_power_exponent": profile.concurrency_power_exponent,
        "contention_factor": profile.contention_factor,
        "detection_source": profile.detection_source.value,
    }


def profile_from_doc(doc: dict) -> MachineProfile:
    _require_keys(
        doc,
        ("host_id", "logical_cores", "nominal_workers", "idle_power_w",
         "per_worker_power_w", "concurrency_power_exponent", "contention_factor"),
        ("detection_source",),
        "profile",
    )
    source = DetectionSource.MANUAL
    if "detection_source" in doc:
        source = _enum_value(DetectionSource, doc["detection_source"], "profile.detection_source")
    return MachineProfile(
        host_id=_string(doc, "host_id", "profile"),
        logical_cores=_integer(doc, "logical_cores", "profile"),
        nominal_workers=_integer(doc, "nominal_workers", "profile"),
        idle_power_w=_number(doc, "idle_power_w", "profile"),
        per_worker_power_w=_number(doc, "per_worker_power_w", "profile"),
        concurrency_power_exponent=_number(doc, "concurrency_power_exponent", "profile"),
        contention_factor=_number(doc, "contention_factor", "profile"),
        detection_source=source,
    )


def workload_to_doc(workload: WorkloadSpec) -> dict:
    return {
        "name": workload.name,
        "total_scenarios": workload.total_scenarios,
        "per_scenario_worker_seconds": workload.per_scenario_worker_seconds,
        "batch_size": workload.batch_size,
        "per_batch_overhead_seconds": workload.per_batch_overhead_seconds,
        "granularity": workload.granularity.value,
    }


def workload_from_doc(doc: dict) -> WorkloadSpec:
    _require_keys(
        doc,
        ("name", "total_scenarios", "per_scenario_worker_seconds", "batch_size",
         "per_batch_overhead_seconds"),
        ("granularity",),
        "workload",
    )
    granularity = Granularity.STEP_LEVEL
    if "granularity" in doc:
        granularity = _enum_value(Granularity, doc["granularity"], "workload.granularity")
    return WorkloadSpec(
        name=_string(doc, "name", "workload"),
        total_scenarios=_integer(doc, "total_scenarios", "workload"),
        per_scenario_worker_seconds=_number(doc, "per_scenario_worker_seconds", "workload"),
        batch_size=_integer(doc, "batch_size", "workload"),
        per_batch_overhead_seconds=_number(doc, "per_batch_overhead_seconds", "workload"),
        granularity=granularity,
    )


# --- file helpers -----------------------------------------------------------


def load_json(path: str | Path) -> dict:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{path} must contain a JSON object")
    return doc


def save_json(doc: dict, path: str | Path) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_policy(path: str | Path) -> tuple[TimingPolicy, GridFactor | None]:
    return policy_from_doc(load_json(path))


def save_policy(policy: TimingPolicy, path: str | Path, grid: GridFactor | None = None) -> None:
    save_json(policy_to_doc(policy, grid), path)


def load_profile(path: str | Path) -> MachineProfile:
    return profile_from_doc(load_json(path))


def save_profile(profile: MachineProfile, path: str | Path) -> None:
    save_json(profile_to_doc(profile), path)


def load_workload(path: str | Path) -> WorkloadSpec:
    return workload_from_doc(load_json(path))


def save_workload(workload: WorkloadSpec, path: str | Path) -> None:
    save_json(workload_to_doc(workload), path)


def canonical_fingerprint(doc: dict) -> str:
    """Stable sha256 over a JSON document, independent of key order."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


__all__ = [
    "MINUTES_PER_DAY", "FormatError", "Phase", "PriorityClass", "DetectionSource",
    "Granularity", "parse_minute", "format_minute", "TimeBand", "TimingPolicy",
    "MachineProfile", "GridFactor", "WorkloadSpec", "Violation", "ValidationReport",
    "ValidationFailure", "validate_policy", "validate_machine_profile",
    "validate_workload", "require_valid", "band_to_doc", "bands_from_doc",
    "policy_to_doc", "policy_from_doc", "grid_to_doc", "grid_from_doc",
    "profile_to_doc", "profile_from_doc", "workload_to_doc", "workload_from_doc",
    "load_json", "save_json", "load_policy", "save_policy", "load_profile",
    "save_profile", "load_workload", "save_workload", "canonical_fingerprint",
]

"""Power estimation and per-run energy/carbon accounting.

Active power rises superlinearly while the worker pool fills up to its
nominal size (shared caches, memory bandwidth and turbo budgets get
contended), then each worker added beyond nominal contributes a shrinking
increment because extra logical threads mostly interleave on the same
physical resources. The curve is strictly increasing everywhere and exactly
hits ``idle + per_worker`` for a single worker.
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

from .model import Granularity, GridFactor, MachineProfile, Phase

KWH_PER_WATT_SECOND = 1.0 / 3_600_000.0


def active_power_w(workers: int, profile: MachineProfile) -> float:
    """Estimated machine draw in watts with ``workers`` busy workers."""
    if workers < 0:
        raise ValueError(f"workers must be >= 0 (got {workers})")
    idle = profile.idle_power_w
    pw = profile.per_worker_power_w
    gamma = profile.concurrency_power_exponent
    n = profile.nominal_workers
    if workers <= n:
        return idle + pw * workers * (1.0 + gamma * max(0, workers - 1) / n)
    at_nominal = idle + pw * n * (1.0 + gamma * (n - 1) / n)
    extra = workers - n
    return at_nominal + pw * extra / (1.0 + gamma * extra)


def throughput_share(workers: int, profile: MachineProfile) -> float:
    """Fraction of nominal throughput delivered by ``workers`` workers.

    Linear up to the nominal pool; oversubscribing keeps adding throughput
    but with a contention haircut that grows with the excess.
    """
    if workers < 0:
        raise ValueError(f"workers must be >= 0 (got {workers})")
    if workers == 0:
        return 0.0
    over = max(0, workers - profile.nominal_workers)
    return (workers / profile.nominal_workers) / (1.0 + profile.contention_factor * over)


def estimate_energy(runtime_s: float, workers: int, profile: MachineProfile) -> float:
    """kWh drawn by the whole machine over ``runtime_s`` at a fixed pool size."""
    if runtime_s < 0:
        raise ValueError(f"runtime_s must be >= 0 (got {runtime_s})")
    return active_power_w(workers, profile) * runtime_s * KWH_PER_WATT_SECOND


def energy_to_carbon(energy_kwh: float, grid: GridFactor) -> float:
    if energy_kwh < 0:
        raise ValueError(f"energy_kwh must be >= 0 (got {energy_kwh})")
    return energy_kwh * grid.kg_co2e_per_kwh


class UnitKind(str, Enum):
    RUN = "run"
    BATCH = "batch"
    EPOCH = "epoch"
    ROUND = "round"


@dataclass(frozen=True)
class SliceRecord:
    """Time spent in one phase, with the energy attributed to it."""

    phase: Phase
    seconds: float
    energy_kwh: float


@dataclass(frozen=True)
class TrackedUnitRecord:
    unit_id: int
    kind: UnitKind
    start_ts: datetime
    end_ts: datetime
    runtime_s: float
    workers_used: int
    phase_slices: tuple[SliceRecord, ...]
    energy_kwh: float
    carbon_kg: float
    controls_applied: tuple[str, ...] = ()
    metadata: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class PhaseTotals:
    runtime_h: float
    energy_kwh: float
    carbon_kg: float


@dataclass(frozen=True)
class RunSummary:
    run_id: str
    policy_name: str
    machine: MachineProfile
    grid: GridFactor
    unit_count: int
    total_runtime_h: float
    total_energy_kwh: float
    total_carbon_kg: float
    per_phase: Mapping[Phase, PhaseTotals]


class RunHandle:
    """Accumulates unit records for one run. Safe to share across threads.

    Unit ids are allocated under a lock together with the append and the
    optional ``on_record`` callback, so ids come out dense (0, 1, 2, ...)
    and observers see records in id order even under concurrent writers.
    """

    def __init__(
        self,
        run_id: str,
        policy_name: str,
        profile: MachineProfile,
        grid: GridFactor,
        granularity: Granularity = Granularity.STEP_LEVEL,
        on_record: Callable[[TrackedUnitRecord], None] | None = None,
        first_unit_id: int = 0,
    ):
        self.run_id = run_id
        self.policy_name = policy_name
        self.profile = profile
        self.grid = grid
        self.granularity = granularity
        self._on_record = on_record
        self._lock = threading.Lock()
        self._next_id = first_unit_id
        self._records: list[TrackedUnitRecord] = []

    def records(self) -> tuple[TrackedUnitRecord, ...]:
        with self._lock:
            return tuple(self._records)

    @property
    def next_unit_id(self) -> int:
        with self._lock:
            return self._next_id


def new_run_id(now: datetime, rng: random.Random | None = None) -> str:
    rng = rng or random.Random()
    return f"{now.strftime('%Y%m%dT%H%M%S')}-{rng.getrandbits(24):06x}"


def new_run(
    policy_name: str,
    profile: MachineProfile,
    grid: GridFactor,
    granularity: Granularity = Granularity.STEP_LEVEL,
    *,
    run_id: str | None = None,
    now: datetime | None = None,
    rng: random.Random | None = None,
    on_record: Callable[[TrackedUnitRecord], None] | None = None,
) -> RunHandle:
    if run_id is None:
        run_id = new_run_id(now or datetime.now(), rng)
    return RunHandle(run_id, policy_name, profile, grid, granularity, on_record)


def record_unit(
    run: RunHandle,
    kind: UnitKind,
    start_ts: datetime,
    end_ts: datetime,
    workers_used: int,
    phase_seconds: Iterable[tuple],
    *,
    controls_applied: Sequence[str] = (),
    metadata: Mapping[str, str] | None = None,
    machine_share: float = 1.0,
) -> TrackedUnitRecord:
    """Account one completed unit of work and return its record.

    ``phase_seconds`` items are ``(phase, seconds)`` to bill the whole
    machine at the run's recorded pool size, or ``(phase, seconds, workers)``
    / ``(phase, seconds, workers, share)`` when the pool changed mid-unit or
    when several units share the machine. ``share`` (and the record-level
    ``machine_share`` default) scales the machine draw attributed to this
    unit; a batch that is one of eight concurrent batches carries 1/8 of the
    machine's energy so a sum over units equals the machine total.

    Slice durations must sum to the wall time between the timestamps within
    one second; mismatches are rejected rather than silently rescaled.
    """
    if end_ts < start_ts:
        raise ValueError("end_ts precedes start_ts")
    if not 0.0 < machine_share <= 1.0:
        raise ValueError(f"machine_share must be in (0, 1] (got {machine_share})")
    slices: list[SliceRecord] = []
    total_s = 0.0
    total_kwh = 0.0
    for item in phase_seconds:
        if len(item) == 2:
            phase, seconds = item
            workers, share = workers_used, machine_share
        elif len(item) == 3:
            phase, seconds, workers = item
            share = machine_share
        elif len(item) == 4:
            phase, seconds, workers, share = item
        else:
            raise ValueError(f"phase slice must have 2-4 fields, got {item!r}")
        if seconds < 0:
            raise ValueError(f"slice seconds must be >= 0 (got {seconds})")
        kwh = estimate_energy(seconds, workers, run.profile) * share
        slices.append(SliceRecord(Phase(phase), float(seconds), kwh))
        total_s += float(seconds)
        total_kwh += kwh
    wall_s = (end_ts - start_ts).total_seconds()
    if abs(total_s - wall_s) > 1.0:
        raise ValueError(
            f"phase slices sum to {total_s:.3f} s but timestamps span {wall_s:.3f} s")
    with run._lock:
        record = TrackedUnitRecord(
            unit_id=run._next_id,
            kind=kind,
            start_ts=start_ts,
            end_ts=end_ts,
            runtime_s=total_s,
            workers_used=workers_used,
            phase_slices=tuple(slices),
            energy_kwh=total_kwh,
            carbon_kg=energy_to_carbon(total_kwh, run.grid),
            controls_applied=tuple(controls_applied),
            metadata=dict(metadata or {}),
        )
        run._next_id += 1
        run._records.append(record)
        if run._on_record is not None:
            run._on_record(record)
    return record


def aggregate_records(
    records: Sequence[TrackedUnitRecord],
    *,
    run_id: str,
    policy_name: str,
    profile: MachineProfile,
    grid: GridFactor,
) -> RunSummary:
    """Fold records into a summary.

    Totals are plain sums of record fields. Records are reduced in unit_id
    order so any permutation of the same records aggregates to bit-identical
    totals.
    """
    runtime_s = 0.0
    energy_kwh = 0.0
    carbon_kg = 0.0
    phase_s: dict[Phase, float] = {}
    phase_kwh: dict[Phase, float] = {}
    for record in sorted(records, key=lambda r: r.unit_id):
        runtime_s += record.runtime_s
        energy_kwh += record.energy_kwh
        carbon_kg += record.carbon_kg
        for sl in record.phase_slices:
            phase_s[sl.phase] = phase_s.get(sl.phase, 0.0) + sl.seconds
            phase_kwh[sl.phase] = phase_kwh.get(sl.phase, 0.0) + sl.energy_kwh
    per_phase = {
        phase: PhaseTotals(
            runtime_h=phase_s[phase] / 3600.0,
            energy_kwh=phase_kwh[phase],
            carbon_kg=energy_to_carbon(phase_kwh[phase], grid),
        )
        for phase in phase_s
    }
    return RunSummary(
        run_id=run_id,
        policy_name=policy_name,
        machine=profile,
        grid=grid,
        unit_count=len(records),
        total_runtime_h=runtime_s / 3600.0,
        total_energy_kwh=energy_kwh,
        total_carbon_kg=carbon_kg,
        per_phase=per_phase,
    )


def aggregate(run: RunHandle) -> RunSummary:
    return aggregate_records(
        run.records(),
        run_id=run.run_id,
        policy_name=run.policy_name,
        profile=run.profile,
        grid=run.grid,
    )


__all__ = [
    "KWH_PER_WATT_SECOND", "active_power_w", "throughput_share", "estimate_energy",
    "energy_to_carbon", "UnitKind", "SliceRecord", "TrackedUnitRecord",
    "PhaseTotals", "RunSummary", "RunHandle", "new_run_id", "new_run",
    "record_unit", "aggregate_records", "aggregate",
]

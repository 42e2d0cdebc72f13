"""Real execution of a batch workload under a pacing policy.

One coordinator lock owns the batch queue, the checkpoint file, and the
current pacing decision; N worker threads pull batches. Pool size follows
the policy with drain semantics: a resize or pause never interrupts an
in-flight batch, it only changes who may pick up the next one. Batches are
idempotent (fixed id, fixed output path), which is what makes kill/resume
produce byte-identical merged output.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import platform
import shlex
import shutil
import subprocess
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import Enum
from pathlib import Path
from random import Random
from typing import Callable, Iterator, Sequence

from . import defaults
from .model import (
    DetectionSource,
    FormatError,
    Granularity,
    GridFactor,
    MachineProfile,
    Phase,
    PriorityClass,
    TimingPolicy,
    ValidationFailure,
    ValidationReport,
    Violation,
    WorkloadSpec,
    canonical_fingerprint,
    load_profile,
    policy_to_doc,
    require_valid,
    validate_machine_profile,
    validate_policy,
    validate_workload,
    workload_to_doc,
)
from .policy import (
    IntensityDecision,
    effective_workers,
    intensity_at,
    next_boundary,
    workers_for,
)
from .reporting import RunLogWriter, read_run_log
from .tracker import (
    RunHandle,
    RunSummary,
    TrackedUnitRecord,
    UnitKind,
    aggregate_records,
    new_run_id,
    record_unit,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "carina-checkpoint"
CHECKPOINT_VERSION = 1


class ExecutionAborted(RuntimeError):
    """The run stopped before completion; the checkpoint is retained."""


class ResumeMismatchError(RuntimeError):
    """Resume requested against a checkpoint from different inputs."""


class StateExistsError(RuntimeError):
    """A fresh run would clobber an incomplete run's state."""


class EvaluatorError(RuntimeError):
    """A batch evaluator failed; the batch is retryable."""


class MergeError(RuntimeError):
    """Merged output does not cover the scenario id range exactly once."""

    def __init__(self, message: str, *, missing: Sequence[int] = (),
                 duplicated: Sequence[int] = (), out_of_range: Sequence[int] = ()):
        super().__init__(message)
        self.missing = tuple(missing)
        self.duplicated = tuple(duplicated)
        self.out_of_range = tuple(out_of_range)


# --- machine detection --------------------------------------------------------


def _power_defaults(cores: int) -> tuple[float, float]:
    for max_cores, idle_w, per_worker_w in defaults.DETECT_POWER_TABLE:
        if max_cores is None or cores <= max_cores:
            return idle_w, per_worker_w
    raise AssertionError("power table has no catch-all row")


def detect_machine(profile_path: str | Path | None = None) -> MachineProfile:
    """Detect host characteristics, or load them from a profile file.

    A profile file always wins (detection_source becomes manual). Detection
    failure falls back to a conservative 1-core profile with a warning
    rather than raising.
    """
    if profile_path is not None:
        profile = load_profile(profile_path)
        require_valid(validate_machine_profile(profile))
        return replace(profile, detection_source=DetectionSource.MANUAL)
    try:
        if hasattr(os, "sched_getaffinity"):
            cores = len(os.sched_getaffinity(0))
        else:
            cores = os.cpu_count() or 0
        if cores < 1:
            raise RuntimeError("host reported no usable cores")
        host = platform.node() or "unknown-host"
    except Exception as exc:
        logger.warning("machine detection failed (%s); using a conservative 1-core profile", exc)
        cores, host = 1, "unknown-host"
    idle_w, per_worker_w = _power_defaults(cores)
    return MachineProfile(
        host_id=host,
        logical_cores=cores,
        nominal_workers=max(1, cores * 3 // 4),
        idle_power_w=idle_w,
        per_worker_power_w=per_worker_w,
        concurrency_power_exponent=defaults.TUNED_POWER_GAMMA,
        contention_factor=defaults.TUNED_CONTENTION_DELTA,
        detection_source=DetectionSource.AUTO,
    )


# --- OS control application ----------------------------------------------------

_NICE_BY_PRIORITY = {
    PriorityClass.NORMAL: 0,
    PriorityClass.BELOW_NORMAL: 5,
    PriorityClass.LOW: 10,
}


@dataclass(frozen=True)
class ControlSettings:
    thread_cap: int | None
    priority_class: PriorityClass
    affinity: int | None


@dataclass(frozen=True)
class ControlReport:
    """What a band asked for versus what actually took effect.

    Every requested control is either reflected in ``applied`` or explained
    in ``skipped_reasons``; control failures never abort a run.
    """

    requested: ControlSettings
    applied: ControlSettings
    skipped_reasons: tuple[str, ...]

    def audit_lines(self) -> tuple[str, ...]:
        cap = "none" if self.applied.thread_cap is None else str(self.applied.thread_cap)
        aff = "all-cores" if self.applied.affinity is None else f"first-{self.applied.affinity}"
        lines = [
            f"thread_cap={cap}",
            f"priority={self.applied.priority_class.value}",
            f"affinity={aff}",
        ]
        lines.extend(f"skipped: {reason}" for reason in self.skipped_reasons)
        return tuple(lines)


def apply_controls(decision: IntensityDecision, profile: MachineProfile) -> ControlReport:
    """Apply the band's priority and affinity to this process.

    The thread cap is enforced by the worker pool (drain-resize), so it
    counts as applied by construction. Priority is applied process-wide;
    note that dropping niceness back down later may need privileges, in
    which case the restore lands in ``skipped_reasons``.
    """
    requested = ControlSettings(decision.thread_cap, decision.priority_class, decision.affinity)
    skipped: list[str] = []

    applied_priority = requested.priority_class
    nice = _NICE_BY_PRIORITY[requested.priority_class]
    try:
        if not hasattr(os, "setpriority"):
            raise AttributeError("os.setpriority unavailable")
        os.setpriority(os.PRIO_PROCESS, 0, nice)
    except (AttributeError, OSError) as exc:
        skipped.append(f"priority {requested.priority_class.value} skipped: {exc}")
        applied_priority = PriorityClass.NORMAL

    applied_affinity = requested.affinity
    want = (set(range(min(requested.affinity, profile.logical_cores)))
            if requested.affinity is not None else None)
    try:
        if not hasattr(os, "sched_setaffinity"):
            raise AttributeError("affinity unsupported on this platform")
        if want is None:
            # All cores: restore the widest mask we can (extra ids are ignored).
            full = set(range(profile.logical_cores)) | os.sched_getaffinity(0)
            os.sched_setaffinity(0, full)
        else:
            os.sched_setaffinity(0, want)
    except (AttributeError, OSError) as exc:
        if requested.affinity is not None:
            skipped.append(f"affinity restricted({requested.affinity}) skipped: {exc}")
        applied_affinity = None

    return ControlReport(requested,
                         ControlSettings(requested.thread_cap, applied_priority, applied_affinity),
                         tuple(skipped))


# --- batches, checkpoints -------------------------------------------------------


class BatchStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


@dataclass
class BatchManifest:
    """One batch of the workload: scenario range [first, last) and its output."""

    batch_id: int
    first_scenario: int
    last_scenario: int
    output_path: Path
    status: BatchStatus = BatchStatus.PENDING
    attempt_count: int = 0

    @property
    def scenario_count(self) -> int:
        return self.last_scenario - self.first_scenario


def build_manifests(workload: WorkloadSpec, batches_dir: Path,
                    batch_size: int | None = None) -> list[BatchManifest]:
    size = batch_size or workload.batch_size
    total = workload.total_scenarios
    count = math.ceil(total / size)
    return [
        BatchManifest(
            batch_id=i,
            first_scenario=i * size,
            last_scenario=min((i + 1) * size, total),
            output_path=batches_dir / f"batch_{i:06d}.out",
        )
        for i in range(count)
    ]


@dataclass(frozen=True)
class Checkpoint:
    run_id: str
    workload_fingerprint: str
    policy_fingerprint: str
    total_batches: int
    completed: frozenset[int]
    attempts: dict[int, int]
    next_unit_id: int
    created_ts: str


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> None:
    """Atomic write: the previous checkpoint is replaced or left intact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "run_id": checkpoint.run_id,
        "workload_fingerprint": checkpoint.workload_fingerprint,
        "policy_fingerprint": checkpoint.policy_fingerprint,
        "total_batches": checkpoint.total_batches,
        "completed": sorted(checkpoint.completed),
        "attempts": {str(k): v for k, v in sorted(checkpoint.attempts.items())},
        "next_unit_id": checkpoint.next_unit_id,
        "created_ts": checkpoint.created_ts,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from None
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} file")
    try:
        return Checkpoint(
            run_id=str(doc["run_id"]),
            workload_fingerprint=str(doc["workload_fingerprint"]),
            policy_fingerprint=str(doc["policy_fingerprint"]),
            total_batches=int(doc["total_batches"]),
            completed=frozenset(int(b) for b in doc["completed"]),
            attempts={int(k): int(v) for k, v in doc.get("attempts", {}).items()},
            next_unit_id=int(doc["next_unit_id"]),
            created_ts=str(doc["created_ts"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad checkpoint {path}: {exc}") from None


# --- evaluators ----------------------------------------------------------------

_BURN_OPS_PER_SECOND: float | None = None


def _ops_per_second() -> float:
    """One-time calibration of the synthetic arithmetic burn loop."""
    global _BURN_OPS_PER_SECOND
    if _BURN_OPS_PER_SECOND is None:
        probe = 200_000
        start = time.perf_counter()
        _spin(probe)
        elapsed = max(time.perf_counter() - start, 1e-6)
        _BURN_OPS_PER_SECOND = probe / elapsed
    return _BURN_OPS_PER_SECOND


def _spin(ops: int) -> float:
    acc = 0.0
    for i in range(ops):
        acc += math.sqrt(float(i & 1023) + 1.0)
    return acc


class SyntheticEvaluator:
    """Self-contained stand-in workload for demos and integrity tests.

    Each scenario burns roughly its calibrated share of CPU (scaled by
    ``work_scale``) and produces one deterministic row that depends only on
    (seed, scenario id), never on batching or retries, so merged outputs are
    reproducible byte for byte.
    """

    def __init__(self, seed: int = 0, work_scale: float = 1.0):
        self.seed = seed
        self.work_scale = work_scale

    def __call__(self, manifest: BatchManifest, workload: WorkloadSpec) -> list[str]:
        per_scenario_s = workload.per_scenario_worker_seconds * self.work_scale
        ops = max(1, int(_ops_per_second() * per_scenario_s))
        rows = []
        for sid in range(manifest.first_scenario, manifest.last_scenario):
            _spin(ops)
            digest = hashlib.sha256(f"{self.seed}:{sid}".encode("ascii")).hexdigest()[:16]
            rows.append(f"{sid},{digest}")
        return rows


class CommandEvaluator:
    """Runs a user command per batch (external-workload mode).

    Writes a manifest file next to the batch output, invokes the command
    with the manifest path as its final argument, and expects the command to
    create the output file named in the manifest: one line per scenario id,
    id in the first comma-separated field. Non-zero exit is a batch failure.
    """

    def __init__(self, command: str | Sequence[str], seed: int = 0):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.argv:
            raise ValueError("evaluator command must be non-empty")
        self.seed = seed

    def __call__(self, manifest: BatchManifest, workload: WorkloadSpec) -> None:
        manifest_path = manifest.output_path.with_suffix(".manifest.json")
        doc = {
            "batch_id": manifest.batch_id,
            "first_scenario": manifest.first_scenario,
            "last_scenario": manifest.last_scenario,
            "output_path": str(manifest.output_path),
            "workload_name": workload.name,
            "parameter_seed": self.seed,
        }
        manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                 encoding="utf-8")
        proc = subprocess.run([*self.argv, str(manifest_path)],
                              capture_output=True, text=True)
        if proc.returncode != 0:
            tail = (proc.stderr or proc.stdout or "").strip().splitlines()[-3:]
            raise EvaluatorError(
                f"evaluator command exited {proc.returncode} for batch "
                f"{manifest.batch_id}: {' | '.join(tail) if tail else 'no output'}")
        if not manifest.output_path.exists():
            raise EvaluatorError(
                f"evaluator command succeeded but wrote no output file "
                f"{manifest.output_path} for batch {manifest.batch_id}")
        return None


# --- merge verification ----------------------------------------------------------


@dataclass(frozen=True)
class MergeDescriptor:
    path: Path | None
    scenario_count: int
    byte_size: int
    sha256_hex: str


def _format_ids(ids: Sequence[int], cap: int = 20) -> str:
    shown = ", ".join(str(i) for i in ids[:cap])
    more = len(ids) - cap
    return "{" + shown + (f", ... {more} more" + "}" if more > 0 else "}")


def verify_merge(manifests: Sequence[BatchManifest], workload: WorkloadSpec,
                 merged_path: str | Path | None = None) -> MergeDescriptor:
    """Check exactly-once scenario coverage; optionally write the merged file.

    Outputs are concatenated in batch_id order. Any missing, duplicated, or
    out-of-range scenario id fails the merge with the exact ids in the error;
    the merged file is only written after the check passes.
    """
    not_done = sorted(m.batch_id for m in manifests if m.status is not BatchStatus.DONE)
    if not_done:
        raise MergeError(f"cannot merge: batches not done: {_format_ids(not_done)}")
    total = workload.total_scenarios
    seen = bytearray(total)
    duplicated: list[int] = []
    out_of_range: list[int] = []
    ordered = sorted(manifests, key=lambda m: m.batch_id)
    chunks: list[bytes] = []
    for manifest in ordered:
        try:
            data = manifest.output_path.read_bytes()
        except FileNotFoundError:
            raise MergeError(f"batch {manifest.batch_id} output missing: "
                             f"{manifest.output_path}") from None
        chunks.append(data)
        for line in data.decode("utf-8").splitlines():
            if not line.strip():
                continue
            head = line.split(",", 1)[0]
            try:
                sid = int(head)
            except ValueError:
                raise MergeError(
                    f"batch {manifest.batch_id}: malformed line (no leading "
                    f"scenario id): {line[:80]!r}") from None
            if not 0 <= sid < total:
                out_of_range.append(sid)
            elif seen[sid]:
                duplicated.append(sid)
            else:
                seen[sid] = 1
    missing = [i for i in range(total) if not seen[i]]
    if missing or duplicated or out_of_range:
        parts = []
        if missing:
            parts.append(f"missing scenario ids: {_format_ids(missing)}")
        if duplicated:
            parts.append(f"duplicated scenario ids: {_format_ids(duplicated)}")
        if out_of_range:
            parts.append(f"out-of-range scenario ids: {_format_ids(out_of_range)}")
        raise MergeError("merge verification failed: " + "; ".join(parts),
                         missing=missing, duplicated=duplicated, out_of_range=out_of_range)

    digest = hashlib.sha256()
    size = 0
    for chunk in chunks:
        digest.update(chunk)
        size += len(chunk)
    path = None
    if merged_path is not None:
        path = Path(merged_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with tmp.open("wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    return MergeDescriptor(path=path, scenario_count=total,
                           byte_size=size, sha256_hex=digest.hexdigest())


# --- phase attribution -----------------------------------------------------------


def decision_segments(policy: TimingPolicy, profile: MachineProfile,
                      start: datetime, end: datetime,
                      ) -> Iterator[tuple[datetime, datetime, IntensityDecision]]:
    """Split [start, end) at decision boundaries, yielding each segment."""
    t = start
    while t < end:
        decision = intensity_at(policy, t, profile)
        boundary = next_boundary(policy, t)
        seg_end = boundary if boundary < end else end
        yield t, seg_end, decision
        t = seg_end


def _batch_slices(policy: TimingPolicy, profile: MachineProfile,
                  start: datetime, end: datetime) -> list[tuple[Phase, float, int, float]]:
    """Phase slices for one batch, billed as an equal share of the pool.

    A batch draining through a pause band still occupies one worker, so the
    billing floor is a single-worker machine share.
    """
    slices = []
    for seg_start, seg_end, decision in decision_segments(policy, profile, start, end):
        pool = max(1, effective_workers(decision))
        seconds = (seg_end - seg_start).total_seconds()
        slices.append((decision.phase, seconds, pool, 1.0 / pool))
    return slices


def _run_slices(policy: TimingPolicy, profile: MachineProfile,
                start: datetime, end: datetime) -> list[tuple[Phase, float, int, float]]:
    """Whole-machine phase slices for a full run window (pauses included)."""
    slices = []
    for seg_start, seg_end, decision in decision_segments(policy, profile, start, end):
        seconds = (seg_end - seg_start).total_seconds()
        slices.append((decision.phase, seconds, effective_workers(decision), 1.0))
    return slices


# --- the run loop ----------------------------------------------------------------


@dataclass(frozen=True)
class RunResult:
    run_id: str
    summary: RunSummary
    merge: MergeDescriptor
    run_dir: Path
    log_path: Path
    records: tuple[TrackedUnitRecord, ...]


@dataclass
class _PoolState:
    pending: deque
    manifests: dict[int, BatchManifest]
    running: set = field(default_factory=set)
    completed: set = field(default_factory=set)
    attempts: dict = field(default_factory=dict)
    target: int = 0
    decision: IntensityDecision | None = None
    decision_minute: datetime | None = None
    controls: tuple[str, ...] = ()
    abort_exc: Exception | None = None


def dedupe_batch_records(records: Sequence[TrackedUnitRecord]) -> list[TrackedUnitRecord]:
    """Keep the last record per batch_id (a crash window can orphan one)."""
    by_batch: dict[str, TrackedUnitRecord] = {}
    others: list[TrackedUnitRecord] = []
    for record in sorted(records, key=lambda r: r.unit_id):
        batch_id = record.metadata.get("batch_id")
        if batch_id is None:
            others.append(record)
        else:
            by_batch[batch_id] = record
    return sorted(others + list(by_batch.values()), key=lambda r: r.unit_id)


def _require_grid(grid: GridFactor) -> None:
    if not (isinstance(grid.kg_co2e_per_kwh, (int, float))
            and math.isfinite(grid.kg_co2e_per_kwh) and grid.kg_co2e_per_kwh >= 0):
        raise ValidationFailure(ValidationReport((Violation(
            "grid.kg_co2e_per_kwh", f"grid {grid.region!r}",
            f"kg_co2e_per_kwh must be finite and >= 0 (got {grid.kg_co2e_per_kwh})"),)))


def run_workload(
    workload: WorkloadSpec,
    policy: TimingPolicy,
    profile: MachineProfile,
    grid: GridFactor,
    evaluator: Callable[[BatchManifest, WorkloadSpec], list[str] | None] | None = None,
    resume: bool = False,
    *,
    out_dir: str | Path = "runs",
    run_id: str | None = None,
    seed: int = 0,
    retry_limit: int = 3,
    force: bool = False,
    now_fn: Callable[[], datetime] | None = None,
    poll_interval_s: float = 0.25,
) -> RunResult:
    """Execute the workload to verified completion; see module docstring.

    Incomplete state lives under ``out_dir/.state/<fingerprint>/`` and
    survives crashes; completed artifacts (run log, merged output) move to
    ``out_dir/<run_id>/``. A fresh run refuses to clobber existing state
    unless ``force`` is set; ``resume`` continues it instead.
    """
    require_valid(validate_workload(workload))
    require_valid(validate_policy(policy))
    require_valid(validate_machine_profile(profile))
    _require_grid(grid)
    if retry_limit < 0:
        raise ValueError(f"retry_limit must be >= 0 (got {retry_limit})")
    evaluator = evaluator or SyntheticEvaluator(seed)
    now_fn = now_fn or datetime.now
    granularity = workload.granularity

    workload_fp = canonical_fingerprint(workload_to_doc(workload))
    policy_fp = canonical_fingerprint(policy_to_doc(policy))
    state_key = hashlib.sha256((workload_fp + policy_fp).encode("ascii")).hexdigest()[:12]
    out_dir = Path(out_dir)
    state_dir = out_dir / ".state" / state_key
    batches_dir = state_dir / "batches"
    checkpoint_path = state_dir / "checkpoint.json"
    log_path = state_dir / "run.log"

    attempts: dict[int, int] = {}
    completed: set[int] = set()
    first_unit_id = 0
    if checkpoint_path.exists():
        if resume:
            checkpoint = load_checkpoint(checkpoint_path)
            if (checkpoint.workload_fingerprint != workload_fp
                    or checkpoint.policy_fingerprint != policy_fp):
                raise ResumeMismatchError(
                    f"checkpoint at {checkpoint_path} was created for a different "
                    "workload/policy; refusing to resume")
            run_id = checkpoint.run_id
            completed = set(checkpoint.completed)
            attempts = dict(checkpoint.attempts)
            first_unit_id = checkpoint.next_unit_id
        elif force:
            shutil.rmtree(state_dir)
        else:
            raise StateExistsError(
                f"incomplete run state exists at {state_dir}; pass resume=True to "
                "continue it or force=True to discard it")
    elif resume:
        raise ResumeMismatchError(
            f"nothing to resume: no checkpoint under {state_dir}")

    batches_dir.mkdir(parents=True, exist_ok=True)
    if run_id is None:
        run_id = new_run_id(now_fn(), Random(seed))

    batch_size = policy.batch_size_override or workload.batch_size
    manifests = build_manifests(workload, batches_dir, batch_size)
    for manifest in manifests:
        manifest.attempt_count = attempts.get(manifest.batch_id, 0)
        if manifest.batch_id in completed:
            manifest.status = BatchStatus.DONE
    by_id = {m.batch_id: m for m in manifests}

    state = _PoolState(
        pending=deque(m.batch_id for m in manifests if m.status is not BatchStatus.DONE),
        manifests=by_id,
        completed=set(completed),
        attempts=attempts,
    )
    peak_target = max(
        min(workers_for(band.intensity, profile),
            band.thread_cap if band.thread_cap is not None else profile.logical_cores)
        for band in policy.bands
    )
    if peak_target == 0:
        raise ExecutionAborted(
            f"policy {policy.name!r} pauses execution in every band; "
            "the workload would never progress")

    log_writer = RunLogWriter(log_path, meta={
        "run_id": run_id,
        "policy_name": policy.name,
        "workload_name": workload.name,
        "host_id": profile.host_id,
        "granularity": granularity.value,
    })
    run = RunHandle(run_id, policy.name, profile, grid, granularity,
                    on_record=log_writer.write, first_unit_id=first_unit_id)
    cond = threading.Condition()
    run_start = now_fn()

    def checkpoint_locked() -> None:
        save_checkpoint(Checkpoint(
            run_id=run_id,
            workload_fingerprint=workload_fp,
            policy_fingerprint=policy_fp,
            total_batches=len(manifests),
            completed=frozenset(state.completed),
            attempts=dict(state.attempts),
            next_unit_id=run.next_unit_id,
            created_ts=now_fn().isoformat(),
        ), checkpoint_path)

    def refresh_locked() -> None:
        now = now_fn()
        minute = now.replace(second=0, microsecond=0)
        if state.decision_minute == minute:
            return
        state.decision_minute = minute
        decision = intensity_at(policy, now, profile)
        previous = state.decision
        if previous is None or (
                (previous.phase, previous.priority_class, previous.thread_cap,
                 previous.affinity, previous.workers)
                != (decision.phase, decision.priority_class, decision.thread_cap,
                    decision.affinity, decision.workers)):
            report = apply_controls(decision, profile)
            state.controls = report.audit_lines()
        state.decision = decision
        target = effective_workers(decision)
        if target != state.target:
            state.target = target
            cond.notify_all()

    with cond:
        refresh_locked()
        checkpoint_locked()

    def worker(index: int) -> None:
        while True:
            with cond:
                batch_id = None
                while batch_id is None:
                    refresh_locked()
                    if state.abort_exc is not None:
                        return
                    if not state.pending and not state.running:
                        return
                    if index < state.target and state.pending:
                        batch_id = state.pending.popleft()
                        state.running.add(batch_id)
                        dispatch_controls = state.controls
                        break
                    cond.wait(timeout=poll_interval_s)
            manifest = by_id[batch_id]
            manifest.status = BatchStatus.RUNNING
            started = now_fn()
            failure: Exception | None = None
            try:
                rows = evaluator(manifest, workload)
                if rows is not None:
                    tmp = manifest.output_path.with_name(manifest.output_path.name + ".tmp")
                    tmp.write_text("".join(f"{row}\n" for row in rows), encoding="utf-8")
                    os.replace(tmp, manifest.output_path)
                elif not manifest.output_path.exists():
                    raise EvaluatorError(
                        f"evaluator wrote no output for batch {batch_id}")
            except Exception as exc:
                failure = exc
            finished = now_fn()
            with cond:
                state.running.discard(batch_id)
                if failure is None:
                    manifest.status = BatchStatus.DONE
                    state.completed.add(batch_id)
                    if granularity is Granularity.STEP_LEVEL:
                        record_unit(
                            run, UnitKind.BATCH, started, finished,
                            workers_used=max(1, state.target),
                            phase_seconds=_batch_slices(policy, profile, started, finished),
                            controls_applied=dispatch_controls,
                            metadata={
                                "batch_id": str(batch_id),
                                "scenarios": str(manifest.scenario_count),
                                "attempt": str(state.attempts.get(batch_id, 0) + 1),
                            },
                        )
                    checkpoint_locked()
                else:
                    state.attempts[batch_id] = state.attempts.get(batch_id, 0) + 1
                    manifest.attempt_count = state.attempts[batch_id]
                    if state.attempts[batch_id] > retry_limit:
                        manifest.status = BatchStatus.FAILED
                        state.abort_exc = ExecutionAborted(
                            f"batch {batch_id} failed {state.attempts[batch_id]} times "
                            f"(retry limit {retry_limit}): {failure}; resumable "
                            f"checkpoint retained at {checkpoint_path}")
                    else:
                        manifest.status = BatchStatus.PENDING
                        state.pending.appendleft(batch_id)
                    checkpoint_locked()
                cond.notify_all()

    threads = [threading.Thread(target=worker, args=(i,), name=f"carina-worker-{i}",
                                daemon=True) for i in range(peak_target)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    if state.abort_exc is not None:
        log_writer.close()
        raise state.abort_exc

    run_end = now_fn()
    if granularity is Granularity.WHOLE_RUN:
        slices = _run_slices(policy, profile, run_start, run_end)
        record_unit(
            run, UnitKind.RUN, run_start, run_end,
            workers_used=max((s[2] for s in slices), default=0),
            phase_seconds=slices,
            controls_applied=state.controls,
            metadata={"batches_completed": str(len(state.completed))},
        )
        with cond:
            checkpoint_locked()
    log_writer.close()

    run_dir = out_dir / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    descriptor = verify_merge(manifests, workload, run_dir / "merged.csv")

    _, logged = read_run_log(log_path)
    records = tuple(dedupe_batch_records(logged))
    summary = aggregate_records(records, run_id=run_id, policy_name=policy.name,
                                profile=profile, grid=grid)
    final_log = run_dir / "run.log"
    shutil.move(str(log_path), final_log)
    shutil.rmtree(state_dir)
    try:
        state_dir.parent.rmdir()  # drop .state/ itself once the last run is done
    except OSError:
        pass
    return RunResult(
        run_id=run_id,
        summary=summary,
        merge=descriptor,
        run_dir=run_dir,
        log_path=final_log,
        records=records,
    )


__all__ = [
    "ExecutionAborted", "ResumeMismatchError", "StateExistsError", "EvaluatorError",
    "MergeError", "detect_machine", "ControlSettings", "ControlReport",
    "apply_controls", "BatchStatus", "BatchManifest", "build_manifests",
    "Checkpoint", "save_checkpoint", "load_checkpoint", "SyntheticEvaluator",
    "CommandEvaluator", "MergeDescriptor", "verify_merge", "decision_segments", "dedupe_batch_records",
    "RunResult", "run_workload",
]

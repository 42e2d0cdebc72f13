from __future__ import annotations

import json
import os
import sys
import threading
from dataclasses import replace
from datetime import datetime
from pathlib import Path

import pytest

from carina import defaults
from carina.controller import (
    BatchManifest,
    BatchStatus,
    Checkpoint,
    CommandEvaluator,
    EvaluatorError,
    ExecutionAborted,
    MergeError,
    ResumeMismatchError,
    StateExistsError,
    SyntheticEvaluator,
    _power_defaults,
    apply_controls,
    build_manifests,
    decision_segments,
    dedupe_batch_records,
    detect_machine,
    load_checkpoint,
    run_workload,
    save_checkpoint,
    verify_merge,
)
from carina.model import (
    DetectionSource,
    FormatError,
    Granularity,
    GridFactor,
    MachineProfile,
    Phase,
    PriorityClass,
    TimeBand,
    TimingPolicy,
    ValidationFailure,
    WorkloadSpec,
    save_profile,
)
from carina.policy import IntensityDecision, builtin_policy, intensity_at
from carina.tracker import RunHandle, UnitKind, record_unit

GAMMA = defaults.TUNED_POWER_GAMMA
DELTA = defaults.TUNED_CONTENTION_DELTA


def steady_policy(intensity: float = 1.0, name: str = "steady") -> TimingPolicy:
    return TimingPolicy(name, (TimeBand(Phase.NIGHT, 0, 1440, intensity),))


@pytest.fixture
def one_worker_profile():
    return MachineProfile("ctl-host", 2, 1, 10.0, 5.0, GAMMA, DELTA)


@pytest.fixture
def tiny_workload():
    return WorkloadSpec("tiny", 100, 0.0001, 25, 0.0)


def fast_eval(seed: int = 0) -> SyntheticEvaluator:
    return SyntheticEvaluator(seed, work_scale=0.0)


class ScriptedEvaluator:
    """Fails each listed batch a set number of times, then succeeds."""

    def __init__(self, fail_plan=None):
        self.calls: list[int] = []
        self.fail_left = dict(fail_plan or {})
        self.inner = fast_eval()

    def __call__(self, manifest, workload):
        self.calls.append(manifest.batch_id)
        if self.fail_left.get(manifest.batch_id, 0) > 0:
            self.fail_left[manifest.batch_id] -= 1
            raise EvaluatorError(f"scripted failure for batch {manifest.batch_id}")
        return self.inner(manifest, workload)


# --- machine detection ------------------------------------------------------------


def test_detected_profile_is_valid_and_marked_auto():
    profile = detect_machine()
    assert profile.detection_source is DetectionSource.AUTO
    assert profile.logical_cores >= 1
    assert 1 <= profile.nominal_workers <= profile.logical_cores
    assert profile.concurrency_power_exponent == GAMMA
    assert profile.contention_factor == DELTA


@pytest.mark.parametrize("cores,expected_nominal", [
    (1, 1), (2, 1), (4, 3), (10, 7), (16, 12), (32, 24),
])
def test_nominal_workers_are_three_quarters_of_cores(monkeypatch, cores, expected_nominal):
    monkeypatch.setattr(os, "sched_getaffinity", lambda pid: set(range(cores)))
    profile = detect_machine()
    assert profile.logical_cores == cores
    assert profile.nominal_workers == expected_nominal


@pytest.mark.parametrize("cores,idle_w,per_worker_w", [
    (1, 6.0, 9.0), (2, 6.0, 9.0), (3, 8.0, 10.0), (8, 10.0, 12.0),
    (16, 12.0, 14.0), (17, 16.0, 15.0), (33, 24.0, 16.0), (256, 24.0, 16.0),
])
def test_power_defaults_scale_with_core_count(cores, idle_w, per_worker_w):
    assert _power_defaults(cores) == (idle_w, per_worker_w)


def test_detection_failure_falls_back_to_one_core(monkeypatch, caplog):
    def boom(pid):
        raise RuntimeError("no affinity for you")
    monkeypatch.setattr(os, "sched_getaffinity", boom)
    with caplog.at_level("WARNING"):
        profile = detect_machine()
    assert profile.logical_cores == 1
    assert profile.host_id == "unknown-host"
    assert profile.detection_source is DetectionSource.AUTO
    assert any("detection failed" in rec.message for rec in caplog.records)


def test_profile_file_overrides_detection(tmp_path, example_profile):
    path = tmp_path / "profile.json"
    save_profile(example_profile, path)
    loaded = detect_machine(path)
    assert loaded.detection_source is DetectionSource.MANUAL
    assert loaded.host_id == example_profile.host_id
    assert loaded.logical_cores == example_profile.logical_cores
    assert loaded.idle_power_w == example_profile.idle_power_w


# --- OS control application --------------------------------------------------------


def _decision(profile, *, priority=PriorityClass.NORMAL, thread_cap=None, affinity=None):
    return IntensityDecision(
        phase=Phase.NIGHT, intensity=1.0, workers=profile.nominal_workers,
        priority_class=priority, thread_cap=thread_cap, affinity=affinity,
        band_end_minute=1440)


@pytest.fixture
def restore_priority():
    yield
    try:
        os.setpriority(os.PRIO_PROCESS, 0, 0)
    except OSError:
        pass


def test_default_controls_apply_cleanly(one_worker_profile):
    report = apply_controls(_decision(one_worker_profile), one_worker_profile)
    assert report.skipped_reasons == ()
    assert report.applied == report.requested
    assert "thread_cap=none" in report.audit_lines()
    assert "affinity=all-cores" in report.audit_lines()


def test_low_priority_is_applied(one_worker_profile, restore_priority):
    report = apply_controls(
        _decision(one_worker_profile, priority=PriorityClass.LOW), one_worker_profile)
    assert report.applied.priority_class is PriorityClass.LOW
    assert f"priority={PriorityClass.LOW.value}" in report.audit_lines()
    assert os.getpriority(os.PRIO_PROCESS, 0) == 10


def test_thread_cap_is_applied_by_construction(one_worker_profile):
    report = apply_controls(
        _decision(one_worker_profile, thread_cap=3), one_worker_profile)
    assert report.applied.thread_cap == 3
    assert "thread_cap=3" in report.audit_lines()


def test_missing_affinity_support_is_reported_not_fatal(monkeypatch, one_worker_profile):
    monkeypatch.delattr(os, "sched_setaffinity")
    report = apply_controls(
        _decision(one_worker_profile, affinity=2), one_worker_profile)
    assert report.applied.affinity is None
    assert any("affinity" in reason and "unsupported" in reason
               for reason in report.skipped_reasons)


def test_unrequested_affinity_never_produces_a_skip(monkeypatch, one_worker_profile):
    monkeypatch.delattr(os, "sched_setaffinity")
    report = apply_controls(_decision(one_worker_profile), one_worker_profile)
    assert report.skipped_reasons == ()


def test_priority_failure_is_reported_not_fatal(monkeypatch, one_worker_profile):
    def deny(which, who, value):
        raise OSError("permission denied")
    monkeypatch.setattr(os, "setpriority", deny)
    report = apply_controls(
        _decision(one_worker_profile, priority=PriorityClass.LOW), one_worker_profile)
    assert report.applied.priority_class is PriorityClass.NORMAL
    assert any("priority" in reason for reason in report.skipped_reasons)


# --- batches and checkpoints --------------------------------------------------------


def test_manifests_partition_the_workload(tmp_path, tiny_workload):
    manifests = build_manifests(tiny_workload, tmp_path)
    assert len(manifests) == 4
    assert [(m.first_scenario, m.last_scenario) for m in manifests] == [
        (0, 25), (25, 50), (50, 75), (75, 100)]
    assert manifests[0].output_path.name == "batch_000000.out"
    assert all(m.status is BatchStatus.PENDING for m in manifests)


def test_ragged_final_batch(tmp_path):
    workload = WorkloadSpec("ragged", 10, 0.001, 3, 0.0)
    manifests = build_manifests(workload, tmp_path)
    assert len(manifests) == 4
    assert (manifests[-1].first_scenario, manifests[-1].last_scenario) == (9, 10)
    assert manifests[-1].scenario_count == 1


def test_batch_size_argument_overrides_workload(tmp_path, tiny_workload):
    manifests = build_manifests(tiny_workload, tmp_path, batch_size=50)
    assert len(manifests) == 2


def test_checkpoint_round_trip(tmp_path):
    checkpoint = Checkpoint(
        run_id="r1", workload_fingerprint="w" * 64, policy_fingerprint="p" * 64,
        total_batches=4, completed=frozenset({0, 2}), attempts={1: 2},
        next_unit_id=2, created_ts="2025-01-06T08:00:00")
    path = tmp_path / "checkpoint.json"
    save_checkpoint(checkpoint, path)
    assert load_checkpoint(path) == checkpoint
    assert not path.with_name("checkpoint.json.tmp").exists()


def test_checkpoint_rewrite_replaces_cleanly(tmp_path):
    path = tmp_path / "checkpoint.json"
    first = Checkpoint("r", "w", "p", 4, frozenset(), {}, 0, "t")
    save_checkpoint(first, path)
    second = replace(first, completed=frozenset({0, 1}), next_unit_id=2)
    save_checkpoint(second, path)
    assert load_checkpoint(path) == second


def test_garbage_checkpoint_is_a_format_error(tmp_path):
    path = tmp_path / "checkpoint.json"
    path.write_text("{not json")
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_text(json.dumps({"format": "other", "version": 1}))
    with pytest.raises(FormatError):
        load_checkpoint(path)
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "nonexistent.json")


# --- evaluators ----------------------------------------------------------------------


def test_synthetic_rows_depend_only_on_seed_and_scenario(tmp_path, tiny_workload):
    manifest = BatchManifest(0, 0, 5, tmp_path / "b.out")
    again = BatchManifest(7, 0, 5, tmp_path / "b2.out")  # different batch id
    rows = fast_eval(seed=3)(manifest, tiny_workload)
    assert rows == fast_eval(seed=3)(again, tiny_workload)
    assert rows != fast_eval(seed=4)(manifest, tiny_workload)
    assert all(row.split(",")[0] == str(i) for i, row in enumerate(rows))


def _write_output_script() -> list[str]:
    script = (
        "import json, sys, pathlib\n"
        "doc = json.load(open(sys.argv[1]))\n"
        "path = pathlib.Path(doc['output_path'])\n"
        "rows = ''.join(f'{i},ok\\n' for i in range(doc['first_scenario'], doc['last_scenario']))\n"
        "path.write_text(rows)\n")
    return [sys.executable, "-c", script]


def test_command_evaluator_runs_and_collects_output(tmp_path, tiny_workload):
    manifest = BatchManifest(0, 0, 5, tmp_path / "b.out")
    evaluator = CommandEvaluator(_write_output_script(), seed=9)
    assert evaluator(manifest, tiny_workload) is None
    assert manifest.output_path.read_text().splitlines() == [f"{i},ok" for i in range(5)]
    manifest_doc = json.loads(manifest.output_path.with_suffix(".manifest.json").read_text())
    assert manifest_doc["first_scenario"] == 0
    assert manifest_doc["last_scenario"] == 5
    assert manifest_doc["parameter_seed"] == 9


def test_command_evaluator_nonzero_exit_is_a_batch_failure(tmp_path, tiny_workload):
    manifest = BatchManifest(0, 0, 5, tmp_path / "b.out")
    evaluator = CommandEvaluator([sys.executable, "-c", "import sys; sys.exit(7)"])
    with pytest.raises(EvaluatorError, match="exited 7"):
        evaluator(manifest, tiny_workload)


def test_command_evaluator_missing_output_is_a_batch_failure(tmp_path, tiny_workload):
    manifest = BatchManifest(0, 0, 5, tmp_path / "b.out")
    evaluator = CommandEvaluator([sys.executable, "-c", "pass"])
    with pytest.raises(EvaluatorError, match="no output file"):
        evaluator(manifest, tiny_workload)


def test_empty_command_rejected():
    with pytest.raises(ValueError):
        CommandEvaluator("")


# --- merge verification ----------------------------------------------------------------


def _done_batches(tmp_path, rows_by_batch):
    manifests = []
    for batch_id, rows in rows_by_batch.items():
        path = tmp_path / f"batch_{batch_id:06d}.out"
        path.write_text("".join(f"{r}\n" for r in rows))
        manifests.append(BatchManifest(batch_id, 0, 0, path, status=BatchStatus.DONE))
    return manifests


def test_merge_passes_on_exact_coverage(tmp_path):
    workload = WorkloadSpec("w", 10, 0.001, 5, 0.0)
    manifests = _done_batches(tmp_path, {
        0: [f"{i},a" for i in range(5)],
        1: [f"{i},a" for i in range(5, 10)],
    })
    merged = tmp_path / "merged.csv"
    descriptor = verify_merge(manifests, workload, merged)
    assert descriptor.scenario_count == 10
    assert merged.read_text().splitlines() == [f"{i},a" for i in range(10)]
    assert descriptor.byte_size == merged.stat().st_size


def test_merge_reports_the_missing_id(tmp_path):
    workload = WorkloadSpec("w", 100, 0.001, 50, 0.0)
    manifests = _done_batches(tmp_path, {
        0: [f"{i},a" for i in range(50)],
        1: [f"{i},a" for i in range(50, 100) if i != 77],
    })
    merged = tmp_path / "merged.csv"
    with pytest.raises(MergeError) as excinfo:
        verify_merge(manifests, workload, merged)
    assert excinfo.value.missing == (77,)
    assert "77" in str(excinfo.value)
    assert not merged.exists()  # nothing written on failure


def test_merge_reports_duplicates(tmp_path):
    workload = WorkloadSpec("w", 10, 0.001, 5, 0.0)
    manifests = _done_batches(tmp_path, {
        0: [f"{i},a" for i in range(5)] + ["3,b"],
        1: [f"{i},a" for i in range(5, 10)],
    })
    with pytest.raises(MergeError) as excinfo:
        verify_merge(manifests, workload)
    assert excinfo.value.duplicated == (3,)


def test_merge_reports_out_of_range_ids(tmp_path):
    workload = WorkloadSpec("w", 10, 0.001, 5, 0.0)
    manifests = _done_batches(tmp_path, {
        0: [f"{i},a" for i in range(5)],
        1: [f"{i},a" for i in range(5, 10)] + ["100,zap"],
    })
    with pytest.raises(MergeError) as excinfo:
        verify_merge(manifests, workload)
    assert excinfo.value.out_of_range == (100,)


def test_merge_refuses_unfinished_batches(tmp_path):
    workload = WorkloadSpec("w", 10, 0.001, 5, 0.0)
    manifests = _done_batches(tmp_path, {0: [f"{i},a" for i in range(5)]})
    manifests.append(BatchManifest(1, 5, 10, tmp_path / "b1.out"))
    with pytest.raises(MergeError, match="not done"):
        verify_merge(manifests, workload)


def test_merge_rejects_lines_without_a_scenario_id(tmp_path):
    workload = WorkloadSpec("w", 2, 0.001, 2, 0.0)
    manifests = _done_batches(tmp_path, {0: ["0,a", "oops,b"]})
    with pytest.raises(MergeError, match="malformed"):
        verify_merge(manifests, workload)


def test_merge_reports_a_lost_output_file(tmp_path):
    workload = WorkloadSpec("w", 2, 0.001, 2, 0.0)
    manifests = _done_batches(tmp_path, {0: ["0,a", "1,b"]})
    manifests[0].output_path.unlink()
    with pytest.raises(MergeError, match="output missing"):
        verify_merge(manifests, workload)


# --- phase attribution ------------------------------------------------------------------


def test_segments_tile_the_window_and_match_the_policy(example_profile):
    policy = builtin_policy("peak_aware_boosted_offhours")
    start = datetime(2025, 1, 6, 5, 0)
    end = datetime(2025, 1, 7, 5, 0)
    segments = list(decision_segments(policy, example_profile, start, end))
    assert segments[0][0] == start
    assert segments[-1][1] == end
    for (a_start, a_end, decision), (b_start, _, _) in zip(segments, segments[1:]):
        assert a_end == b_start
        assert a_start < a_end
    for seg_start, _, decision in segments:
        assert decision == intensity_at(policy, seg_start, example_profile)


# --- the run loop -------------------------------------------------------------------------


def test_run_completes_and_cleans_up(tmp_path, one_worker_profile, grid, tiny_workload):
    result = run_workload(
        tiny_workload, steady_policy(), one_worker_profile, grid,
        evaluator=fast_eval(), out_dir=tmp_path, run_id="run-a")
    assert result.run_id == "run-a"
    assert len(result.records) == 4
    assert sum(int(r.metadata["scenarios"]) for r in result.records) == 100
    assert result.summary.unit_count == 4
    assert result.merge.scenario_count == 100
    assert (result.run_dir / "merged.csv").exists()
    assert (result.run_dir / "run.log").exists()
    assert not (tmp_path / ".state").exists() or not any((tmp_path / ".state").iterdir())


def test_merged_output_is_reproducible(tmp_path, one_worker_profile, grid, tiny_workload):
    results = [
        run_workload(tiny_workload, steady_policy(), one_worker_profile, grid,
                     evaluator=fast_eval(seed=5), out_dir=tmp_path / str(i),
                     run_id="r")
        for i in range(2)
    ]
    first, second = (Path(r.merge.path).read_bytes() for r in results)
    assert first == second
    assert results[0].merge.sha256_hex == results[1].merge.sha256_hex


def test_seed_changes_the_synthetic_output(tmp_path, one_worker_profile, grid, tiny_workload):
    byte_versions = []
    for seed in (1, 2):
        result = run_workload(tiny_workload, steady_policy(), one_worker_profile, grid,
                              evaluator=fast_eval(seed=seed),
                              out_dir=tmp_path / str(seed), run_id="r")
        byte_versions.append(Path(result.merge.path).read_bytes())
    assert byte_versions[0] != byte_versions[1]


def test_policy_batch_size_override_wins(tmp_path, one_worker_profile, grid, tiny_workload):
    policy = replace(steady_policy(), batch_size_override=100)
    result = run_workload(tiny_workload, policy, one_worker_profile, grid,
                          evaluator=fast_eval(), out_dir=tmp_path, run_id="r")
    assert len(result.records) == 1
    assert result.records[0].metadata["scenarios"] == "100"


def test_whole_run_granularity_writes_one_record(tmp_path, one_worker_profile, grid):
    workload = WorkloadSpec("coarse", 100, 0.0001, 25, 0.0,
                            granularity=Granularity.WHOLE_RUN)
    result = run_workload(workload, steady_policy(), one_worker_profile, grid,
                          evaluator=fast_eval(), out_dir=tmp_path, run_id="r")
    assert len(result.records) == 1
    record = result.records[0]
    assert record.kind is UnitKind.RUN
    assert record.metadata["batches_completed"] == "4"


def test_all_pause_policy_aborts_up_front(tmp_path, one_worker_profile, grid, tiny_workload):
    with pytest.raises(ExecutionAborted, match="every band"):
        run_workload(tiny_workload, steady_policy(0.0, name="always-off"),
                     one_worker_profile, grid, evaluator=fast_eval(),
                     out_dir=tmp_path)


def test_negative_retry_limit_rejected(tmp_path, one_worker_profile, grid, tiny_workload):
    with pytest.raises(ValueError):
        run_workload(tiny_workload, steady_policy(), one_worker_profile, grid,
                     evaluator=fast_eval(), out_dir=tmp_path, retry_limit=-1)


def test_bad_grid_factor_rejected(tmp_path, one_worker_profile, tiny_workload):
    with pytest.raises(ValidationFailure):
        run_workload(tiny_workload, steady_policy(), one_worker_profile,
                     GridFactor("bad", -1.0), evaluator=fast_eval(), out_dir=tmp_path)


def test_transient_failures_are_retried(tmp_path, one_worker_profile, grid, tiny_workload):
    evaluator = ScriptedEvaluator(fail_plan={1: 2})
    result = run_workload(tiny_workload, steady_policy(), one_worker_profile, grid,
                          evaluator=evaluator, out_dir=tmp_path, run_id="r",
                          retry_limit=3)
    assert evaluator.calls.count(1) == 3
    batch1 = [r for r in result.records if r.metadata["batch_id"] == "1"]
    assert batch1[0].metadata["attempt"] == "3"
    assert result.merge.scenario_count == 100


def test_exhausted_retries_abort_and_state_survives(tmp_path, one_worker_profile, grid,
                                                    tiny_workload):
    evaluator = ScriptedEvaluator(fail_plan={2: 10})
    with pytest.raises(ExecutionAborted, match="batch 2 failed 2 times"):
        run_workload(tiny_workload, steady_policy(), one_worker_profile, grid,
                     evaluator=evaluator, out_dir=tmp_path, retry_limit=1)
    assert evaluator.calls == [0, 1, 2, 2]
    state_dirs = list((tmp_path / ".state").iterdir())
    assert len(state_dirs) == 1
    checkpoint = load_checkpoint(state_dirs[0] / "checkpoint.json")
    assert checkpoint.completed == frozenset({0, 1})
    assert checkpoint.attempts == {2: 2}


def test_resume_runs_only_the_remaining_batches(tmp_path, one_worker_profile, grid,
                                                tiny_workload):
    oracle = run_workload(tiny_workload, steady_policy(), one_worker_profile, grid,
                          evaluator=fast_eval(), out_dir=tmp_path / "oracle",
                          run_id="oracle")
    failing = ScriptedEvaluator(fail_plan={2: 10})
    with pytest.raises(ExecutionAborted):
        run_workload(tiny_workload, steady_policy(), one_worker_profile, grid,
                     evaluator=failing, out_dir=tmp_path, retry_limit=1)
    clean = ScriptedEvaluator()
    result = run_workload(tiny_workload, steady_policy(), one_worker_profile, grid,
                          evaluator=clean, resume=True, out_dir=tmp_path)
    assert sorted(clean.calls) == [2, 3]
    assert Path(result.merge.path).read_bytes() == Path(oracle.merge.path).read_bytes()
    # unit ids stay dense across the two sessions
    assert [r.unit_id for r in result.records] == [0, 1, 2, 3]
    assert not (tmp_path / ".state" / result.run_id).exists()


def test_fresh_run_refuses_to_clobber_state(tmp_path, one_worker_profile, grid,
                                            tiny_workload):
    with pytest.raises(ExecutionAborted):
        run_workload(tiny_workload, steady_policy(), one_worker_profile, grid,
                     evaluator=ScriptedEvaluator(fail_plan={2: 10}),
                     out_dir=tmp_path, retry_limit=0)
    with pytest.raises(StateExistsError, match="resume"):
        run_workload(tiny_workload, steady_policy(), one_worker_profile, grid,
                     evaluator=fast_eval(), out_dir=tmp_path)
    result = run_workload(tiny_workload, steady_policy(), one_worker_profile, grid,
                          evaluator=fast_eval(), out_dir=tmp_path, force=True,
                          run_id="fresh")
    assert result.merge.scenario_count == 100


def test_resume_with_nothing_to_resume_fails(tmp_path, one_worker_profile, grid,
                                             tiny_workload):
    with pytest.raises(ResumeMismatchError, match="nothing to resume"):
        run_workload(tiny_workload, steady_policy(), one_worker_profile, grid,
                     evaluator=fast_eval(), resume=True, out_dir=tmp_path)


def test_resume_rejects_a_foreign_checkpoint(tmp_path, one_worker_profile, grid,
                                             tiny_workload):
    with pytest.raises(ExecutionAborted):
        run_workload(tiny_workload, steady_policy(), one_worker_profile, grid,
                     evaluator=ScriptedEvaluator(fail_plan={2: 10}),
                     out_dir=tmp_path, retry_limit=0)
    checkpoint_path = next((tmp_path / ".state").iterdir()) / "checkpoint.json"
    doc = json.loads(checkpoint_path.read_text())
    doc["workload_fingerprint"] = "0" * 64
    checkpoint_path.write_text(json.dumps(doc))
    with pytest.raises(ResumeMismatchError, match="different"):
        run_workload(tiny_workload, steady_policy(), one_worker_profile, grid,
                     evaluator=fast_eval(), resume=True, out_dir=tmp_path)


class GatedEvaluator:
    """Blocks each batch until the test releases it; records dispatch order."""

    def __init__(self, batch_count: int):
        self.started = {i: threading.Event() for i in range(batch_count)}
        self.release = {i: threading.Event() for i in range(batch_count)}

    def __call__(self, manifest, workload):
        self.started[manifest.batch_id].set()
        assert self.release[manifest.batch_id].wait(timeout=30), "test forgot to release"
        return [f"{sid},gated" for sid in range(manifest.first_scenario,
                                                manifest.last_scenario)]


def test_pause_drains_in_flight_work_and_blocks_new_dispatch(tmp_path, one_worker_profile,
                                                             grid):
    """A pause band never kills a running batch; it only stops the next pickup."""
    policy = TimingPolicy("office-pause", (
        TimeBand(Phase.NIGHT, 0, 600, 1.0),
        TimeBand(Phase.PEAK, 600, 660, 0.0),
        TimeBand(Phase.NIGHT, 660, 1440, 1.0),
    ))
    workload = WorkloadSpec("two-batches", 50, 0.0001, 25, 0.0)
    clock = {"now": datetime(2025, 1, 6, 8, 0, 0)}
    evaluator = GatedEvaluator(batch_count=2)
    outcome = {}

    def drive():
        try:
            outcome["result"] = run_workload(
                workload, policy, one_worker_profile, grid, evaluator=evaluator,
                out_dir=tmp_path, run_id="paced", now_fn=lambda: clock["now"],
                poll_interval_s=0.01)
        except Exception as exc:  # surfaced by the main thread below
            outcome["error"] = exc

    runner = threading.Thread(target=drive)
    runner.start()
    try:
        assert evaluator.started[0].wait(timeout=10)
        clock["now"] = datetime(2025, 1, 6, 10, 30, 0)  # inside the pause band
        evaluator.release[0].set()  # in-flight batch drains to completion
        assert not evaluator.started[1].wait(timeout=0.5), \
            "batch dispatched during a pause band"
        clock["now"] = datetime(2025, 1, 6, 11, 30, 0)  # pause band over
        assert evaluator.started[1].wait(timeout=10)
        evaluator.release[1].set()
    finally:
        for event in evaluator.release.values():
            event.set()
        runner.join(timeout=30)
    assert not runner.is_alive()
    assert "error" not in outcome, outcome.get("error")
    result = outcome["result"]
    assert result.merge.scenario_count == 50
    # the drained batch is billed across both bands it spanned
    first = [r for r in result.records if r.metadata["batch_id"] == "0"][0]
    assert {s.phase for s in first.phase_slices} == {Phase.NIGHT, Phase.PEAK}


def test_dedupe_keeps_the_last_record_per_batch(example_profile, grid):
    run = RunHandle("d", "baseline", example_profile, grid)
    t = datetime(2025, 1, 6, 8, 0)
    record_unit(run, UnitKind.BATCH, t, t, 1, [], metadata={"batch_id": "3"})
    record_unit(run, UnitKind.RUN, t, t, 1, [])
    record_unit(run, UnitKind.BATCH, t, t, 1, [],
                metadata={"batch_id": "3", "attempt": "2"})
    kept = dedupe_batch_records(run.records())
    assert [r.unit_id for r in kept] == [1, 2]
    batch = [r for r in kept if r.kind is UnitKind.BATCH][0]
    assert batch.metadata["attempt"] == "2"

from __future__ import annotations

import math
import random
import threading
from datetime import datetime, timedelta

import pytest

from carina.model import Granularity, GridFactor, Phase
from carina.simulator import calibrate
from carina.tracker import (
    RunHandle,
    UnitKind,
    active_power_w,
    aggregate,
    aggregate_records,
    energy_to_carbon,
    estimate_energy,
    new_run,
    new_run_id,
    record_unit,
    throughput_share,
)

T0 = datetime(2025, 1, 6, 8, 0, 0)


@pytest.fixture
def run(example_profile, grid) -> RunHandle:
    return RunHandle("test-run", "baseline", example_profile, grid)


@pytest.fixture(scope="session")
def fitted_profile(oem1):
    """Profile whose per-worker power reproduces the measured average draw."""
    return oem1.profile


# --- power model -----------------------------------------------------------------


def test_zero_workers_draw_idle_power(example_profile):
    assert active_power_w(0, example_profile) == example_profile.idle_power_w


def test_one_worker_adds_exactly_per_worker_power(example_profile):
    expected = example_profile.idle_power_w + example_profile.per_worker_power_w
    assert active_power_w(1, example_profile) == pytest.approx(expected)


def test_power_at_nominal_matches_hand_evaluation(example_profile):
    # idle 80 + 14.2 * 12 * (1 + 0.35 * 11/12) = 305.07 W
    from dataclasses import replace
    profile = replace(example_profile, per_worker_power_w=14.2)
    expected = 80.0 + 14.2 * 12 * (1 + 0.35 * 11 / 12)
    assert active_power_w(12, profile) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(305.1, abs=0.05)


def test_power_marginals_convex_up_to_nominal(example_profile):
    """Each worker below nominal costs at least as much as the one before."""
    deltas = [
        active_power_w(w + 1, example_profile) - active_power_w(w, example_profile)
        for w in range(example_profile.nominal_workers)
    ]
    for earlier, later in zip(deltas, deltas[1:]):
        assert later >= earlier - 1e-12


def test_power_strictly_increasing_over_full_range(example_profile):
    values = [active_power_w(w, example_profile)
              for w in range(example_profile.logical_cores + 1)]
    for earlier, later in zip(values, values[1:]):
        assert later > earlier


def test_boost_above_nominal_draws_less_than_proportional(example_profile):
    """The over-nominal branch saturates: oversubscribed workers share silicon."""
    n = example_profile.nominal_workers
    marginal_at_nominal = (active_power_w(n, example_profile)
                           - active_power_w(n - 1, example_profile))
    marginal_above = (active_power_w(n + 2, example_profile)
                      - active_power_w(n + 1, example_profile))
    assert marginal_above < marginal_at_nominal


def test_throughput_share_unit_at_nominal(example_profile):
    assert throughput_share(example_profile.nominal_workers, example_profile) == 1.0
    assert throughput_share(6, example_profile) == pytest.approx(0.5)
    above = throughput_share(example_profile.nominal_workers + 4, example_profile)
    assert 1.0 < above < (example_profile.nominal_workers + 4) / example_profile.nominal_workers


# --- energy ----------------------------------------------------------------------


def test_zero_runtime_zero_energy(example_profile):
    assert estimate_energy(0.0, 12, example_profile) == 0.0


def test_one_hour_at_calibrated_nominal_draw(fitted_profile):
    kwh = estimate_energy(3600.0, fitted_profile.nominal_workers, fitted_profile)
    assert kwh == pytest.approx(0.2699, abs=2e-4)


def test_measured_window_reproduces_measured_energy(fitted_profile):
    kwh = estimate_energy(180.30 * 3600, fitted_profile.nominal_workers, fitted_profile)
    assert kwh == pytest.approx(48.67, abs=0.01)


def test_energy_linear_in_runtime(example_profile):
    a = estimate_energy(1234.5, 7, example_profile)
    b = estimate_energy(6789.0, 7, example_profile)
    both = estimate_energy(1234.5 + 6789.0, 7, example_profile)
    assert both == pytest.approx(a + b, rel=1e-12)


# --- carbon ----------------------------------------------------------------------


def test_first_measured_total_to_carbon(grid):
    assert energy_to_carbon(48.67, grid) == pytest.approx(21.8, abs=0.05)


def test_second_measured_total_to_carbon(grid):
    assert energy_to_carbon(74.16, grid) == pytest.approx(33.2, abs=0.05)


def test_zero_factor_zero_carbon():
    zero = GridFactor("nowhere", 0.0)
    assert energy_to_carbon(123.45, zero) == 0.0


def test_carbon_additive(grid):
    a, b = 12.34, 56.78
    total = energy_to_carbon(a + b, grid)
    assert total == pytest.approx(energy_to_carbon(a, grid) + energy_to_carbon(b, grid),
                                  rel=1e-12)


def test_negative_energy_rejected(grid):
    with pytest.raises(ValueError):
        energy_to_carbon(-0.1, grid)


# --- record_unit -----------------------------------------------------------------


def test_zero_duration_unit(run):
    record = record_unit(run, UnitKind.BATCH, T0, T0, 4, [])
    assert record.runtime_s == 0.0
    assert record.energy_kwh == 0.0
    assert record.carbon_kg == 0.0


def test_single_slice_matches_estimate(run, example_profile):
    end = T0 + timedelta(hours=2)
    record = record_unit(run, UnitKind.BATCH, T0, end, 9,
                         [(Phase.SHOULDER, 7200.0)])
    assert record.energy_kwh == pytest.approx(
        estimate_energy(7200.0, 9, example_profile), rel=1e-12)


def test_two_slice_unit_sums_slice_energies(run, example_profile):
    """A unit spanning 19:00 with 3 workers before and 9 after."""
    end = T0 + timedelta(hours=2)
    record = record_unit(run, UnitKind.BATCH, T0, end, 9, [
        (Phase.PEAK, 3600.0, 3),
        (Phase.SHOULDER, 3600.0, 9),
    ])
    expected = (estimate_energy(3600.0, 3, example_profile)
                + estimate_energy(3600.0, 9, example_profile))
    assert record.energy_kwh == pytest.approx(expected, rel=1e-12)
    assert {s.phase for s in record.phase_slices} == {Phase.PEAK, Phase.SHOULDER}


def test_machine_share_scales_energy(run, example_profile):
    end = T0 + timedelta(seconds=100)
    full = record_unit(run, UnitKind.BATCH, T0, end, 8, [(Phase.NIGHT, 100.0)])
    eighth = record_unit(run, UnitKind.BATCH, T0, end, 8,
                         [(Phase.NIGHT, 100.0)], machine_share=1 / 8)
    assert eighth.energy_kwh == pytest.approx(full.energy_kwh / 8, rel=1e-12)


def test_out_of_order_timestamps_rejected(run):
    with pytest.raises(ValueError):
        record_unit(run, UnitKind.BATCH, T0, T0 - timedelta(seconds=1), 1,
                    [(Phase.NIGHT, 0.0)])


def test_slice_sum_mismatch_rejected(run):
    end = T0 + timedelta(seconds=100)
    with pytest.raises(ValueError) as err:
        record_unit(run, UnitKind.BATCH, T0, end, 1, [(Phase.NIGHT, 97.0)])
    assert "span" in str(err.value)
    # within one second of wall time is accepted
    record_unit(run, UnitKind.BATCH, T0, end, 1, [(Phase.NIGHT, 99.5)])


def test_bad_machine_share_rejected(run):
    end = T0 + timedelta(seconds=10)
    for share in (0.0, -1.0, 1.5):
        with pytest.raises(ValueError):
            record_unit(run, UnitKind.BATCH, T0, end, 1,
                        [(Phase.NIGHT, 10.0)], machine_share=share)


# --- aggregation -----------------------------------------------------------------


def test_empty_run_aggregates_to_zeros(run):
    summary = aggregate(run)
    assert summary.unit_count == 0
    assert summary.total_runtime_h == 0.0
    assert summary.total_energy_kwh == 0.0
    assert summary.total_carbon_kg == 0.0
    assert summary.per_phase == {}


def test_totals_are_plain_sums(run):
    seconds = [3600.0, 9000.0, 1800.0]
    for s in seconds:
        record_unit(run, UnitKind.BATCH, T0, T0 + timedelta(seconds=s), 2,
                    [(Phase.NIGHT, s)])
    summary = aggregate(run)
    assert summary.unit_count == 3
    expected = sum(r.energy_kwh for r in run.records())
    assert summary.total_energy_kwh == pytest.approx(expected, rel=1e-12)
    assert summary.total_runtime_h == pytest.approx(sum(seconds) / 3600, rel=1e-12)


def test_records_built_to_measured_total_reach_its_carbon(fitted_profile, grid):
    """Records engineered to sum to the second measured run's energy."""
    run = RunHandle("r", "baseline", fitted_profile, grid)
    nominal = fitted_profile.nominal_workers
    draw_w = active_power_w(nominal, fitted_profile)
    half_kwh = 74.16 / 2
    seconds = half_kwh / draw_w * 3_600_000.0
    for _ in range(2):
        record_unit(run, UnitKind.EPOCH, T0, T0 + timedelta(seconds=seconds),
                    nominal, [(Phase.NIGHT, seconds)])
    summary = aggregate(run)
    assert summary.total_energy_kwh == pytest.approx(74.16, abs=1e-9)
    assert summary.total_carbon_kg == pytest.approx(33.2, abs=0.05)


def test_aggregate_order_independent(run, grid, example_profile):
    rng = random.Random(42)
    for i in range(25):
        s = rng.uniform(10, 5000)
        record_unit(run, UnitKind.BATCH, T0, T0 + timedelta(seconds=s),
                    rng.randint(1, 16),
                    [(rng.choice(list(Phase)), s)])
    records = list(run.records())
    base = aggregate_records(records, run_id="r", policy_name="p",
                             profile=example_profile, grid=grid)
    for _ in range(5):
        rng.shuffle(records)
        shuffled = aggregate_records(records, run_id="r", policy_name="p",
                                     profile=example_profile, grid=grid)
        assert shuffled.total_energy_kwh == base.total_energy_kwh
        assert shuffled.total_runtime_h == base.total_runtime_h
        assert shuffled.total_carbon_kg == base.total_carbon_kg
        assert shuffled.per_phase == base.per_phase


def test_per_phase_totals_sum_to_overall(run):
    record_unit(run, UnitKind.BATCH, T0, T0 + timedelta(seconds=7200), 3, [
        (Phase.PEAK, 3600.0, 3),
        (Phase.SHOULDER, 3600.0, 9),
    ])
    record_unit(run, UnitKind.BATCH, T0, T0 + timedelta(seconds=600), 2,
                [(Phase.NIGHT, 600.0)])
    summary = aggregate(run)
    assert sum(p.energy_kwh for p in summary.per_phase.values()) == pytest.approx(
        summary.total_energy_kwh, rel=1e-12)
    assert sum(p.runtime_h for p in summary.per_phase.values()) == pytest.approx(
        summary.total_runtime_h, rel=1e-12)


# --- run handles -----------------------------------------------------------------


def test_unit_ids_dense_and_ordered(run):
    for _ in range(10):
        record_unit(run, UnitKind.BATCH, T0, T0, 1, [])
    assert [r.unit_id for r in run.records()] == list(range(10))


def test_first_unit_id_offset(example_profile, grid):
    run = RunHandle("r", "p", example_profile, grid, first_unit_id=7)
    record_unit(run, UnitKind.BATCH, T0, T0, 1, [])
    assert run.records()[0].unit_id == 7
    assert run.next_unit_id == 8


def test_on_record_callback_sees_id_order(example_profile, grid):
    seen = []
    run = RunHandle("r", "p", example_profile, grid, on_record=lambda r: seen.append(r.unit_id))
    threads = [
        threading.Thread(target=lambda: [
            record_unit(run, UnitKind.BATCH, T0, T0, 1, []) for _ in range(50)
        ])
        for _ in range(4)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert seen == list(range(200))


def test_new_run_id_is_deterministic_for_seeded_rng():
    now = datetime(2025, 3, 1, 12, 30, 45)
    a = new_run_id(now, random.Random(5))
    b = new_run_id(now, random.Random(5))
    assert a == b
    assert a.startswith("20250301T123045-")


def test_new_run_defaults(example_profile, grid):
    run = new_run("baseline", example_profile, grid, Granularity.WHOLE_RUN,
                  now=T0, rng=random.Random(1))
    assert run.granularity is Granularity.WHOLE_RUN
    assert run.run_id.startswith("20250106T080000-")

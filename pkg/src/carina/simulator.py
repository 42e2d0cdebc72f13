"""Fluid-rate what-if simulation of pacing policies.

The simulator advances wall clock in fixed steps over a calibrated workload.
Progress is continuous (scenarios per second), so batch structure enters only
through a batch-efficiency factor; at the bundled workload scale (tens of
thousands of batches) discrete batch events would shift results well below
the 0.1% oracle tolerance. A closed-form solution for constant-intensity
policies doubles as the simulator's test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from datetime import datetime
from typing import Mapping, Sequence

from . import defaults
from .model import (
    MINUTES_PER_DAY,
    GridFactor,
    Granularity,
    MachineProfile,
    Phase,
    PriorityClass,
    TimingPolicy,
    ValidationFailure,
    WorkloadSpec,
    require_valid,
    validate_machine_profile,
    validate_policy,
    validate_workload,
)
from .policy import band_at, make_policy, workers_for, LOW_PRIORITY_PHASES
from .tracker import PhaseTotals, active_power_w, energy_to_carbon, throughput_share

# Monday 08:00: multi-day workloads make the start second-order, but runs
# are typically kicked off during working hours so that is the default.
DEFAULT_SIM_START = datetime(2025, 1, 6, 8, 0)
DEFAULT_STEP_S = 60.0

SECONDS_PER_DAY = 86400.0
MAX_SIMULATED_DAYS = 366.0


class ZeroProgressError(RuntimeError):
    """A policy made no forward progress for a full simulated day."""

    def __init__(self, policy_name: str, stalled_after_h: float):
        super().__init__(
            f"policy {policy_name!r} made no progress for a simulated 24 h "
            f"(stall began {stalled_after_h:.2f} h in; every band reached since "
            f"then resolves to zero workers)")
        self.policy_name = policy_name
        self.stalled_after_h = stalled_after_h


class CalibrationError(ValueError):
    """Measured baseline numbers are inconsistent with the profile."""


@dataclass(frozen=True)
class CalibrationParams:
    """Derived quantities of a measured baseline run.

    ``throughput_scen_per_s`` is the measured end-to-end rate at the nominal
    pool, overhead included. The measured inputs are kept for traceability.
    """

    avg_power_w: float
    throughput_scen_per_s: float
    source: str
    total_scenarios: int
    runtime_h: float
    energy_kwh: float


@dataclass(frozen=True)
class SimResult:
    policy_name: str
    completion_h: float
    energy_kwh: float
    carbon_kg: float
    average_power_w: float
    per_phase: Mapping[Phase, PhaseTotals]
    start_time: datetime
    step_s: float
    runtime_penalty_pct: float | None = None
    energy_savings_pct: float | None = None


@dataclass(frozen=True)
class PolicyComparison:
    """Baseline plus candidates simulated under identical conditions.

    ``failures`` holds (policy_name, reason) for candidates that could not
    be simulated (for example all-pause policies); they are reported, the
    rest of the comparison still completes.
    """

    baseline: SimResult
    candidates: tuple[SimResult, ...]
    failures: tuple[tuple[str, str], ...] = ()

    def all_results(self) -> tuple[SimResult, ...]:
        return (self.baseline, *self.candidates)

    def frontier_rows(self) -> tuple[tuple[str, float, float], ...]:
        """(policy, runtime_penalty_pct, energy_savings_pct) per result."""
        return tuple(
            (r.policy_name, r.runtime_penalty_pct or 0.0, r.energy_savings_pct or 0.0)
            for r in self.all_results()
        )


def calibrate(
    total_scenarios: int,
    runtime_h: float,
    energy_kwh: float,
    profile: MachineProfile,
) -> tuple[CalibrationParams, MachineProfile]:
    """Fit the power model to a measured baseline run.

    Returns the derived parameters and a copy of ``profile`` whose
    per-worker power is solved so that a full nominal pool draws exactly the
    measured average power.
    """
    if total_scenarios < 1:
        raise CalibrationError(f"total_scenarios must be >= 1 (got {total_scenarios})")
    if not runtime_h > 0:
        raise CalibrationError(f"runtime_h must be > 0 (got {runtime_h})")
    if not energy_kwh > 0:
        raise CalibrationError(f"energy_kwh must be > 0 (got {energy_kwh})")
    require_valid(validate_machine_profile(profile))
    avg_power_w = energy_kwh / runtime_h * 1000.0
    throughput = total_scenarios / (runtime_h * 3600.0)
    if avg_power_w <= profile.idle_power_w:
        raise CalibrationError(
            f"measured average draw {avg_power_w:.1f} W does not exceed idle "
            f"{profile.idle_power_w:.1f} W; cannot attribute power to workers")
    n = profile.nominal_workers
    gamma = profile.concurrency_power_exponent
    per_worker = (avg_power_w - profile.idle_power_w) / (n * (1.0 + gamma * (n - 1) / n))
    fitted = replace(profile, per_worker_power_w=per_worker)
    params = CalibrationParams(
        avg_power_w=avg_power_w,
        throughput_scen_per_s=throughput,
        source=(f"fit of {total_scenarios} scenarios over {runtime_h} h / "
                f"{energy_kwh} kWh on {profile.host_id}"),
        total_scenarios=total_scenarios,
        runtime_h=runtime_h,
        energy_kwh=energy_kwh,
    )
    return params, fitted


def workload_from_calibration(
    name: str,
    total_scenarios: int,
    calibration: CalibrationParams,
    profile: MachineProfile,
    *,
    batch_size: int = defaults.DEFAULT_BATCH_SIZE,
    per_batch_overhead_seconds: float = defaults.DEFAULT_BATCH_OVERHEAD_S,
    granularity: Granularity = Granularity.STEP_LEVEL,
) -> WorkloadSpec:
    """Build a workload whose simulated baseline reproduces the measurement.

    Solves per-scenario worker seconds from the measured throughput and the
    declared batch structure, so the baseline policy completes in exactly the
    measured hours at exactly the measured energy.
    """
    if batch_size < 1:
        raise CalibrationError(f"batch_size must be >= 1 (got {batch_size})")
    if per_batch_overhead_seconds < 0:
        raise CalibrationError(
            f"per_batch_overhead_seconds must be >= 0 (got {per_batch_overhead_seconds})")
    per_scenario = (profile.nominal_workers / calibration.throughput_scen_per_s
                    - per_batch_overhead_seconds / batch_size)
    if per_scenario <= 0:
        raise CalibrationError(
            "measured throughput is too high for this batch overhead: "
            "per-scenario worker time would be non-positive")
    return WorkloadSpec(
        name=name,
        total_scenarios=total_scenarios,
        per_scenario_worker_seconds=per_scenario,
        batch_size=batch_size,
        per_batch_overhead_seconds=per_batch_overhead_seconds,
        granularity=granularity,
    )


def reference_profile() -> MachineProfile:
    """The bundled simulation host (per-worker power pending calibration)."""
    return MachineProfile(
        host_id=defaults.REFERENCE_HOST_ID,
        logical_cores=defaults.REFERENCE_LOGICAL_CORES,
        nominal_workers=defaults.REFERENCE_NOMINAL_WORKERS,
        idle_power_w=defaults.REFERENCE_IDLE_POWER_W,
        per_worker_power_w=15.0,
        concurrency_power_exponent=defaults.TUNED_POWER_GAMMA,
        contention_factor=defaults.TUNED_CONTENTION_DELTA,
    )


def reference_grid() -> GridFactor:
    return GridFactor(
        region=defaults.REFERENCE_GRID_REGION,
        kg_co2e_per_kwh=defaults.REFERENCE_GRID_FACTOR,
        source_note=defaults.REFERENCE_GRID_NOTE,
    )


@dataclass(frozen=True)
class ReferenceSetup:
    name: str
    profile: MachineProfile
    workload: WorkloadSpec
    calibration: CalibrationParams
    grid: GridFactor
    measured_runtime_h: float
    measured_energy_kwh: float


def reference_setup(
    preset: str = "oem1",
    *,
    batch_size: int = defaults.DEFAULT_BATCH_SIZE,
    per_batch_overhead_seconds: float = defaults.DEFAULT_BATCH_OVERHEAD_S,
) -> ReferenceSetup:
    """Calibrated profile + workload for one of the bundled measured runs."""
    if preset not in defaults.MEASURED_BASELINES:
        known = ", ".join(sorted(defaults.MEASURED_BASELINES))
        raise KeyError(f"unknown baseline preset {preset!r} (known: {known})")
    scenarios, hours, kwh = defaults.MEASURED_BASELINES[preset]
    calibration, fitted = calibrate(scenarios, hours, kwh, reference_profile())
    workload = workload_from_calibration(
        f"{preset}-refresh", scenarios, calibration, fitted,
        batch_size=batch_size,
        per_batch_overhead_seconds=per_batch_overhead_seconds,
    )
    return ReferenceSetup(
        name=preset,
        profile=fitted,
        workload=workload,
        calibration=calibration,
        grid=reference_grid(),
        measured_runtime_h=hours,
        measured_energy_kwh=kwh,
    )


def batch_efficiency(workload: WorkloadSpec, batch_size: int | None = None) -> float:
    """Fraction of worker time spent evaluating versus batch orchestration."""
    size = batch_size or workload.batch_size
    work = size * workload.per_scenario_worker_seconds
    return work / (work + workload.per_batch_overhead_seconds)


def _minute_tables(
    workload: WorkloadSpec,
    policy: TimingPolicy,
    profile: MachineProfile,
) -> tuple[list[float], list[float], list[Phase]]:
    """Per-minute (rate scen/s, power W, phase) lookup tables for one day."""
    size = policy.batch_size_override or workload.batch_size
    efficiency = batch_efficiency(workload, size)
    pure_rate = profile.nominal_workers / workload.per_scenario_worker_seconds
    rates = [0.0] * MINUTES_PER_DAY
    powers = [0.0] * MINUTES_PER_DAY
    phases: list[Phase] = [Phase.NIGHT] * MINUTES_PER_DAY
    for band in policy.bands:
        w = workers_for(band.intensity, profile)
        if band.thread_cap is not None:
            w = min(w, band.thread_cap)
        rate = pure_rate * throughput_share(w, profile) * efficiency
        if band.priority_class is not PriorityClass.NORMAL:
            rate /= policy.lowprio_slowdown
        power = active_power_w(w, profile)
        for minute in range(band.start_minute, min(band.end_minute, MINUTES_PER_DAY)):
            rates[minute] = rate
            powers[minute] = power
            phases[minute] = band.phase
    return rates, powers, phases


def simulate(
    workload: WorkloadSpec,
    policy: TimingPolicy,
    profile: MachineProfile,
    grid: GridFactor,
    start_time: datetime | None = None,
    step_s: float = DEFAULT_STEP_S,
) -> SimResult:
    """Run the workload to completion under ``policy`` in simulated time.

    Decisions are sampled at the start of each step; the final step is
    prorated so accumulated progress equals the scenario count exactly.
    Pause bands accrue idle power (the machine stays on).
    """
    require_valid(validate_workload(workload))
    require_valid(validate_policy(policy))
    require_valid(validate_machine_profile(profile))
    if step_s < 1.0:
        raise ValueError(f"step_s must be >= 1 (got {step_s})")
    start = start_time or DEFAULT_SIM_START
    rates, powers, phases = _minute_tables(workload, policy, profile)

    total = float(workload.total_scenarios)
    start_second = start.hour * 3600.0 + start.minute * 60.0 + start.second
    done = 0.0
    elapsed = 0.0
    stalled_s = 0.0
    phase_seconds: dict[Phase, float] = {}
    phase_watt_seconds: dict[Phase, float] = {}
    step = float(step_s)
    while done < total:
        minute = int(((start_second + elapsed) % SECONDS_PER_DAY) // 60.0)
        rate = rates[minute]
        advance = step
        if rate > 0.0:
            gained = rate * step
            if done + gained >= total:
                advance = step * (total - done) / gained
                done = total
            else:
                done += gained
            stalled_s = 0.0
        else:
            stalled_s += step
            if stalled_s > SECONDS_PER_DAY:
                raise ZeroProgressError(policy.name, (elapsed - stalled_s + step) / 3600.0)
        phase = phases[minute]
        phase_seconds[phase] = phase_seconds.get(phase, 0.0) + advance
        phase_watt_seconds[phase] = (
            phase_watt_seconds.get(phase, 0.0) + powers[minute] * advance)
        elapsed += advance
        if elapsed > MAX_SIMULATED_DAYS * SECONDS_PER_DAY:
            raise ZeroProgressError(policy.name, elapsed / 3600.0)

    energy_kwh = sum(phase_watt_seconds.values()) / 3_600_000.0
    completion_h = elapsed / 3600.0
    per_phase = {
        phase: PhaseTotals(
            runtime_h=phase_seconds[phase] / 3600.0,
            energy_kwh=phase_watt_seconds[phase] / 3_600_000.0,
            carbon_kg=energy_to_carbon(phase_watt_seconds[phase] / 3_600_000.0, grid),
        )
        for phase in phase_seconds
    }
    return SimResult(
        policy_name=policy.name,
        completion_h=completion_h,
        energy_kwh=energy_kwh,
        carbon_kg=energy_to_carbon(energy_kwh, grid),
        average_power_w=(energy_kwh / completion_h * 1000.0) if completion_h > 0 else 0.0,
        per_phase=per_phase,
        start_time=start,
        step_s=step,
    )


def closed_form_constant(
    workload: WorkloadSpec,
    workers: int,
    profile: MachineProfile,
) -> tuple[float, float]:
    """Exact (completion_h, energy_kwh) for a fixed worker count.

    Oracle for ``simulate``: a constant-intensity policy must agree with
    this within 0.1%.
    """
    if workers < 1:
        raise ValueError(f"workers must be >= 1 (got {workers})")
    require_valid(validate_workload(workload))
    require_valid(validate_machine_profile(profile))
    pure_rate = profile.nominal_workers / workload.per_scenario_worker_seconds
    rate = pure_rate * throughput_share(workers, profile) * batch_efficiency(workload)
    completion_h = workload.total_scenarios / rate / 3600.0
    energy_kwh = active_power_w(workers, profile) * completion_h / 1000.0
    return completion_h, energy_kwh


def compare_policies(
    workload: WorkloadSpec,
    policies: Sequence[TimingPolicy],
    profile: MachineProfile,
    grid: GridFactor,
    start_time: datetime | None = None,
    step_s: float = DEFAULT_STEP_S,
) -> PolicyComparison:
    """Simulate every policy under identical conditions; first is baseline.

    Percentages are relative to the baseline: penalty = (T - T_b)/T_b x 100,
    savings = (E_b - E)/E_b x 100. The baseline carries exact zeros. A
    candidate that cannot complete (zero progress) lands in ``failures``
    without aborting the others; a failing baseline is a hard error.
    """
    if not policies:
        raise ValueError("need at least one policy (the baseline)")
    names = [p.name for p in policies]
    if len(set(names)) != len(names):
        raise ValueError(f"policy names must be unique within a comparison: {names}")
    base = simulate(workload, policies[0], profile, grid, start_time, step_s)
    base = replace(base, runtime_penalty_pct=0.0, energy_savings_pct=0.0)
    candidates: list[SimResult] = []
    failures: list[tuple[str, str]] = []
    for policy in policies[1:]:
        try:
            result = simulate(workload, policy, profile, grid, start_time, step_s)
        except (ZeroProgressError, ValidationFailure) as exc:
            failures.append((policy.name, str(exc)))
            continue
        candidates.append(replace(
            result,
            runtime_penalty_pct=(result.completion_h - base.completion_h)
                                / base.completion_h * 100.0,
            energy_savings_pct=(base.energy_kwh - result.energy_kwh)
                               / base.energy_kwh * 100.0,
        ))
    return PolicyComparison(base, tuple(candidates), tuple(failures))


@dataclass(frozen=True)
class SavingsProjection:
    """A savings percentage applied to a measured baseline total."""

    baseline_kwh: float
    savings_pct: float
    projected_kwh: float
    saved_kwh: float
    saved_carbon_kg: float


def project_savings(baseline_kwh: float, savings_pct: float, grid: GridFactor) -> SavingsProjection:
    saved = baseline_kwh * savings_pct / 100.0
    return SavingsProjection(
        baseline_kwh=baseline_kwh,
        savings_pct=savings_pct,
        projected_kwh=baseline_kwh - saved,
        saved_kwh=saved,
        saved_carbon_kg=energy_to_carbon(saved, grid) if saved >= 0
        else -energy_to_carbon(-saved, grid),
    )


# --- parameter tuning ---------------------------------------------------------


@dataclass(frozen=True)
class TuneResult:
    gamma: float
    contention_delta: float
    night_intensity: float
    intensities: Mapping[str, float]
    achieved_savings_pct: float
    achieved_penalty_pct: float
    target_savings_pct: float
    target_penalty_pct: float
    residual_pp: tuple[float, float]
    targets_met: bool
    orderings_ok: bool
    frontier: tuple[tuple[str, float, float], ...]
    evaluations: int
    notes: str

    def to_doc(self) -> dict:
        return {
            "targets": {
                "energy_savings_pct": self.target_savings_pct,
                "runtime_penalty_pct": self.target_penalty_pct,
            },
            "selected": {
                "concurrency_power_exponent": self.gamma,
                "contention_factor": self.contention_delta,
                "night_intensity": self.night_intensity,
                "boosted_intensities": dict(self.intensities),
            },
            "achieved": {
                "energy_savings_pct": self.achieved_savings_pct,
                "runtime_penalty_pct": self.achieved_penalty_pct,
                "residual_pp": list(self.residual_pp),
                "targets_met": self.targets_met,
                "orderings_ok": self.orderings_ok,
            },
            "frontier": [
                {"policy": name, "runtime_penalty_pct": pen, "energy_savings_pct": sav}
                for name, pen, sav in self.frontier
            ],
            "evaluations": self.evaluations,
            "notes": self.notes,
        }


def _tuning_policy_set(night: float, band_clock: tuple) -> list[TimingPolicy]:
    boosted = dict(defaults.BOOSTED_OFFHOURS_INTENSITIES, night=night)
    aggressive = dict(defaults.AGGRESSIVE_INTENSITIES, night=night)
    return [
        make_policy("baseline", defaults.BASELINE_INTENSITIES, band_clock=band_clock),
        make_policy("peak_aware_boosted_offhours", boosted, band_clock=band_clock),
        make_policy("peak_aware_aggressive", aggressive, band_clock=band_clock),
        make_policy("low_priority_only", defaults.BASELINE_INTENSITIES,
                    low_priority_phases=LOW_PRIORITY_PHASES, band_clock=band_clock),
        make_policy("small_batches_25", defaults.BASELINE_INTENSITIES,
                    batch_size_override=defaults.SMALL_BATCH_SIZE, band_clock=band_clock),
        make_policy("large_batches_100", defaults.BASELINE_INTENSITIES,
                    batch_size_override=defaults.LARGE_BATCH_SIZE, band_clock=band_clock),
    ]


def check_frontier_orderings(rows: Mapping[str, tuple[float, float]]) -> list[str]:
    """Qualitative frontier shape checks; returns human-readable failures.

    ``rows`` maps policy name to (runtime_penalty_pct, energy_savings_pct).
    """
    problems: list[str] = []

    def row(name: str) -> tuple[float, float]:
        if name not in rows:
            problems.append(f"missing result for {name}")
            return (0.0, 0.0)
        return rows[name]

    pen_boost, sav_boost = row("peak_aware_boosted_offhours")
    pen_aggr, sav_aggr = row("peak_aware_aggressive")
    pen_low, sav_low = row("low_priority_only")
    pen_b25, sav_b25 = row("small_batches_25")
    pen_b100, sav_b100 = row("large_batches_100")
    if problems:
        return problems
    if not sav_aggr >= sav_boost >= 0.0:
        problems.append(
            f"savings ordering broken: aggressive {sav_aggr:.2f} >= boosted {sav_boost:.2f} >= 0")
    if not pen_aggr >= pen_boost >= 0.0:
        problems.append(
            f"penalty ordering broken: aggressive {pen_aggr:.2f} >= boosted {pen_boost:.2f} >= 0")
    if not sav_low < 0.0:
        problems.append(f"low-priority-only should cost energy (savings {sav_low:.2f})")
    if not (sav_b100 > 0.0 and pen_b100 < 0.0):
        problems.append(
            f"large batches should improve both metrics (penalty {pen_b100:.2f}, savings {sav_b100:.2f})")
    if not (sav_b25 < sav_b100 and sav_b25 < 0.0):
        problems.append(
            f"small batches should trail large batches and cost energy (savings {sav_b25:.2f})")
    return problems


def tune_power_params(
    target_savings_pct: float,
    target_penalty_pct: float,
    calibration: CalibrationParams,
    band_defaults: tuple = defaults.DEFAULT_BAND_CLOCK,
    *,
    profile: MachineProfile | None = None,
    batch_size: int = defaults.DEFAULT_BATCH_SIZE,
    per_batch_overhead_seconds: float = defaults.DEFAULT_BATCH_OVERHEAD_S,
    night_values: Sequence[float] | None = None,
    delta_values: Sequence[float] | None = None,
    coarse_step_s: float = 300.0,
    final_step_s: float = DEFAULT_STEP_S,
    start_time: datetime | None = None,
) -> TuneResult:
    """Search model parameters that land the boosted policy on the target.

    Grid-searches night-boost intensity in [1.0, 1.5] and contention delta
    in (0, 0.1]; for each cell the power exponent gamma in [0, 1] is bisected
    against the savings target (savings grow monotonically with gamma: a more
    convex power curve makes throttling cheaper and boosting pricier). The
    best cells by squared distance to the target are re-evaluated at the
    final step size and must preserve the qualitative frontier orderings.
    Always returns a best-effort result; unreachable targets are flagged via
    ``targets_met`` and the residuals.
    """
    shell = profile or reference_profile()
    avg_power = calibration.avg_power_w
    if avg_power <= shell.idle_power_w:
        raise CalibrationError("calibrated average power does not exceed profile idle power")
    n = shell.nominal_workers
    workload = workload_from_calibration(
        "tuning", calibration.total_scenarios, calibration, shell,
        batch_size=batch_size, per_batch_overhead_seconds=per_batch_overhead_seconds)
    grid = GridFactor("tuning", defaults.REFERENCE_GRID_FACTOR)

    # Baseline is gamma/delta-invariant: it runs the nominal pool whose
    # draw is pinned to the measured average by calibration.
    baseline_h = calibration.total_scenarios / calibration.throughput_scen_per_s / 3600.0
    baseline_kwh = avg_power * baseline_h / 1000.0

    def fitted(gamma: float, delta: float) -> MachineProfile:
        per_worker = (avg_power - shell.idle_power_w) / (n * (1.0 + gamma * (n - 1) / n))
        return replace(shell, per_worker_power_w=per_worker,
                       concurrency_power_exponent=gamma, contention_factor=delta)

    evaluations = 0

    def boosted_point(gamma: float, delta: float, night: float, step: float) -> tuple[float, float]:
        nonlocal evaluations
        evaluations += 1
        prof = fitted(gamma, delta)
        pol = make_policy("candidate",
                          dict(defaults.BOOSTED_OFFHOURS_INTENSITIES, night=night),
                          band_clock=band_defaults)
        res = simulate(workload, pol, prof, grid, start_time, step)
        savings = (baseline_kwh - res.energy_kwh) / baseline_kwh * 100.0
        penalty = (res.completion_h - baseline_h) / baseline_h * 100.0
        return savings, penalty

    def bisect_gamma(delta: float, night: float, step: float,
                     lo: float = 0.0, hi: float = 1.0) -> tuple[float, float, float]:
        s_lo, p_lo = boosted_point(lo, delta, night, step)
        if s_lo >= target_savings_pct:
            return lo, s_lo, p_lo
        s_hi, p_hi = boosted_point(hi, delta, night, step)
        if s_hi <= target_savings_pct:
            return hi, s_hi, p_hi
        for _ in range(14):
            mid = (lo + hi) / 2.0
            s_mid, p_mid = boosted_point(mid, delta, night, step)
            if s_mid < target_savings_pct:
                lo = mid
            else:
                hi, s_hi, p_hi = mid, s_mid, p_mid
        return hi, s_hi, p_hi

    if night_values is None:
        max_boost_workers = min(int(1.5 * n + 1e-9), shell.logical_cores)
        night_values = [w / n for w in range(n, max_boost_workers + 1)]
    if delta_values is None:
        delta_values = [k / 1000.0 for k in range(1, 11)] + [0.02, 0.05, 0.1]

    cells: list[tuple[float, ...]] = []  # (dist2, gamma, delta, night, savings, penalty)
    for night in night_values:
        for delta in delta_values:
            gamma, sav, pen = bisect_gamma(delta, night, coarse_step_s)
            dist2 = (sav - target_savings_pct) ** 2 + (pen - target_penalty_pct) ** 2
            cells.append((dist2, gamma, delta, night, sav, pen))
    cells.sort(key=lambda c: c[0])

    best: dict | None = None
    fallback: dict | None = None
    for dist2, gamma0, delta, night, _, _ in cells[:5]:
        # Re-bisect at the final step size, then validate the whole frontier.
        gamma, sav, pen = bisect_gamma(delta, night, final_step_s,
                                       lo=max(0.0, gamma0 - 0.1), hi=min(1.0, gamma0 + 0.1))
        comparison = compare_policies(
            workload, _tuning_policy_set(night, band_defaults),
            fitted(gamma, delta), grid, start_time, final_step_s)
        rows = {name: (pen_, sav_) for name, pen_, sav_ in comparison.frontier_rows()}
        problems = check_frontier_orderings(rows)
        pen_b, sav_b = rows["peak_aware_boosted_offhours"]
        candidate = {
            "gamma": gamma, "delta": delta, "night": night,
            "savings": sav_b, "penalty": pen_b,
            "dist2": (sav_b - target_savings_pct) ** 2 + (pen_b - target_penalty_pct) ** 2,
            "frontier": comparison.frontier_rows(),
            "problems": problems,
        }
        if not problems and (best is None or candidate["dist2"] < best["dist2"]):
            best = candidate
        if fallback is None or candidate["dist2"] < fallback["dist2"]:
            fallback = candidate

    chosen = best or fallback
    assert chosen is not None
    residual = (abs(chosen["savings"] - target_savings_pct),
                abs(chosen["penalty"] - target_penalty_pct))
    targets_met = residual[0] <= 1.0 and residual[1] <= 1.0
    return TuneResult(
        gamma=chosen["gamma"],
        contention_delta=chosen["delta"],
        night_intensity=chosen["night"],
        intensities=dict(defaults.BOOSTED_OFFHOURS_INTENSITIES, night=chosen["night"]),
        achieved_savings_pct=chosen["savings"],
        achieved_penalty_pct=chosen["penalty"],
        target_savings_pct=target_savings_pct,
        target_penalty_pct=target_penalty_pct,
        residual_pp=residual,
        targets_met=targets_met,
        orderings_ok=not chosen["problems"],
        frontier=chosen["frontier"],
        evaluations=evaluations,
        notes=(f"grid of {len(night_values)} night boosts x {len(delta_values)} deltas, "
               f"gamma bisected per cell at {coarse_step_s:.0f} s steps; "
               f"winner re-bisected and validated at {final_step_s:.0f} s steps"
               + ("" if targets_met else
                  f"; best-effort: residual ({residual[0]:.2f}, {residual[1]:.2f}) pp "
                  "exceeds the 1 pp goal within the searched ranges")
               + ("" if not chosen["problems"] else
                  "; WARNING orderings broken: " + "; ".join(chosen["problems"]))),
    )


__all__ = [
    "DEFAULT_SIM_START", "DEFAULT_STEP_S", "ZeroProgressError", "CalibrationError",
    "CalibrationParams", "SimResult", "PolicyComparison", "calibrate",
    "workload_from_calibration", "reference_profile", "reference_grid",
    "ReferenceSetup", "reference_setup", "batch_efficiency", "simulate",
    "closed_form_constant", "compare_policies", "SavingsProjection",
    "project_savings", "TuneResult", "check_frontier_orderings", "tune_power_params",
]

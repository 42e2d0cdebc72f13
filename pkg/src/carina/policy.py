"""Pacing decisions: which band is active, how many workers it allows.

All lookups are minute-granular. A "boundary" is a minute where the resolved
decision actually changes; two adjacent bands with identical settings (for
example the two halves of a midnight-wrapping night period) do not produce
a boundary between them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta

from . import defaults
from .model import (
    MINUTES_PER_DAY,
    MachineProfile,
    Phase,
    PriorityClass,
    TimeBand,
    TimingPolicy,
    parse_minute,
)


@dataclass(frozen=True)
class IntensityDecision:
    """Resolved pacing for a moment in time.

    ``workers`` is the machine-resolved count for the band's intensity
    (rounding plus core clamp); the band's thread cap is carried alongside
    and applied by consumers via ``effective_workers``. ``band_end_minute``
    is the minute-of-day when this decision stops applying; for an always-on
    policy it equals the queried minute again (one full day later).
    """

    phase: Phase
    intensity: float
    workers: int
    priority_class: PriorityClass
    thread_cap: int | None
    affinity: int | None
    band_end_minute: int


def effective_workers(decision: IntensityDecision) -> int:
    """Worker-pool target after the band's thread cap."""
    if decision.thread_cap is None:
        return decision.workers
    return min(decision.workers, decision.thread_cap)


def minute_of_day(t: datetime) -> int:
    return t.hour * 60 + t.minute


def workers_for(intensity: float, profile: MachineProfile) -> int:
    """Map an intensity multiplier to a worker count.

    Zero means fully paused. Any positive intensity keeps at least one
    worker so progress never silently stops; the result is rounded half-up
    from ``intensity * nominal_workers`` and clamped to the core count.
    """
    if intensity < 0:
        raise ValueError(f"intensity must be >= 0 (got {intensity})")
    if intensity == 0:
        return 0
    raw = math.floor(intensity * profile.nominal_workers + 0.5)
    return max(1, min(raw, profile.logical_cores))


def band_at(policy: TimingPolicy, minute: int) -> TimeBand:
    minute %= MINUTES_PER_DAY
    for band in policy.bands:
        if band.start_minute <= minute < band.end_minute:
            return band
    raise ValueError(f"policy {policy.name!r} does not cover minute {minute}")


def decision_boundaries(policy: TimingPolicy) -> tuple[int, ...]:
    """Minutes of the day where the resolved settings change, ascending."""
    starts = sorted(b.start_minute for b in policy.bands)
    out = []
    for start in starts:
        before = band_at(policy, start - 1)  # wraps to end of day for 0
        if before.settings_key() != band_at(policy, start).settings_key():
            out.append(start)
    return tuple(out)


def phase_at(policy: TimingPolicy, t: datetime) -> Phase:
    return band_at(policy, minute_of_day(t)).phase


def intensity_at(policy: TimingPolicy, t: datetime, profile: MachineProfile) -> IntensityDecision:
    minute = minute_of_day(t)
    band = band_at(policy, minute)
    workers = workers_for(band.intensity, profile)
    boundaries = decision_boundaries(policy)
    end = minute
    for b in boundaries:
        if b > minute:
            end = b
            break
    else:
        if boundaries:
            end = boundaries[0]
    return IntensityDecision(
        phase=band.phase,
        intensity=band.intensity,
        workers=workers,
        priority_class=band.priority_class,
        thread_cap=band.thread_cap,
        affinity=band.affinity,
        band_end_minute=end % MINUTES_PER_DAY if boundaries else minute,
    )


def next_boundary(policy: TimingPolicy, t: datetime) -> datetime:
    """Earliest instant strictly after ``t`` where the decision changes.

    Boundaries land on whole minutes. A policy whose settings never change
    returns the same wall-clock minute on the following day.
    """
    base = t.replace(second=0, microsecond=0)
    boundaries = decision_boundaries(policy)
    if not boundaries:
        return base + timedelta(days=1)
    minute = minute_of_day(t)
    for b in boundaries:
        if b > minute:
            return base + timedelta(minutes=b - minute)
    return base + timedelta(minutes=boundaries[0] + MINUTES_PER_DAY - minute)


# --- built-in policies --------------------------------------------------------


def make_policy(
    name: str,
    intensities: dict[str, float],
    *,
    low_priority_phases: frozenset[str] = frozenset(),
    lowprio_slowdown: float = defaults.DEFAULT_LOWPRIO_SLOWDOWN,
    batch_size_override: int | None = None,
    band_clock: tuple = defaults.DEFAULT_BAND_CLOCK,
) -> TimingPolicy:
    """Build a policy from the standard daily band layout.

    ``intensities`` maps phase value ("peak", "night", ...) to a multiplier.
    Bands whose phase appears in ``low_priority_phases`` run at low OS
    priority, which also engages the modelled ``lowprio_slowdown``.
    """
    bands = []
    for phase_name, start, end in band_clock:
        phase = Phase(phase_name)
        priority = PriorityClass.LOW if phase.value in low_priority_phases else PriorityClass.NORMAL
        bands.append(TimeBand(
            phase=phase,
            start_minute=parse_minute(start),
            end_minute=parse_minute(end),
            intensity=float(intensities[phase.value]),
            priority_class=priority,
        ))
    return TimingPolicy(
        name=name,
        bands=tuple(bands),
        lowprio_slowdown=lowprio_slowdown,
        batch_size_override=batch_size_override,
    )


LOW_PRIORITY_PHASES = frozenset({Phase.LOAD_SENSITIVE.value, Phase.PEAK.value})


def builtin_policies() -> tuple[TimingPolicy, ...]:
    """The shipped policy set. The first entry is the comparison baseline."""
    return (
        make_policy(defaults.BASELINE_POLICY_NAME, defaults.BASELINE_INTENSITIES),
        make_policy(defaults.BOOSTED_POLICY_NAME, defaults.BOOSTED_OFFHOURS_INTENSITIES),
        make_policy("peak_aware_aggressive", defaults.AGGRESSIVE_INTENSITIES),
        make_policy("low_priority_only", defaults.BASELINE_INTENSITIES,
                    low_priority_phases=LOW_PRIORITY_PHASES),
        make_policy("small_batches_25", defaults.BASELINE_INTENSITIES,
                    batch_size_override=defaults.SMALL_BATCH_SIZE),
        make_policy("large_batches_100", defaults.BASELINE_INTENSITIES,
                    batch_size_override=defaults.LARGE_BATCH_SIZE),
    )


def builtin_policy(name: str) -> TimingPolicy:
    for policy in builtin_policies():
        if policy.name == name:
            return policy
    known = ", ".join(p.name for p in builtin_policies())
    raise KeyError(f"no built-in policy named {name!r} (known: {known})")


__all__ = [
    "IntensityDecision", "effective_workers", "minute_of_day", "workers_for",
    "band_at", "decision_boundaries", "phase_at", "intensity_at",
    "next_boundary", "make_policy", "builtin_policies", "builtin_policy",
    "LOW_PRIORITY_PHASES",
]

"""carina: carbon- and energy-aware pacing for recurrent batch workloads.

Schedules worker intensity by local time-of-day bands, tracks per-unit
runtime/energy/carbon through an estimation-based power model, and simulates
candidate execution policies against a calibrated measured baseline.
"""

from .model import (
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
    ValidationReport,
    Violation,
    WorkloadSpec,
    validate_machine_profile,
    validate_policy,
    validate_workload,
)
from .policy import (
    IntensityDecision,
    builtin_policies,
    builtin_policy,
    intensity_at,
    next_boundary,
    phase_at,
    workers_for,
)
from .simulator import (
    CalibrationParams,
    PolicyComparison,
    SimResult,
    ZeroProgressError,
    calibrate,
    closed_form_constant,
    compare_policies,
    reference_setup,
    simulate,
    tune_power_params,
)
from .tracker import (
    RunHandle,
    RunSummary,
    TrackedUnitRecord,
    UnitKind,
    active_power_w,
    aggregate,
    energy_to_carbon,
    estimate_energy,
    new_run,
    record_unit,
)
from .controller import (
    CommandEvaluator,
    ExecutionAborted,
    MergeError,
    ResumeMismatchError,
    RunResult,
    StateExistsError,
    SyntheticEvaluator,
    apply_controls,
    detect_machine,
    run_workload,
    verify_merge,
)
from .reporting import (
    emit_dashboard,
    emit_frontier_csv,
    read_run_log,
    read_summary,
    write_run_log,
    write_summary,
)

__version__ = "0.1.0"

__all__ = [
    "DetectionSource", "FormatError", "Granularity", "GridFactor",
    "MachineProfile", "Phase", "PriorityClass", "TimeBand", "TimingPolicy",
    "ValidationFailure", "ValidationReport", "Violation", "WorkloadSpec",
    "validate_machine_profile", "validate_policy", "validate_workload",
    "IntensityDecision", "builtin_policies", "builtin_policy", "intensity_at",
    "next_boundary", "phase_at", "workers_for",
    "CalibrationParams", "PolicyComparison", "SimResult", "ZeroProgressError",
    "calibrate", "closed_form_constant", "compare_policies", "reference_setup",
    "simulate", "tune_power_params",
    "RunHandle", "RunSummary", "TrackedUnitRecord", "UnitKind",
    "active_power_w", "aggregate", "energy_to_carbon", "estimate_energy",
    "new_run", "record_unit",
    "CommandEvaluator", "ExecutionAborted", "MergeError", "ResumeMismatchError",
    "RunResult", "StateExistsError", "SyntheticEvaluator", "apply_controls",
    "detect_machine", "run_workload", "verify_merge",
    "emit_dashboard", "emit_frontier_csv", "read_run_log", "read_summary",
    "write_run_log", "write_summary",
    "__version__",
]

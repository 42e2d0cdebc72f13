"""Command-line entry point: carina {detect,run,simulate,compare,report,export-policies}.

Exit codes: 0 success, 2 bad input or configuration, 3 execution aborted
(checkpoint retained), 4 merge verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

from . import defaults
from .controller import (
    CommandEvaluator,
    ExecutionAborted,
    MergeError,
    ResumeMismatchError,
    StateExistsError,
    SyntheticEvaluator,
    decision_segments,
    dedupe_batch_records,
    detect_machine,
    run_workload,
)
from .model import (
    FormatError,
    GridFactor,
    TimingPolicy,
    ValidationFailure,
    load_policy,
    load_workload,
    profile_to_doc,
    save_policy,
    save_profile,
)
from .policy import builtin_policies
from .reporting import emit_dashboard, emit_frontier_csv, read_run_log, write_summary
from .simulator import (
    CalibrationError,
    SimResult,
    ZeroProgressError,
    calibrate,
    compare_policies,
    project_savings,
    reference_profile,
    reference_setup,
    simulate,
    workload_from_calibration,
)
from .tracker import aggregate_records

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_ABORTED = 3
EXIT_MERGE_FAILED = 4


class CliError(Exception):
    """User-facing failure with a definite exit code."""

    def __init__(self, exit_code: int, message: str):
        super().__init__(message)
        self.exit_code = exit_code


@dataclass(frozen=True)
class CliConfig:
    """Parsed invocation; one instance drives exactly one subcommand."""

    subcommand: str
    policy: str | None = None
    profile: str | None = None
    workload: str | None = None
    grid_factor: float | None = None
    start_time: datetime | None = None
    step_seconds: float = 60.0
    out: str | None = None
    resume: bool = False
    seed: int = 0
    dry_run: bool = False
    force: bool = False
    evaluator: str = "synthetic"
    command: str | None = None
    retry_limit: int = 3
    calibrate: str | None = None
    preset: str | None = None
    project_baselines: bool = False
    report: str | None = None
    log: str | None = None


def _parse_start_time(raw: str | None) -> datetime | None:
    if raw is None:
        return None
    try:
        return datetime.fromisoformat(raw)
    except ValueError:
        raise CliError(EXIT_INVALID,
                       f"invalid --start-time {raw!r}: expected ISO format "
                       "like 2025-01-06T08:00") from None


def fixed_now() -> datetime | None:
    """Test hook: a fixed wall clock from the environment, if set."""
    raw = os.environ.get(defaults.ENV_FIXED_NOW)
    if not raw:
        return None
    try:
        return datetime.fromisoformat(raw)
    except ValueError:
        raise CliError(EXIT_INVALID,
                       f"invalid {defaults.ENV_FIXED_NOW} value {raw!r}: "
                       "expected an ISO timestamp") from None


def resolve_grid(flag_value: float | None, file_grid: GridFactor | None,
                 *, fallback: GridFactor | None = None) -> GridFactor:
    """Flag beats environment beats policy-file grid beats bundled fallback."""
    if flag_value is not None:
        return GridFactor("cli-flag", flag_value, "set via --grid-factor")
    raw = os.environ.get(defaults.ENV_GRID_FACTOR)
    if raw:
        try:
            value = float(raw)
        except ValueError:
            raise CliError(EXIT_INVALID,
                           f"invalid {defaults.ENV_GRID_FACTOR} value {raw!r}: "
                           "expected a number (kg CO2e per kWh)") from None
        return GridFactor("env", value, f"set via {defaults.ENV_GRID_FACTOR}")
    if file_grid is not None:
        return file_grid
    if fallback is not None:
        return fallback
    raise CliError(EXIT_INVALID,
                   "no grid emission factor configured: pass --grid-factor, set "
                   f"{defaults.ENV_GRID_FACTOR}, or add a \"grid\" block to the "
                   "policy file")


def _resolve_policy(value: str) -> tuple[TimingPolicy, GridFactor | None]:
    """A policy flag names either a built-in or a policy JSON file."""
    builtins = {p.name: p for p in builtin_policies()}
    if value in builtins:
        return builtins[value], None
    path = Path(value)
    if path.exists():
        return load_policy(path)
    known = ", ".join(sorted(builtins))
    raise CliError(EXIT_INVALID,
                   f"unknown policy {value!r}: not a built-in ({known}) "
                   "and no such file")


def _parse_calibrate(raw: str) -> tuple[int, float, float]:
    parts = raw.split(",")
    if len(parts) != 3:
        raise CliError(EXIT_INVALID,
                       f"invalid --calibrate {raw!r}: expected SCENARIOS,HOURS,KWH")
    try:
        return int(parts[0]), float(parts[1]), float(parts[2])
    except ValueError:
        raise CliError(EXIT_INVALID,
                       f"invalid --calibrate {raw!r}: expected SCENARIOS,HOURS,KWH "
                       "as number,number,number") from None


def _sim_inputs(config: CliConfig):
    """Workload + profile + default grid for simulate/compare.

    Three sources, checked in order: a bundled measured-baseline preset, raw
    calibration numbers, or an explicit workload file.
    """
    if config.preset is not None:
        try:
            setup = reference_setup(config.preset)
        except KeyError as exc:
            raise CliError(EXIT_INVALID, str(exc.args[0])) from None
        return setup.workload, setup.profile, setup.grid
    if config.calibrate is not None:
        scenarios, hours, kwh = _parse_calibrate(config.calibrate)
        base = detect_machine(config.profile) if config.profile else reference_profile()
        params, fitted = calibrate(scenarios, hours, kwh, base)
        workload = workload_from_calibration(
            f"calibrated-{scenarios}", scenarios, params, fitted)
        return workload, fitted, None
    if config.workload is not None:
        workload = load_workload(config.workload)
        if config.profile is None:
            logger.warning("no --profile given; using detected hardware with "
                           "table power defaults")
        profile = detect_machine(config.profile)
        return workload, profile, None
    raise CliError(EXIT_INVALID,
                   "nothing to simulate: pass --preset, --calibrate, or --workload")


def _simresult_doc(result: SimResult) -> dict:
    return {
        "format": "carina-simresult",
        "version": 1,
        "policy_name": result.policy_name,
        "completion_h": result.completion_h,
        "energy_kwh": result.energy_kwh,
        "carbon_kg": result.carbon_kg,
        "average_power_w": result.average_power_w,
        "runtime_penalty_pct": result.runtime_penalty_pct,
        "energy_savings_pct": result.energy_savings_pct,
        "start_time": result.start_time.isoformat(),
        "step_s": result.step_s,
        "per_phase": {
            phase.value: {
                "runtime_h": totals.runtime_h,
                "energy_kwh": totals.energy_kwh,
                "carbon_kg": totals.carbon_kg,
            }
            for phase, totals in sorted(result.per_phase.items(),
                                        key=lambda kv: kv[0].value)
        },
    }


# --- subcommands ----------------------------------------------------------------


def cmd_detect(config: CliConfig) -> int:
    profile = detect_machine(config.profile)
    out = Path(config.out or "machine_profile.json")
    if out.exists() and not config.force:
        raise CliError(EXIT_INVALID, f"{out} already exists; pass --force to overwrite")
    try:
        save_profile(profile, out)
    except OSError as exc:
        raise CliError(EXIT_INVALID, f"cannot write profile to {out}: {exc}") from None
    print(json.dumps(profile_to_doc(profile), indent=2, sort_keys=True))
    logger.info("wrote %s", out)
    return EXIT_OK


def _print_dry_run(policy: TimingPolicy, profile, start: datetime) -> None:
    print(f"policy {policy.name}: decisions for 24 h from {start:%Y-%m-%d %H:%M}")
    for seg_start, seg_end, decision in decision_segments(
            policy, profile, start, start + timedelta(hours=24)):
        cap = "-" if decision.thread_cap is None else str(decision.thread_cap)
        affinity = "all" if decision.affinity is None else f"first-{decision.affinity}"
        print(f"  {seg_start:%H:%M}-{seg_end:%H:%M}  {decision.phase.value:<14} "
              f"workers={decision.workers:<3} priority={decision.priority_class.value:<12} "
              f"thread_cap={cap:<3} affinity={affinity}")


def cmd_run(config: CliConfig) -> int:
    if config.workload is None:
        raise CliError(EXIT_INVALID, "run requires --workload")
    if config.policy is None:
        raise CliError(EXIT_INVALID, "run requires --policy")
    workload = load_workload(config.workload)
    policy, file_grid = _resolve_policy(config.policy)
    profile = detect_machine(config.profile)
    grid = resolve_grid(config.grid_factor, file_grid)
    fixed = fixed_now()

    if config.dry_run:
        start = config.start_time or fixed or datetime.now()
        _print_dry_run(policy, profile, start)
        return EXIT_OK

    if config.evaluator == "command":
        if not config.command:
            raise CliError(EXIT_INVALID, "--evaluator command requires --command")
        evaluator = CommandEvaluator(config.command, seed=config.seed)
    else:
        evaluator = SyntheticEvaluator(config.seed)

    result = run_workload(
        workload, policy, profile, grid,
        evaluator=evaluator,
        resume=config.resume,
        out_dir=config.out or "runs",
        seed=config.seed,
        retry_limit=config.retry_limit,
        force=config.force,
        now_fn=(lambda: fixed) if fixed else None,
    )
    write_summary(result.summary, result.run_dir / "summary.json", generated_at=fixed)
    emit_dashboard(result.summary, None, result.run_dir / "report.html",
                   generated_at=fixed, title=f"carina run {result.run_id}")
    summary = result.summary
    print(f"run {result.run_id}: {summary.unit_count} units, "
          f"{summary.total_runtime_h:.3f} h, {summary.total_energy_kwh:.4f} kWh, "
          f"{summary.total_carbon_kg:.4f} kg CO2e")
    print(f"merged {result.merge.scenario_count} scenarios "
          f"({result.merge.byte_size} bytes, sha256 {result.merge.sha256_hex[:12]})")
    print(f"artifacts: {result.run_dir}")
    return EXIT_OK


def cmd_simulate(config: CliConfig) -> int:
    if config.policy is None:
        raise CliError(EXIT_INVALID, "simulate requires --policy")
    policy, file_grid = _resolve_policy(config.policy)
    workload, profile, preset_grid = _sim_inputs(config)
    grid = resolve_grid(config.grid_factor, file_grid, fallback=preset_grid)
    start = config.start_time or fixed_now()

    result = simulate(workload, policy, profile, grid,
                      start_time=start, step_s=config.step_seconds)
    print(f"policy {result.policy_name}: completes in {result.completion_h:.2f} h, "
          f"{result.energy_kwh:.2f} kWh, {result.carbon_kg:.2f} kg CO2e, "
          f"average draw {result.average_power_w:.1f} W")
    for phase, totals in sorted(result.per_phase.items(), key=lambda kv: kv[0].value):
        print(f"  {phase.value:<14} {totals.runtime_h:>9.2f} h  "
              f"{totals.energy_kwh:>8.3f} kWh")
    if config.out:
        out = Path(config.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(_simresult_doc(result), indent=2, sort_keys=True) + "\n",
                       encoding="utf-8")
        print(f"wrote {out}")
    return EXIT_OK


def cmd_compare(config: CliConfig) -> int:
    if config.policy is None or config.policy == "all":
        resolved = [(p, None) for p in builtin_policies()]
    else:
        resolved = [_resolve_policy(name.strip())
                    for name in config.policy.split(",") if name.strip()]
        if not resolved:
            raise CliError(EXIT_INVALID, "no policies named in --policy")
    policies = [p for p, _ in resolved]
    file_grid = next((g for _, g in resolved if g is not None), None)
    workload, profile, preset_grid = _sim_inputs(config)
    grid = resolve_grid(config.grid_factor, file_grid, fallback=preset_grid)
    start = config.start_time or fixed_now()

    comparison = compare_policies(workload, policies, profile, grid,
                                  start_time=start, step_s=config.step_seconds)
    print(f"{'policy':<28} {'penalty %':>10} {'savings %':>10} "
          f"{'hours':>9} {'kWh':>9} {'kg CO2e':>9}")
    for result in comparison.all_results():
        print(f"{result.policy_name:<28} {result.runtime_penalty_pct:>10.2f} "
              f"{result.energy_savings_pct:>10.2f} {result.completion_h:>9.2f} "
              f"{result.energy_kwh:>9.2f} {result.carbon_kg:>9.2f}")
    for name, reason in comparison.failures:
        print(f"{name:<28} failed: {reason}")

    if config.out:
        emit_frontier_csv(comparison, config.out)
        print(f"wrote {config.out}")
    if config.report:
        emit_dashboard(None, comparison, config.report, generated_at=fixed_now(),
                       title="carina policy comparison")
        print(f"wrote {config.report}")

    if config.project_baselines:
        by_name = {r.policy_name: r for r in comparison.candidates}
        chosen = by_name.get(defaults.BOOSTED_POLICY_NAME)
        if chosen is None and comparison.candidates:
            chosen = max(comparison.candidates,
                         key=lambda r: r.energy_savings_pct or 0.0)
        if chosen is None:
            raise CliError(EXIT_INVALID,
                           "--project-baselines needs at least one candidate policy "
                           "beyond the baseline")
        print(f"projecting {chosen.policy_name} "
              f"({chosen.energy_savings_pct:.2f}% energy savings):")
        for preset, (_, hours, kwh) in sorted(defaults.MEASURED_BASELINES.items()):
            projection = project_savings(kwh, chosen.energy_savings_pct, grid)
            print(f"  {preset}: {kwh:.2f} kWh measured over {hours:.2f} h -> "
                  f"{projection.projected_kwh:.1f} kWh "
                  f"(saves {projection.saved_kwh:.1f} kWh, "
                  f"{projection.saved_carbon_kg:.1f} kg CO2e)")
    return EXIT_OK


def cmd_report(config: CliConfig) -> int:
    if config.log is None:
        raise CliError(EXIT_INVALID, "report requires --log")
    header, logged = read_run_log(config.log)
    records = dedupe_batch_records(logged)
    file_grid = None
    if config.policy is not None:
        _, file_grid = _resolve_policy(config.policy)
    profile = detect_machine(config.profile)
    grid = resolve_grid(config.grid_factor, file_grid)
    summary = aggregate_records(
        records,
        run_id=str(header.get("run_id", "unknown")),
        policy_name=str(header.get("policy_name", "unknown")),
        profile=profile,
        grid=grid,
    )
    out_dir = Path(config.out) if config.out else Path(config.log).parent
    fixed = fixed_now()
    write_summary(summary, out_dir / "summary.json", generated_at=fixed)
    emit_dashboard(summary, None, out_dir / "report.html", generated_at=fixed,
                   title=f"carina run {summary.run_id}")
    print(f"run {summary.run_id}: {summary.unit_count} units, "
          f"{summary.total_runtime_h:.3f} h, {summary.total_energy_kwh:.4f} kWh, "
          f"{summary.total_carbon_kg:.4f} kg CO2e")
    print(f"wrote {out_dir / 'summary.json'} and {out_dir / 'report.html'}")
    return EXIT_OK


def cmd_export_policies(config: CliConfig) -> int:
    out_dir = Path(config.out or "policies")
    out_dir.mkdir(parents=True, exist_ok=True)
    for policy in builtin_policies():
        path = out_dir / f"{policy.name}.json"
        save_policy(policy, path)
        print(f"wrote {path}")
    return EXIT_OK


_COMMANDS = {
    "detect": cmd_detect,
    "run": cmd_run,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "report": cmd_report,
    "export-policies": cmd_export_policies,
}


# --- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carina",
        description="Carbon-aware pacing for long batch workloads: schedule "
                    "worker intensity by time of day, track energy and CO2e, "
                    "and compare policies before committing to one.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    common_grid = argparse.ArgumentParser(add_help=False)
    common_grid.add_argument("--grid-factor", type=float, metavar="KG_PER_KWH",
                             help="grid emission factor override (kg CO2e per kWh)")
    common_grid.add_argument("--profile", metavar="PATH",
                             help="machine profile JSON (default: auto-detect)")

    p_detect = sub.add_parser("detect", help="detect this machine and write a profile")
    p_detect.add_argument("--profile", metavar="PATH",
                          help="load this profile instead of detecting")
    p_detect.add_argument("--out", metavar="PATH", default="machine_profile.json",
                          help="where to write the profile (default: %(default)s)")
    p_detect.add_argument("--force", action="store_true",
                          help="overwrite an existing profile file")

    p_run = sub.add_parser("run", parents=[common_grid],
                           help="execute a workload under a policy")
    p_run.add_argument("--workload", required=True, metavar="PATH")
    p_run.add_argument("--policy", required=True, metavar="NAME_OR_PATH",
                       help="built-in policy name or policy JSON file")
    p_run.add_argument("--out", default="runs", metavar="DIR",
                       help="output directory (default: %(default)s)")
    p_run.add_argument("--resume", action="store_true",
                       help="continue an interrupted run from its checkpoint")
    p_run.add_argument("--force", action="store_true",
                       help="discard existing incomplete state and start fresh")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--dry-run", action="store_true",
                       help="print 24 h of pacing decisions without executing")
    p_run.add_argument("--start-time", metavar="ISO",
                       help="clock for --dry-run (default: now)")
    p_run.add_argument("--evaluator", choices=("synthetic", "command"),
                       default="synthetic")
    p_run.add_argument("--command", metavar="CMD",
                       help="batch command for --evaluator command; invoked with "
                            "the batch manifest path appended")
    p_run.add_argument("--retry-limit", type=int, default=3, metavar="N")

    sim_inputs = argparse.ArgumentParser(add_help=False)
    sim_inputs.add_argument("--workload", metavar="PATH")
    sim_inputs.add_argument("--calibrate", metavar="SCENARIOS,HOURS,KWH",
                            help="fit the model to one measured baseline run")
    sim_inputs.add_argument("--preset", metavar="NAME",
                            help="bundled measured baseline (oem1 or oem2)")
    sim_inputs.add_argument("--start-time", metavar="ISO")
    sim_inputs.add_argument("--step-seconds", type=float, default=60.0, metavar="S")

    p_sim = sub.add_parser("simulate", parents=[common_grid, sim_inputs],
                           help="project completion time, energy, and carbon "
                                "for one policy")
    p_sim.add_argument("--policy", required=True, metavar="NAME_OR_PATH")
    p_sim.add_argument("--out", metavar="PATH", help="write the result as JSON")

    p_cmp = sub.add_parser("compare", parents=[common_grid, sim_inputs],
                           help="simulate several policies; first is the baseline")
    p_cmp.add_argument("--policy", default="all", metavar="NAMES",
                       help="comma-separated policies, or 'all' built-ins "
                            "(default: %(default)s)")
    p_cmp.add_argument("--out", metavar="PATH", help="write the frontier as CSV")
    p_cmp.add_argument("--report", metavar="PATH", help="write an HTML dashboard")
    p_cmp.add_argument("--project-baselines", action="store_true",
                       help="apply the boosted policy's savings to the bundled "
                            "measured baselines")

    p_rep = sub.add_parser("report", parents=[common_grid],
                           help="rebuild summary and dashboard from a run log")
    p_rep.add_argument("--log", required=True, metavar="PATH")
    p_rep.add_argument("--policy", metavar="NAME_OR_PATH",
                       help="policy file whose grid block supplies the factor")
    p_rep.add_argument("--out", metavar="DIR",
                       help="output directory (default: the log's directory)")

    p_exp = sub.add_parser("export-policies",
                           help="write the built-in policies as editable JSON")
    p_exp.add_argument("--out", default="policies", metavar="DIR",
                       help="target directory (default: %(default)s)")
    return parser


def config_from_args(args: argparse.Namespace) -> CliConfig:
    return CliConfig(
        subcommand=args.subcommand,
        policy=getattr(args, "policy", None),
        profile=getattr(args, "profile", None),
        workload=getattr(args, "workload", None),
        grid_factor=getattr(args, "grid_factor", None),
        start_time=_parse_start_time(getattr(args, "start_time", None)),
        step_seconds=getattr(args, "step_seconds", 60.0),
        out=getattr(args, "out", None),
        resume=getattr(args, "resume", False),
        seed=getattr(args, "seed", 0),
        dry_run=getattr(args, "dry_run", False),
        force=getattr(args, "force", False),
        evaluator=getattr(args, "evaluator", "synthetic"),
        command=getattr(args, "command", None),
        retry_limit=getattr(args, "retry_limit", 3),
        calibrate=getattr(args, "calibrate", None),
        preset=getattr(args, "preset", None),
        project_baselines=getattr(args, "project_baselines", False),
        report=getattr(args, "report", None),
        log=getattr(args, "log", None),
    )


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = config_from_args(args)
        return _COMMANDS[config.subcommand](config)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValidationFailure, FormatError, CalibrationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (StateExistsError, ResumeMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_INVALID
    except ZeroProgressError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except ExecutionAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except KeyboardInterrupt:
        print("interrupted; incomplete state retained for --resume", file=sys.stderr)
        return EXIT_ABORTED
    except MergeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MERGE_FAILED


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``dpdiag {simulate,analyze,compare,suite}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from dpdiag import telemetry
from dpdiag.presets import SCENARIOS, SUITES, ExperimentSuite, load_suite
from dpdiag.sim.config import ConfigError, ScenarioConfig, load_scenario
from dpdiag.sim.harness import HaltRun, final_mean_loss, run_scenario

logger = logging.getLogger("dpdiag")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _overrides(args) -> dict:
    return {"base_seed": args.seed, "world_size": args.world_size, "steps": args.steps}


def _apply(cfg: ScenarioConfig, args) -> ScenarioConfig:
    changes = {k: v for k, v in _overrides(args).items() if v is not None}
    return cfg.replace(**changes) if changes else cfg


def _print_means(summary: telemetry.RunSummary) -> None:
    print(f"run {summary.label} ({summary.step_count} steps, {summary.gaps} gapped)")
    for name, value in summary.means.items():
        print(f"  {name:22s} {'-' if value is None else f'{value:.6g}'}")
    print(f"  {'excluded_pairs_total':22s} {summary.excluded_pairs_total}")


def _label(run) -> str:
    cfg = run.manifest.config
    if isinstance(cfg, dict) and isinstance(cfg.get("name"), str):
        return cfg["name"]
    return run.run_id


def simulate_to(cfg: ScenarioConfig, out: Path) -> int:
    try:
        log = run_scenario(cfg)
    except HaltRun as exc:
        if exc.log is not None:
            telemetry.write_log(exc.log, out)
        _err(f"{exc} (partial log with {exc.step} steps written to {out})")
        return EXIT_FAILED
    telemetry.write_log(log, out)
    loss = final_mean_loss(log)
    print(f"run_id {log.run_id}")
    print(f"final mean loss {'-' if loss is None else f'{loss:.6g}'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    if (args.config is None) == (args.preset is None):
        _err("give exactly one of --config or --preset")
        return EXIT_USAGE
    try:
        cfg = load_scenario(args.config) if args.config else SCENARIOS[args.preset]
        cfg = _apply(cfg, args)
    except ConfigError as exc:
        _err(f"{args.config or args.preset}: {exc}")
        return EXIT_USAGE
    except OSError as exc:
        _err(f"cannot read config {args.config}: {exc.strerror or exc}")
        return EXIT_USAGE
    try:
        return simulate_to(cfg, Path(args.out))
    except telemetry.LogIOError as exc:
        _err(str(exc))
        return EXIT_FAILED


def analyze_to(log_path, csv_out) -> telemetry.RunSummary:
    run = telemetry.read_log(log_path)
    summary = telemetry.summarize_run(run, _label(run))
    Path(csv_out).parent.mkdir(parents=True, exist_ok=True)
    Path(csv_out).write_text(telemetry.series_csv(summary), encoding="utf-8", newline="\n")
    return summary


def cmd_analyze(args) -> int:
    try:
        summary = analyze_to(args.log, args.out)
    except (telemetry.TelemetryError, OSError) as exc:
        _err(str(exc))
        return EXIT_FAILED
    _print_means(summary)
    return EXIT_OK


def _unique(labels: list[str]) -> list[str]:
    seen: dict[str, int] = {}
    out = []
    for lab in labels:
        seen[lab] = seen.get(lab, 0) + 1
        out.append(lab if seen[lab] == 1 and labels.count(lab) == 1 else f"{lab}#{seen[lab]}")
    return out


def write_report(summaries: list[telemetry.RunSummary], report_out: Path) -> telemetry.ComparisonReport:
    report = telemetry.compare_runs(summaries)
    report_out.parent.mkdir(parents=True, exist_ok=True)
    report_out.write_text(report.to_csv(), encoding="utf-8", newline="\n")
    report_out.with_suffix(".txt").write_text(report.to_table(), encoding="utf-8", newline="\n")
    return report


def cmd_compare(args) -> int:
    if len(args.logs) < 2:
        _err("compare needs at least two logs")
        return EXIT_USAGE
    try:
        runs = [telemetry.read_log(p) for p in args.logs]
        labels = _unique([_label(r) for r in runs])
        summaries = [telemetry.summarize_run(r, lab) for r, lab in zip(runs, labels)]
        report = write_report(summaries, Path(args.out))
    except (telemetry.TelemetryError, OSError) as exc:
        _err(str(exc))
        return EXIT_FAILED
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(report.to_table(), end="")
    return EXIT_OK


def run_suite(suite: ExperimentSuite, out_dir: Path) -> tuple[int, Optional[telemetry.ComparisonReport]]:
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries, failed = [], []
    for cfg in suite.members:
        log_path = out_dir / f"{cfg.name}.jsonl"
        print(f"[{suite.name}] {cfg.name}: simulating {cfg.steps} steps, world size {cfg.world_size}")
        try:
            status = simulate_to(cfg, log_path)
            if status != EXIT_OK:
                failed.append(cfg.name)
                continue
            summaries.append(analyze_to(log_path, out_dir / f"{cfg.name}.csv"))
        except (telemetry.TelemetryError, OSError) as exc:
            _err(f"member {cfg.name}: {exc}")
            failed.append(cfg.name)
    report = None
    if summaries:
        report = write_report(summaries, out_dir / "report.csv")
        print(report.to_table(), end="")
    if failed:
        _err(f"suite members failed: {', '.join(failed)}")
        return EXIT_FAILED, report
    return EXIT_OK, report


def cmd_suite(args) -> int:
    if (args.suite is None) == (args.preset is None):
        _err("give exactly one of a suite file or --preset")
        return EXIT_USAGE
    try:
        suite = load_suite(args.suite) if args.suite else SUITES[args.preset]
        suite = suite.override(**_overrides(args))
    except ConfigError as exc:
        _err(f"{args.suite or args.preset}: {exc}")
        return EXIT_USAGE
    except OSError as exc:
        _err(f"cannot read suite {args.suite}: {exc.strerror or exc}")
        return EXIT_USAGE
    out = args.out or suite.output_dir
    if out is None:
        _err("suite has no output_dir; pass --out")
        return EXIT_USAGE
    status, _ = run_suite(suite, Path(out))
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpdiag", description="Worker-level consistency diagnostics for data-parallel training."
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_overrides(p):
        p.add_argument("--seed", type=int, help="override base_seed")
        p.add_argument("--world-size", type=int)
        p.add_argument("--steps", type=int)

    p = sub.add_parser("simulate", help="run one scenario and write its log")
    p.add_argument("--config", help="scenario YAML file")
    p.add_argument("--preset", choices=sorted(SCENARIOS))
    p.add_argument("--out", required=True, help="output log path (.jsonl)")
    add_overrides(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="per-step metric CSV and run means for one log")
    p.add_argument("log")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare", help="compare two or more logs")
    p.add_argument("logs", nargs="+")
    p.add_argument("--out", required=True, help="report CSV path; a .txt table is written alongside")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("suite", help="run, analyze and compare every member of a suite")
    p.add_argument("suite", nargs="?", help="suite YAML file")
    p.add_argument("--preset", choices=sorted(SUITES))
    p.add_argument("--out", help="output directory (default: the suite's output_dir)")
    add_overrides(p)
    p.set_defaults(func=cmd_suite)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line runner: ``run``, ``compare``, ``sweep`` and ``report``.

Exit codes: 0 success, 2 configuration error (nothing written), 3 horizon
abort (partial trace kept).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from kvadmit import metrics
from kvadmit.config import PRESETS, SWEEP_AXES, RunSpec, ScenarioConfig, load_scenario
from kvadmit.controller import Policy
from kvadmit.engine import SimulationError, Workload, check_partition, classify_phases, run
from kvadmit.errors import ConfigError, HorizonExceeded

log = logging.getLogger("kvadmit")

EXIT_OK, EXIT_CONFIG, EXIT_HORIZON = 0, 2, 3
DEFAULT_SWEEP = {
    "fixed_cap": (4, 8, 16, 32, 64, 128),
    "u_low": (0.1, 0.2, 0.3, 0.5),
    "u_high": (0.4, 0.5, 0.6, 0.8),
}


def _phases(scenario: ScenarioConfig, result):
    ph = scenario.phases
    labels = classify_phases(result.trace, ph.sat_threshold, ph.hit_threshold,
                             hysteresis=ph.hysteresis, makespan=result.makespan)
    check_partition(labels, result.makespan)
    return labels


def execute(scenario: ScenarioConfig, spec: RunSpec, outdir: Optional[Path],
            workload: Optional[Workload] = None) -> metrics.Summary:
    """Run one policy and write its artifacts; returns the summary.

    On a horizon abort the partial trace is written before re-raising.
    """
    started = time.perf_counter()
    try:
        result = run(scenario, policy=spec.policy, offload=spec.offload, workload=workload)
    except HorizonExceeded as exc:
        if outdir is not None and exc.partial is not None:
            outdir.mkdir(parents=True, exist_ok=True)
            metrics.export_trace(exc.partial.trace, outdir / "trace.csv")
        raise
    labels = _phases(scenario, result)
    summary = metrics.summarize(result, labels, name=spec.name)
    if outdir is not None:
        outdir.mkdir(parents=True, exist_ok=True)
        metrics.export_trace(result.trace, outdir / "trace.csv")
        metrics.export_summary(summary, outdir / "summary.txt")
        metrics.export_phases(labels, outdir / "phases.csv")
        metrics.export_decisions(result.decisions, outdir / "controller.csv")
        metrics.export_series(result.trace, outdir / "series")
    log.info("%s: makespan %.2f s, stream %s, wall %.2f s", spec.name, summary.makespan,
             summary.stream_hash[:12], time.perf_counter() - started)
    return summary


def _execute_task(args):
    return execute(*args)


def _run_many(scenario, specs, outdir: Path, jobs: int) -> dict:
    """Run every spec on one recorded workload; same stream for all."""
    workload = Workload.record(scenario)
    tasks = [(scenario, s, outdir / _slug(s.name), workload) for s in specs]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            summaries = list(pool.map(_execute_task, tasks))
    else:
        summaries = [_execute_task(t) for t in tasks]
    hashes = {s.stream_hash for s in summaries}
    if len(hashes) != 1:
        raise RuntimeError(f"runs consumed different workload streams: {sorted(hashes)}")
    return {spec.name: s for spec, s in zip(specs, summaries)}


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def _outdir(args, scenario: ScenarioConfig, default: str) -> Path:
    return Path(args.out or scenario.out or f"runs/{scenario.name}/{default}")


def _load(args) -> ScenarioConfig:
    scenario = load_scenario(args.config, args.set or ())
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    return scenario


# -- commands ----------------------------------------------------------------

def cmd_run(args) -> int:
    scenario = _load(args)
    spec = RunSpec(scenario.policy.label, scenario.policy, scenario.offload)
    outdir = _outdir(args, scenario, "run")
    summary = execute(scenario, spec, outdir)
    for key, value in summary.as_dict().items():
        print(f"{key} = {metrics.fmt(value)}")
    print(f"artifacts: {outdir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    scenario = _load(args)
    if len(scenario.compare) < 2:
        raise ConfigError("compare needs at least two [[compare.runs]] entries")
    outdir = _outdir(args, scenario, "compare")
    runs = _run_many(scenario, scenario.compare, outdir, args.jobs)
    table = metrics.render_comparison(metrics.compare(runs, scenario.baseline))
    (outdir / "comparison.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def sweep_specs(scenario: ScenarioConfig, axis: str, grid: Sequence) -> list[RunSpec]:
    """One run per grid value plus the adaptive reference row."""
    base = scenario.policy.config
    specs = []
    for value in grid:
        if axis == "fixed_cap":
            specs.append(RunSpec(f"fixed_cap={int(value)}", Policy.agent_cap(int(value))))
        else:
            cfg = replace(base, **{axis: float(value)})
            specs.append(RunSpec(f"{axis}={value:g}", Policy.aimd(cfg)))
    specs.append(RunSpec("aimd", Policy.aimd(base)))
    return specs


def cmd_sweep(args) -> int:
    scenario = _load(args)
    grid = args.grid or scenario.sweep.get(args.axis) or DEFAULT_SWEEP[args.axis]
    try:
        specs = sweep_specs(scenario, args.axis, grid)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"sweep {args.axis}: {exc}") from None
    outdir = _outdir(args, scenario, f"sweep-{args.axis}")
    runs = _run_many(scenario, specs, outdir, args.jobs)
    ref = runs["aimd"]
    rows = [[name, f"{s.makespan:.2f}", f"{s.makespan / ref.makespan:.3f}" if ref.makespan else "nan",
             f"{100 * s.mean_hit_rate:.2f}"] for name, s in runs.items()]
    table = metrics.render_table([args.axis, "makespan_s", "vs_aimd", "hit_rate_pct"], rows)
    (outdir / "sweep.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.out)
    files = sorted(root.glob("*/summary.txt")) or sorted(root.glob("summary.txt"))
    if not files:
        raise ConfigError(f"no summary.txt under {root}")
    runs = {}
    for path in files:
        s = metrics.import_summary(path)
        runs[s.name] = s
    baseline = args.baseline or ("Uncontrolled" if "Uncontrolled" in runs else next(iter(runs)))
    if baseline not in runs:
        raise ConfigError(f"baseline {baseline!r} not among {sorted(runs)}")
    print(metrics.render_comparison(metrics.compare(runs, baseline)), end="")
    return EXIT_OK


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvadmit",
        description="Simulate agentic batch inference under KV-cache admission policies.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True,
                           help=f"scenario TOML file or preset name ({', '.join(PRESETS)})")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config key (dotted path; value parsed as TOML)")
            p.add_argument("--seed", type=int, help="override the scenario seed")
            p.add_argument("--jobs", type=int, default=1, help="parallel runs (compare/sweep)")
        p.add_argument("--out", help="output directory")

    common(sub.add_parser("run", help="simulate one policy"))
    common(sub.add_parser("compare", help="run the scenario's policy list on one workload"))
    p = sub.add_parser("sweep", help="static-cap or threshold sweep with an adaptive reference")
    common(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--grid", type=_float_list, help="comma-separated grid values")
    p = sub.add_parser("report", help="re-render a comparison from existing summaries")
    common(p, needs_config=False)
    p.add_argument("--baseline", help="run name to compute speedups against")
    return parser


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "sweep": cmd_sweep, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "report" and not args.out:
        parser.error("report needs --out")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, SimulationError) as exc:
        print(f"kvadmit: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HorizonExceeded as exc:
        print(f"kvadmit: {exc}; partial trace kept", file=sys.stderr)
        return EXIT_HORIZON
    except metrics.ExportError as exc:
        print(f"kvadmit: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

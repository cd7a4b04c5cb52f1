"""Command-line entry point: ``poolsim plan|simulate|sweep|compare``.

Exit codes: 0 ok, 2 configuration error, 3 infeasible scenario, 4 simulation abort.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

from .capacity import kv_capacity
from .catalog import (FORMAT_VERSION, LengthDist, Scenario, ScenarioError,
                      WeightMode, load_scenario)
from .engine import JobReport, build_job, make_report, run_job, threshold_context
from .simcore import SimulationAbort
from .timing import DEFAULT_CONTEXT, CostModel, saturation_batch, switch_threshold

log = logging.getLogger("poolsim")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_ABORT = 0, 2, 3, 4

SWEEP_AXES = ("batch_cap", "dp", "tp", "seq_len", "weight_mode", "ablation_ladder")

# ablation ladder rungs: weight mode, pinned policy mode, CaS flags
LADDER = {
    "baseline": (WeightMode.REPLICATED, "auto", frozenset()),
    "fsdp": (WeightMode.FSDP, "auto", frozenset()),
    "cas_v1": (WeightMode.SIDP, "cas", frozenset({"async_p2p"})),
    "cas_v2": (WeightMode.SIDP, "cas", frozenset({"async_p2p", "gemm_fusion"})),
    "cas_v3": (WeightMode.SIDP, "cas", frozenset({"async_p2p", "gemm_fusion", "dummy_skip"})),
    "was_only": (WeightMode.SIDP, "was", frozenset({"async_p2p", "gemm_fusion", "dummy_skip"})),
    "auto": (WeightMode.SIDP, "auto", frozenset({"async_p2p", "gemm_fusion", "dummy_skip"})),
}


class ConfigError(ValueError):
    """Bad command-line input (maps to exit code 2)."""


# ---------------------------------------------------------------------------
# Scenario variants


def ladder_variant(scenario: Scenario, rung: str) -> Scenario:
    """``scenario`` rewritten as one rung of the ablation ladder."""
    try:
        mode, policy_mode, flags = LADDER[rung]
    except KeyError:
        raise ConfigError(f"unknown ladder rung {rung!r} (known: {', '.join(LADDER)})") from None
    layout = replace(scenario.layout, weight_mode=mode)
    policy = replace(scenario.mode_policy, mode=policy_mode)
    return replace(scenario, name=f"{scenario.name}/{rung}", layout=layout,
                   mode_policy=policy, ablation_flags=flags)


def _node_filling(scenario: Scenario) -> bool:
    return scenario.layout.gpus == scenario.hardware.gpus_per_node


@dataclass(frozen=True)
class SweepSpec:
    base: Scenario
    axis: str
    values: tuple

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r} (known: {', '.join(SWEEP_AXES)})")
        if not self.values:
            raise ConfigError("sweep needs at least one value")

    def point(self, value) -> Scenario:
        """The base scenario with the axis set to ``value``."""
        s = self.base
        lay = s.layout
        name = f"{s.name}[{self.axis}={value}]"
        if self.axis == "batch_cap":
            return replace(s, name=name, layout=replace(lay, max_concurrent=int(value)))
        if self.axis == "dp":
            dp = int(value)
            return replace(s, name=name, layout=replace(lay, dp=dp, was_slot_count=max(dp - 1, 1)))
        if self.axis == "tp":
            tp = int(value)
            dp = lay.dp
            if _node_filling(s):
                dp = max(s.hardware.gpus_per_node // (tp * lay.pp), 1)
            return replace(s, name=name, layout=replace(
                lay, tp=tp, dp=dp, was_slot_count=max(dp - 1, 1)))
        if self.axis == "seq_len":
            out_mean = round(s.workload.output_len.mean)
            prompt = int(value) - out_mean
            if prompt < 1:
                raise ValueError(f"seq_len {value} leaves no room for the prompt "
                                 f"(mean output {out_mean})")
            wl = replace(s.workload, prompt_len=LengthDist("constant", value=prompt))
            return replace(s, name=name, workload=wl)
        if self.axis == "weight_mode":
            return replace(s, name=name, layout=replace(lay, weight_mode=WeightMode(str(value))))
        return ladder_variant(s, str(value))


def parse_values(axis: str, text: str) -> tuple:
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise ConfigError("--values must list at least one value")
    if axis in ("batch_cap", "dp", "tp", "seq_len"):
        try:
            return tuple(int(v) for v in items)
        except ValueError:
            raise ConfigError(f"axis {axis} takes integers, got {text!r}") from None
    return tuple(items)


def apply_seed(scenario: Scenario, seed: int | None) -> Scenario:
    return scenario if seed is None else scenario.with_seed(seed)


# ---------------------------------------------------------------------------
# Rows


def plan_row(scenario: Scenario) -> dict[str, Any]:
    """Capacity plus the two batch thresholds for one scenario."""
    mem = kv_capacity(scenario)
    cm = CostModel(scenario.stats, scenario.hardware, scenario.layout)
    d = scenario.layout.dp
    return {
        "scenario": scenario.name,
        "model": scenario.model.name,
        "hardware": scenario.hardware.name,
        "layout": f"{scenario.layout.weight_mode.value} tp{scenario.layout.tp} "
                  f"dp{d} pp{scenario.layout.pp}",
        "weights_gb_per_gpu": round(mem.weight_bytes_per_gpu / 1e9, 3),
        "slots_gb_per_gpu": round(mem.cache_slot_bytes_per_gpu / 1e9, 3),
        "kv_tokens_per_gpu": mem.kv_tokens_per_gpu,
        "kv_tokens_per_node": mem.kv_tokens_per_node,
        "b_e": saturation_batch(cm),
        "b_th": switch_threshold(cm, d) if d >= 2 else None,
        "feasible": mem.feasible,
    }


def threshold_row(scenario: Scenario) -> dict[str, Any]:
    """Thresholds at the default context and at the workload's mean decode context."""
    cm = CostModel(scenario.stats, scenario.hardware, scenario.layout)
    d = scenario.layout.dp
    ctx = threshold_context(scenario)
    return {
        "b_e_ctx_workload": saturation_batch(cm, ctx),
        "b_th_ctx_workload": switch_threshold(cm, d, ctx) if d >= 2 else None,
        "workload_ctx": round(ctx, 1),
        "default_ctx": DEFAULT_CONTEXT,
    }


def _iter_time(report: JobReport) -> float:
    durations = [r.end - r.start for r in report.iterations if not r.dummy]
    return statistics.median(durations) if durations else 0.0


def job_row(report: JobReport, extra: dict[str, Any] | None = None) -> dict[str, Any]:
    row = dict(extra or {})
    row.update({
        "scenario": report.scenario,
        "status": "ok" if report.feasible else "infeasible",
        "throughput": round(report.throughput, 3),
        "makespan": round(report.makespan, 6),
        "tokens": report.total_tokens,
        "iter_time": round(_iter_time(report), 6),
        "stall": round(sum(report.stall_by_rank), 6),
        "b_threshold": report.b_threshold,
        "switches": report.switch_count,
    })
    for mode in ("local", "was", "cas", "fsdp"):
        row[f"share_{mode}"] = round(report.iteration_share.get(mode, 0.0), 4)
    return row


# ---------------------------------------------------------------------------
# Output


def render(rows: list[dict[str, Any]], fmt: str) -> str:
    """Rows as an aligned table, CSV with a header, or a JSON document."""
    if fmt == "json":
        return json.dumps({"format_version": FORMAT_VERSION, "rows": rows}, indent=2,
                          sort_keys=False, default=str) + "\n"
    columns: list[str] = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=columns + ["format_version"], lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "format_version": FORMAT_VERSION})
        return buf.getvalue()
    cells = [[str(row.get(c, "")) for c in columns] for row in rows]
    widths = [max([len(c)] + [len(r[i]) for r in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in cells)
    return "\n".join(lines) + "\n"


def emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def _load_all(paths: Sequence[str], seed: int | None) -> list[Scenario]:
    if not paths:
        raise ConfigError("no scenario files given")
    return [apply_seed(load_scenario(_resolve(p)), seed) for p in paths]


def _resolve(arg: str) -> str:
    """Accept a bundled scenario name without its ``.yaml`` suffix."""
    if Path(arg).suffix in (".yaml", ".yml") or Path(arg).exists():
        return arg
    return f"{arg}.yaml"


# ---------------------------------------------------------------------------
# Commands


def cmd_plan(args) -> int:
    rows = []
    for s in _load_all(args.scenarios, None):
        row = plan_row(s)
        if args.thresholds:
            row.update(threshold_row(s))
        rows.append(row)
    emit(render(rows, args.format), args.out)
    return EXIT_OK


def _simulate_one(scenario: Scenario, trace: bool) -> tuple[JobReport, list[str]]:
    rt, source, _ = build_job(scenario, trace=trace)
    if rt is None:
        return run_job(scenario), []
    rt.run()
    return make_report(rt, source), rt.sim.trace_lines() if trace else []


def cmd_simulate(args) -> int:
    scenarios = _load_all(args.scenarios, args.seed)
    out = Path(args.out) if args.out else None
    many = len(scenarios) > 1
    if out is not None and many:
        out.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    for s in scenarios:
        report, trace = _simulate_one(s, args.trace)
        print(report.summary())
        if not report.feasible:
            status = EXIT_INFEASIBLE
        stem = s.name.replace("/", "_")
        target = (out / f"{stem}.json") if many and out else out
        if target is not None:
            target.write_text(json.dumps(report.to_dict(), indent=1, default=str) + "\n")
        elif args.format == "json":
            sys.stdout.write(json.dumps(report.to_dict(), default=str) + "\n")
        if args.trace:
            base = target if target is not None else Path(f"{stem}.json")
            trace_path = base.with_name(base.stem + ".trace.jsonl")
            trace_path.write_text("".join(line + "\n" for line in trace))
            log.info("trace: %s", trace_path)
    return status


def _run_point(scenario: Scenario, extra: dict[str, Any]) -> dict[str, Any]:
    try:
        return job_row(run_job(scenario), extra)
    except SimulationAbort as exc:
        return {**extra, "scenario": scenario.name, "status": f"abort: {exc}"}


def _run_many(points: list[tuple[Scenario, dict]], jobs: int) -> list[dict[str, Any]]:
    if jobs <= 1 or len(points) <= 1:
        return [_run_point(s, e) for s, e in points]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_run_point, s, e) for s, e in points]
        return [f.result() for f in futures]


def cmd_sweep(args) -> int:
    base, = _load_all([args.scenario], args.seed)
    spec = SweepSpec(base, args.axis, parse_values(args.axis, args.values))
    points, rows = [], {}
    for i, value in enumerate(spec.values):
        extra = {args.axis: value}
        try:
            points.append((spec.point(value), extra))
        except ValueError as exc:
            rows[i] = {**extra, "scenario": f"{base.name}[{args.axis}={value}]",
                       "status": f"error: {exc}"}
    results = iter(_run_many(points, args.jobs))
    table = [rows[i] if i in rows else next(results) for i in range(len(spec.values))]
    emit(render(table, args.format), args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.scenarios) < 2:
        raise ConfigError("compare needs at least two scenarios")
    scenarios = _load_all(args.scenarios, args.seed)
    rows = _run_many([(s, {}) for s in scenarios], args.jobs)
    ref = rows[0].get("throughput") or 0.0
    for row in rows:
        tp = row.get("throughput")
        row["ratio"] = round(tp / ref, 4) if ref and tp is not None else None
    emit(render(rows, args.format), args.out)
    return EXIT_INFEASIBLE if any(r["status"] == "infeasible" for r in rows) else EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poolsim",
        description="KV-capacity planner and simulator for shared-weight data-parallel inference.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--format", choices=("table", "csv", "json"), default="table")
        p.add_argument("--out", help="write the output here instead of stdout")
        if seed:
            p.add_argument("--seed", type=int, help="override the workload seed")

    p = sub.add_parser("plan", help="KV capacity and batch thresholds per scenario")
    p.add_argument("scenarios", nargs="*", help="scenario YAML files (or bundled names)")
    p.add_argument("--thresholds", action="store_true",
                   help="also derive B_e and B_th at the workload's mean context")
    common(p, seed=False)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="run whole jobs and write their reports")
    p.add_argument("scenarios", nargs="*")
    p.add_argument("--trace", action="store_true", help="write an event trace next to the report")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="vary one axis of a scenario")
    p.add_argument("scenario")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--jobs", type=int, default=1, help="points to run in parallel")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="side-by-side throughput with ratios to the first")
    p.add_argument("scenarios", nargs="*")
    p.add_argument("--jobs", type=int, default=1)
    common(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ScenarioError) as exc:
        parser.print_usage(sys.stderr)
        print(f"poolsim: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationAbort as exc:
        print(f"poolsim: simulation aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())

"""Command-line experiments.

Every subcommand writes one CSV table, to stdout or to ``<out>/<command>.csv``
when ``--out`` is given, where JSON side artifacts (plans, summaries) are
also written. The first CSV line is a comment naming the schema version.
Errors go to stderr as one JSON object and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from cgxsim import adaptive
from cgxsim.adaptive import AdaptiveConfig
from cgxsim.collectives import (
    ReduceRequest,
    Topology,
    allreduce,
    estimate_step_time,
    reference_sum,
    simulate_cost,
    uniform_layout,
)
from cgxsim.engine import EngineConfig
from cgxsim.model import (
    DEFAULT_BUFFER_BYTES,
    ELEMENT_BYTES,
    CompressionPlan,
    FilterRules,
    Mode,
    assemble_fused_buffers,
    filter_layers,
    model_from_json,
)
from cgxsim.simnet import PRESETS, SimNetConfig, StepTrace
from cgxsim.synthetic import BUNDLED_MODELS, SyntheticGradients, bundled_model
from cgxsim.training import bundled_task, run_adaptive_training, train

SCHEMA_VERSION = 1
EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(ValueError):
    pass


class CheckFailed(RuntimeError):
    """An experiment ran but a property it asserts did not hold."""


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return v


def render_csv(command: str, columns: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(f"# cgxsim {command} v{SCHEMA_VERSION}: {','.join(columns)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# --- experiments ------------------------------------------------------------


def _simnet(args, cfg: dict, nodes: int) -> SimNetConfig:
    if args.preset is not None:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        return SimNetConfig.preset(args.preset, nodes)
    raw = cfg.get("simnet", "commodity")
    if isinstance(raw, str):
        if raw not in PRESETS:
            raise UsageError(f"unknown preset {raw!r}; choose from {sorted(PRESETS)}")
        return SimNetConfig.preset(raw, nodes)
    return SimNetConfig.from_json({**raw, "nodes": nodes})


def _layers(name: str | None, cfg: dict):
    if name is None and "model" in cfg:
        return model_from_json(cfg["model"]), float(cfg.get("compute_s", 0.0))
    name = name or "transformer-like"
    if name in BUNDLED_MODELS:
        return bundled_model(name)
    path = Path(name)
    if not path.exists():
        raise UsageError(f"unknown model {name!r}; choose from {sorted(BUNDLED_MODELS)} or give a JSON file")
    return model_from_json(json.loads(path.read_text())), float(cfg.get("compute_s", 0.0))


def sweep_rows(layers, compute_s: float, config: SimNetConfig, ratios, topology=Topology.SRA,
               buffer_bytes: int = DEFAULT_BUFFER_BYTES) -> list[dict]:
    """Step time against compression ratio under a truncation pseudo-codec."""
    buffers = assemble_fused_buffers(layers, buffer_bytes)
    rows = []
    for ratio in ratios:
        predicted, trace = 0.0, StepTrace.zeros(config.nodes)
        for buf in buffers:
            layout = uniform_layout(buf.length)
            predicted += estimate_step_time(buf.length, config, topology, layout, truncate=ratio)
            trace = trace.then(simulate_cost(buf.length, config, topology, layout, truncate=ratio))
        rows.append({
            "ratio": float(ratio),
            "predicted_s": compute_s + predicted,
            "simulated_s": compute_s + trace.elapsed,
            "floor_s": compute_s,
            "bytes": trace.total_bytes,
        })
    return rows


def check_sweep(rows: list[dict], at_ratio: float = 32.0, max_gap: float = 0.10) -> dict:
    """Monotonicity and floor-gap checks over sweep rows."""
    times = [r["simulated_s"] for r in rows]
    monotone = all(b <= a for a, b in zip(times, times[1:]))
    base = next(r for r in rows if r["ratio"] == 1.0)
    target = next((r for r in rows if r["ratio"] == at_ratio), None)
    gap = None if target is None else (target["simulated_s"] - target["floor_s"]) / base["simulated_s"]
    return {"monotone": monotone, "floor_gap": gap, "ok": monotone and (gap is None or gap < max_gap)}


def reduce_bench_rows(sizes_bytes, topologies, config: SimNetConfig, bits: int | None = 4,
                      bucket: int = 128) -> list[dict]:
    rows = []
    for size in sizes_bytes:
        length = size // ELEMENT_BYTES
        mode = Mode.UNCOMPRESSED if bits is None else Mode.QUANTIZE
        layout = uniform_layout(length, mode, bits or 4, bucket)
        for topo in topologies:
            trace = simulate_cost(length, config, topo, layout)
            rows.append({
                "topology": Topology(topo).value,
                "payload_bytes": size,
                "nodes": config.nodes,
                "bits": 32 if bits is None else bits,
                "simulated_s": trace.elapsed,
                "predicted_s": estimate_step_time(length, config, topo, layout),
                "bytes": trace.total_bytes,
                "rounds": trace.rounds,
            })
    return rows


ORDERING_MIN_BYTES = 64 * 1024 * 1024


def check_ordering(rows: list[dict], min_bytes: int = ORDERING_MIN_BYTES) -> None:
    """Bandwidth-bound payloads must rank sra <= ring <= tree.

    Smaller payloads are latency-bound, where tree may beat ring, so they
    are only reported.
    """
    by_size: dict[int, dict[str, float]] = {}
    for r in rows:
        if r["payload_bytes"] >= min_bytes:
            by_size.setdefault(r["payload_bytes"], {})[r["topology"]] = r["simulated_s"]
    for size, t in by_size.items():
        if {"sra", "ring", "tree"} <= set(t) and not t["sra"] <= t["ring"] <= t["tree"]:
            raise CheckFailed(f"expected sra <= ring <= tree at {size} bytes, got {t}")


def allreduce_test_rows(nodes: int, length: int, seed: int, bits: int = 4, bucket: int = 128) -> list[dict]:
    rng = np.random.default_rng(seed)
    vecs = [rng.normal(size=length).astype(np.float32) for _ in range(nodes)]
    exact = np.sum(np.asarray(vecs, dtype=np.float64), axis=0)
    config = SimNetConfig.preset("commodity", nodes)
    rows = []
    for topo in Topology:
        for mode in (Mode.UNCOMPRESSED, Mode.QUANTIZE):
            layout = uniform_layout(length, mode, bits, bucket)
            results, trace = allreduce(ReduceRequest(vecs, layout, topo, seed=seed), config)
            err = results[0].astype(np.float64) - exact
            rows.append({
                "topology": topo.value,
                "mode": mode.value,
                "nodes": nodes,
                "length": length,
                "bits": 32 if mode is Mode.UNCOMPRESSED else bits,
                "matches_reference": bool(np.array_equal(results[0], reference_sum(vecs, topo, layout))),
                "nodes_agree": all(np.array_equal(results[0], r) for r in results[1:]),
                "l2_error": float(np.linalg.norm(err)),
                "max_abs_error": float(np.max(np.abs(err))) if length else 0.0,
                "bytes": trace.total_bytes,
                "simulated_s": trace.elapsed,
                "stages": trace.stages,
            })
    return rows


def adapt_rows(stats, acfg: AdaptiveConfig, algorithms) -> tuple[list[dict], dict]:
    rows, plans = [], {}
    for algo in algorithms:
        plan = adaptive.PLANNERS[algo](stats, acfg)
        plans[algo] = plan
        rows.append({
            "algorithm": algo,
            "alpha": acfg.alpha,
            "e4": plan.meta["e4"],
            "error": plan.meta["error"],
            "budget": plan.meta["budget"],
            "within_budget": plan.meta["budget_satisfied"],
            "weighted_size": adaptive.weighted_size(stats, plan),
            "uniform4_size": adaptive.weighted_size(stats, CompressionPlan.uniform(4, acfg.bucket_size)),
            "size_reduction": adaptive.size_reduction(stats, plan),
        })
    return rows, plans


def synthetic_stats(model: str, acfg: AdaptiveConfig, seed: int, filters: FilterRules | None = None):
    layers, _ = bundled_model(model)
    compressed, _ = filter_layers(layers, filters or FilterRules())
    stream = SyntheticGradients(compressed, seed=seed)
    return adaptive.collect_stats(stream.window(0, acfg.stats_window), acfg)


# --- command handlers --------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def cmd_sweep(args, cfg):
    layers, compute = _layers(args.model, cfg)
    if args.compute_s is not None:
        compute = args.compute_s
    config = _simnet(args, cfg, args.nodes)
    ratios = _floats(args.ratios)
    if not ratios or 1.0 not in ratios or any(r < 1 for r in ratios):
        raise UsageError("ratios must be >= 1 and include 1")
    rows = sweep_rows(layers, compute, config, sorted(ratios), Topology(args.topology), args.buffer_bytes)
    check = check_sweep(rows)
    cols = ["ratio", "predicted_s", "simulated_s", "floor_s", "bytes"]
    return render_csv("sweep", cols, rows), {"sweep_check.json": check}


def cmd_reduce_bench(args, cfg):
    config = _simnet(args, cfg, args.nodes)
    sizes = [int(m * 1024 * 1024) for m in _floats(args.sizes_mib)]
    topologies = [Topology(t) for t in args.topologies.split(",")]
    bits = None if args.bits == 32 else args.bits
    rows = reduce_bench_rows(sizes, topologies, config, bits, args.bucket)
    preset = args.preset or cfg.get("simnet", "commodity")
    if preset == "commodity" and args.nodes == 8:
        check_ordering(rows)
    cols = ["topology", "payload_bytes", "nodes", "bits", "simulated_s", "predicted_s", "bytes", "rounds"]
    return render_csv("reduce-bench", cols, rows), {}


def _engine_config(args, cfg, plan: CompressionPlan) -> EngineConfig:
    base = {k: v for k, v in cfg.items() if k in ("filters", "buffer_bytes", "cycle_time_s", "simnet")}
    base.update(nodes=args.nodes, topology=args.topology, seed=args.seed, plan=plan.to_json())
    if args.preset is not None:
        base["simnet"] = args.preset
    return EngineConfig.from_json(base)


def _task(args, cfg):
    overrides = dict(cfg.get("task", {}))
    overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    name = overrides.pop("name", None) or args.task
    return bundled_task(name, **overrides)


def _curve_rows(label: str, result) -> list[dict]:
    rows, start = [], 0
    for step, test_loss, metric in result.evals:
        rows.append({
            "run": label,
            "step": step,
            "train_loss": float(np.mean(result.losses[start:step])),
            "test_loss": test_loss,
            "metric": metric,
        })
        start = step
    return rows


def cmd_train(args, cfg):
    task = _task(args, cfg)
    runs = {"baseline": CompressionPlan.lossless()}
    for bits in sorted(set(args.bits)):
        runs[f"q{bits}"] = CompressionPlan.uniform(bits, args.bucket)
    rows, summary = [], {"task": task.to_json(), "runs": {}}
    base_metric = None
    for label, plan in runs.items():
        result = train(task, _engine_config(args, cfg, plan), threads=args.threads)
        rows += _curve_rows(label, result)
        if base_metric is None:
            base_metric = result.final_metric
        gap = (base_metric - result.final_metric) / abs(base_metric) if base_metric else 0.0
        summary["runs"][label] = {
            "final_metric": result.final_metric,
            "relative_gap": gap,
            "total_bytes": result.total_bytes,
            "comm_time_s": result.trace.elapsed,
        }
    cols = ["run", "step", "train_loss", "test_loss", "metric"]
    return render_csv("train", cols, rows), {"train_summary.json": summary}


def cmd_adapt(args, cfg):
    raw = dict(cfg.get("adaptive", {}))
    if args.alpha is not None:
        raw["alpha"] = args.alpha
    if args.palette is not None:
        raw["palette"] = [int(b) for b in _floats(args.palette)]
    raw.setdefault("seed", args.seed)
    acfg = AdaptiveConfig.from_json(raw)
    if args.stats:
        stats = adaptive.load_stats(args.stats, args.raw, acfg.top_fraction)
    else:
        stats = synthetic_stats(args.model, acfg, args.seed)
    algorithms = ["kmeans", "linear"] if args.algo == "both" else [args.algo]
    rows, plans = adapt_rows(stats, acfg, algorithms)
    extra = {f"plan_{algo}.json": plan.to_json() for algo, plan in plans.items()}

    if args.task:
        task = _task(args, cfg)
        static = train(task, _engine_config(args, cfg, CompressionPlan.uniform(4, acfg.bucket_size)))
        live = run_adaptive_training(task, _engine_config(args, cfg, CompressionPlan.uniform(4, acfg.bucket_size)),
                                     acfg, algorithms[0])
        extra["adapt_training.json"] = {
            "static4": {"final_metric": static.final_metric, "total_bytes": static.total_bytes},
            "adaptive": {
                "final_metric": live.final_metric,
                "total_bytes": live.total_bytes,
                "plan_history": [{"step": s, "plan": p} for s, p in live.plan_history],
                "warnings": [e for e in live.events if e["event"] == "planner_warning"],
            },
        }
    cols = ["algorithm", "alpha", "e4", "error", "budget", "within_budget", "weighted_size", "uniform4_size",
            "size_reduction"]
    return render_csv("adapt", cols, rows), extra


def cmd_allreduce_test(args, cfg):
    rows = allreduce_test_rows(args.nodes, args.length, args.seed, args.bits, args.bucket)
    bad = [r for r in rows if not r["nodes_agree"] or (r["mode"] == "uncompressed" and not r["matches_reference"])]
    if bad:
        raise CheckFailed(f"lossless reduction mismatch on {[r['topology'] for r in bad]}")
    cols = ["topology", "mode", "nodes", "length", "bits", "matches_reference", "nodes_agree", "l2_error",
            "max_abs_error", "bytes", "simulated_s", "stages"]
    return render_csv("allreduce-test", cols, rows), {}


# --- parser ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # subcommands repeat the flags without defaults so a value given
        # before the subcommand is not reset
        g = _Parser(add_help=False)
        default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g.add_argument("--seed", type=int, default=default(0))
        g.add_argument("--config", default=default(None),
                       help="JSON file with simnet, plan, filters, task, model or adaptive sections")
        g.add_argument("--out", default=default(None),
                       help="directory for CSV and JSON outputs (default: CSV on stdout)")
        return g

    common = global_flags(True)
    parser = _Parser(prog="cgxsim", description="Compressed-communication experiments on a simulated cluster.",
                     parents=[global_flags(False)])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def net(p, nodes=8):
        p.add_argument("--preset", help=f"network preset: {', '.join(sorted(PRESETS))}")
        p.add_argument("--nodes", type=int, default=nodes)

    p = sub.add_parser("sweep", parents=[common], help="step time against compression ratio")
    net(p)
    p.add_argument("--model", help="bundled model name or model JSON file")
    p.add_argument("--ratios", default="1,2,4,8,16,32,64")
    p.add_argument("--topology", default="sra", choices=[t.value for t in Topology])
    p.add_argument("--compute-s", type=float, help="compute-only step time; overrides the model's constant")
    p.add_argument("--buffer-bytes", type=int, default=DEFAULT_BUFFER_BYTES)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("reduce-bench", parents=[common], help="simulated all-reduce time per topology")
    net(p)
    p.add_argument("--sizes-mib", default="64")
    p.add_argument("--topologies", default="sra,ring,tree")
    p.add_argument("--bits", type=int, default=4, help="quantization bits; 32 means uncompressed")
    p.add_argument("--bucket", type=int, default=128)
    p.set_defaults(handler=cmd_reduce_bench)

    p = sub.add_parser("train", parents=[common], help="lossless against compressed data-parallel SGD")
    net(p)
    p.add_argument("--task", default="logreg")
    p.add_argument("--steps", type=int)
    p.add_argument("--topology", default="sra", choices=[t.value for t in Topology])
    p.add_argument("--bits", type=int, nargs="+", default=[4])
    p.add_argument("--bucket", type=int, default=128)
    p.add_argument("--threads", action="store_true", help="run each node in its own thread")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("adapt", parents=[common], help="adaptive bit-width plans against uniform 4-bit")
    net(p)
    p.add_argument("--stats", help="stats JSON file; default collects from the bundled synthetic model")
    p.add_argument("--raw", help="raw snapshot .npz accompanying --stats")
    p.add_argument("--model", default="transformer-like")
    p.add_argument("--algo", default="both", choices=["kmeans", "linear", "both"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--palette", help="comma-separated bit widths")
    p.add_argument("--task", help="also compare adaptive against static 4-bit training on this task")
    p.add_argument("--steps", type=int)
    p.add_argument("--topology", default="sra", choices=[t.value for t in Topology])
    p.set_defaults(handler=cmd_adapt)

    p = sub.add_parser("allreduce-test", parents=[common], help="check collectives on random vectors")
    p.add_argument("--nodes", type=int, default=8)
    p.add_argument("--length", type=int, default=10000)
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--bucket", type=int, default=128)
    p.set_defaults(handler=cmd_allreduce_test)
    return parser


def run(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        cfg = json.loads(Path(args.config).read_text()) if args.config else {}
        if args.command == "adapt" and args.stats is None and args.raw is not None:
            raise UsageError("--raw needs --stats")
        table, extra = args.handler(args, cfg)
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{args.command}.csv").write_text(table)
            for name, obj in extra.items():
                (out / name).write_text(_dump(obj))
        else:
            stdout.write(table)
    except (UsageError, FileNotFoundError, json.JSONDecodeError) as exc:
        _report(exc, "usage")
        return EXIT_USAGE
    except CheckFailed as exc:
        _report(exc, "check_failed")
        return EXIT_FAILURE
    except Exception as exc:
        _report(exc, "error")
        return EXIT_FAILURE
    return 0


def _report(exc: Exception, kind: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}, sort_keys=True) + "\n")


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

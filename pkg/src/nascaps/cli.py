"""Command-line interface.

Exit codes: 0 success, 1 usage or validation error, 2 search stopped early
with partial results written, 3 evaluator backend failure.
"""

from __future__ import annotations

import argparse
import json
import os
import shlex
import sys
from dataclasses import asdict, replace
from typing import List, Optional

from . import analysis, evaluation, hwmodel, nsga, presets
from . import genotype as gt

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARTIAL = 2
EXIT_BACKEND = 3


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_USAGE


def _parse_duration(text: str) -> float:
    units = {"s": 1.0, "m": 60.0, "h": 3600.0}
    if text and text[-1].lower() in units:
        return float(text[:-1]) * units[text[-1].lower()]
    return float(text)


def _load_genotype(args) -> gt.Genotype:
    sources = [s for s in (args.preset, args.genotype, args.genotype_file) if s]
    if len(sources) != 1:
        raise ValueError("provide exactly one of --preset, --genotype, --genotype-file")
    if args.preset:
        return presets.load_preset(args.preset)
    if args.genotype:
        return gt.deserialize(args.genotype)
    with open(args.genotype_file, "r", encoding="utf-8") as fh:
        return gt.deserialize(fh.read().strip())


def _hw_from_args(args) -> hwmodel.HardwareConfig:
    if getattr(args, "hw_config", None):
        return hwmodel.HardwareConfig.from_file(args.hw_config)
    return hwmodel.HardwareConfig()


# ---------------------------------------------------------------------------


def cmd_estimate(args) -> int:
    try:
        g = _load_genotype(args)
    except gt.ParseError as exc:
        return _fail(str(exc))
    hw = _hw_from_args(args)
    problems = gt.validate(g)
    if problems:
        for v in problems:
            print(f"invalid: {v}", file=sys.stderr)
        return EXIT_USAGE
    report = hwmodel.estimate(g, hw)
    if args.format == "json":
        print(json.dumps(report.to_dict(), indent=2))
    else:
        header = f"{'#':>3} {'kind':<8} {'weights':>12} {'sums/out':>9} {'data/w':>8} {'w_loads':>9} {'cycles':>10} {'mem_acc':>10}"
        print(header)
        for r in report.per_layer:
            print(
                f"{r.index:>3} {r.kind:<8} {r.weights:>12,} {r.sums_per_out:>9,} "
                f"{r.data_per_weight:>8,} {r.w_loads:>9,} {r.cycles:>10,} {r.memory_accesses:>10,}"
            )
        print()
        print(f"latency : {analysis.format_latency(report.latency_ms)}")
        print(f"energy  : {analysis.format_energy(report.energy_mj)}")
        print(f"memory  : {analysis.format_memory(report.memory_kib)}")
    return EXIT_OK


def cmd_rand(args) -> int:
    import random

    space = gt.SearchSpace.for_dataset(args.dataset, max_layers=args.max_layers)
    rng = random.Random(args.seed)
    for _ in range(args.count):
        print(gt.serialize(gt.random_genotype(space, rng)))
    return EXIT_OK


def cmd_search(args) -> int:
    space = gt.SearchSpace.for_dataset(args.dataset, max_layers=args.max_layers)
    hw = _hw_from_args(args)

    if args.search_config:
        cfg = nsga.SearchConfig.from_file(args.search_config)
    else:
        cfg = nsga.SearchConfig()
    cfg = replace(
        cfg,
        parent_size=args.parents if args.parents is not None else cfg.parent_size,
        offspring_size=args.offspring if args.offspring is not None else cfg.offspring_size,
        generations=args.generations if args.generations is not None else cfg.generations,
        mutation_prob=args.mutation_prob if args.mutation_prob is not None else cfg.mutation_prob,
        seed=args.seed if args.seed is not None else cfg.seed,
        wall_clock_limit_s=(
            _parse_duration(args.time_limit) if args.time_limit else cfg.wall_clock_limit_s
        ),
    )

    os.makedirs(args.out, exist_ok=True)
    cache = evaluation.cache_from_env(os.path.join(args.out, "cache.jsonl"))

    if args.backend == "surrogate":
        backend = evaluation.SurrogateBackend()
    else:
        if not args.trainer_cmd:
            return _fail("--backend bridge requires --trainer-cmd")
        backend = evaluation.BridgePool(shlex.split(args.trainer_cmd), workers=args.workers)

    evaluator = evaluation.FitnessEvaluator(
        backend,
        dataset=args.dataset,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=cfg.seed,
        cache=cache,
        request_timeout_s=args.request_timeout,
    )
    try:
        result = nsga.run_search(space, cfg, evaluator, hw)
    finally:
        evaluator.close()

    log_path = os.path.join(args.out, "run.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        for record in result.log:
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")

    front_rows = [
        {
            "id": ind.id,
            "genotype": gt.serialize(ind.genotype),
            "accuracy": ind.fitness.accuracy,
            "energy_mj": ind.fitness.energy_mj,
            "latency_ms": ind.fitness.latency_ms,
            "memory_kib": ind.fitness.memory_kib,
        }
        for ind in result.front
    ]
    with open(os.path.join(args.out, "front.json"), "w", encoding="utf-8") as fh:
        json.dump(front_rows, fh, indent=2)
        fh.write("\n")
    with open(os.path.join(args.out, "front.csv"), "w", encoding="utf-8") as fh:
        fh.write("Architecture,Accuracy,Energy,Latency,Memory\n")
        for row in front_rows:
            fh.write(
                f"{row['id']},{analysis.format_accuracy(row['accuracy'])},"
                f"{analysis.format_energy(row['energy_mj'])},"
                f"{analysis.format_latency(row['latency_ms'])},"
                f"\"{analysis.format_memory(row['memory_kib'])}\"\n"
            )

    meta = {
        "dataset": args.dataset,
        "seed": cfg.seed,
        "epochs": evaluator.epochs,
        "batch_size": evaluator.batch_size,
        "backend": args.backend,
        "parent_size": cfg.parent_size,
        "offspring_size": cfg.offspring_size,
        "generations": cfg.generations,
        "generations_run": result.generations_run,
        "mutation_prob": cfg.mutation_prob,
        "truncated": result.truncated,
        "evaluations": len(result.log),
        "hardware": asdict(hw),
    }
    with open(os.path.join(args.out, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")

    print(
        f"{len(result.log)} evaluations over {result.generations_run} generations; "
        f"front of {len(result.front)} written to {args.out}"
    )
    if result.truncated:
        print("time limit reached; results are partial", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_calibrate(args) -> int:
    hw = _hw_from_args(args)
    with open(args.refs, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    references = []
    for entry in raw:
        if "preset" in entry:
            g = presets.load_preset(entry["preset"])
        else:
            g = gt.deserialize(entry["genotype"])
        references.append(
            (
                g,
                float(entry.get("latency_ms", 0.0)),
                float(entry["energy_mj"]),
                float(entry.get("memory_kib", 0.0)),
            )
        )
    fitted, residuals = hwmodel.calibrate(references, hw)
    print(f"mem_access_energy_pj = {fitted.mem_access_energy_pj!r}")
    print(f"pe_array_power_mw = {fitted.pe_array_power_mw!r}")
    for i, r in enumerate(residuals):
        print(f"reference {i}: relative energy residual {r:+.6f}")
    if args.out:
        fitted.to_file(args.out)
        print(f"written to {args.out}")
    return EXIT_OK


def cmd_correlate(args) -> int:
    traces = analysis.load_traces(args.traces)
    checkpoints = [int(c) for c in args.checkpoints.split(",")]
    exclude = args.exclude.split(",") if args.exclude else []
    table = analysis.epoch_correlation_table(traces, checkpoints, exclude)
    mctt = analysis.median_cumulative_time(traces, checkpoints, exclude)
    if args.format == "json":
        payload = {"pcc": {str(k): v for k, v in table.items()}}
        if mctt:
            payload["median_cumulative_seconds"] = {str(k): v for k, v in mctt.items()}
        print(json.dumps(payload, indent=2))
    elif args.format == "csv":
        print("epochs," + ",".join(str(c) for c in checkpoints))
        print("pcc," + ",".join(f"{table[c]:.4f}" for c in checkpoints))
        if mctt:
            print("median_cumulative_seconds," + ",".join(f"{mctt[c]:.1f}" for c in checkpoints))
    else:
        width = max(8, *(len(str(c)) for c in checkpoints))
        print("epochs  " + " ".join(f"{c:>{width}}" for c in checkpoints))
        print("pcc     " + " ".join(f"{table[c]:>{width}.4f}" for c in checkpoints))
        if mctt:
            print("mctt[s] " + " ".join(f"{mctt[c]:>{width}.1f}" for c in checkpoints))
    return EXIT_OK


def cmd_report(args) -> int:
    written = analysis.report(
        args.logs, args.out, fmt=args.format, datasets=args.datasets
    )
    for path in written:
        print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nascaps",
        description="Hardware-aware architecture search for capsule networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="cost a single architecture")
    p.add_argument("--preset", choices=sorted(presets.PRESETS))
    p.add_argument("--genotype", help="canonical genotype string")
    p.add_argument("--genotype-file")
    p.add_argument("--hw-config", help="hardware config file (key = value lines)")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("rand", help="sample random valid genotypes")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", choices=evaluation.DATASETS, default="mnist")
    p.add_argument("--max-layers", type=int, default=8)
    p.set_defaults(func=cmd_rand)

    p = sub.add_parser("search", help="run the multi-objective search")
    p.add_argument("--dataset", choices=evaluation.DATASETS, default="mnist")
    p.add_argument("--out", default="out")
    p.add_argument("--backend", choices=("surrogate", "bridge"), default="surrogate")
    p.add_argument("--trainer-cmd", help="trainer command line for --backend bridge")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--parents", type=int)
    p.add_argument("--offspring", type=int)
    p.add_argument("--generations", type=int)
    p.add_argument("--mutation-prob", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="override the per-dataset default")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--max-layers", type=int, default=8)
    p.add_argument("--time-limit", help="wall-clock budget, e.g. 90s, 30m, 12h")
    p.add_argument(
        "--request-timeout", type=float, default=evaluation.DEFAULT_REQUEST_TIMEOUT_S,
        help="per-candidate training timeout in seconds",
    )
    p.add_argument("--search-config", help="search config file (key = value lines)")
    p.add_argument("--hw-config")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("calibrate", help="fit energy constants to references")
    p.add_argument("--refs", required=True, help="JSON list of reference points")
    p.add_argument("--hw-config")
    p.add_argument("--out", help="write the fitted hardware config here")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("correlate", help="early-epoch accuracy correlation table")
    p.add_argument("--traces", required=True, help="JSONL accuracy traces")
    p.add_argument("--checkpoints", default="1,3,5,10,15,20")
    p.add_argument("--exclude", help="comma-separated trace ids to drop")
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("report", help="summarize run logs")
    p.add_argument("--logs", nargs="+", required=True)
    p.add_argument("--out", default="report")
    p.add_argument("--format", choices=("csv", "json", "both"), default="both")
    p.add_argument("--datasets", nargs="*", help="dataset label per log")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except evaluation.BridgeError as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except evaluation.ProtocolError as exc:
        print(f"backend protocol violation: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (
        gt.ParseError,
        gt.RejectedConfiguration,
        hwmodel.ConfigError,
        hwmodel.CalibrationError,
        analysis.AnalysisError,
        evaluation.CacheError,
        ValueError,
        OSError,
    ) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())

"""Post-hoc analysis of run logs and training traces."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .nsga import FitnessVector, Individual


class AnalysisError(Exception):
    pass


class CorrelationError(AnalysisError):
    """Correlation is undefined for the given inputs."""


class TraceError(AnalysisError):
    pass


class ReportError(AnalysisError):
    pass


# ---------------------------------------------------------------------------
# correlation


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation coefficient of two equal-length samples."""
    if len(x) != len(y):
        raise CorrelationError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise CorrelationError("need at least two observations")
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    if sxx == 0.0 or syy == 0.0:
        raise CorrelationError("zero variance makes the coefficient undefined")
    return sxy / math.sqrt(sxx * syy)


@dataclass(frozen=True)
class AccuracyTrace:
    """Validation accuracy of one architecture at increasing epoch counts."""

    id: str
    epochs: Tuple[int, ...]
    accuracies: Tuple[float, ...]
    train_seconds_per_epoch: Optional[float] = None

    def __post_init__(self):
        if len(self.epochs) != len(self.accuracies):
            raise TraceError(f"trace {self.id}: epochs/accuracies length mismatch")
        if not self.epochs:
            raise TraceError(f"trace {self.id}: empty")
        if any(b <= a for a, b in zip(self.epochs, self.epochs[1:])):
            raise TraceError(f"trace {self.id}: epochs must be strictly increasing")

    def at(self, epoch: int) -> float:
        try:
            return self.accuracies[self.epochs.index(epoch)]
        except ValueError:
            raise TraceError(f"trace {self.id} has no epoch {epoch}") from None

    @property
    def final(self) -> float:
        return self.accuracies[-1]


def load_traces(path: str) -> List[AccuracyTrace]:
    """Read one trace per JSONL line: id, epochs, accuracies, optional timing."""
    traces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                traces.append(
                    AccuracyTrace(
                        id=str(record["id"]),
                        epochs=tuple(int(e) for e in record["epochs"]),
                        accuracies=tuple(float(a) for a in record["accuracies"]),
                        train_seconds_per_epoch=(
                            float(record["train_seconds_per_epoch"])
                            if "train_seconds_per_epoch" in record
                            else None
                        ),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, TraceError) as exc:
                raise TraceError(f"{path}:{lineno}: bad trace record: {exc}") from exc
    return traces


def epoch_correlation_table(
    traces: Sequence[AccuracyTrace],
    checkpoints: Sequence[int],
    exclude_ids: Iterable[str] = (),
) -> Dict[int, float]:
    """PCC between accuracy at each checkpoint and final accuracy.

    Equivalent to running :func:`pearson` column-wise against the final
    column. Any trace missing a requested checkpoint raises TraceError
    naming the trace.
    """
    excluded = set(exclude_ids)
    kept = [t for t in traces if t.id not in excluded]
    if len(kept) < 2:
        raise CorrelationError("need at least two traces")
    finals = [t.final for t in kept]
    return {cp: pearson([t.at(cp) for t in kept], finals) for cp in checkpoints}


def median_cumulative_time(
    traces: Sequence[AccuracyTrace],
    checkpoints: Sequence[int],
    exclude_ids: Iterable[str] = (),
) -> Optional[Dict[int, float]]:
    """Median cumulative training seconds at each checkpoint, if timed."""
    excluded = set(exclude_ids)
    timed = [
        t for t in traces
        if t.id not in excluded and t.train_seconds_per_epoch is not None
    ]
    if not timed:
        return None
    out = {}
    for cp in checkpoints:
        values = sorted(t.train_seconds_per_epoch * cp for t in timed)
        mid = len(values) // 2
        out[cp] = values[mid] if len(values) % 2 else (values[mid - 1] + values[mid]) / 2
    return out


# ---------------------------------------------------------------------------
# pareto utilities


def _objectives(record) -> Tuple[float, float, float, float]:
    if isinstance(record, Individual):
        if record.fitness is None:
            raise AnalysisError(f"individual {record.id} has no fitness")
        return record.fitness.minimized()
    return FitnessVector(
        accuracy=float(record["accuracy"]),
        energy_mj=float(record["energy_mj"]),
        latency_ms=float(record["latency_ms"]),
        memory_kib=float(record["memory_kib"]),
    ).minimized()


def _record_id(record) -> str:
    return record.id if isinstance(record, Individual) else str(record["id"])


def pick_pareto(records: Sequence) -> List:
    """Non-dominated subset of individuals or run-log records, ordered by id."""
    points = [_objectives(r) for r in records]
    kept = []
    for i, p in enumerate(points):
        dominated = False
        for j, q in enumerate(points):
            if i == j:
                continue
            if all(a <= b for a, b in zip(q, p)) and any(a < b for a, b in zip(q, p)):
                dominated = True
                break
        if not dominated:
            kept.append(records[i])
    return sorted(kept, key=_record_id)


def hypervolume(points: Sequence[Sequence[float]], ref: Sequence[float]) -> float:
    """Dominated hypervolume of minimization points against a reference.

    Points at or beyond the reference in any coordinate contribute nothing.
    Uses the WFG exclusive-volume recursion; fine for the population sizes
    this package works with (tens of points, four objectives).
    """
    ref = tuple(float(r) for r in ref)
    clean = [
        tuple(float(c) for c in p)
        for p in points
        if all(c < r for c, r in zip(p, ref))
    ]
    if not clean:
        return 0.0
    # drop dominated points early; they contribute no exclusive volume
    frontier = [
        p for i, p in enumerate(clean)
        if not any(
            i != j and all(a <= b for a, b in zip(q, p)) and q != p
            for j, q in enumerate(clean)
        )
    ]
    frontier = sorted(set(frontier))
    return _wfg(frontier, ref)


def _wfg(front: List[Tuple[float, ...]], ref: Tuple[float, ...]) -> float:
    total = 0.0
    for i, p in enumerate(front):
        box = 1.0
        for c, r in zip(p, ref):
            box *= r - c
        # exclusive contribution: box minus what later points cover inside it
        limited = [
            tuple(max(a, b) for a, b in zip(q, p)) for q in front[i + 1 :]
        ]
        limited = [q for q in limited if all(c < r for c, r in zip(q, ref))]
        if limited:
            inner = [
                q for k, q in enumerate(limited)
                if not any(
                    k != m and all(a <= b for a, b in zip(w, q)) and w != q
                    for m, w in enumerate(limited)
                )
            ]
            total += box - _wfg(sorted(set(inner)), ref)
        else:
            total += box
    return total


def fitness_ref_point(records: Sequence, margin: float = 1.05) -> Tuple[float, float, float, float]:
    """A reference point slightly beyond the worst of every objective."""
    points = [_objectives(r) for r in records]
    worst = [max(col) for col in zip(*points)]
    return tuple(w * margin if w > 0 else w / margin + 1e-9 for w in worst)


# ---------------------------------------------------------------------------
# run-log handling and reports


def load_run_log(path: str) -> List[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ReportError(f"{path}:{lineno}: invalid JSON") from exc
            missing = [k for k in ("id", "gen", "accuracy", "energy_mj",
                                   "latency_ms", "memory_kib") if k not in record]
            if missing:
                raise ReportError(f"{path}:{lineno}: missing fields {missing}")
            records.append(record)
    if not records:
        raise ReportError(f"{path}: run log is empty")
    return records


def format_accuracy(v: float) -> str:
    return f"{v * 100:.2f}%"


def format_energy(v: float) -> str:
    return f"{v:.2f} mJ"


def format_latency(v: float) -> str:
    return f"{v:.2f} ms"


def format_memory(v: float) -> str:
    return f"{v:,.0f} kiB"


def _label_for(path: str, meta_dataset: Optional[str]) -> str:
    if meta_dataset:
        return meta_dataset
    stem = os.path.splitext(os.path.basename(path))[0]
    return stem or "run"


def _read_meta(log_path: str) -> Optional[dict]:
    meta_path = os.path.join(os.path.dirname(log_path) or ".", "meta.json")
    if not os.path.exists(meta_path):
        return None
    try:
        with open(meta_path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError):
        return None


def report(
    log_paths: Sequence[str],
    out_dir: str,
    fmt: str = "both",
    datasets: Optional[Sequence[str]] = None,
) -> List[str]:
    """Summarize one or more run logs into tables and scatter data.

    Per log: a Pareto table (architecture id plus the four objectives,
    formatted), the full point cloud with first-occurrence generation and
    front membership, and per-generation archive fronts. With two or more
    logs, a transferability matrix of each log's best-accuracy architecture
    evaluated everywhere it appears. Returns the written paths.
    """
    if fmt not in ("csv", "json", "both"):
        raise ReportError(f"unknown format '{fmt}'")
    os.makedirs(out_dir, exist_ok=True)
    written: List[str] = []

    labelled: List[Tuple[str, List[dict]]] = []
    for i, path in enumerate(log_paths):
        records = load_run_log(path)
        seen = set()
        unique = []
        for r in records:
            if r["id"] not in seen:
                seen.add(r["id"])
                unique.append(r)
        if datasets and i < len(datasets):
            label = datasets[i]
        else:
            meta = _read_meta(path)
            label = _label_for(path, meta.get("dataset") if meta else None)
        labelled.append((label, unique))
    if len({label for label, _ in labelled}) != len(labelled):
        labelled = [(f"{label}_{i}", recs) for i, (label, recs) in enumerate(labelled)]

    def emit_csv(name: str, header: List[str], rows: List[List]) -> None:
        path = os.path.join(out_dir, name + ".csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        written.append(path)

    def emit_json(name: str, payload) -> None:
        path = os.path.join(out_dir, name + ".json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(path)

    for label, records in labelled:
        front = pick_pareto(records)
        front_ids = {r["id"] for r in front}

        if fmt in ("csv", "both"):
            emit_csv(
                f"{label}_pareto",
                ["Architecture", "Accuracy", "Energy", "Latency", "Memory"],
                [
                    [
                        r["id"],
                        format_accuracy(r["accuracy"]),
                        format_energy(r["energy_mj"]),
                        format_latency(r["latency_ms"]),
                        format_memory(r["memory_kib"]),
                    ]
                    for r in front
                ],
            )
            emit_csv(
                f"{label}_points",
                ["id", "gen", "accuracy", "energy_mj", "latency_ms", "memory_kib", "on_front"],
                [
                    [
                        r["id"], r["gen"], r["accuracy"], r["energy_mj"],
                        r["latency_ms"], r["memory_kib"],
                        1 if r["id"] in front_ids else 0,
                    ]
                    for r in records
                ],
            )
            # archive front after each generation, for front-evolution plots
            fronts_rows = []
            max_gen = max(r["gen"] for r in records)
            for gen in range(max_gen + 1):
                archive = [r for r in records if r["gen"] <= gen]
                for r in pick_pareto(archive):
                    fronts_rows.append(
                        [gen, r["id"], r["accuracy"], r["energy_mj"],
                         r["latency_ms"], r["memory_kib"]]
                    )
            emit_csv(
                f"{label}_fronts",
                ["generation", "id", "accuracy", "energy_mj", "latency_ms", "memory_kib"],
                fronts_rows,
            )
        if fmt in ("json", "both"):
            emit_json(
                f"{label}_pareto",
                [
                    {k: r[k] for k in ("id", "gen", "accuracy", "energy_mj",
                                       "latency_ms", "memory_kib")}
                    for r in front
                ],
            )

    if len(labelled) >= 2:
        by_label = {
            label: {r["id"]: r for r in records} for label, records in labelled
        }
        matrix_rows = []
        for label, records in labelled:
            best = max(records, key=lambda r: r["accuracy"])
            row = {"architecture": best["id"], "from": label}
            for other, index in by_label.items():
                hit = index.get(best["id"])
                row[other] = hit["accuracy"] if hit else None
            matrix_rows.append(row)
        if fmt in ("csv", "both"):
            labels = [label for label, _ in labelled]
            emit_csv(
                "transfer",
                ["architecture", "from"] + labels,
                [
                    [row["architecture"], row["from"]]
                    + [("" if row[l] is None else row[l]) for l in labels]
                    for row in matrix_rows
                ],
            )
        if fmt in ("json", "both"):
            emit_json("transfer", matrix_rows)

    return written

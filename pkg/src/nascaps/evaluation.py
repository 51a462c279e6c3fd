"""Candidate evaluation: accuracy backends, caching, and the trainer bridge.

Accuracy comes from a pluggable backend. The surrogate backend is a cheap
deterministic stand-in used for fast searches and testing; the bridge backend
drives one or more external trainer processes over a line-delimited JSON
protocol on stdin/stdout:

    request   {"id": ..., "genotype": ..., "dataset": ..., "epochs": ...,
               "batch_size": ..., "seed": ...}
    response  {"id": ..., "accuracy": ..., "epochs_run": ...,
               "train_seconds": ..., "status": "ok" | "failed" | "timeout"}
    control   {"cmd": "shutdown"}

A trainer answers requests in the order received, one JSON object per line,
UTF-8. The evaluator never crashes the search on a failed candidate: it
records accuracy 0 with a non-ok status and moves on.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import queue
import subprocess
import threading
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Set, Tuple

from . import hwmodel
from .genotype import (
    CAPSULE_KINDS,
    Genotype,
    deserialize,
    expand,
    genotype_id,
    serialize,
)
from .nsga import FitnessVector, Individual

DATASETS = ("mnist", "fmnist", "svhn", "cifar10")

#: Training epochs per dataset when the caller does not override them.
DEFAULT_EPOCHS = {"mnist": 5, "fmnist": 5, "svhn": 5, "cifar10": 10}

#: Per-request training timeout. Desk-scale runs never get close; full
#: trainings that exceed it are recorded as timeouts, not errors.
DEFAULT_REQUEST_TIMEOUT_S = 1800.0

#: Environment variable naming the persistent accuracy-cache file.
CACHE_ENV_VAR = "NASCAPS_CACHE"


class ProtocolError(Exception):
    """A trainer sent something the wire protocol does not allow."""


class BridgeError(Exception):
    """A trainer process could not be started or died unexpectedly."""


class CacheError(Exception):
    """The persistent cache file is unreadable or corrupt."""


@dataclass(frozen=True)
class EvaluationRequest:
    id: str
    genotype: str
    dataset: str
    epochs: int
    batch_size: int
    seed: int

    def to_wire(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


@dataclass(frozen=True)
class EvaluationResult:
    id: str
    accuracy: float
    epochs_run: int
    train_seconds: float
    status: str


# ---------------------------------------------------------------------------
# surrogate backend


_SURROGATE_BASE = {"mnist": 0.82, "fmnist": 0.74, "svhn": 0.66, "cifar10": 0.48}


def surrogate_accuracy(g: Genotype, dataset: str, seed: int) -> float:
    """Deterministic smooth stand-in for trained accuracy.

    Rises with model capacity up to a sweet spot of a few million weights,
    prefers moderate depth and capsule-rich designs, and adds seed-keyed
    noise of amplitude at most 0.01. Clamped to [0, 1]. Two calls with the
    same genotype, dataset and seed return the same value in any process.
    """
    if dataset not in _SURROGATE_BASE:
        raise ValueError(f"unknown dataset '{dataset}'")
    total_weights = sum(
        hwmodel.layer_cost_params(l).weights for l in expand(g)
    )
    depth = len(g.layers)
    caps_layers = sum(1 for l in g.layers if l.kind in CAPSULE_KINDS)

    log_w = math.log10(total_weights + 1)
    size_term = 0.08 * math.exp(-((log_w - 6.8) ** 2) / (2 * 1.1**2))
    depth_term = 0.05 * math.exp(-((depth - 6) ** 2) / 8.0)
    caps_term = 0.02 * math.tanh(caps_layers / 3.0)
    skip_term = 0.01 if g.skip_position is not None else 0.0

    key = f"{genotype_id(g)}|{dataset}|{seed}".encode("utf-8")
    u = int.from_bytes(hashlib.sha256(key).digest()[:8], "big") / 2.0**64
    noise = (u - 0.5) * 0.02

    value = _SURROGATE_BASE[dataset] + size_term + depth_term + caps_term + skip_term + noise
    return min(1.0, max(0.0, value))


class SurrogateBackend:
    """Accuracy backend that computes the surrogate instead of training."""

    def evaluate(
        self, requests: Sequence[EvaluationRequest], timeout_s: float
    ) -> List[EvaluationResult]:
        out = []
        for req in requests:
            acc = surrogate_accuracy(deserialize(req.genotype), req.dataset, req.seed)
            out.append(
                EvaluationResult(
                    id=req.id, accuracy=acc, epochs_run=req.epochs,
                    train_seconds=0.0, status="ok",
                )
            )
        return out

    def close(self) -> None:
        pass


# ---------------------------------------------------------------------------
# trainer bridge backend


class TrainerBridge:
    """One external trainer process speaking the JSONL protocol."""

    def __init__(self, command: Sequence[str]):
        try:
            self._proc = subprocess.Popen(
                list(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as exc:
            raise BridgeError(f"could not start trainer {command!r}: {exc}") from exc
        self._lines: "queue.Queue[Optional[str]]" = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)  # EOF marker

    def evaluate_one(
        self, request: EvaluationRequest, timeout_s: float
    ) -> EvaluationResult:
        try:
            self._proc.stdin.write(request.to_wire() + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise BridgeError(f"trainer died while writing: {self._stderr_tail()}") from exc

        try:
            line = self._lines.get(timeout=timeout_s)
        except queue.Empty:
            return EvaluationResult(request.id, 0.0, 0, timeout_s, "timeout")
        if line is None:
            raise BridgeError(f"trainer closed stdout: {self._stderr_tail()}")

        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"trainer sent invalid JSON: {line!r}") from exc
        if not isinstance(payload, dict) or payload.get("id") != request.id:
            raise ProtocolError(
                f"response id {payload.get('id')!r} does not match request {request.id!r}"
            )
        try:
            return EvaluationResult(
                id=payload["id"],
                accuracy=float(payload["accuracy"]),
                epochs_run=int(payload["epochs_run"]),
                train_seconds=float(payload["train_seconds"]),
                status=str(payload["status"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed response fields: {line!r}") from exc

    def shutdown(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.write('{"cmd":"shutdown"}\n')
                self._proc.stdin.flush()
                self._proc.stdin.close()
            except (BrokenPipeError, OSError):
                pass
            try:
                self._proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def _stderr_tail(self, limit: int = 2000) -> str:
        try:
            text = self._proc.stderr.read() or ""
        except (ValueError, OSError):
            text = ""
        return text[-limit:] if text else "(no stderr)"


class BridgePool:
    """Fan requests out over several trainer processes, keeping input order."""

    def __init__(self, command: Sequence[str], workers: int = 4):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self._bridges = [TrainerBridge(command) for _ in range(workers)]

    def evaluate(
        self, requests: Sequence[EvaluationRequest], timeout_s: float
    ) -> List[EvaluationResult]:
        results: List[Optional[EvaluationResult]] = [None] * len(requests)
        errors: List[Exception] = []

        def drive(bridge: TrainerBridge, slots: List[int]) -> None:
            for slot in slots:
                try:
                    results[slot] = bridge.evaluate_one(requests[slot], timeout_s)
                except (BridgeError, ProtocolError) as exc:
                    errors.append(exc)
                    results[slot] = EvaluationResult(
                        requests[slot].id, 0.0, 0, 0.0, "failed"
                    )

        threads = []
        for w, bridge in enumerate(self._bridges):
            slots = list(range(w, len(requests), len(self._bridges)))
            if not slots:
                continue
            t = threading.Thread(target=drive, args=(bridge, slots))
            t.start()
            threads.append(t)
        for t in threads:
            t.join()
        return [r for r in results if r is not None]

    def close(self) -> None:
        for bridge in self._bridges:
            bridge.shutdown()


# ---------------------------------------------------------------------------
# persistent cache


class EvaluationCache:
    """Append-only JSONL cache of finished evaluations.

    Keyed by (genotype id, dataset, epochs, seed); a hit is honoured only when
    the stored canonical genotype string matches exactly, so id collisions can
    never leak accuracies across architectures. Only status=ok results are
    persisted; failures stay in memory for the current run so transient
    problems retry on the next one.
    """

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._entries: Dict[Tuple[str, str, int, int], dict] = {}
        if path and os.path.exists(path):
            self._load(path)

    def _load(self, path: str) -> None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        record = json.loads(line)
                        key = (
                            record["id"], record["dataset"],
                            int(record["epochs"]), int(record["seed"]),
                        )
                    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                        raise CacheError(f"{path}:{lineno}: corrupt cache line") from exc
                    self._entries[key] = record
        except OSError as exc:
            raise CacheError(f"cannot read cache {path}: {exc}") from exc

    def get(
        self, gid: str, genotype: str, dataset: str, epochs: int, seed: int
    ) -> Optional[dict]:
        record = self._entries.get((gid, dataset, epochs, seed))
        if record is None or record.get("genotype") != genotype:
            return None
        return record

    def put(
        self, gid: str, genotype: str, dataset: str, epochs: int, seed: int,
        result: EvaluationResult,
    ) -> None:
        record = {
            "id": gid, "genotype": genotype, "dataset": dataset,
            "epochs": epochs, "seed": seed,
            "accuracy": result.accuracy, "epochs_run": result.epochs_run,
            "train_seconds": result.train_seconds, "status": result.status,
        }
        self._entries[(gid, dataset, epochs, seed)] = record
        if self.path and result.status == "ok":
            try:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, separators=(",", ":")) + "\n")
                    fh.flush()
            except OSError as exc:
                raise CacheError(f"cannot append to cache {self.path}: {exc}") from exc

    def ids(self) -> Set[str]:
        return {key[0] for key in self._entries}


def cache_from_env(default_path: Optional[str] = None) -> EvaluationCache:
    return EvaluationCache(os.environ.get(CACHE_ENV_VAR, default_path))


# ---------------------------------------------------------------------------
# fitness assembly


LOG_FIELDS = (
    "id", "gen", "genotype", "accuracy",
    "energy_mj", "latency_ms", "memory_kib", "status",
)


class FitnessEvaluator:
    """Joins an accuracy backend with the hardware model and the run log.

    evaluate_batch() deduplicates by genotype id, consults the cache, sends
    only the misses to the backend, and attaches a four-objective fitness to
    every individual. Each unique id is appended to ``log`` exactly once, at
    its first evaluation, tagged with that generation.
    """

    def __init__(
        self,
        backend,
        dataset: str,
        epochs: Optional[int] = None,
        batch_size: int = 128,
        seed: int = 0,
        cache: Optional[EvaluationCache] = None,
        request_timeout_s: float = DEFAULT_REQUEST_TIMEOUT_S,
    ):
        if dataset not in DATASETS:
            raise ValueError(f"unknown dataset '{dataset}' (expected one of {DATASETS})")
        self.backend = backend
        self.dataset = dataset
        self.epochs = DEFAULT_EPOCHS[dataset] if epochs is None else epochs
        self.batch_size = batch_size
        self.seed = seed
        self.cache = cache if cache is not None else EvaluationCache(None)
        self.request_timeout_s = request_timeout_s
        self.log: List[dict] = []
        self._logged: Set[str] = set()
        self._costs: Dict[str, hwmodel.CostReport] = {}

    def known_ids(self) -> Set[str]:
        return self._logged | self.cache.ids()

    def _cost(self, ind: Individual, hw: hwmodel.HardwareConfig) -> hwmodel.CostReport:
        if ind.id not in self._costs:
            self._costs[ind.id] = hwmodel.estimate(ind.genotype, hw)
        return self._costs[ind.id]

    def evaluate_batch(
        self,
        individuals: Sequence[Individual],
        hw: Optional[hwmodel.HardwareConfig] = None,
        generation: int = 0,
    ) -> List[Individual]:
        hw = hw or hwmodel.HardwareConfig()

        pending: List[EvaluationRequest] = []
        pending_ids: Set[str] = set()
        for ind in individuals:
            text = serialize(ind.genotype)
            hit = self.cache.get(ind.id, text, self.dataset, self.epochs, self.seed)
            if hit is None and ind.id not in pending_ids:
                pending_ids.add(ind.id)
                pending.append(
                    EvaluationRequest(
                        id=ind.id, genotype=text, dataset=self.dataset,
                        epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
                    )
                )

        if pending:
            results = self.backend.evaluate(pending, self.request_timeout_s)
            if len(results) != len(pending):
                raise ProtocolError(
                    f"backend returned {len(results)} results for {len(pending)} requests"
                )
            for req, res in zip(pending, results):
                if res.id != req.id:
                    raise ProtocolError(
                        f"result id {res.id!r} does not match request {req.id!r}"
                    )
                self.cache.put(
                    req.id, req.genotype, self.dataset, self.epochs, self.seed, res
                )

        out: List[Individual] = []
        from dataclasses import replace as _replace

        for ind in individuals:
            text = serialize(ind.genotype)
            record = self.cache.get(ind.id, text, self.dataset, self.epochs, self.seed)
            if record is None:  # only reachable through an id collision
                record = {"accuracy": 0.0, "status": "failed"}
            cost = self._cost(ind, hw)
            accuracy = float(record["accuracy"]) if record["status"] == "ok" else 0.0
            fitness = FitnessVector(
                accuracy=accuracy,
                energy_mj=cost.energy_mj,
                latency_ms=cost.latency_ms,
                memory_kib=cost.memory_kib,
            )
            out.append(_replace(ind, fitness=fitness))
            if ind.id not in self._logged:
                self._logged.add(ind.id)
                self.log.append(
                    {
                        "id": ind.id,
                        "gen": generation,
                        "genotype": text,
                        "accuracy": accuracy,
                        "energy_mj": cost.energy_mj,
                        "latency_ms": cost.latency_ms,
                        "memory_kib": cost.memory_kib,
                        "status": record["status"],
                    }
                )
        return out

    def close(self) -> None:
        self.backend.close()

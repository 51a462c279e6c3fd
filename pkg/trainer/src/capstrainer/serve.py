"""Stdio serving loop speaking the evaluator wire protocol.

Requests arrive one JSON object per line on stdin:

    {"id": "...", "genotype": "...", "dataset": "mnist",
     "epochs": 5, "batch_size": 128, "seed": 0}

and are answered in arrival order, one JSON object per line on stdout:

    {"id": "...", "accuracy": 0.97, "epochs_run": 5,
     "train_seconds": 41.2, "status": "ok"}

``{"cmd": "shutdown"}`` ends the process with exit code 0, as does end of
input. Any per-request failure — unparseable line, missing field, bad
genotype, unavailable dataset, training error — produces a response with
``"status": "failed"`` and the loop keeps serving; a one-line diagnostic
goes to stderr.

Two evaluators exist: ``torch_evaluate`` builds and trains the described
network; ``stub_evaluate`` returns deterministic pseudo-accuracies without
touching any framework, for protocol plumbing tests and dry runs.
"""

import hashlib
import json
import sys
import time
from dataclasses import dataclass, replace
from typing import Optional, TextIO

REQUEST_FIELDS = ("id", "genotype", "dataset", "epochs", "batch_size", "seed")


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    data_dir: Optional[str] = None
    train_samples: Optional[int] = None
    val_samples: Optional[int] = None

    @classmethod
    def from_file(cls, path: str) -> "TrainerConfig":
        values = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                text = line.split("#", 1)[0].strip()
                if not text:
                    continue
                key, _, raw = text.partition("=")
                key, raw = key.strip(), raw.strip()
                if key == "optimizer":
                    values[key] = raw
                elif key == "learning_rate":
                    values[key] = float(raw)
                elif key == "data_dir":
                    values[key] = raw
                elif key in ("train_samples", "val_samples"):
                    values[key] = int(raw)
                else:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        return cls(**values)


def stub_evaluate(request: dict, config: TrainerConfig) -> dict:
    key = "|".join(
        str(request[f]) for f in ("genotype", "dataset", "epochs", "seed")
    )
    digest = hashlib.sha256(key.encode("utf-8")).hexdigest()
    return {
        "accuracy": 0.5 + (int(digest[:8], 16) % 4000) / 10000.0,
        "epochs_run": int(request["epochs"]),
        "train_seconds": 0.0,
    }


def torch_evaluate(request: dict, config: TrainerConfig) -> dict:
    import torch

    from .data import load_dataset
    from .model import build, margin_loss

    start = time.monotonic()
    epochs = int(request["epochs"])
    batch_size = int(request["batch_size"])
    seed = int(request["seed"])
    if config.optimizer != "adam":
        raise ConfigError(f"unsupported optimizer {config.optimizer!r}")

    torch.manual_seed(seed)
    data = load_dataset(request["dataset"], config.data_dir)
    model = build(request["genotype"]).model
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    xt, yt = data.train_images, data.train_labels
    if config.train_samples is not None:
        xt, yt = xt[: config.train_samples], yt[: config.train_samples]
    xv, yv = data.val_images, data.val_labels
    if config.val_samples is not None:
        xv, yv = xv[: config.val_samples], yv[: config.val_samples]

    shuffler = torch.Generator().manual_seed(seed)
    model.train()
    for _ in range(epochs):
        order = torch.randperm(len(xt), generator=shuffler)
        for lo in range(0, len(xt), batch_size):
            idx = order[lo: lo + batch_size]
            lengths = model(xt[idx]).norm(dim=-1)
            loss = margin_loss(lengths, yt[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    model.eval()
    correct = 0
    with torch.no_grad():
        for lo in range(0, len(xv), 256):
            lengths = model(xv[lo: lo + 256]).norm(dim=-1)
            correct += (lengths.argmax(dim=1) == yv[lo: lo + 256]).sum().item()
    return {
        "accuracy": correct / len(xv),
        "epochs_run": epochs,
        "train_seconds": round(time.monotonic() - start, 3),
    }


def _respond(stdout: TextIO, req_id, accuracy, epochs_run, train_seconds, status) -> None:
    response = {
        "id": req_id,
        "accuracy": accuracy,
        "epochs_run": epochs_run,
        "train_seconds": train_seconds,
        "status": status,
    }
    stdout.write(json.dumps(response, separators=(",", ":")) + "\n")
    stdout.flush()


def serve(stdin: TextIO, stdout: TextIO, evaluate, config: TrainerConfig) -> int:
    for line in stdin:
        if not line.strip():
            continue
        req_id = None
        try:
            request = json.loads(line)
            if isinstance(request, dict) and request.get("cmd") == "shutdown":
                return 0
            req_id = request.get("id") if isinstance(request, dict) else None
            missing = [f for f in REQUEST_FIELDS if f not in request]
            if missing:
                raise ValueError(f"request missing fields: {', '.join(missing)}")
            payload = evaluate(request, config)
        except Exception as exc:  # keep serving whatever went wrong
            print(f"request failed: {exc}", file=sys.stderr, flush=True)
            _respond(stdout, req_id, 0.0, 0, 0.0, "failed")
            continue
        _respond(
            stdout,
            request["id"],
            float(payload["accuracy"]),
            int(payload["epochs_run"]),
            float(payload["train_seconds"]),
            "ok",
        )
    return 0

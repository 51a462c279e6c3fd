import io
import json
import subprocess
import sys
from pathlib import Path

from capstrainer import TrainerConfig, serve, stub_evaluate, torch_evaluate
from capstrainer.serve import ConfigError

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

SMALL = ("conv,28,1,1,9,2,10,8,1;cconv,10,8,1,3,1,8,4,4;"
         "ccaps,8,4,4,1,1,1,10,16;skip=none;resize=0")


def run_stub(stdin_bytes):
    proc = subprocess.run(
        [sys.executable, "-m", "capstrainer", "--evaluator", "stub"],
        input=stdin_bytes, capture_output=True, timeout=60,
    )
    return proc


def test_recorded_conversation_replays_byte_exact():
    requests = (FIXTURES / "conversation_requests.jsonl").read_bytes()
    expected = (FIXTURES / "conversation_responses.jsonl").read_bytes()
    proc = run_stub(requests)
    assert proc.returncode == 0
    assert proc.stdout == expected


def test_responses_preserve_request_order():
    lines = []
    for i in range(8):
        lines.append(json.dumps({
            "id": f"q{i}", "genotype": SMALL, "dataset": "mnist",
            "epochs": 1, "batch_size": 8, "seed": i,
        }))
    lines.append(json.dumps({"cmd": "shutdown"}))
    proc = run_stub(("\n".join(lines) + "\n").encode())
    assert proc.returncode == 0
    replies = [json.loads(l) for l in proc.stdout.decode().splitlines()]
    assert [r["id"] for r in replies] == [f"q{i}" for i in range(8)]
    assert all(r["status"] == "ok" for r in replies)
    assert all(0.0 <= r["accuracy"] <= 1.0 for r in replies)


def test_identical_requests_get_identical_answers():
    req = {"id": "a", "genotype": SMALL, "dataset": "mnist",
           "epochs": 3, "batch_size": 16, "seed": 11}
    twin = dict(req, id="b")
    payload = "\n".join(json.dumps(r) for r in (req, twin, {"cmd": "shutdown"}))
    proc = run_stub((payload + "\n").encode())
    a, b = [json.loads(l) for l in proc.stdout.decode().splitlines()]
    assert a["accuracy"] == b["accuracy"]


def test_malformed_line_fails_without_killing_the_server():
    payload = (
        "this is not json\n"
        + json.dumps({"id": "after", "genotype": SMALL, "dataset": "mnist",
                      "epochs": 1, "batch_size": 8, "seed": 0}) + "\n"
        + json.dumps({"cmd": "shutdown"}) + "\n"
    )
    proc = run_stub(payload.encode())
    assert proc.returncode == 0
    first, second = [json.loads(l) for l in proc.stdout.decode().splitlines()]
    assert first["status"] == "failed"
    assert first["id"] is None
    assert (second["id"], second["status"]) == ("after", "ok")


def test_missing_field_fails_that_request_only():
    payload = (
        json.dumps({"id": "short", "genotype": SMALL, "dataset": "mnist"}) + "\n"
        + json.dumps({"id": "full", "genotype": SMALL, "dataset": "mnist",
                      "epochs": 1, "batch_size": 8, "seed": 0}) + "\n"
        + json.dumps({"cmd": "shutdown"}) + "\n"
    )
    proc = run_stub(payload.encode())
    assert proc.returncode == 0
    first, second = [json.loads(l) for l in proc.stdout.decode().splitlines()]
    assert (first["id"], first["status"]) == ("short", "failed")
    assert second["status"] == "ok"


def test_eof_without_shutdown_exits_cleanly():
    req = json.dumps({"id": "only", "genotype": SMALL, "dataset": "mnist",
                      "epochs": 1, "batch_size": 8, "seed": 0}) + "\n"
    proc = run_stub(req.encode())
    assert proc.returncode == 0
    assert json.loads(proc.stdout.decode().splitlines()[0])["id"] == "only"


def test_response_lines_are_compact_with_fixed_key_order():
    payload = json.dumps({"id": "x", "genotype": SMALL, "dataset": "mnist",
                          "epochs": 2, "batch_size": 8, "seed": 4}) + "\n"
    proc = run_stub(payload.encode())
    line = proc.stdout.decode().splitlines()[0]
    assert " " not in line
    assert list(json.loads(line)) == [
        "id", "accuracy", "epochs_run", "train_seconds", "status"]


# ---------------------------------------------------------------------------
# in-process serve() against the real evaluator


def drive(requests, evaluate, config=None):
    out = io.StringIO()
    code = serve(io.StringIO(requests), out, evaluate,
                 config or TrainerConfig())
    return code, [json.loads(l) for l in out.getvalue().splitlines()]


def test_unknown_dataset_fails_but_serving_continues():
    payload = (
        json.dumps({"id": "bad", "genotype": SMALL, "dataset": "flowers",
                    "epochs": 1, "batch_size": 8, "seed": 0}) + "\n"
        + json.dumps({"cmd": "shutdown"}) + "\n"
    )
    code, replies = drive(payload, torch_evaluate)
    assert code == 0
    assert replies[0]["status"] == "failed"
    assert replies[0]["accuracy"] == 0.0


def test_unbuildable_genotype_fails_cleanly():
    broken = SMALL.replace("ccaps,8,4,4", "ccaps,9,4,4")
    payload = (
        json.dumps({"id": "nope", "genotype": broken, "dataset": "mnist",
                    "epochs": 1, "batch_size": 8, "seed": 0}) + "\n"
        + json.dumps({"cmd": "shutdown"}) + "\n"
    )
    code, replies = drive(payload, torch_evaluate)
    assert code == 0
    assert replies[0]["status"] == "failed"


# ---------------------------------------------------------------------------
# config files


def test_config_file_round_trip(tmp_path):
    cfg = tmp_path / "trainer.cfg"
    cfg.write_text(
        "# tuning used for quick sweeps\n"
        "optimizer = adam\n"
        "learning_rate = 0.0005\n"
        "train_samples = 200\n"
    )
    parsed = TrainerConfig.from_file(cfg)
    assert parsed.learning_rate == 0.0005
    assert parsed.train_samples == 200
    assert parsed.val_samples is None


def test_config_file_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "trainer.cfg"
    cfg.write_text("optimizer = adam\nmomentum = 0.9\n")
    with pytest.raises(ConfigError, match=r"trainer\.cfg:2"):
        TrainerConfig.from_file(cfg)

import json
import random
import subprocess
import sys

import pytest

from nascaps import evaluation, hwmodel, presets
from nascaps import genotype as gt
from nascaps.cli import main
from nascaps.evaluation import LOG_FIELDS


@pytest.fixture(autouse=True)
def _isolate_cache_env(monkeypatch):
    monkeypatch.delenv("NASCAPS_CACHE", raising=False)


# ---------------------------------------------------------------------------
# estimate


def test_estimate_json_matches_library(capsys):
    assert main(["estimate", "--preset", "capsnet", "--format", "json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    report = hwmodel.estimate(presets.load_preset("capsnet"))
    assert payload["latency_ms"] == pytest.approx(report.latency_ms)
    assert payload["energy_mj"] == pytest.approx(report.energy_mj)
    assert payload["memory_kib"] == pytest.approx(report.memory_kib)
    assert len(payload["per_layer"]) == len(report.per_layer)


def test_estimate_table_output(capsys):
    assert main(["estimate", "--preset", "deepcaps"]) == 0
    out = capsys.readouterr().out
    assert "latency :" in out and " ms" in out
    assert "energy  :" in out and " mJ" in out
    assert "memory  :" in out and " kiB" in out


def test_estimate_rejects_invalid_structure(capsys):
    # two conv layers, no capsule layers at all
    bad = "conv,28,1,1,9,1,20,8,1;conv,20,8,1,3,1,18,8,1;skip=none;resize=0"
    assert main(["estimate", "--genotype", bad]) == 1
    assert "invalid:" in capsys.readouterr().err


def test_estimate_rejects_parse_garbage(capsys):
    assert main(["estimate", "--genotype", "not-a-genotype"]) == 1
    assert "error:" in capsys.readouterr().err


def test_estimate_requires_exactly_one_source(capsys):
    code = main(
        ["estimate", "--preset", "capsnet", "--genotype", presets.CAPSNET]
    )
    assert code == 1
    assert "exactly one" in capsys.readouterr().err


def test_estimate_genotype_file(tmp_path, capsys):
    path = tmp_path / "g.txt"
    path.write_text(presets.CAPSNET + "\n")
    assert main(["estimate", "--genotype-file", str(path), "--format", "json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["energy_mj"] == pytest.approx(88.80, rel=1e-3)


def test_estimate_hw_config_override(tmp_path, capsys):
    cfg = tmp_path / "hw.cfg"
    cfg.write_text("clock_period_ns = 6.0\n")
    assert main(["estimate", "--preset", "capsnet", "--format", "json"]) == 0
    base = json.loads(capsys.readouterr().out)
    assert main(
        ["estimate", "--preset", "capsnet", "--hw-config", str(cfg), "--format", "json"]
    ) == 0
    slow = json.loads(capsys.readouterr().out)
    assert slow["latency_ms"] == pytest.approx(2 * base["latency_ms"])


def test_unknown_hw_config_key(tmp_path, capsys):
    cfg = tmp_path / "hw.cfg"
    cfg.write_text("warp_factor = 9\n")
    assert main(["estimate", "--preset", "capsnet", "--hw-config", str(cfg)]) == 1
    assert "warp_factor" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# rand


def test_rand_outputs_valid_and_deterministic(capsys):
    assert main(["rand", "--count", "5", "--seed", "7"]) == 0
    first = capsys.readouterr().out
    assert main(["rand", "--count", "5", "--seed", "7"]) == 0
    assert capsys.readouterr().out == first
    lines = first.strip().splitlines()
    assert len(lines) == 5
    for line in lines:
        assert gt.validate(gt.deserialize(line)) == []


def test_rand_respects_dataset(capsys):
    assert main(["rand", "--count", "3", "--seed", "1", "--dataset", "cifar10"]) == 0
    for line in capsys.readouterr().out.strip().splitlines():
        g = gt.deserialize(line)
        # upscaled inputs start the chain at the resize target instead
        assert g.layers[0].n_in == (gt.RESIZE_TARGET if g.resize_flag else 32)
        assert g.layers[0].ch_in == 3


# ---------------------------------------------------------------------------
# search


def _run_search(tmp_path, *extra):
    out = tmp_path / "run"
    argv = [
        "search", "--dataset", "mnist", "--out", str(out),
        "--parents", "6", "--offspring", "6", "--generations", "3",
        "--seed", "5", *extra,
    ]
    return main(argv), out


def test_search_writes_artifacts(tmp_path, capsys):
    code, out = _run_search(tmp_path)
    assert code == 0
    for name in ("run.jsonl", "front.json", "front.csv", "meta.json", "cache.jsonl"):
        assert (out / name).exists(), name

    lines = (out / "run.jsonl").read_text().splitlines()
    assert len(lines) >= 20
    for line in lines:
        record = json.loads(line)
        assert tuple(record) == LOG_FIELDS

    front = json.loads((out / "front.json").read_text())
    assert front and all(gt.validate(gt.deserialize(row["genotype"])) == [] for row in front)

    csv_lines = (out / "front.csv").read_text().splitlines()
    assert csv_lines[0] == "Architecture,Accuracy,Energy,Latency,Memory"
    assert len(csv_lines) == len(front) + 1

    meta = json.loads((out / "meta.json").read_text())
    assert meta["generations_run"] == 3
    assert meta["truncated"] is False
    assert meta["backend"] == "surrogate"
    assert meta["evaluations"] == len(lines)
    assert meta["hardware"]["pe_dim"] == 16

    stdout = capsys.readouterr().out
    assert "generations" in stdout


def test_search_time_limit_partial(tmp_path, capsys):
    code, out = _run_search(tmp_path, "--time-limit", "0s")
    assert code == 2
    assert "partial" in capsys.readouterr().err
    meta = json.loads((out / "meta.json").read_text())
    assert meta["truncated"] is True
    assert meta["generations_run"] == 0
    assert (out / "run.jsonl").read_text().strip()  # gen-0 results still written


def test_search_shared_cache_never_repersists(tmp_path, monkeypatch):
    cache_path = tmp_path / "shared-cache.jsonl"
    monkeypatch.setenv("NASCAPS_CACHE", str(cache_path))
    code, out_a = _run_search(tmp_path)
    assert code == 0
    assert cache_path.exists()
    first = len(cache_path.read_text().splitlines())

    # a warm cache steers the second search toward unseen architectures,
    # so it explores instead of replaying; already-cached entries are
    # answered in place and never appended a second time
    code, out_b = _run_search(tmp_path / "again")
    assert code == 0
    lines = [json.loads(l) for l in cache_path.read_text().splitlines()]
    assert len(lines) >= first
    keys = [(r["id"], r["dataset"], r["epochs"], r["seed"]) for r in lines]
    assert len(keys) == len(set(keys))

    # any architecture appearing in both run logs kept its cached accuracy
    acc_a = {json.loads(l)["id"]: json.loads(l)["accuracy"]
             for l in (out_a / "run.jsonl").read_text().splitlines()}
    for l in (out_b / "run.jsonl").read_text().splitlines():
        r = json.loads(l)
        if r["id"] in acc_a:
            assert r["accuracy"] == acc_a[r["id"]]


def test_search_bridge_needs_trainer_cmd(tmp_path, capsys):
    code, _ = _run_search(tmp_path, "--backend", "bridge")
    assert code == 1
    assert "--trainer-cmd" in capsys.readouterr().err


def test_search_bridge_spawn_failure(tmp_path, capsys):
    code, _ = _run_search(
        tmp_path, "--backend", "bridge", "--trainer-cmd", "/nonexistent/trainer"
    )
    assert code == 3
    assert "backend" in capsys.readouterr().err


def test_search_config_file(tmp_path):
    cfg = tmp_path / "search.cfg"
    cfg.write_text("parent_size = 4\noffspring_size = 4\ngenerations = 2\nseed = 9\n")
    out = tmp_path / "run"
    code = main(["search", "--out", str(out), "--search-config", str(cfg)])
    assert code == 0
    meta = json.loads((out / "meta.json").read_text())
    assert meta["parent_size"] == 4
    assert meta["generations_run"] == 2
    assert meta["seed"] == 9


# ---------------------------------------------------------------------------
# calibrate


def test_calibrate_from_preset_refs(tmp_path, capsys):
    refs = tmp_path / "refs.json"
    refs.write_text(json.dumps([
        {"preset": "capsnet", "energy_mj": 88.80},
        {"preset": "deepcaps", "energy_mj": 36.30},
    ]))
    out_cfg = tmp_path / "fitted.cfg"
    assert main(["calibrate", "--refs", str(refs), "--out", str(out_cfg)]) == 0
    out = capsys.readouterr().out
    assert "mem_access_energy_pj = " in out
    assert "pe_array_power_mw = " in out
    assert out.count("relative energy residual") == 2

    fitted = hwmodel.HardwareConfig.from_file(str(out_cfg))
    report = hwmodel.estimate(presets.load_preset("capsnet"), fitted)
    assert report.energy_mj == pytest.approx(88.80, rel=1e-6)


def test_calibrate_single_ref_fails(tmp_path, capsys):
    refs = tmp_path / "refs.json"
    refs.write_text(json.dumps([{"preset": "capsnet", "energy_mj": 88.80}]))
    assert main(["calibrate", "--refs", str(refs)]) == 1
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# correlate


@pytest.fixture()
def trace_file(tmp_path):
    rng = random.Random(4)
    path = tmp_path / "traces.jsonl"
    with open(path, "w") as fh:
        for i in range(8):
            final = 0.4 + 0.06 * i + rng.uniform(0, 0.01)
            accs = [final * f for f in (0.5, 0.7, 0.8, 0.9, 0.97, 1.0)]
            fh.write(json.dumps({
                "id": f"t{i}", "epochs": [1, 3, 5, 10, 15, 20],
                "accuracies": accs, "train_seconds_per_epoch": 12.0 + i,
            }) + "\n")
    return str(path)


def test_correlate_table(trace_file, capsys):
    assert main(["correlate", "--traces", trace_file]) == 0
    out = capsys.readouterr().out
    assert out.startswith("epochs")
    assert "pcc" in out and "mctt[s]" in out


def test_correlate_csv_and_json(trace_file, capsys):
    assert main(["correlate", "--traces", trace_file, "--format", "csv",
                 "--checkpoints", "1,5,20"]) == 0
    csv_out = capsys.readouterr().out.splitlines()
    assert csv_out[0] == "epochs,1,5,20"
    assert csv_out[1].startswith("pcc,")

    assert main(["correlate", "--traces", trace_file, "--format", "json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert set(payload["pcc"]) == {"1", "3", "5", "10", "15", "20"}
    assert payload["median_cumulative_seconds"]["1"] == pytest.approx(15.5)


def test_correlate_exclude_changes_result(trace_file, capsys):
    assert main(["correlate", "--traces", trace_file, "--format", "json"]) == 0
    full = json.loads(capsys.readouterr().out)
    assert main(["correlate", "--traces", trace_file, "--format", "json",
                 "--exclude", "t0,t7"]) == 0
    trimmed = json.loads(capsys.readouterr().out)
    assert full["pcc"] != trimmed["pcc"]


# ---------------------------------------------------------------------------
# report


def test_report_command(tmp_path, capsys):
    code, run_out = _run_search(tmp_path)
    assert code == 0
    capsys.readouterr()  # drop the search summary line
    rep = tmp_path / "rep"
    assert main(["report", "--logs", str(run_out / "run.jsonl"),
                 "--out", str(rep), "--format", "csv"]) == 0
    printed = capsys.readouterr().out.strip().splitlines()
    assert printed
    import os
    assert all(os.path.exists(p) for p in printed)


def test_report_missing_log(tmp_path, capsys):
    assert main(["report", "--logs", str(tmp_path / "absent.jsonl")]) == 1
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# packaging


def test_console_script_entry_point():
    proc = subprocess.run(
        ["nascaps", "estimate", "--preset", "capsnet", "--format", "json"],
        capture_output=True, text=True, timeout=60,
    )
    assert proc.returncode == 0
    payload = json.loads(proc.stdout)
    assert payload["memory_kib"] == pytest.approx(6646.3125)

import csv
import json
import subprocess
import sys

import pytest

from enchvac import ckks
from enchvac.ckks import serialize
from enchvac.cli import main
from enchvac.learning import load_policy


def write_config(path, **kw):
    base = {"duration": 40, "start": 12}
    base.update(kw)
    path.write_text(json.dumps(base))
    return path


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_simulate(tmp_path):
    cfg = write_config(tmp_path / "c.json", trigger="threshold", alpha=5.0)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "4"]) == 0
    metrics = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert set(metrics) >= {"violation_pct_temp", "comm_rate", "total_bytes", "max_violation_co2"}
    assert len(read_csv(tmp_path / "o" / "trace.csv")) == 40


def test_train_trigger(tmp_path):
    cfg = write_config(tmp_path / "c.json", lam=0.5, training={
        "hidden": 4, "episode_length": 12, "iterations": 3, "batch_size": 2})
    assert main(["train-trigger", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    out = tmp_path / "o"
    policy, tag = load_policy((out / "policy.bin").read_bytes())
    assert policy.w1.shape == (4, 33) and len(tag) == 16
    assert len(read_csv(out / "learning_curve.csv")) == 3
    assert 0 <= json.loads((out / "metrics.json").read_text())["comm_rate"] <= 100


def test_sweep_from_flags_and_config(tmp_path):
    cfg = write_config(tmp_path / "c.json", sweep={"parameter": "alpha", "values": [0, "inf"]})
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "a"),
                 "--parameter", "alpha", "--values", "0", "20"]) == 0
    rows = read_csv(tmp_path / "a" / "sweep.csv")
    assert [float(r["value"]) for r in rows] == [0.0, 20.0]
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    rows = read_csv(tmp_path / "b" / "sweep.csv")
    assert float(rows[0]["comm_rate"]) == 100.0 and float(rows[1]["value"]) == float("inf")


def test_sweep_without_values_exits(tmp_path):
    with pytest.raises(SystemExit):
        main(["sweep", "--config", str(write_config(tmp_path / "c.json")), "--out", str(tmp_path / "o")])


def test_keygen(tmp_path):
    cfg = write_config(tmp_path / "c.json", he={"ring_degree": 1024}, seed=9)
    assert main(["keygen", "--config", str(cfg), "--out", str(tmp_path / "k")]) == 0
    params = ckks.HeParams(ring_degree=1024)
    sk = serialize.load_secret_key((tmp_path / "k" / "secret.key").read_bytes(), params)
    pk = serialize.load_public_key((tmp_path / "k" / "public.key").read_bytes(), params)
    serialize.load_eval_key((tmp_path / "k" / "eval.key").read_bytes(), params)
    assert abs(ckks.decrypt_values(sk, ckks.encrypt_values(pk, [0.5]), 1)[0] - 0.5) < 1e-3
    assert json.loads((tmp_path / "k" / "keys.json").read_text())["params"]["ring_degree"] == 1024


def test_compare_size(tmp_path):
    cfg = write_config(tmp_path / "c.json", he={"ring_degree": 1024}, duration=70)
    assert main(["compare-size", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    summary = json.loads((tmp_path / "o" / "data_size.json").read_text())
    assert summary["encrypted_over_plain"] > 1
    assert summary["event_over_periodic"] == pytest.approx(summary["comm_rate"] / 100, rel=0.01)
    rows = read_csv(tmp_path / "o" / "data_size.csv")
    assert len(rows) == 70 and set(rows[0]) == {"step", "plaintext_periodic", "encrypted_periodic", "encrypted_event"}


def test_bad_config_is_reported(tmp_path):
    cfg = write_config(tmp_path / "c.json", t_s=9)
    proc = subprocess.run([sys.executable, "-m", "enchvac.cli", "simulate", "--config", str(cfg),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "exceeds the MPC horizon" in proc.stderr and "Traceback" not in proc.stderr


def test_help_lists_subcommands():
    proc = subprocess.run([sys.executable, "-m", "enchvac.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("simulate", "train-trigger", "sweep", "keygen", "compare-size"):
        assert name in proc.stdout

import csv
import json
import subprocess
import sys

import pytest

from enroll.cli import run


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run(["gen-data", "--out", str(d / "data"), "--seed", "5", "--trials", "6",
                "--patients", "120", "--numeric-fraction", "0.6"]) == 0
    assert run(["train", "--data", str(d / "data"), "--out", str(d / "model"), "--epochs", "2",
                "--embed-dim", "8", "--code-dim", "8"]) == 0
    return d


def test_train_outputs(workdir):
    for name in ("params.ckpt", "model.json", "train_log.csv"):
        assert (workdir / "model" / name).exists()
    meta = json.loads((workdir / "model" / "model.json").read_text())
    assert meta["train_config"]["max_epochs"] == 2


def test_eval_writes_metrics(workdir):
    out = workdir / "metrics.json"
    assert run(["eval", "--data", str(workdir / "data"), "--checkpoint", str(workdir / "model"),
                "--out", str(out)]) == 0
    m = json.loads(out.read_text())
    for key in ("micro_f1", "averaged_f1", "pr_auc", "confusion", "majority_baseline_micro_f1"):
        assert key in m
    assert m["micro_f1"] == m["accuracy"]
    assert m["split"] == "test" and m["nir"] is True


def _match(workdir, *extra):
    out = workdir / ("match%s.jsonl" % "".join(extra).replace("-", "_"))
    assert run(["match", "--data", str(workdir / "data"), "--checkpoint", str(workdir / "model"),
                "--split", "all", "--out", str(out), *extra]) == 0
    return [json.loads(line) for line in out.read_text().splitlines()]


def test_no_nir_differs_only_on_neural_entailment(workdir):
    full, plain = _match(workdir), _match(workdir, "--no-nir")
    assert len(full) == len(plain) > 0
    for a, b in zip(full, plain):
        assert a["neural_probs"] == b["neural_probs"]
        assert b["final_label"] == b["neural_label"]
        if a["neural_label"] != "entailment":
            assert a["final_label"] == b["final_label"]


def test_explain_csv(workdir):
    labels = (workdir / "data" / "labels.jsonl").read_text().splitlines()
    ex = json.loads(labels[0])
    out = workdir / "heat.csv"
    assert run(["explain", "--data", str(workdir / "data"), "--checkpoint", str(workdir / "model"),
                "--pair", f"{ex['trial_id']}:{ex['patient_id']}", "--out", str(out)]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    per_statement = {}
    for r in rows:
        per_statement[r["statement_id"]] = per_statement.get(r["statement_id"], 0.0) + float(r["normalized_weight"])
    assert all(abs(v - 1.0) < 1e-9 for v in per_statement.values())


def test_error_exit_codes(workdir, tmp_path):
    assert run(["train", "--bogus"]) == 2
    assert run([]) == 2
    assert run(["eval", "--data", str(tmp_path / "missing"), "--checkpoint", str(workdir / "model")]) == 1
    assert run(["explain", "--data", str(workdir / "data"), "--checkpoint", str(workdir / "model"),
                "--pair", "nonsense"]) == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "enroll", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gen-data" in proc.stdout

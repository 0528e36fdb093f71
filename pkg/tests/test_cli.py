import json
import os
import signal
import socket
import subprocess
import sys
import time

import httpx
import pytest

from buildmem import cli, predictor, trace


def run(*argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out if capsys else ""
    return code, out


def manifest(d, cmd):
    return json.loads((d / f"{cmd}.manifest.json").read_text())


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    assert cli.main(["synth", "--n", "1200", "--seed", "5", "--out-dir", str(d)]) == 0
    assert cli.main(["ingest", str(d / "sample.csv"), "--out-dir", str(d)]) == 0
    assert cli.main(["split", str(d / "dataset.csv"), "--out-dir", str(d)]) == 0
    assert cli.main(["train", str(d / "train.csv"), "--out-dir", str(d), "-o", str(d / "model.json")]) == 0
    assert cli.main(["eval", str(d / "model.json"), str(d / "test.csv"), "--history", str(d / "train.csv"),
                     "--out-dir", str(d / "eval")]) == 0
    return d


def test_every_step_writes_manifest(pipeline):
    for cmd in ("synth", "ingest", "split", "train"):
        m = manifest(pipeline, cmd)
        assert m["command"] == cmd and m["tool_version"]
        assert all(os.path.exists(p) for p in m["outputs"])
        assert set(m) >= {"config_hash", "inputs", "outputs", "seed", "wall_time_s", "reproduction"}
    assert manifest(pipeline / "eval", "eval")["command"] == "eval"


def test_ingest_summary(pipeline):
    s = json.loads((pipeline / "parse_summary.json").read_text())
    assert s["rows_kept"] == len(trace.read_traces([pipeline / "dataset.csv"]))
    assert "baseline_stats" in s


def test_split_default_60_40(pipeline):
    m = manifest(pipeline, "split")["summary"]
    assert m["train_rows"] + m["test_rows"] == m["total"]
    assert m["train_rows"] == pytest.approx(0.6 * m["total"], abs=1)
    tr = trace.read_traces([pipeline / "train.csv"])
    te = trace.read_traces([pipeline / "test.csv"])
    assert max(tr.times()) <= min(te.times())


def test_ingest_rerun_same_hash(pipeline, tmp_path):
    assert cli.main(["ingest", str(pipeline / "sample.csv"), "--out-dir", str(tmp_path)]) == 0
    first = manifest(tmp_path, "ingest")
    assert cli.main(["ingest", str(pipeline / "sample.csv"), "--out-dir", str(tmp_path)]) == 0
    second = manifest(tmp_path, "ingest")
    assert first["summary"]["dataset_sha256"] == second["summary"]["dataset_sha256"] \
        == manifest(pipeline, "ingest")["summary"]["dataset_sha256"]
    assert not first["reproduction"] and second["reproduction"]


def test_missing_column_nonzero_exit(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,branch\n1,main\n")
    code = cli.main(["ingest", str(bad), "--out-dir", str(tmp_path)])
    assert code != 0
    assert "MissingColumn" in capsys.readouterr().err
    assert not (tmp_path / "ingest.manifest.json").exists()


def test_train_envelope(pipeline):
    model = predictor.load_envelope(pipeline / "model.json")
    model.self_check()
    assert model.strategy == "ensemble" and model.safety_factor == 1.2
    assert model.training_meta["train_file_sha256"] == cli.sha256_file(pipeline / "train.csv")


def test_train_classifier_defaults(pipeline, tmp_path):
    assert cli.main(["train", str(pipeline / "train.csv"), "--strategy", "classifier",
                     "--out-dir", str(tmp_path)]) == 0
    clf = predictor.load_envelope(tmp_path / "model.json")
    assert (clf.threshold_gb, clf.safety_factor) == (50.0, 2.0)


def test_train_deterministic(pipeline, tmp_path):
    assert cli.main(["train", str(pipeline / "train.csv"), "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "model.json").read_bytes() == (pipeline / "model.json").read_bytes()


def test_eval_outputs(pipeline):
    e = pipeline / "eval"
    report = json.loads((e / "report.json").read_text())
    assert all(r["set_gb"] <= r["baseline_gb"] for r in report["records"])
    lines = (e / "decisions.jsonl").read_text().splitlines()
    assert len(lines) == report["n_records"]
    assert sorted(os.listdir(e / "plots")) == sorted(
        f"{n}.csv" for n in ("unused_hist", "class_population", "scatter_clipped", "scatter_unclipped",
                             "daily_savings", "gbh_timeline"))


def test_eval_unclipped_changes_only_clipped_rows(pipeline, tmp_path, capsys):
    code, out = run("eval", pipeline / "model.json", pipeline / "test.csv", "--history", pipeline / "train.csv",
                    "--unclipped", "--out-dir", tmp_path, capsys=capsys)
    assert code == 0 and "Well allocating" in out
    clipped = [json.loads(x) for x in (pipeline / "eval" / "decisions.jsonl").read_text().splitlines()]
    unclipped = [json.loads(x) for x in (tmp_path / "decisions.jsonl").read_text().splitlines()]
    for a, b in zip(clipped, unclipped):
        if max(a["safeguarded_gb"], 1.0) > a["original_gb"]:
            assert a["final_gb"] == a["original_gb"] and b["final_gb"] > a["final_gb"]
        else:
            assert a == b


def test_tune_smoke(pipeline, tmp_path, capsys):
    space = tmp_path / "space.json"
    space.write_text(json.dumps({"space_a": {"n_trees": ["int", 5, 10]}, "space_b": {"n_trees": ["int", 5, 10]}}))
    code, out = run("tune", pipeline / "train.csv", "--n-trials", 2, "--space", space, "--out-dir", tmp_path,
                    "--json", capsys=capsys)
    assert code == 0
    payload = json.loads(out)
    assert payload["ok"] and payload["command"] == "tune"
    assert len((tmp_path / "trials.jsonl").read_text().splitlines()) == 2
    assert manifest(tmp_path, "tune")["config"]["c"] == 3.0
    best = json.loads((tmp_path / "best_params.json").read_text())
    assert cli.main(["train", str(pipeline / "train.csv"), "--params", str(tmp_path / "best_params.json"),
                     "--out-dir", str(tmp_path)]) == 0
    m = predictor.load_envelope(tmp_path / "model.json")
    assert m.submodel_a.params.n_trees == best["params_a"]["n_trees"]


def test_simulate_oracle(pipeline, tmp_path, capsys):
    code, out = run("simulate", pipeline / "test.csv", "--oracle", "--out-dir", tmp_path, "--json", capsys=capsys)
    assert code == 0
    res = json.loads((tmp_path / "sim_result.json").read_text())
    assert res["refined"]["aggregates"]["oom_rate"] == 0
    for policy in ("baseline", "refined"):
        rows = (tmp_path / f"events_{policy}.csv").read_text().splitlines()
        assert len(rows) - 1 == res["event_counts"][policy]
    assert "delta" in json.loads(out)["summary"]


def test_simulate_model_scenario(pipeline, tmp_path):
    sc = tmp_path / "scenario.json"
    sc.write_text(json.dumps({"nodes": {"count": 4, "memory_capacity_gb": 1024}, "policy": "refined",
                              "oom_fraction": 0.5}))
    assert cli.main(["simulate", str(pipeline / "test.csv"), "--model", str(pipeline / "model.json"),
                     "--history", str(pipeline / "train.csv"), "--scenario", str(sc), "--out-dir", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "sim_result.json").read_text())
    assert res["n_nodes"] == 4 and set(res) >= {"refined"} and "baseline" not in res
    assert res["oom_fraction"] == 0.5


def test_report(pipeline, tmp_path, capsys):
    code, out = run("report", "--report", pipeline / "eval" / "report.json", "--dataset", pipeline / "dataset.csv",
                    "--out-dir", tmp_path, capsys=capsys)
    assert code == 0 and "Massively overallocating" in out
    assert json.loads((tmp_path / "baseline_stats.json").read_text())["bin_count"] >= 1
    assert cli.main(["report", "--out-dir", str(tmp_path)]) == 2


def test_precedence(pipeline, tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train_fraction": 0.5, "split": {"split_mode": "seeded_random"}}))
    ds = str(pipeline / "dataset.csv")

    def split_cfg(*extra):
        assert cli.main(["split", ds, "--config", str(cfg), "--out-dir", str(tmp_path), *extra]) == 0
        return manifest(tmp_path, "split")["config"]

    assert split_cfg() == {"train_fraction": 0.5, "split_mode": "seeded_random", "seed": 0}
    monkeypatch.setenv("BUILDMEM_TRAIN_FRACTION", "0.7")
    monkeypatch.setenv("BUILDMEM_SEED", "9")
    assert split_cfg()["train_fraction"] == 0.7 and split_cfg()["seed"] == 9
    c = split_cfg("--train-fraction", "0.8", "--seed", "4")
    assert (c["train_fraction"], c["seed"]) == (0.8, 4)
    # global flags work before the subcommand too
    assert cli.main(["--seed", "3", "split", ds, "--out-dir", str(tmp_path)]) == 0
    assert manifest(tmp_path, "split")["seed"] == 3


def test_seeded_split_deterministic(pipeline, tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / str(k)
        assert cli.main(["split", str(pipeline / "dataset.csv"), "--mode", "seeded_random", "--seed", "2",
                         "--out-dir", str(d)]) == 0
        outs.append((d / "train.csv").read_bytes())
    assert outs[0] == outs[1]


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "buildmem.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("ingest", "split", "tune", "train", "eval", "serve", "simulate", "report"):
        assert cmd in r.stdout


def _port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_serve_parity_and_shutdown(pipeline, tmp_path):
    port = _port()
    log = tmp_path / "decisions.jsonl"
    proc = subprocess.Popen(
        [sys.executable, "-m", "buildmem.cli", "serve", "--model", f"cpp_build={pipeline / 'model.json'}",
         "--port", str(port), "--deadline-ms", "5000", "--decision-log", str(log), "--out-dir", str(tmp_path)],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE,
    )
    try:
        url = f"http://127.0.0.1:{port}"
        for _ in range(200):
            try:
                health = httpx.get(url + "/v1/health").json()
                break
            except httpx.TransportError:
                time.sleep(0.05)
        assert [h["task_kind"] for h in health["handlers"]] == ["cpp_build"]
        model = predictor.load_envelope(pipeline / "model.json")
        test = trace.read_traces([pipeline / "test.csv"])
        history = trace.read_traces([pipeline / "train.csv"])
        rows, offline = cli.eval_decisions(model, test, history)
        from buildmem import features
        for i in range(0, len(rows), max(1, len(rows) // 15)):
            body = {"task_id": f"row-{i}", "task_kind": "cpp_build",
                    "attributes": features.attributes_from_row(rows[i]),
                    "original_requirements": {"memory_gb": test[i].baseline_assigned_gb}}
            r = httpx.post(url + "/v1/refine", json=body).json()
            assert r["decision"] == offline[i].to_dict()
    finally:
        proc.send_signal(signal.SIGTERM)
        proc.wait(20)
    assert proc.returncode == 0
    n = len(log.read_text().splitlines())
    assert n >= 15
    assert manifest(tmp_path, "serve")["command"] == "serve"

import json
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import httpx
import pytest
import uvicorn
from fastapi.testclient import TestClient

from buildmem import features, orchestrator, predictor
from buildmem.errors import ArtifactInvalid
from buildmem.orchestrator import RefinementService, ServiceConfig


class StubModel:
    """Fixed raw prediction through the real ensemble policy."""

    def __init__(self, raw=30.0, version="stub-1", delay=0.0, fail=False, bad=False):
        self.raw, self.version, self.delay, self.fail, self.bad = raw, version, delay, fail, bad

    def row_from_attributes(self, attrs):
        return attrs

    def refine_rows(self, rows, originals, task_ids):
        if self.delay:
            time.sleep(self.delay)
        if self.fail:
            raise RuntimeError("model exploded")
        s, f, c = predictor.apply_policy([self.raw] * len(rows), originals, 1.2, clip=not self.bad)
        return [predictor.RefinementDecision(t, float(o), self.raw, float(si), float(fi), bool(ci), "ensemble", self.version)
                for t, o, si, fi, ci in zip(task_ids, originals, s, f, c)]

    def self_check(self):
        pass


def req(task_id="t1", kind="cpp_build", mem=300.0, **attrs):
    return {"task_id": task_id, "task_kind": kind, "attributes": attrs,
            "original_requirements": {"memory_gb": mem, "cpu": 8}}


def test_stub_policy_raw_30():
    svc = RefinementService()
    svc.register_handler("cpp_build", StubModel())
    r = svc.refine(req())
    assert r.refined_requirements.memory_gb == pytest.approx(36) and not r.fallback
    assert r.handler == "cpp_build" and r.model_version == "stub-1"


def test_unknown_kind_passthrough():
    r = RefinementService().refine(req(kind="rust_build"))
    assert r.refined_requirements.memory_gb == 300 and r.fallback
    assert r.decision["strategy"] == "passthrough"


@pytest.mark.parametrize("model,reason", [
    (StubModel(fail=True), "handler_error:RuntimeError"),
    (StubModel(raw=280, bad=True), "never_increase_violation"),
])
def test_model_failures_degrade(model, reason, tmp_path):
    svc = RefinementService(ServiceConfig(decision_log=str(tmp_path / "d.jsonl")))
    svc.register_handler("cpp_build", model)
    r = svc.refine(req())
    assert r.fallback and r.refined_requirements.memory_gb == 300
    svc.close()
    line = json.loads((tmp_path / "d.jsonl").read_text().splitlines()[0])
    assert line["fallback_reason"] == reason


def test_malformed_numeric_attribute_passthrough(small_ensemble):
    svc = RefinementService()
    svc.register_handler("cpp_build", small_ensemble)
    r = svc.refine(req(jobs="eight"))
    assert r.fallback and r.refined_requirements.memory_gb == 300


def test_deadline_overrun_passthrough():
    svc = RefinementService(ServiceConfig(decision_log=None, deadline_ms=20))
    svc.register_handler("cpp_build", StubModel(delay=0.3))
    t0 = time.perf_counter()
    r = svc.refine(req())
    assert r.fallback and time.perf_counter() - t0 < 0.25
    svc.close()


def test_missing_build_profile_still_predicts(small_ensemble):
    svc = RefinementService()
    svc.register_handler("cpp_build", small_ensemble)
    r = svc.refine(req(branch="main", jobs="8", makeType="Optimized"))
    assert not r.fallback and r.model_version == small_ensemble.version
    assert 0 < r.refined_requirements.memory_gb <= 300


def test_service_matches_offline_decision(small_ensemble, small_split):
    train, test = small_split
    rows = features.engineer(test, history=train)[:30]
    svc = RefinementService(ServiceConfig(decision_log=None, deadline_ms=5000))
    svc.register_handler("cpp_build", small_ensemble)
    for i, (row, rec) in enumerate(zip(rows, test)):
        attrs = features.attributes_from_row(row)
        online = svc.refine(req(f"r{i}", mem=rec.baseline_assigned_gb, **attrs))
        offline = predictor.ensemble_refine(small_ensemble, row, rec.baseline_assigned_gb, f"r{i}")
        assert online.decision == offline.to_dict()


def test_idempotent_responses(small_ensemble):
    svc = RefinementService(ServiceConfig(decision_log=None, deadline_ms=5000))
    svc.register_handler("cpp_build", small_ensemble)
    a, b = (svc.refine(req(branch="main", jobs="16")).model_dump() for _ in range(2))
    a.pop("latency_ms"), b.pop("latency_ms")
    assert a == b


def test_register_corrupt_keeps_old(small_ensemble, tmp_path):
    svc = RefinementService()
    svc.register_handler("cpp_build", small_ensemble)
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "buildmem.ensemble", "trunc')
    with pytest.raises(ArtifactInvalid):
        svc.register_handler("cpp_build", str(bad))
    tampered = small_ensemble.to_dict()
    tampered["submodel_a"]["base_score"] += 99
    tampered["submodel_b"]["base_score"] += 99
    with pytest.raises(ArtifactInvalid):
        svc.register_handler("cpp_build", tampered)
    assert svc.refine(req()).model_version == small_ensemble.version


def test_health_counters():
    svc = RefinementService()
    h = svc.health()
    assert h["handlers"] == [] and h["counters"]["refine_total"] == 0 and h["counters"]["fallback_total"] == 0
    svc.register_handler("cpp_build", StubModel())
    svc.refine(req())
    svc.refine(req(mem=20))  # 36 > 20, clipped to original
    first = svc.health()["counters"]
    svc.refine(req(kind="other"))
    c = svc.health()["counters"]
    assert (c["refine_total"], c["fallback_total"], c["clip_total"]) == (3, 1, 1)
    assert all(c[k] >= first[k] for k in ("refine_total", "fallback_total", "clip_total"))
    assert c["latency_p95_ms"] >= c["latency_p50_ms"] > 0


def test_http_endpoints(small_ensemble, tmp_path):
    path = tmp_path / "m.json"
    predictor.save_envelope(small_ensemble, path)
    log = tmp_path / "log.jsonl"
    svc = RefinementService(ServiceConfig(decision_log=str(log), deadline_ms=5000))
    with TestClient(orchestrator.create_app(svc)) as client:
        assert client.get("/v1/health").json()["handlers"] == []
        r = client.put("/v1/handlers/cpp_build", json={"path": str(path)})
        assert r.status_code == 200 and r.json()["model_version"] == small_ensemble.version
        assert client.put("/v1/handlers/x", json={"path": str(tmp_path / "nope.json")}).status_code == 422
        assert client.put("/v1/handlers/x", json={}).status_code == 400
        r = client.put("/v1/handlers/clf", json={"envelope": small_ensemble.to_dict()})
        assert r.status_code == 200
        ok = client.post("/v1/refine", json=req(branch="main", jobs=8))
        assert ok.status_code == 200 and ok.json()["model_version"] == small_ensemble.version
        assert client.post("/v1/refine", content=b"{nope").status_code == 400
        assert client.post("/v1/refine", json=[1, 2]).status_code == 400
        assert client.post("/v1/refine", json=req(task_id="")).status_code == 400
        assert client.post("/v1/refine", json=req(mem=0)).status_code == 400
        assert client.post("/v1/refine", json=req(kind="unknown")).json()["fallback"] is True
        total = client.get("/v1/health").json()["counters"]["refine_total"]
    lines = log.read_text().splitlines()
    assert len(lines) == total == 2
    for line in lines:
        d = json.loads(line)
        assert d["response"]["refined_requirements"]["memory_gb"] <= d["request"]["original_requirements"]["memory_gb"]
        assert d["response"]["fallback"] == (d["response"]["decision"]["strategy"] == "passthrough")


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def live_server(tmp_path):
    svc = RefinementService(ServiceConfig(decision_log=str(tmp_path / "live.jsonl"), deadline_ms=2000, workers=8))
    port = _free_port()
    server = uvicorn.Server(uvicorn.Config(orchestrator.create_app(svc), host="127.0.0.1", port=port,
                                           log_level="error"))
    th = threading.Thread(target=server.run, daemon=True)
    th.start()
    deadline = time.time() + 10
    while not server.started and time.time() < deadline:
        time.sleep(0.02)
    yield svc, f"http://127.0.0.1:{port}", tmp_path / "live.jsonl"
    server.should_exit = True
    th.join(10)


def test_stress_swaps_zero_failures(live_server, small_ensemble, small_classifier):
    svc, url, log = live_server
    svc.register_handler("cpp_build", small_ensemble)
    versions = {small_ensemble.version, small_classifier.version}
    envelopes = [small_classifier.to_dict(), small_ensemble.to_dict()]
    stop = threading.Event()
    swaps = []

    def swapper():
        with httpx.Client(base_url=url, timeout=30) as c:
            while not stop.is_set():
                r = c.put("/v1/handlers/cpp_build", json={"envelope": envelopes[len(swaps) % 2]})
                swaps.append(r.status_code)

    def worker(ids):
        out = []
        with httpx.Client(base_url=url, timeout=30) as c:
            for i in ids:
                r = c.post("/v1/refine", json=req(f"s{i}", mem=64 + i % 200, branch="main", jobs=str(i % 32)))
                out.append((r.status_code, r.json()))
        return out

    th = threading.Thread(target=swapper)
    th.start()
    with ThreadPoolExecutor(8) as ex:
        results = [x for chunk in ex.map(worker, [range(k, 1000, 8) for k in range(8)]) for x in chunk]
    stop.set()
    th.join()
    assert len(results) == 1000
    assert sum(code != 200 for code, _ in results) == 0
    assert len(swaps) > 1 and set(swaps) == {200}
    assert all(body["model_version"] in versions for _, body in results)
    assert all(body["refined_requirements"]["memory_gb"] <= body["decision"]["original_gb"] for _, body in results)
    assert svc.health()["counters"]["refine_total"] == 1000
    svc._log._fh.flush()
    assert len(log.read_text().splitlines()) == 1000


def test_load_config_layers(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"serve": {"port": 9000, "deadline_ms": 50, "host": "0.0.0.0"}}))
    env = {"BUILDMEM_PORT": "9100", "BUILDMEM_MODELS": "cpp_build=/a.json,other=/b.json"}
    c = orchestrator.load_config(cfg, env, deadline_ms=75)
    assert (c.host, c.port, c.deadline_ms) == ("0.0.0.0", 9100, 75)
    assert c.models == {"cpp_build": "/a.json", "other": "/b.json"}
    with pytest.raises(ValueError):
        ServiceConfig(fsync="sometimes")
    with pytest.raises(ValueError):
        ServiceConfig(deadline_ms=0)


@pytest.mark.parametrize("policy", ["never", "always", "close"])
def test_decision_log_policies(policy, tmp_path):
    p = tmp_path / f"{policy}.jsonl"
    svc = RefinementService(ServiceConfig(decision_log=str(p), fsync=policy))
    for i in range(3):
        svc.refine(req(f"x{i}"))
    svc.close()
    assert len(p.read_text().splitlines()) == 3

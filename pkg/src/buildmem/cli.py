"""``buildmem`` command line: file-to-file steps from raw traces to reports.

Settings resolve as flags > ``BUILDMEM_*`` environment > ``--config`` JSON
file (top level or a section named after the subcommand) > defaults.
Every subcommand writes ``<command>.manifest.json`` into ``--out-dir``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from datetime import datetime, timezone

from . import __version__
from . import evaluate, features, hpo, predictor, sim, synthetic, trace
from .errors import BuildMemError

log = logging.getLogger("buildmem")

DEFAULTS = {
    "seed": 0,
    "out_dir": ".",
    "log_level": "INFO",
    "train_fraction": 0.6,
    "split_mode": "chronological",
    "n_trials": 20,
    "c": hpo.DEFAULT_C,
    "sampler": "random",
    "strategy": "ensemble",
    "threshold_gb": predictor.DEFAULT_THRESHOLD_GB,
    "hinge_epochs": 20,
    "host": "127.0.0.1",
    "port": 8080,
    "deadline_ms": 100.0,
    "fsync": "close",
    "oom_fraction": sim.DEFAULT_OOM_FRACTION,
    "policy": "compare",
    "n": 6000,
}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Settings:
    """Layered lookup; see the module docstring for precedence."""

    def __init__(self, args, env=None):
        self.args = args
        self.env = os.environ if env is None else env
        self.file = {}
        if getattr(args, "config", None):
            with open(args.config, encoding="utf-8") as fh:
                self.file = json.load(fh)

    def get(self, name, default=None):
        v = getattr(self.args, name, None)
        if v is not None:
            return v
        key = "BUILDMEM_" + name.upper()
        if key in self.env:
            return self._cast(self.env[key], DEFAULTS.get(name, default))
        section = self.file.get(self.args.command, {})
        if isinstance(section, dict) and name in section:
            return section[name]
        if name in self.file:
            return self.file[name]
        return DEFAULTS.get(name, default)

    @staticmethod
    def _cast(raw, like):
        if isinstance(like, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if like is None:
            # no default to infer a type from
            for cast in (int, float):
                try:
                    return cast(raw)
                except ValueError:
                    pass
        return raw

    def resolved(self, names) -> dict:
        return {n: self.get(n) for n in names}


class Run:
    """Collects inputs/outputs and writes the manifest for one subcommand."""

    def __init__(self, command, settings: Settings, resolved: dict):
        self.command = command
        self.settings = settings
        self.resolved = resolved
        self.out_dir = settings.get("out_dir")
        os.makedirs(self.out_dir, exist_ok=True)
        self.inputs: dict = {}
        self.outputs: dict = {}
        self.t0 = time.perf_counter()
        self.started = datetime.now(timezone.utc).isoformat()

    def path(self, name) -> str:
        return os.path.join(self.out_dir, name)

    def input(self, path):
        if path:
            self.inputs[str(path)] = sha256_file(path)
        return path

    def output(self, path):
        self.outputs[str(path)] = None
        return path

    def finish(self, summary: dict | None = None) -> dict:
        for p in self.outputs:
            if not os.path.exists(p):
                raise BuildMemError(f"declared output {p} was not written")
            self.outputs[p] = sha256_file(p)
        config_blob = json.dumps(self.resolved, sort_keys=True, default=str).encode()
        manifest = {
            "command": self.command,
            "config_hash": hashlib.sha256(config_blob).hexdigest(),
            "config": self.resolved,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seed": self.settings.get("seed"),
            "tool_version": __version__,
            "started_at": self.started,
            "wall_time_s": time.perf_counter() - self.t0,
            "summary": summary or {},
        }
        mpath = self.path(f"{self.command}.manifest.json")
        manifest["reproduction"] = _is_reproduction(mpath, manifest)
        with open(mpath, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True, default=str)
            fh.write("\n")
        return manifest


def _is_reproduction(path, manifest) -> bool:
    try:
        with open(path, encoding="utf-8") as fh:
            old = json.load(fh)
    except (OSError, ValueError):
        return False
    return all(old.get(k) == manifest[k] for k in ("config_hash", "inputs", "outputs"))


def _load_dataset(path) -> trace.TraceDataset:
    return trace.read_traces([path])


def _engineer_kwargs(feature_config: dict) -> dict:
    return {
        "rules": feature_config["rules"],
        "group_key": tuple(feature_config["group_key"]),
        "window": int(feature_config["window"]),
    }


def _iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).isoformat()


# subcommands ---------------------------------------------------------------

def cmd_synth(args, st: Settings):
    res = st.resolved(["n", "seed"])
    run = Run("synth", st, res)
    out = run.output(args.output or run.path("sample.csv"))
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(synthetic.generate_csv(res["n"], res["seed"]))
    return run, {"rows": res["n"], "path": out}


def cmd_ingest(args, st: Settings):
    res = {"traces": args.traces, "schema": args.schema, "delimiter": args.delimiter}
    run = Run("ingest", st, res)
    schema = None
    if args.schema:
        with open(run.input(args.schema), encoding="utf-8") as fh:
            schema = json.load(fh)
    for p in args.traces:
        run.input(p)
    ds = trace.read_traces(args.traces, schema, delimiter=args.delimiter)
    out = run.output(args.output or run.path("dataset.csv"))
    trace.write_csv(ds, out)
    summary_path = run.output(run.path("parse_summary.json"))
    summary = ds.summary.to_dict()
    summary["baseline_stats"] = trace.baseline_stats(ds)
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return run, {"rows": len(ds), "dataset": out, "dataset_sha256": sha256_file(out),
                 "dropped": summary["reasons"]}


def cmd_split(args, st: Settings):
    res = st.resolved(["train_fraction", "split_mode", "seed"])
    run = Run("split", st, res)
    ds = _load_dataset(run.input(args.dataset))
    spec = trace.SplitSpec(res["train_fraction"], res["split_mode"], res["seed"])
    train, test = trace.split(ds, spec)
    tr, te = run.output(run.path("train.csv")), run.output(run.path("test.csv"))
    trace.write_csv(train, tr)
    trace.write_csv(test, te)
    return run, {"train_rows": len(train), "test_rows": len(test), "total": len(ds)}


def cmd_tune(args, st: Settings):
    res = st.resolved(["n_trials", "c", "sampler", "seed"])
    res["space"] = args.space
    res["deficit"] = bool(args.deficit)
    run = Run("tune", st, res)
    train = _load_dataset(run.input(args.train))
    space_d = {}
    if args.space:
        with open(run.input(args.space), encoding="utf-8") as fh:
            space_d = json.load(fh)
    space_d.update({"n_trials": res["n_trials"], "seed": res["seed"], "sampler": res["sampler"]})
    space = hpo.SearchSpace.from_dict(space_d)
    matrix, _, _ = features.featurize(train, "ensemble_table1")
    log_path = run.output(run.path("trials.jsonl"))
    best, trials = hpo.search(matrix, space, c=res["c"], log_path=log_path, deficit=res["deficit"])
    best_path = run.output(run.path("best_params.json"))
    with open(best_path, "w", encoding="utf-8") as fh:
        json.dump(hpo.best_params_artifact(best), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return run, {
        "n_trials": len(trials),
        "failed": sum(t.status != "ok" for t in trials),
        "best_trial": best.trial_id,
        "best_cost": best.cost,
        "trial_wall_time_s": [t.wall_time for t in trials],
    }


def cmd_train(args, st: Settings):
    res = st.resolved(["strategy", "seed", "threshold_gb", "hinge_epochs"])
    res["params"] = args.params
    res["safety_factor"] = st.get("safety_factor")
    run = Run("train", st, res)
    train = _load_dataset(run.input(args.train))
    fc = predictor.default_feature_config()
    cutoff = _iso(max(train.times()))
    meta = {
        "train_time": cutoff,  # data cutoff, keeps envelopes reproducible
        "train_file_sha256": sha256_file(args.train),
        "train_rows": len(train),
        "seed": res["seed"],
    }
    if res["strategy"] == "ensemble":
        matrix, enc, rows = features.featurize(train, "ensemble_table1", **_engineer_kwargs(fc))
        if args.params:
            with open(run.input(args.params), encoding="utf-8") as fh:
                pa, pb = hpo.params_from_artifact(json.load(fh))
        else:
            pa = replace(predictor.DEFAULT_PARAMS_A, seed=res["seed"])
            pb = replace(predictor.DEFAULT_PARAMS_B, seed=res["seed"] + 1)
        model = predictor.train_ensemble(
            matrix, pa, pb, enc,
            safety_factor=res["safety_factor"] or predictor.ENSEMBLE_SAFETY,
            feature_config=fc, training_meta=meta, smoke_row=rows[-1],
            model_metadata={"train_time": cutoff},
        )
    elif res["strategy"] == "classifier":
        matrix, enc, rows = features.featurize(train, "classifier_table1", **_engineer_kwargs(fc))
        model = predictor.train_classifier(
            matrix, enc, res["threshold_gb"], res["hinge_epochs"], res["seed"],
            safety_factor=res["safety_factor"] or predictor.CLASSIFIER_SAFETY,
            feature_config=fc, training_meta=meta, smoke_row=rows[-1],
        )
    else:
        raise BuildMemError(f"unknown strategy {res['strategy']!r}")
    out = run.output(args.output or run.path("model.json"))
    predictor.save_envelope(model, out)
    return run, {"strategy": model.strategy, "model_version": model.version, "model": out}


def eval_decisions(model, test, history=None, clip=True):
    """Engineered rows and refinement decisions for every test record."""
    rows = features.engineer(test, history, **_engineer_kwargs(model.feature_config))
    originals = [r.baseline_assigned_gb for r in test.records]
    ids = [f"row-{i}" for i in range(len(rows))]
    if model.strategy == "ensemble":
        decisions = model.refine_rows(rows, originals, ids, clip=clip)
    else:
        decisions = model.refine_rows(rows, originals, ids)
    return rows, decisions


def cmd_eval(args, st: Settings):
    res = {"model": args.model, "test": args.test, "history": args.history, "unclipped": bool(args.unclipped)}
    run = Run("eval", st, res)
    model = predictor.load_envelope(run.input(args.model))
    test = _load_dataset(run.input(args.test))
    history = _load_dataset(run.input(args.history)) if args.history else None
    _, decisions = eval_decisions(model, test, history, clip=not args.unclipped)
    dec_path = run.output(run.path("decisions.jsonl"))
    with open(dec_path, "w", encoding="utf-8") as fh:
        for d in decisions:
            fh.write(json.dumps(d.to_dict(), separators=(",", ":")) + "\n")
    report = evaluate.evaluate_strategy(
        test, decisions, safety_factor=model.safety_factor, strategy=model.strategy,
        mode="unclipped" if args.unclipped else "clipped",
    )
    report["model_version"] = model.version
    rep_path = run.output(run.path("report.json"))
    evaluate.save_report(report, rep_path)
    for p in evaluate.emit_plot_data(report, run.path("plots")):
        run.output(p)
    table = evaluate.format_table(report)
    if not args.json:
        print(table)
    return run, {"model_version": model.version, "records": len(decisions),
                 "shares": {k: v["shares"] for k, v in report["strategies"].items()}}


def cmd_serve(args, st: Settings):
    from . import orchestrator

    models = dict(m.split("=", 1) if "=" in m else ("cpp_build", m) for m in (args.model or []))
    res = st.resolved(["host", "port", "deadline_ms", "fsync"])
    cfg = orchestrator.load_config(
        args.config, models=models or None, decision_log=args.decision_log,
        **{k: getattr(args, k) for k in ("host", "port", "deadline_ms", "fsync")},
    )
    res.update(asdict(cfg))
    run = Run("serve", st, res)
    for p in cfg.models.values():
        run.input(p)
    if cfg.decision_log:
        run.output(cfg.decision_log)
    orchestrator.serve(cfg)
    if cfg.decision_log and not os.path.exists(cfg.decision_log):
        open(cfg.decision_log, "a").close()
    return run, {"models": cfg.models}


def cmd_simulate(args, st: Settings):
    scenario = {}
    if args.scenario:
        with open(args.scenario, encoding="utf-8") as fh:
            scenario = json.load(fh)
    res = st.resolved(["seed", "oom_fraction", "policy"])
    for k in ("seed", "oom_fraction", "policy"):
        if getattr(args, k, None) is None and k in scenario:
            res[k] = scenario[k]
    res.update({"scenario": scenario, "oracle": bool(args.oracle)})
    run = Run("simulate", st, res)
    if args.scenario:
        run.input(args.scenario)
    ds = _load_dataset(run.input(args.dataset))
    dist = scenario.get("duration_distribution", {})
    decisions = None
    if args.oracle:
        sf = predictor.ENSEMBLE_SAFETY
        decisions = [predictor.RefinementDecision(
            f"row-{i}", r.baseline_assigned_gb, r.max_rss_gb, r.max_rss_gb * sf,
            max(r.max_rss_gb * sf, predictor.FLOOR_GB), False, "oracle", "oracle")
            for i, r in enumerate(ds.records)]
    elif args.model:
        model = predictor.load_envelope(run.input(args.model))
        history = _load_dataset(run.input(args.history)) if args.history else None
        _, decisions = eval_decisions(model, ds, history)
    tasks, synthetic_d = sim.tasks_from_records(
        ds.records, decisions, seed=res["seed"],
        median_s=dist.get("median_s", 1800.0), sigma=dist.get("sigma", 0.5),
    )
    nodes = sim.fleet_from_scenario(scenario, tasks)
    of = res["oom_fraction"]
    out: dict = {"n_nodes": len(nodes), "synthetic_durations": synthetic_d, "oom_fraction": of}
    results = {}
    if res["policy"] == "compare":
        cmp = sim.compare(tasks, nodes, of)
        results = {"baseline": cmp["baseline"], "refined": cmp["refined"]}
        out["delta"] = cmp["delta"]
    else:
        results = {res["policy"]: sim.run(tasks, nodes, res["policy"], of)}
    events = {}
    for name, r in results.items():
        out[name] = r.to_dict()
        p = run.output(run.path(f"events_{name}.csv"))
        events[name] = sim.write_events(r, p)
    out["event_counts"] = events
    res_path = run.output(run.path("sim_result.json"))
    with open(res_path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=1)
        fh.write("\n")
    return run, {"n_nodes": len(nodes), "event_counts": events, "synthetic_durations": synthetic_d,
                 **({"delta": out["delta"]} if "delta" in out else {}),
                 "aggregates": {k: v.aggregates for k, v in results.items()}}


def cmd_report(args, st: Settings):
    res = {"report": args.report, "dataset": args.dataset}
    run = Run("report", st, res)
    summary = {}
    if args.report:
        with open(run.input(args.report), encoding="utf-8") as fh:
            report = json.load(fh)
        text = evaluate.format_table(report)
        p = run.output(run.path("report_table.txt"))
        with open(p, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        for q in evaluate.emit_plot_data(report, run.path("plots")):
            run.output(q)
        if not args.json:
            print(text)
        summary["table"] = text
    if args.dataset:
        stats = trace.baseline_stats(_load_dataset(run.input(args.dataset)))
        p = run.output(run.path("baseline_stats.json"))
        with open(p, "w", encoding="utf-8") as fh:
            json.dump(stats, fh, indent=1, sort_keys=True)
            fh.write("\n")
        summary["baseline_stats"] = stats
        if not args.json:
            print(json.dumps(stats, indent=1, sort_keys=True))
    if not (args.report or args.dataset):
        raise BuildMemError("report needs --report and/or --dataset")
    return run, summary


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "split": cmd_split, "tune": cmd_tune,
    "train": cmd_train, "eval": cmd_eval, "serve": cmd_serve, "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset copy from clobbering a global flag
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--log-level", dest="log_level")
    common.add_argument("--json", action="store_true", help="machine-readable summary on stdout")

    p = argparse.ArgumentParser(prog="buildmem", parents=[common],
                                description="Memory-requirement refinement for build jobs.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a seeded synthetic trace")
    s.add_argument("--n", type=int)
    s.add_argument("-o", "--output")

    s = sub.add_parser("ingest", parents=[common], help="parse raw trace exports into a dataset")
    s.add_argument("traces", nargs="+")
    s.add_argument("--schema", help="JSON map of logical field -> column header")
    s.add_argument("--delimiter", default=",")
    s.add_argument("-o", "--output")

    s = sub.add_parser("split", parents=[common], help="train/test split")
    s.add_argument("dataset")
    s.add_argument("--train-fraction", dest="train_fraction", type=float)
    s.add_argument("--mode", dest="split_mode", choices=("chronological", "seeded_random"))

    s = sub.add_parser("tune", parents=[common], help="joint hyperparameter search")
    s.add_argument("train")
    s.add_argument("--space", help="JSON search-space file")
    s.add_argument("--n-trials", dest="n_trials", type=int)
    s.add_argument("--c", type=float, help="under-allocation weight (default 3)")
    s.add_argument("--sampler", choices=("random", "tpe_lite"))
    s.add_argument("--deficit", action="store_true", help="weight by GB deficit instead of count")

    s = sub.add_parser("train", parents=[common], help="train a model envelope")
    s.add_argument("train")
    s.add_argument("--strategy", choices=("ensemble", "classifier"))
    s.add_argument("--params", help="best_params.json from tune")
    s.add_argument("--threshold-gb", dest="threshold_gb", type=float)
    s.add_argument("--hinge-epochs", dest="hinge_epochs", type=int)
    s.add_argument("--safety-factor", dest="safety_factor", type=float)
    s.add_argument("-o", "--output")

    s = sub.add_parser("eval", parents=[common], help="refine held-out rows and report")
    s.add_argument("model")
    s.add_argument("test")
    s.add_argument("--history", help="earlier builds (the training split) for lag features")
    s.add_argument("--unclipped", action="store_true", help="do not clip at the baseline (analysis only)")

    s = sub.add_parser("serve", parents=[common], help="run the refinement service")
    s.add_argument("--model", action="append", help="[task_kind=]envelope.json (repeatable)")
    s.add_argument("--host")
    s.add_argument("--port", type=int)
    s.add_argument("--deadline-ms", dest="deadline_ms", type=float)
    s.add_argument("--decision-log", dest="decision_log")
    s.add_argument("--fsync", choices=("never", "always", "close"))

    s = sub.add_parser("simulate", parents=[common], help="replay a trace on a simulated fleet")
    s.add_argument("dataset")
    s.add_argument("--model")
    s.add_argument("--history")
    s.add_argument("--scenario", help="JSON {nodes, oom_fraction, policy, seed}")
    s.add_argument("--policy", choices=("baseline", "refined", "compare"))
    s.add_argument("--oom-fraction", dest="oom_fraction", type=float)
    s.add_argument("--oracle", action="store_true", help="refine with true peak x 1.2")

    s = sub.add_parser("report", parents=[common], help="render tables and plot data")
    s.add_argument("--report", help="report.json from eval")
    s.add_argument("--dataset", help="dataset for baseline statistics")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("config", "seed", "out_dir", "log_level"):
        setattr(args, name, getattr(args, name, None))
    args.json = getattr(args, "json", False)
    try:
        st = Settings(args)
        logging.basicConfig(level=str(st.get("log_level")).upper(), format="%(levelname)s %(name)s: %(message)s")
        run, summary = COMMANDS[args.command](args, st)
        manifest = run.finish(summary)
    except (BuildMemError, OSError, ValueError) as e:
        msg = f"{type(e).__name__}: {e}"
        if getattr(args, "json", False):
            print(json.dumps({"ok": False, "error": msg}))
        else:
            print(f"buildmem {args.command}: {msg}", file=sys.stderr)
        return 2
    if args.json:
        print(json.dumps({"ok": True, "command": args.command, "summary": summary,
                          "outputs": manifest["outputs"]}, default=str))
    else:
        log.info("%s: wrote %d output(s), manifest in %s", args.command, len(manifest["outputs"]), run.out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())

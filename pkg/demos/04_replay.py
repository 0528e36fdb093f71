"""
Replay the held-out builds on a simulated fleet
===============================================

Same tasks, same nodes, two policies. Under-allocated refined tasks get killed
70% of the way in, retried once at the refined value and finally at the
baseline.
"""
from buildmem import cli, evaluate, features, predictor, sim, synthetic, trace

ds = synthetic.sample_dataset()
train, test = trace.split(ds)
m, enc, rows = features.featurize(train)
ens = predictor.train_ensemble(m, encoder=enc, smoke_row=rows[-1])
_, decisions = cli.eval_decisions(ens, test, train)

tasks, synthetic_durations = sim.tasks_from_records(test.records, decisions, seed=0)
nodes = sim.synthesize_fleet(tasks)
print(f"{len(tasks)} tasks on {len(nodes)} nodes, synthetic durations: {synthetic_durations}")

out = sim.compare(tasks, nodes)
for name in ("baseline", "refined"):
    a = out[name].aggregates
    print(f"{name:>8}: oom events {a['oom_events']:4d}  mean wait {a['mean_wait_s']:8.1f}s  "
          f"GB*h {a['assigned_gbh']:12.0f}")
offline = evaluate.savings_summary(decisions, test.records)["mean_gb"]
print(f"mean savings: offline {offline:.2f} GB, replayed {out['delta']['realized_mean_savings_gb']:.2f} GB")

# a task rescued by the final restart at its baseline
retried = [t for t in out["refined"].tasks if t["attempts"] == 3 and t["final_state"] == "finished"]
if retried:
    t = retried[0]
    print(t["task_id"], t["assigned_history"], t["final_state"])

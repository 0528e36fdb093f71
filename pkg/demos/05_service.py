"""
The refinement service, in process
==================================

Registers a model for the ``cpp_build`` kind, refines a few requests, swaps
the model and shows the counters. ``buildmem serve`` runs the same service
over HTTP.
"""
from buildmem import features, predictor, synthetic, trace
from buildmem.orchestrator import RefinementService

train, test = trace.split(synthetic.sample_dataset(n=2000))
m, enc, rows = features.featurize(train)
ens = predictor.train_ensemble(m, encoder=enc, smoke_row=rows[-1])
mc, encc, rowsc = features.featurize(train, "classifier_table1")
clf = predictor.train_classifier(mc, encc, smoke_row=rowsc[-1])

svc = RefinementService()
svc.register_handler("cpp_build", ens)

test_rows = features.engineer(test, history=train)
for i in range(5):
    resp = svc.refine({
        "task_id": f"job-{i}",
        "task_kind": "cpp_build",
        "attributes": features.attributes_from_row(test_rows[i]),
        "original_requirements": {"memory_gb": test[i].baseline_assigned_gb},
    })
    print(f"{resp.task_id}: {test[i].baseline_assigned_gb:6.1f} -> {resp.refined_requirements.memory_gb:6.1f} GB "
          f"(true peak {test[i].max_rss_gb:5.1f})")

# unknown kinds pass through untouched
print(svc.refine({"task_id": "x", "task_kind": "docs", "original_requirements": {"memory_gb": 16}}).fallback)

svc.register_handler("cpp_build", clf)
print(svc.health())
svc.close()

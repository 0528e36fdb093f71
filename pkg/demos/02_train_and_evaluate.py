"""
Train the quantile ensemble and the threshold classifier
========================================================

60/40 chronological split, both strategies refined on the held-out part and
compared with the baseline.
"""
import time

from buildmem import cli, evaluate, features, gbqr, predictor, synthetic, trace

ds = synthetic.sample_dataset()
train, test = trace.split(ds)

t0 = time.perf_counter()
m, enc, rows = features.featurize(train, "ensemble_table1")
ens = predictor.train_ensemble(m, encoder=enc, smoke_row=rows[-1])
print(f"ensemble: {len(ens.submodel_a.trees)} + {len(ens.submodel_b.trees)} trees, "
      f"{time.perf_counter() - t0:.1f}s")

mc, encc, rowsc = features.featurize(train, "classifier_table1")
clf = predictor.train_classifier(mc, encc, smoke_row=rowsc[-1])
print(f"classifier: train accuracy {clf.training_meta['train_accuracy']:.3f}, "
      f"fpr {clf.training_meta['false_positive_rate']:.3f}")

for model in (ens, clf):
    _, decisions = cli.eval_decisions(model, test, train)
    report = evaluate.evaluate_strategy(test, decisions, safety_factor=model.safety_factor)
    print()
    print(evaluate.format_table(report))

# which raw columns drive the splits
imp = gbqr.importance(ens.submodel_a)
print()
for name, gain, count in imp.top(10):
    print(f"{name:<40} {gain:12.1f} {count:5d}")

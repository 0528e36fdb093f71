"""
Joint hyperparameter search
===========================

A few random trials over both submodels at once, scored on the last 20% of
the training split. The trial cost counts under-allocations three times
over plus the total-allocation ratio.
"""
from buildmem import features, hpo, synthetic, trace

train, _ = trace.split(synthetic.sample_dataset(n=2000))
m, _, _ = features.featurize(train)

# shrink the tree-count range so the demo finishes quickly
space = hpo.SearchSpace(
    space_a=dict(hpo.DEFAULT_SPACE_A, n_trees=("int", 20, 80)),
    space_b=dict(hpo.DEFAULT_SPACE_B, n_trees=("int", 20, 80)),
    n_trials=6, seed=0,
)
best, trials = hpo.search(m, space)
for t in trials:
    flag = "*" if t is best else " "
    print(f"{flag} trial {t.trial_id}: cost {t.cost:8.3f}  under {t.underalloc_count:3.0f}  "
          f"ratio {t.alloc_ratio:.3f}  {t.wall_time:.1f}s")
print(hpo.best_params_artifact(best)["params_a"])

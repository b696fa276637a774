"""Small seeded problem instances shared across test modules."""

import numpy as np

from bihpo.data import Dataset, SplitPlan, gen_linear, gen_multiclass, make_splits
from bihpo.problems import ModelSpec, build_problem


def zoo_instance(kind, seed=11):
    """Small seeded (problem, train, val) triple for any zoo model."""
    if kind in ("ridge", "lasso_smooth", "elastic_net", "ridge_per_param"):
        ds, _ = gen_linear(24, 4, 0.3, seed=seed, beta_seed=1)
    elif kind in ("logistic_l2", "svm_sqhinge"):
        raw, _ = gen_multiclass(24, 4, 2, 0.4, seed=seed, beta_seed=2)
        ds = Dataset(X=raw.X, y=2.0 * raw.y - 1.0, task="binary")
    else:
        n = 16 if kind == "hyperclean_softmax" else 30
        ds, _ = gen_multiclass(n, 3, 3, 0.4, seed=seed, beta_seed=3)
    split = make_splits(ds.n, SplitPlan(U=1, gamma=0.25, master_seed=9))[0]
    n_weights = len(split.train_idx) if kind == "hyperclean_softmax" else 0
    spec = ModelSpec(kind=kind, smoothing_delta=1e-3, num_classes=ds.num_classes,
                     n_weights=n_weights)
    return build_problem(spec, ds.d), split.train_view(ds), split.val_view(ds)


def zoo_lambda(problem, scale=0.3, seed=21):
    """A mild random raw hyper vector sized for the problem."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return scale * rng.standard_normal(problem.hyper_dim)

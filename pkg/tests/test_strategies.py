"""Outer-loop strategies: optimizers, ensemble averaging, online updates."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from bihpo.data import SplitPlan, full_view, gen_linear, make_splits
from bihpo.errors import ContractViolationError
from bihpo.hypergrad import HypergradMethod, estimate_hypergrad
from bihpo.problems import MODEL_KINDS, ModelSpec, build_problem
from bihpo.strategies import (
    OuterOptimizer,
    oehg_split_hypergrad,
    optimizer_step,
    run_ehg,
    run_oehg,
    run_single,
)
from helpers import zoo_instance, zoo_lambda

ITD25 = HypergradMethod(kind="ITD", K=25, alpha_in=0.08)


def ridge_setup(n=40, d=3, U=1, seed=17):
    ds, _ = gen_linear(n, d, 0.3, seed=seed, beta_seed=2)
    splits = make_splits(n, SplitPlan(U=U, gamma=0.25, master_seed=3))
    return build_problem(ModelSpec(kind="ridge"), d), ds, splits


# ---------------------------------------------------------------------------
# outer optimizers

def test_gd_step_hand_value():
    opt = OuterOptimizer(kind="gd", alpha_out=0.1)
    assert_allclose(optimizer_step(opt, np.array([1.0]), np.array([2.0])), [0.8])


def test_adam_first_step_is_sign_scaled():
    opt = OuterOptimizer(kind="adam", alpha_out=0.01)
    lam = np.array([0.5, -1.0])
    new = optimizer_step(opt, lam, np.array([3.0, -0.5]))
    assert_allclose(new, lam - 0.01 * np.array([1.0, -1.0]), atol=1e-6)


@pytest.mark.parametrize("kind", ["gd", "adam"])
def test_zero_gradient_leaves_lambda_unchanged(kind):
    opt = OuterOptimizer(kind=kind, alpha_out=0.3)
    lam = np.array([0.4, -0.7])
    assert_array_equal(optimizer_step(opt, lam, np.zeros(2)), lam)


def test_gd_is_linear_in_the_gradient():
    opt = OuterOptimizer(kind="gd", alpha_out=0.25)
    lam = np.zeros(3)
    g = np.array([1.0, -2.0, 0.5])
    d1 = lam - optimizer_step(opt, lam, g)
    d2 = lam - optimizer_step(opt, lam, 2.0 * g)
    assert_allclose(d2, 2.0 * d1)


def test_adam_reset_restores_determinism():
    opt = OuterOptimizer(kind="adam", alpha_out=0.05)
    lam = np.array([1.0])
    seq = [np.array([g]) for g in (0.5, -0.2, 0.9)]
    first = [lam := optimizer_step(opt, lam, g) for g in seq][-1].copy()
    opt.reset()
    lam = np.array([1.0])
    second = [lam := optimizer_step(opt, lam, g) for g in seq][-1]
    assert_array_equal(first, second)


def test_optimizer_validation():
    with pytest.raises(ContractViolationError):
        OuterOptimizer(kind="rmsprop", alpha_out=0.1)
    with pytest.raises(ContractViolationError):
        OuterOptimizer(kind="gd", alpha_out=0.0)
    with pytest.raises(ContractViolationError):
        optimizer_step(OuterOptimizer(kind="gd", alpha_out=0.1),
                       np.zeros(2), np.zeros(3))


# ---------------------------------------------------------------------------
# single-split runs

def test_run_single_trivial_composition():
    # K = 0 hypergradients are zero, so lambda never moves
    prob, ds, splits = ridge_setup()
    method = HypergradMethod(kind="ITD", K=0, alpha_in=0.1)
    th0 = np.array([0.2, 0.2, 0.2])
    trace = run_single(prob, ds, splits[0], method,
                       OuterOptimizer(kind="gd", alpha_out=0.5), 3,
                       np.array([0.7]), th0)
    assert len(trace.lambdas) == 4
    for lam in trace.lambdas:
        assert_array_equal(lam, [0.7])
    assert_array_equal(trace.final_thetas[0], th0)


def test_run_single_two_steps_match_hand_replication():
    prob, ds, splits = ridge_setup()
    split = splits[0]
    tr, va = split.train_view(ds), split.val_view(ds)
    method = HypergradMethod(kind="ITD", K=1, alpha_in=0.05)
    lam0, th0 = np.array([0.3]), np.zeros(3)
    trace = run_single(prob, ds, split, method,
                       OuterOptimizer(kind="gd", alpha_out=0.4), 2, lam0, th0)

    lam = lam0.copy()
    for _ in range(2):
        g = estimate_hypergrad(prob, lam, th0, tr, va, method).grad
        lam = lam - 0.4 * g
    assert_array_equal(trace.final_lambda, lam)
    assert len(trace.records) == 2
    assert trace.records[1].step == 1


def test_run_rejects_bad_plan():
    prob, ds, splits = ridge_setup()
    opt = OuterOptimizer(kind="gd", alpha_out=0.4)
    with pytest.raises(ContractViolationError):
        run_ehg(prob, ds, splits, ITD25, opt, 0, np.array([0.3]), np.zeros(3))
    with pytest.raises(ContractViolationError):
        run_ehg(prob, ds, [], ITD25, opt, 1, np.array([0.3]), np.zeros(3))
    with pytest.raises(ContractViolationError):
        run_ehg(prob, ds, splits, ITD25, opt, 1, np.array([0.3, 0.1]), np.zeros(3))


# ---------------------------------------------------------------------------
# ensemble averaging

def test_ehg_single_split_equals_run_single():
    prob, ds, splits = ridge_setup()
    args = (ITD25, OuterOptimizer(kind="gd", alpha_out=0.4), 5,
            np.array([0.3]), np.zeros(3))
    a = run_single(prob, ds, splits[0], *args)
    b = run_ehg(prob, ds, splits[:1], ITD25,
                OuterOptimizer(kind="gd", alpha_out=0.4), 5,
                np.array([0.3]), np.zeros(3))
    for x, y in zip(a.lambdas, b.lambdas):
        assert_array_equal(x, y)


@pytest.mark.parametrize("copies", [2, 4])
def test_ehg_duplicated_split_is_bitwise_single(copies):
    # averaging U identical gradients reproduces one gradient exactly for
    # these U (the running sum stays exactly representable)
    prob, ds, splits = ridge_setup()
    opt = lambda: OuterOptimizer(kind="gd", alpha_out=0.4)
    one = run_single(prob, ds, splits[0], ITD25, opt(), 6, np.array([0.3]), np.zeros(3))
    rep = run_ehg(prob, ds, [splits[0]] * copies, ITD25, opt(), 6,
                  np.array([0.3]), np.zeros(3))
    for x, y in zip(one.lambdas, rep.lambdas):
        assert_array_equal(x, y)


def test_ehg_first_update_is_mean_of_split_gradients():
    prob, ds, splits = ridge_setup(U=3)
    lam0, th0 = np.array([0.3]), np.zeros(3)
    trace = run_ehg(prob, ds, splits, ITD25,
                    OuterOptimizer(kind="gd", alpha_out=0.4), 1, lam0, th0)
    grads = [estimate_hypergrad(prob, lam0, th0, s.train_view(ds), s.val_view(ds),
                                ITD25).grad for s in splits]
    gsum = grads[0].copy()
    for g in grads[1:]:
        gsum += g
    assert_array_equal(trace.lambdas[1], lam0 - 0.4 * (gsum / 3))


def test_ehg_is_deterministic():
    prob, ds, splits = ridge_setup(U=4)
    runs = [run_ehg(prob, ds, splits, ITD25,
                    OuterOptimizer(kind="adam", alpha_out=0.1), 5,
                    np.array([0.3]), np.zeros(3)) for _ in range(2)]
    for x, y in zip(runs[0].lambdas, runs[1].lambdas):
        assert_array_equal(x, y)
    for rx, ry in zip(runs[0].records, runs[1].records):
        assert rx.per_split == ry.per_split


def test_ehg_final_thetas_solved_at_final_lambda():
    prob, ds, splits = ridge_setup(U=2)
    trace = run_ehg(prob, ds, splits, ITD25,
                    OuterOptimizer(kind="gd", alpha_out=0.4), 4,
                    np.array([0.3]), np.zeros(3))
    assert len(trace.final_thetas) == 2
    from bihpo.hypergrad import inner_solve
    for s, theta in zip(splits, trace.final_thetas):
        traj = inner_solve(prob, trace.final_lambda, np.zeros(3),
                           s.train_view(ds), ITD25.K, ITD25.alpha_in)
        assert_array_equal(theta, traj.final)


def test_ehg_test_view_populates_trace():
    prob, ds, splits = ridge_setup()
    tv = full_view(ds)
    with_t = run_ehg(prob, ds, splits, ITD25,
                     OuterOptimizer(kind="gd", alpha_out=0.4), 2,
                     np.array([0.3]), np.zeros(3), test_view=tv)
    without = run_ehg(prob, ds, splits, ITD25,
                      OuterOptimizer(kind="gd", alpha_out=0.4), 2,
                      np.array([0.3]), np.zeros(3))
    assert all(np.isfinite(e.test_loss) for r in with_t.records for e in r.per_split)
    assert all(e.test_loss is None for r in without.records for e in r.per_split)


def test_warm_start_changes_later_iterates_but_stays_finite():
    prob, ds, splits = ridge_setup()
    method = HypergradMethod(kind="ITD", K=5, alpha_in=0.08)
    cold = run_single(prob, ds, splits[0], method,
                      OuterOptimizer(kind="gd", alpha_out=0.4), 6,
                      np.array([0.3]), np.zeros(3), warm_start=False)
    warm = run_single(prob, ds, splits[0], method,
                      OuterOptimizer(kind="gd", alpha_out=0.4), 6,
                      np.array([0.3]), np.zeros(3), warm_start=True)
    assert not np.array_equal(cold.final_lambda, warm.final_lambda)
    assert np.all(np.isfinite(warm.final_lambda))
    assert np.all(np.isfinite(warm.final_thetas[0]))


# ---------------------------------------------------------------------------
# online ensemble

@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_oehg_split_hypergrad_is_one_step_itd(kind):
    prob, tr, va = zoo_instance(kind)
    lam = zoo_lambda(prob)
    th0 = np.zeros(prob.param_dim)
    g, theta_prime = oehg_split_hypergrad(prob, lam, th0, tr, va, 0.05)
    ref = estimate_hypergrad(prob, lam, th0, tr, va,
                             HypergradMethod(kind="ITD", K=1, alpha_in=0.05))
    assert_array_equal(g, ref.grad)
    assert_array_equal(theta_prime, ref.inner_final)


def test_oehg_trace_shape_and_deployed_update():
    prob, ds, splits = ridge_setup(U=3)
    th0 = np.zeros(3)
    trace = run_oehg(prob, ds, splits, T=1, alpha_in=0.08,
                     opt=OuterOptimizer(kind="gd", alpha_out=0.3),
                     alpha_deploy=0.08, lam0=np.array([0.3]), theta0=th0)
    assert len(trace.lambdas) == 2
    assert len(trace.final_thetas) == 3
    # deployed model takes one full-data GD step at the freshly updated lambda
    want = th0 - 0.08 * prob.inner_grad_theta(trace.lambdas[1], th0, full_view(ds))
    assert_array_equal(trace.deployed_theta, want)


def test_oehg_lambda_update_uses_mean_of_one_step_grads():
    prob, ds, splits = ridge_setup(U=2)
    lam0, th0 = np.array([0.3]), np.zeros(3)
    trace = run_oehg(prob, ds, splits, T=1, alpha_in=0.08,
                     opt=OuterOptimizer(kind="gd", alpha_out=0.3),
                     alpha_deploy=0.08, lam0=lam0, theta0=th0)
    grads = [oehg_split_hypergrad(prob, lam0, th0, s.train_view(ds),
                                  s.val_view(ds), 0.08)[0] for s in splits]
    gsum = grads[0] + grads[1]
    assert_array_equal(trace.lambdas[1], lam0 - 0.3 * (gsum / 2))


def test_oehg_long_run_beats_the_starting_lambda():
    from bihpo.diagnostics import RidgeOracle
    prob, ds, splits = ridge_setup(U=3, n=80)
    trace = run_oehg(prob, ds, splits, T=400, alpha_in=0.05,
                     opt=OuterOptimizer(kind="adam", alpha_out=0.05),
                     alpha_deploy=0.05, lam0=np.array([2.0]), theta0=np.zeros(3))
    assert len(trace.lambdas) == 401
    final_val = np.mean([e.val_loss for e in trace.records[-1].per_split])
    # fully converged ridge solutions at the starting hyperparameter
    at_start = np.mean([RidgeOracle(s.train_view(ds), s.val_view(ds))
                        .val_loss(np.exp(2.0)) for s in splits])
    assert final_val < 0.5 * at_start
    assert trace.final_lambda[0] < 0.0  # moved well away from lam0 = 2


def test_oehg_validation():
    prob, ds, splits = ridge_setup()
    opt = OuterOptimizer(kind="gd", alpha_out=0.3)
    with pytest.raises(ContractViolationError):
        run_oehg(prob, ds, splits, T=0, alpha_in=0.1, opt=opt,
                 alpha_deploy=0.1, lam0=np.array([0.0]), theta0=np.zeros(3))
    with pytest.raises(ContractViolationError):
        run_oehg(prob, ds, splits, T=1, alpha_in=-0.1, opt=opt,
                 alpha_deploy=0.1, lam0=np.array([0.0]), theta0=np.zeros(3))

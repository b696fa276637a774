"""Closed-form ridge oracle, bias-variance decomposition, variance scaling, FPC."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from bihpo.data import Dataset, SplitPlan, full_view, gen_linear, make_splits
from bihpo.diagnostics import (
    RidgeOracle,
    SweepDesign,
    _ridge_itd_grid,
    _ridge_oracle_grid,
    bias_variance_sweep,
    ensemble_variance_curve,
    fpc_verify,
    fpc_with_replacement,
    fpc_without_replacement,
    ridge_closed_form,
    ridge_curvature,
    ridge_exact_hypergrad,
)
from bihpo.errors import ContractViolationError
from bihpo.hypergrad import HypergradMethod, estimate_hypergrad, inner_solve
from bihpo.problems import ModelSpec, build_problem

DESIGN = SweepDesign(n=60, d=2, noise_sigma=0.5, gamma=0.25)
ITD25 = HypergradMethod(kind="ITD", K=25, alpha_in=0.1)


def tiny_pair():
    """Two-point train set and one-point validation set, both 1-d."""
    tr = full_view(Dataset(X=np.array([[1.0], [1.0]]), y=np.array([1.0, 1.0]),
                           task="regression"))
    va = full_view(Dataset(X=np.array([[1.0]]), y=np.array([0.0]),
                           task="regression"))
    return tr, va


def ridge_views(n=40, d=3, seed=17):
    ds, _ = gen_linear(n, d, 0.3, seed=seed, beta_seed=2)
    split = make_splits(n, SplitPlan(U=1, gamma=0.25, master_seed=3))[0]
    return split.train_view(ds), split.val_view(ds)


# ---------------------------------------------------------------------------
# closed form

def test_closed_form_identity_design_no_regularization():
    view = full_view(Dataset(X=np.eye(2), y=np.array([1.0, 2.0]), task="regression"))
    assert_allclose(ridge_closed_form(view, 0.0), [1.0, 2.0])


def test_closed_form_two_point_hand_value():
    # A = 1, b = 1 after the 1/m normalization, so (1 + 1) theta = 1
    tr, _ = tiny_pair()
    assert_allclose(ridge_closed_form(tr, 1.0), [0.5])


def test_closed_form_is_stationary_point_of_inner_loss():
    tr, _ = ridge_views()
    prob = build_problem(ModelSpec(kind="ridge"), 3)
    for le in (0.1, 1.0, 5.0):
        theta = ridge_closed_form(tr, le)
        g = prob.inner_grad_theta(np.array([math.log(le)]), theta, tr)
        assert np.linalg.norm(g) < 1e-10


def test_oracle_hand_hypergrad_and_unit_conventions():
    # theta_hat(1) = 1/2, dtheta = -1/4, val resid = 1/2:
    # d valMSE / d lambda_eff = 2 * (1/2) * (-1/4) = -1/4 in the mean-normalized
    # convention; conventions that keep the unnormalized sum X^T X + lambda I
    # report the same derivative as -1/8 (divide by m_train = 2).
    tr, va = tiny_pair()
    oracle = RidgeOracle(tr, va)
    assert_allclose(oracle.hypergrad_eff(1.0), -0.25, atol=1e-14)
    assert_allclose(oracle.hypergrad_eff(1.0) / tr.m, -0.125, atol=1e-14)
    assert_allclose(oracle.hypergrad_raw(0.0), -0.25, atol=1e-14)
    assert_allclose(ridge_exact_hypergrad(tr, va, 1.0), -0.25, atol=1e-14)


def test_oracle_raw_coordinate_chain_rule():
    tr, va = ridge_views()
    oracle = RidgeOracle(tr, va)
    for u in (-1.0, 0.0, 0.7):
        assert_allclose(oracle.hypergrad_raw(u),
                        math.exp(u) * oracle.hypergrad_eff(math.exp(u)), rtol=1e-14)


def test_oracle_zero_validation_residual_gives_zero_gradient():
    tr, _ = tiny_pair()
    theta = ridge_closed_form(tr, 1.0)
    va = full_view(Dataset(X=np.array([[1.0]]), y=np.array([theta[0]]),
                           task="regression"))
    assert RidgeOracle(tr, va).hypergrad_eff(1.0) == 0.0


def test_oracle_matches_central_difference_of_val_loss():
    tr, va = ridge_views()
    oracle = RidgeOracle(tr, va)
    eps = 1e-6
    for le in (0.3, 1.0, 2.5):
        fd = (oracle.val_loss(le + eps) - oracle.val_loss(le - eps)) / (2 * eps)
        assert_allclose(oracle.hypergrad_eff(le), fd, rtol=1e-7)


def test_oracle_rejects_negative_regularization():
    tr, va = tiny_pair()
    with pytest.raises(ContractViolationError):
        RidgeOracle(tr, va).theta_hat(-0.5)


def test_curvature_matches_hessian_eigenvalues():
    tr, _ = ridge_views()
    A, _ = tr.gram
    eigs = np.linalg.eigvalsh(A)
    L, mu = ridge_curvature(tr, 0.7)
    assert_allclose(L, 2.0 * (eigs[-1] + 0.7))
    assert_allclose(mu, 2.0 * (eigs[0] + 0.7))
    assert L >= mu > 0


def test_long_inner_solve_reaches_closed_form():
    tr, _ = ridge_views()
    prob = build_problem(ModelSpec(kind="ridge"), 3)
    traj = inner_solve(prob, np.array([0.0]), np.zeros(3), tr, K=2000, alpha_in=0.1)
    assert np.linalg.norm(traj.final - ridge_closed_form(tr, 1.0)) < 1e-8


# ---------------------------------------------------------------------------
# batched ridge grid fast paths agree with the generic engines

def test_itd_grid_fast_path_matches_generic_estimator():
    tr, va = ridge_views()
    prob = build_problem(ModelSpec(kind="ridge"), 3)
    grid = [0.3, 0.9, 1.7, 4.2]
    fast = _ridge_itd_grid(tr, va, grid, K=50, alpha=0.1)
    for le, g in zip(grid, fast):
        method = HypergradMethod(kind="ITD", K=50, alpha_in=0.1)
        ref = estimate_hypergrad(prob, np.array([math.log(le)]), np.zeros(3),
                                 tr, va, method).grad
        assert_allclose(g, ref[0], rtol=1e-12, atol=1e-15)


def test_oracle_grid_fast_path_matches_oracle():
    tr, va = ridge_views()
    grid = [0.3, 0.9, 1.7, 4.2]
    fast = _ridge_oracle_grid(tr, va, grid)
    oracle = RidgeOracle(tr, va)
    for le, g in zip(grid, fast):
        assert_allclose(g, oracle.hypergrad_raw(math.log(le)), rtol=1e-12)


# ---------------------------------------------------------------------------
# bias-variance decomposition

def test_bias_variance_identity_holds_exactly():
    rep = bias_variance_sweep(DESIGN, ITD25, [0.5, 1.0, 2.0], R=6, U=2, seed=3)
    assert rep.R == 6 and rep.U == 2
    for row in rep.rows:
        assert row.identity_residual <= 1e-10
        assert row.variance >= 0.0
        assert row.bias_sq >= 0.0
        assert_allclose(row.error, row.variance + row.bias_sq, atol=1e-10)


def test_oracle_estimator_has_exactly_zero_bias():
    rep = bias_variance_sweep(DESIGN, "oracle", [0.5, 1.0], R=5, U=1, seed=4)
    for row in rep.rows:
        assert row.bias_sq == 0.0
        assert row.error == row.variance


def test_truncation_bias_grows_as_k_shrinks():
    short = bias_variance_sweep(DESIGN, HypergradMethod(kind="ITD", K=3, alpha_in=0.1),
                                [1.0], R=8, U=1, seed=9)
    long = bias_variance_sweep(DESIGN, HypergradMethod(kind="ITD", K=200, alpha_in=0.1),
                               [1.0], R=8, U=1, seed=9)
    assert short.rows[0].bias_sq > 10.0 * long.rows[0].bias_sq


def test_bias_variance_sweep_validation():
    with pytest.raises(ContractViolationError):
        bias_variance_sweep(DESIGN, ITD25, [1.0], R=1, U=1, seed=0)
    with pytest.raises(ContractViolationError):
        bias_variance_sweep(DESIGN, ITD25, [1.0], R=2, U=0, seed=0)
    with pytest.raises(ContractViolationError):
        bias_variance_sweep(DESIGN, ITD25, [-1.0], R=2, U=1, seed=0)


# ---------------------------------------------------------------------------
# variance vs ensemble size

def test_variance_curve_slope_near_minus_one():
    curve = ensemble_variance_curve(DESIGN, ITD25, 1.0, R=150,
                                    U_list=[1, 2, 4, 8], seed=5)
    assert abs(curve.slope + 1.0) < 0.2
    variances = [v for _, v in curve.points]
    assert all(a > b for a, b in zip(variances, variances[1:]))


def test_variance_curve_validation():
    with pytest.raises(ContractViolationError):
        ensemble_variance_curve(DESIGN, ITD25, 1.0, R=1, U_list=[1, 2], seed=0)
    with pytest.raises(ContractViolationError):
        ensemble_variance_curve(DESIGN, ITD25, 1.0, R=5, U_list=[2], seed=0)


# ---------------------------------------------------------------------------
# finite-population correction

def test_fpc_formulas_hand_values():
    assert fpc_without_replacement(15, 15, 3.0) == 0.0
    assert fpc_without_replacement(15, 1, 3.0) == 3.0  # U = 1: plain variance
    assert_allclose(fpc_without_replacement(15, 3, 3.0), 12 * 3.0 / (3 * 14))
    assert fpc_with_replacement(4, 2.0) == 0.5
    assert fpc_without_replacement(1, 1, 7.0) == 0.0


def test_fpc_guards():
    with pytest.raises(ContractViolationError):
        fpc_without_replacement(5, 6, 1.0)
    with pytest.raises(ContractViolationError):
        fpc_without_replacement(5, 0, 1.0)
    with pytest.raises(ContractViolationError):
        fpc_with_replacement(0, 1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 400), st.floats(1e-6, 50.0))
def test_fpc_without_never_exceeds_with(V, sigma_sq):
    for U in {1, 2, V // 2 or 1, V}:
        with_r = fpc_with_replacement(U, sigma_sq)
        assert fpc_without_replacement(V, U, sigma_sq) <= with_r * (1.0 + 1e-12)


def fpc_instance():
    ds, _ = gen_linear(6, 1, 0.5, seed=8, beta_seed=1)
    return ds, build_problem(ModelSpec(kind="ridge"), 1)


def test_fpc_verify_full_population_is_exact_zero():
    ds, prob = fpc_instance()
    rep = fpc_verify(ds, 0.5, U=15, lam_raw=0.0, problem=prob, samples=50, seed=1)
    assert rep.V == 15
    assert rep.mc_estimate == 0.0  # ascending index order reproduces the mean
    assert rep.exact_without == 0.0


def test_fpc_verify_single_split_recovers_population_variance():
    ds, prob = fpc_instance()
    rep = fpc_verify(ds, 0.5, U=1, lam_raw=0.0, problem=prob, samples=10, seed=1)
    assert_allclose(rep.exact_without, rep.sigma_sq, rtol=1e-14)
    assert rep.with_replacement == rep.sigma_sq


def test_fpc_verify_monte_carlo_matches_formula():
    ds, prob = fpc_instance()
    rep = fpc_verify(ds, 0.5, U=3, lam_raw=0.0, problem=prob, samples=4000, seed=2)
    assert rep.exact_without > 0
    assert abs(rep.mc_estimate - rep.exact_without) < 0.05 * rep.exact_without


def test_fpc_verify_needs_method_for_non_ridge():
    ds, _ = fpc_instance()
    prob = build_problem(ModelSpec(kind="lasso_smooth", smoothing_delta=1e-3), 1)
    with pytest.raises(ContractViolationError):
        fpc_verify(ds, 0.5, U=3, lam_raw=0.0, problem=prob, samples=10, seed=0)
    rep = fpc_verify(ds, 0.5, U=3, lam_raw=0.0, problem=prob, samples=10, seed=0,
                     method=HypergradMethod(kind="ITD", K=30, alpha_in=0.1))
    assert np.isfinite(rep.mc_estimate)

"""Hypergradient estimation engines.

inner_solve runs K full-batch gradient steps and records the trajectory.
itd_hypergrad differentiates through the unrolled trajectory by reverse
accumulation with Hessian- and mixed-vector products (no matrices are ever
materialized); trhg_hypergrad truncates the accumulation window;
aid_hypergrad solves the inner-Hessian linear system approximately and
applies the implicit-function-theorem formula. All hypergradients are in raw
hyper coordinates because the problem callbacks already are.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DataView
from .errors import ContractViolationError, NumericalError
from .linalg import LinearOperator, Vec, cg_solve, fixed_point_solve
from .problems import BilevelProblem

METHOD_KINDS = ("ITD", "TRHG", "AID_FP", "AID_CG")


@dataclass(frozen=True)
class InnerTrajectory:
    """theta_0 ... theta_K from K gradient steps at step size alpha_in."""

    thetas: tuple[np.ndarray, ...]
    alpha_in: float

    @property
    def K(self) -> int:
        return len(self.thetas) - 1

    @property
    def final(self) -> np.ndarray:
        return self.thetas[-1]


@dataclass(frozen=True)
class HypergradMethod:
    """Which estimator to run and its budget.

    K: inner gradient steps. Z: linear-solver iterations (AID only).
    h: truncation window, 1 <= h <= K (TRHG only). fp_step: step size of the
    AID fixed-point solver; 0 means reuse alpha_in.
    """

    kind: str
    K: int
    alpha_in: float
    Z: int = 0
    h: int = 0
    fp_step: float = 0.0

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ContractViolationError(f"unknown method kind {self.kind!r}")
        if self.K < 0:
            raise ContractViolationError("K must be >= 0")
        if self.alpha_in <= 0:
            raise ContractViolationError("alpha_in must be > 0")
        if self.kind == "TRHG" and not (1 <= self.h <= self.K):
            raise ContractViolationError("TRHG requires 1 <= h <= K")
        if self.kind in ("AID_FP", "AID_CG") and self.Z < 1:
            raise ContractViolationError("AID requires Z >= 1")


@dataclass(frozen=True)
class HypergradResult:
    """grad in raw hyper coordinates, the final inner iterate, and diagnostics."""

    grad: np.ndarray
    inner_final: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def inner_solve(
    problem: BilevelProblem,
    lam: Vec,
    theta0: Vec,
    train: DataView,
    K: int,
    alpha_in: float,
) -> InnerTrajectory:
    """K steps of theta <- theta - alpha_in * grad inner, trajectory recorded."""
    if alpha_in <= 0:
        raise ContractViolationError("alpha_in must be > 0")
    if K < 0:
        raise ContractViolationError("K must be >= 0")
    theta = np.asarray(theta0, dtype=np.float64).copy()
    thetas = [theta]
    # overflow surfaces as the explicit non-finite check, not a warning
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K):
            g = problem.inner_grad_theta(lam, theta, train)
            if not np.all(np.isfinite(g)):
                raise NumericalError(
                    f"inner gradient became non-finite at step {k}", step_index=k
                )
            theta = theta - alpha_in * g
            thetas.append(theta)
    return InnerTrajectory(thetas=tuple(thetas), alpha_in=alpha_in)


def _traj_diagnostics(traj: InnerTrajectory) -> dict:
    return {
        "theta_final_norm": float(np.linalg.norm(traj.final)),
        "trajectory_max_norm": float(max(np.linalg.norm(t) for t in traj.thetas)),
    }


def itd_hypergrad(
    problem: BilevelProblem,
    lam: Vec,
    traj: InnerTrajectory,
    train: DataView,
    val: DataView,
) -> HypergradResult:
    """Exact derivative of lam -> outer(lam, theta_K(lam)) by reverse accumulation.

    g = grad_lam outer(theta_K); a = grad_theta outer(theta_K);
    for k = K-1 .. 0: g -= alpha_in * mixed_vp(theta_k, a); a -= alpha_in * hvp(theta_k, a).
    """
    return _reverse_accumulate(problem, lam, traj, train, val, window=traj.K)


def trhg_hypergrad(
    problem: BilevelProblem,
    lam: Vec,
    traj: InnerTrajectory,
    train: DataView,
    val: DataView,
    h: int,
) -> HypergradResult:
    """Truncated reverse accumulation: mixed-product terms only for the h
    most recent inner steps (k = K-1 .. K-h); older contributions dropped.
    With h = K this is exactly itd_hypergrad."""
    if not (1 <= h <= traj.K):
        raise ContractViolationError(f"need 1 <= h <= K = {traj.K}, got h = {h}")
    return _reverse_accumulate(problem, lam, traj, train, val, window=h)


def _reverse_accumulate(
    problem: BilevelProblem,
    lam: Vec,
    traj: InnerTrajectory,
    train: DataView,
    val: DataView,
    window: int,
) -> HypergradResult:
    lam = np.asarray(lam, dtype=np.float64)
    theta_K = traj.final
    if theta_K.shape != (problem.param_dim,):
        raise ContractViolationError(
            f"trajectory parameter dim {theta_K.shape} does not match problem "
            f"param_dim {problem.param_dim}"
        )
    alpha = traj.alpha_in
    g = problem.outer_grad_lambda(lam, theta_K, val).astype(np.float64, copy=True)
    a = problem.outer_grad_theta(lam, theta_K, val)
    # Adjoint propagation below K - window contributes nothing once the mixed
    # accumulation stops, so the loop covers only the active window.
    for k in range(traj.K - 1, traj.K - 1 - window, -1):
        theta_k = traj.thetas[k]
        g = g - alpha * problem.inner_mixed_vp(lam, theta_k, train, a)
        a = a - alpha * problem.inner_hvp(lam, theta_k, train, a)
    if not np.all(np.isfinite(g)):
        raise NumericalError("reverse accumulation produced a non-finite hypergradient")
    return HypergradResult(grad=g, inner_final=theta_K, diagnostics=_traj_diagnostics(traj))


def aid_hypergrad(
    problem: BilevelProblem,
    lam: Vec,
    theta_K: Vec,
    train: DataView,
    val: DataView,
    solver: str = "cg",
    Z: int = 10,
    fp_step: float | None = None,
    tol: float = 1e-12,
) -> HypergradResult:
    """Implicit-function-theorem hypergradient at an approximate inner optimum.

    Solves hvp(v) = grad_theta outer(theta_K) with Z iterations of CG or the
    fixed-point scheme, then grad = grad_lam outer - mixed_vp(theta_K, v).
    Diagnostics carry the achieved linear-system residual norm.
    """
    if not problem.supports_aid:
        raise ContractViolationError(
            f"AID is not offered for model kind {problem.kind!r} "
            "(inner Hessian is discontinuous)"
        )
    if solver not in ("cg", "fp"):
        raise ContractViolationError(f"unknown solver {solver!r}, want 'cg' or 'fp'")
    if Z < 1:
        raise ContractViolationError("Z must be >= 1")
    lam = np.asarray(lam, dtype=np.float64)
    theta_K = np.asarray(theta_K, dtype=np.float64)
    b = problem.outer_grad_theta(lam, theta_K, val)
    op = LinearOperator(
        dim=problem.param_dim,
        apply=lambda x: problem.inner_hvp(lam, theta_K, train, x),
    )
    if solver == "cg":
        v, iters = cg_solve(op, b, max_iters=Z, tol=tol)
    else:
        step = fp_step if fp_step is not None and fp_step > 0 else None
        if step is None:
            raise ContractViolationError("fp solver requires fp_step > 0")
        v, iters = fixed_point_solve(op, b, step=step, max_iters=Z, tol=tol)
    residual = float(np.linalg.norm(op(v) - b))
    g = problem.outer_grad_lambda(lam, theta_K, val) - problem.inner_mixed_vp(
        lam, theta_K, train, v
    )
    if not np.all(np.isfinite(g)):
        raise NumericalError("AID produced a non-finite hypergradient")
    return HypergradResult(
        grad=g,
        inner_final=theta_K,
        diagnostics={
            "aid_residual": residual,
            "solver_iters": iters,
            "theta_final_norm": float(np.linalg.norm(theta_K)),
        },
    )


def finite_diff_hypergrad(
    problem: BilevelProblem,
    lam: Vec,
    theta0: Vec,
    train: DataView,
    val: DataView,
    K: int,
    alpha_in: float,
    eps: float = 1e-6,
) -> np.ndarray:
    """Central differences of lam -> outer(lam, theta_K(lam)) per raw coordinate.

    Re-runs inner_solve for every perturbation; this is the test oracle for
    the reverse-accumulation engines.
    """
    if eps <= 0:
        raise ContractViolationError("eps must be > 0")
    lam = np.asarray(lam, dtype=np.float64)

    def unrolled(u: np.ndarray) -> float:
        traj = inner_solve(problem, u, theta0, train, K, alpha_in)
        return problem.outer_loss(u, traj.final, val)

    g = np.zeros_like(lam)
    for j in range(lam.shape[0]):
        up = lam.copy()
        um = lam.copy()
        up[j] += eps
        um[j] -= eps
        g[j] = (unrolled(up) - unrolled(um)) / (2.0 * eps)
    return g


def contraction_params(L: float, mu: float, alpha_in: float) -> float:
    """Contraction constant q of the inner GD map for an (L, mu) convex loss.

    q = (L - mu)/(L + mu) exactly at alpha_in = 2/(L + mu); otherwise
    q = max(1 - alpha_in*mu, alpha_in*L - 1). Requires alpha_in <= 2/L, else
    the map is not a contraction.
    """
    if not (L >= mu > 0):
        raise ContractViolationError("need L >= mu > 0")
    if alpha_in <= 0:
        raise ContractViolationError("alpha_in must be > 0")
    if alpha_in > 2.0 / L:
        raise ContractViolationError(
            f"alpha_in = {alpha_in} exceeds 2/L = {2.0 / L}: not a contraction"
        )
    if alpha_in == 2.0 / (L + mu):
        return (L - mu) / (L + mu)
    return max(1.0 - alpha_in * mu, alpha_in * L - 1.0)


def estimate_hypergrad(
    problem: BilevelProblem,
    lam: Vec,
    theta0: Vec,
    train: DataView,
    val: DataView,
    method: HypergradMethod,
) -> HypergradResult:
    """Run the configured estimator end to end (inner solve + hypergradient)."""
    traj = inner_solve(problem, lam, theta0, train, method.K, method.alpha_in)
    if method.kind == "ITD":
        return itd_hypergrad(problem, lam, traj, train, val)
    if method.kind == "TRHG":
        return trhg_hypergrad(problem, lam, traj, train, val, method.h)
    solver = "cg" if method.kind == "AID_CG" else "fp"
    fp_step = method.fp_step if method.fp_step > 0 else method.alpha_in
    return aid_hypergrad(
        problem, lam, traj.final, train, val, solver=solver, Z=method.Z, fp_step=fp_step
    )

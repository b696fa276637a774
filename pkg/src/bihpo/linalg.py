"""Dense kernels and matrix-free iterative solvers.

Vectors and matrices are plain float64 numpy arrays (Vec: 1-D, Mat: 2-D,
row-major). Iterative solvers operate on a LinearOperator so callers can pass
Hessian-vector products without ever materializing the matrix.
"""

from __future__ import annotations

import warnings

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import ContractViolationError, NumericalError, SingularMatrixError

Vec = np.ndarray
Mat = np.ndarray

# Residual growth on this many consecutive iterations counts as divergence.
_DIVERGENCE_PATIENCE = 10


def _as_vec(x, name: str) -> Vec:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractViolationError(f"{name} must be 1-D, got ndim={x.ndim}")
    return x


def _as_mat(A, name: str) -> Mat:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ContractViolationError(f"{name} must be 2-D, got ndim={A.ndim}")
    return A


@dataclass(frozen=True)
class LinearOperator:
    """Matrix-free linear map on R^dim.

    apply must be linear; the iterative solvers additionally assume symmetry
    (and, for convergence guarantees, positive definiteness), which is not
    checked here.
    """

    dim: int
    apply: Callable[[Vec], Vec]

    def __call__(self, x: Vec) -> Vec:
        x = _as_vec(x, "x")
        if x.shape[0] != self.dim:
            raise ContractViolationError(
                f"operator expects dim={self.dim}, got {x.shape[0]}"
            )
        y = np.asarray(self.apply(x), dtype=np.float64)
        if y.shape != (self.dim,):
            raise ContractViolationError(
                f"operator returned shape {y.shape}, expected ({self.dim},)"
            )
        return y


def as_operator(A: Mat) -> LinearOperator:
    """Wrap a dense square matrix as a LinearOperator."""
    A = _as_mat(A, "A")
    if A.shape[0] != A.shape[1]:
        raise ContractViolationError(f"A must be square, got {A.shape}")
    return LinearOperator(dim=A.shape[0], apply=lambda x: A @ x)


def gemv(A: Mat, x: Vec) -> Vec:
    """y = A x with shape and finiteness checks."""
    A = _as_mat(A, "A")
    x = _as_vec(x, "x")
    if A.shape[1] != x.shape[0]:
        raise ContractViolationError(
            f"shape mismatch: A is {A.shape}, x has length {x.shape[0]}"
        )
    y = A @ x
    if not np.all(np.isfinite(y)):
        raise NumericalError("gemv produced non-finite values")
    return y


def _target_residual(b: Vec, tol: float) -> float:
    # Relative stopping rule, floored so b = 0 still terminates.
    return tol * max(1.0, float(np.linalg.norm(b)))


def cg_solve(
    op: LinearOperator, b: Vec, max_iters: int, tol: float = 1e-10
) -> tuple[Vec, int]:
    """Conjugate gradients for op x = b with op symmetric positive definite.

    Starts from x0 = 0 and stops when ||r|| <= tol * max(1, ||b||) or after
    max_iters iterations, returning (x, iters_used). Raises NumericalError on
    non-finite iterates or CG breakdown (p^T A p <= 0), naming the iteration.
    """
    b = _as_vec(b, "b")
    if b.shape[0] != op.dim:
        raise ContractViolationError(f"b has length {b.shape[0]}, operator dim {op.dim}")
    if max_iters < 0:
        raise ContractViolationError("max_iters must be >= 0")

    target = _target_residual(b, tol)
    x = np.zeros_like(b)
    r = b.copy()
    rs = float(r @ r)
    if np.sqrt(rs) <= target:
        return x, 0
    p = r.copy()
    for it in range(1, max_iters + 1):
        Ap = op(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp) or pAp <= 0.0:
            raise NumericalError(
                f"cg breakdown at iteration {it}: p^T A p = {pAp}", step_index=it
            )
        alpha = rs / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = float(r @ r)
        if not np.isfinite(rs_new):
            raise NumericalError(
                f"cg produced non-finite residual at iteration {it}", step_index=it
            )
        if np.sqrt(rs_new) <= target:
            return x, it
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, max_iters


def fixed_point_solve(
    op: LinearOperator, b: Vec, step: float, max_iters: int, tol: float = 1e-10
) -> tuple[Vec, int]:
    """Richardson iteration v <- v - step * (op v - b) from v0 = 0.

    Converges iff the spectrum of (I - step * op) lies inside the unit circle.
    Stops on ||op v - b|| <= tol * max(1, ||b||); raises NumericalError if the
    residual grows for 10 consecutive iterations (divergence) or goes
    non-finite, naming the iteration.
    """
    b = _as_vec(b, "b")
    if b.shape[0] != op.dim:
        raise ContractViolationError(f"b has length {b.shape[0]}, operator dim {op.dim}")
    if max_iters < 0:
        raise ContractViolationError("max_iters must be >= 0")
    if step <= 0.0:
        raise ContractViolationError("step must be positive")

    target = _target_residual(b, tol)
    v = np.zeros_like(b)
    prev = np.inf
    growth = 0
    iters = 0
    for it in range(1, max_iters + 1):
        res = op(v) - b
        rnorm = float(np.linalg.norm(res))
        if not np.isfinite(rnorm):
            raise NumericalError(
                f"fixed-point iteration produced non-finite residual at iteration {it}",
                step_index=it,
            )
        if rnorm <= target:
            return v, iters
        growth = growth + 1 if rnorm > prev else 0
        if growth >= _DIVERGENCE_PATIENCE:
            raise NumericalError(
                f"fixed-point iteration diverging at iteration {it}: residual grew "
                f"{_DIVERGENCE_PATIENCE} consecutive times (last {rnorm:.3e})",
                step_index=it,
            )
        prev = rnorm
        v = v - step * res
        iters = it
    return v, iters


def dense_solve(A: Mat, b: Vec) -> Vec:
    """Solve A x = b by LU factorization with partial pivoting.

    Raises SingularMatrixError when a pivot magnitude falls at or below
    1e-12 * max|A_ij|, rather than returning garbage.
    """
    A = _as_mat(A, "A")
    b = _as_vec(b, "b")
    if A.shape[0] != A.shape[1]:
        raise ContractViolationError(f"A must be square, got {A.shape}")
    if A.shape[0] != b.shape[0]:
        raise ContractViolationError(
            f"shape mismatch: A is {A.shape}, b has length {b.shape[0]}"
        )
    if not np.all(np.isfinite(A)) or not np.all(np.isfinite(b)):
        raise ContractViolationError("dense_solve requires finite inputs")

    with warnings.catch_warnings():
        # the explicit pivot check below is the singularity handler
        warnings.simplefilter("ignore")
        lu, piv = lu_factor(A, check_finite=False)
    pivots = np.abs(np.diag(lu))
    threshold = 1e-12 * float(np.max(np.abs(A)))
    if np.min(pivots) <= threshold:
        raise SingularMatrixError(
            f"matrix is singular to working precision: min pivot {np.min(pivots):.3e} "
            f"<= {threshold:.3e}"
        )
    x = lu_solve((lu, piv), b, check_finite=False)
    if not np.all(np.isfinite(x)):
        raise NumericalError("dense_solve produced non-finite solution")
    return x

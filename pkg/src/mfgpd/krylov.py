"""Krylov solvers, a dense Cholesky solve and spectral estimates.

Operators are anything :func:`scipy.sparse.linalg.aslinearoperator` accepts,
plain callables ``x -> y`` (wrapped with an explicit dimension), or ``None``
for the identity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, aslinearoperator, eigsh

logger = logging.getLogger(__name__)


def as_operator(op, n: int) -> LinearOperator:
    """Coerce ``op`` to a square :class:`LinearOperator` of size ``n``."""
    if op is None:
        return LinearOperator((n, n), matvec=lambda x: np.array(x, dtype=float), dtype=float)
    if isinstance(op, LinearOperator):
        lin = op
    elif sp.issparse(op) or isinstance(op, np.ndarray):
        lin = aslinearoperator(op)
    elif callable(op):
        lin = LinearOperator((n, n), matvec=op, dtype=float)
    else:
        raise TypeError(f"cannot use {type(op).__name__} as a linear operator")
    if lin.shape != (n, n):
        raise ValueError(f"operator has shape {lin.shape}, expected {(n, n)}")
    return lin


def jacobi_preconditioner(matrix) -> LinearOperator:
    d = np.asarray(matrix.diagonal(), dtype=float)
    if np.any(d <= 0):
        raise ValueError("Jacobi preconditioner needs a positive diagonal")
    inv = 1.0 / d
    n = d.size
    return LinearOperator((n, n), matvec=lambda x: inv * np.ravel(x), dtype=float)


@dataclass
class SolveReport:
    """Outcome of an iterative solve.

    ``iterations`` counts BiCGStab half-steps as 0.5. ``history`` holds
    ``(iteration, true residual norm)`` pairs starting at ``(0, ||r0||)``;
    ``rhs_norm`` is ``||b||``.
    """

    x: np.ndarray
    iterations: float
    final_residual: float
    converged: bool
    breakdown: Optional[str] = None
    history: list = field(default_factory=list)
    rhs_norm: float = float("nan")

    def iterations_to(self, factor: float, relative_to: str = "rhs") -> Optional[float]:
        """First recorded iteration with residual below ``factor * ||b||``.

        ``relative_to="r0"`` measures against the initial residual instead.
        Returns ``None`` if the level was never reached.
        """
        if not self.history:
            return None
        if relative_to == "rhs":
            ref = self.rhs_norm
        elif relative_to == "r0":
            ref = self.history[0][1]
        else:
            raise ValueError(f"relative_to must be 'rhs' or 'r0', got {relative_to!r}")
        for it, res in self.history:
            if res <= factor * ref:
                return it
        return None


def _report(bnorm, *args, **kwargs) -> SolveReport:
    rep = SolveReport(*args, **kwargs)
    rep.rhs_norm = bnorm
    return rep


def _target(tol, rtol, r0norm):
    return max(tol, rtol * r0norm)


def conjugate_gradient(
    op,
    b: np.ndarray,
    precond=None,
    x0: Optional[np.ndarray] = None,
    tol: float = 0.0,
    maxit: int = 1000,
    rtol: float = 0.0,
) -> SolveReport:
    """Preconditioned conjugate gradients for SPD ``op``.

    Stops when ``||b - op x|| <= max(tol, rtol * ||r0||)``. Non-positive
    curvature or non-finite values end the run with a ``breakdown`` label.
    """
    b = np.asarray(b, dtype=float).ravel()
    bnorm = float(np.linalg.norm(b))
    n = b.size
    A = as_operator(op, n)
    M = as_operator(precond, n)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float).ravel()
    r = b - A.matvec(x)
    rnorm = np.linalg.norm(r)
    target = _target(tol, rtol, rnorm)
    history = [(0, rnorm)]
    if rnorm <= target:
        return _report(bnorm, x, 0, rnorm, True, history=history)
    zv = M.matvec(r)
    p = zv.copy()
    rz = r @ zv
    for it in range(1, maxit + 1):
        Ap = A.matvec(p)
        curv = p @ Ap
        if not np.isfinite(curv) or curv <= 0:
            return _report(bnorm, x, it - 1, rnorm, False, "non-positive curvature", history)
        alpha = rz / curv
        x = x + alpha * p
        r = r - alpha * Ap
        rnorm = np.linalg.norm(r)
        if not np.isfinite(rnorm):
            return _report(bnorm, x, it, rnorm, False, "non-finite iterate", history)
        history.append((it, rnorm))
        if rnorm <= target:
            # confirm against the true residual to avoid drift
            rnorm = np.linalg.norm(b - A.matvec(x))
            history[-1] = (it, rnorm)
            if rnorm <= target:
                return _report(bnorm, x, it, rnorm, True, history=history)
            r = b - A.matvec(x)
        zv = M.matvec(r)
        rz_new = r @ zv
        if rz_new <= 0 and rnorm > 0:
            return _report(bnorm, x, it, rnorm, False, "indefinite preconditioner", history)
        p = zv + (rz_new / rz) * p
        rz = rz_new
    return _report(bnorm, x, maxit, rnorm, False, history=history)


def bicgstab(
    op,
    b: np.ndarray,
    P_L=None,
    P_R=None,
    x0: Optional[np.ndarray] = None,
    tol: float = 0.0,
    maxit: int = 500,
    rtol: float = 0.0,
) -> SolveReport:
    """BiCGStab with left preconditioner ``P_L`` and right preconditioner ``P_R``.

    Both the true residual ``r = b - op x`` and its preconditioned image
    ``P_L r`` are carried through the recurrence; the stopping test is on the
    true residual, ``||r|| <= max(tol, rtol * ||r0||)``. On a vanishing
    denominator the method restarts once from the current iterate.
    """
    b = np.asarray(b, dtype=float).ravel()
    bnorm = float(np.linalg.norm(b))
    n = b.size
    A = as_operator(op, n)
    PL = as_operator(P_L, n)
    PR = as_operator(P_R, n)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float).ravel()
    r = b - A.matvec(x)
    rnorm = np.linalg.norm(r)
    target = _target(tol, rtol, rnorm)
    history = [(0, rnorm)]
    done = 0.0
    restarts = 0
    breakdown = None
    while True:
        if rnorm <= target:
            return _report(bnorm, x, done, rnorm, True, history=history)
        r_hat = PL.matvec(r)
        shadow = r_hat.copy()
        p_hat = r_hat.copy()
        rho = r_hat @ shadow
        restart = False
        while done < maxit:
            Pp = PR.matvec(p_hat)
            v = A.matvec(Pp)
            v_hat = PL.matvec(v)
            denom = v_hat @ shadow
            if not np.isfinite(denom) or abs(denom) <= 1e-300 or rho == 0:
                breakdown = "<v_hat, r0_hat> vanished"
                restart = True
                break
            alpha = rho / denom
            s = r - alpha * v
            s_hat = r_hat - alpha * v_hat
            snorm = np.linalg.norm(s)
            if snorm <= target:
                x = x + alpha * Pp
                rnorm = np.linalg.norm(b - A.matvec(x))
                done += 0.5
                history.append((done, rnorm))
                if rnorm <= target:
                    return _report(bnorm, x, done, rnorm, True, history=history)
                r = b - A.matvec(x)
                restart = True
                breakdown = None
                break
            Ps = PR.matvec(s_hat)
            t = A.matvec(Ps)
            t_hat = PL.matvec(t)
            tt = t_hat @ t_hat
            if not np.isfinite(tt) or tt <= 1e-300:
                x = x + alpha * Pp
                r = s
                breakdown = "<t_hat, t_hat> vanished"
                restart = True
                done += 0.5
                rnorm = snorm
                history.append((done, rnorm))
                break
            omega = (s_hat @ t_hat) / tt
            x = x + alpha * Pp + omega * Ps
            r = s - omega * t
            r_hat = s_hat - omega * t_hat
            rnorm = np.linalg.norm(r)
            done += 1.0
            history.append((done, rnorm))
            if not np.isfinite(rnorm):
                return _report(bnorm, x, done, rnorm, False, "non-finite iterate", history)
            if rnorm <= target:
                # recurrence residual can drift from the true one
                rnorm = np.linalg.norm(b - A.matvec(x))
                history[-1] = (done, rnorm)
                if rnorm <= target:
                    return _report(bnorm, x, done, rnorm, True, history=history)
                r = b - A.matvec(x)
                restart = True
                breakdown = None
                break
            if omega == 0:
                breakdown = "omega vanished"
                restart = True
                break
            rho_new = r_hat @ shadow
            beta = (alpha / omega) * (rho_new / rho)
            rho = rho_new
            p_hat = r_hat + beta * (p_hat - omega * v_hat)
        if done >= maxit:
            return _report(bnorm, x, done, rnorm, False, breakdown, history)
        if restart and breakdown is not None:
            if restarts >= 1:
                return _report(bnorm, x, done, rnorm, False, breakdown, history)
            restarts += 1
            logger.debug("bicgstab restart after breakdown: %s", breakdown)
            breakdown = None
        r = b - A.matvec(x)
        rnorm = np.linalg.norm(r)


class DenseCholesky:
    """Cached Cholesky factorization of an SPD matrix."""

    def __init__(self, matrix):
        a = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix, dtype=float)
        try:
            self._factor = sla.cho_factor(a, lower=True, check_finite=True)
        except sla.LinAlgError as exc:
            raise ValueError(f"matrix is not positive definite: {exc}") from None
        self.n = a.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        return sla.cho_solve(self._factor, b.reshape(self.n, -1)).reshape(b.shape)


def dense_cholesky_solve(matrix, b: np.ndarray) -> np.ndarray:
    return DenseCholesky(matrix).solve(b)


def lanczos_condition_estimate(op, n: int, iters: int = 100, seed: int = 0):
    """Extreme Ritz values of a symmetric Lanczos run with full reorthogonalization.

    Returns ``(lambda_min, lambda_max, kappa)``. Raises ``ValueError`` if the
    smallest Ritz value is not positive.
    """
    A = as_operator(op, n)
    iters = min(iters, n)
    rng = np.random.default_rng(seed)
    V = np.zeros((iters + 1, n))
    v = rng.standard_normal(n)
    V[0] = v / np.linalg.norm(v)
    alpha = np.zeros(iters)
    beta = np.zeros(iters)
    m = iters
    for k in range(iters):
        wv = A.matvec(V[k])
        alpha[k] = V[k] @ wv
        wv = wv - alpha[k] * V[k] - (beta[k - 1] * V[k - 1] if k > 0 else 0.0)
        # two passes of classical Gram-Schmidt against the whole basis
        for _ in range(2):
            wv -= V[: k + 1].T @ (V[: k + 1] @ wv)
        beta[k] = np.linalg.norm(wv)
        if beta[k] <= 1e-12 * max(abs(alpha[k]), 1.0):
            m = k + 1
            break
        V[k + 1] = wv / beta[k]
    theta = sla.eigh_tridiagonal(alpha[:m], beta[: m - 1], eigvals_only=True)
    lmin, lmax = float(theta[0]), float(theta[-1])
    if lmin <= 0:
        raise ValueError(f"operator is not numerically SPD (lambda_min ~ {lmin:.3e})")
    return lmin, lmax, lmax / lmin


def sparse_condition_estimate(matrix, tol: float = 1e-10):
    """Extreme eigenvalues of a sparse SPD matrix by implicitly restarted Lanczos.

    The largest eigenvalue comes from a plain run, the smallest from a
    shift-invert run about zero (one sparse LU factorization). Returns
    ``(lambda_min, lambda_max, kappa)``.
    """
    A = sp.csc_matrix(matrix)
    n = A.shape[0]
    if n <= 32:
        ev = np.linalg.eigvalsh(A.toarray())
        lmin, lmax = float(ev[0]), float(ev[-1])
    else:
        lmax = float(eigsh(A, k=1, which="LA", tol=tol, return_eigenvectors=False)[0])
        lmin = float(eigsh(A, k=1, sigma=0.0, which="LM", tol=tol, return_eigenvectors=False)[0])
    if lmin <= 0:
        raise ValueError(f"matrix is not numerically SPD (lambda_min ~ {lmin:.3e})")
    return lmin, lmax, lmax / lmin


def arnoldi_condition_estimate(op, n: int, iters: int = 60, seed: int = 0):
    """Ratio of extreme Ritz-value moduli for a non-symmetric operator.

    Used for preconditioned operators ``P_L Q`` whose preconditioner is not
    symmetric. Returns ``(|theta|_min, |theta|_max, ratio)``.
    """
    A = as_operator(op, n)
    iters = min(iters, n)
    rng = np.random.default_rng(seed)
    V = np.zeros((iters + 1, n))
    Hm = np.zeros((iters + 1, iters))
    v = rng.standard_normal(n)
    V[0] = v / np.linalg.norm(v)
    m = iters
    for k in range(iters):
        wv = A.matvec(V[k])
        for _ in range(2):
            c = V[: k + 1] @ wv
            Hm[: k + 1, k] += c
            wv -= V[: k + 1].T @ c
        Hm[k + 1, k] = np.linalg.norm(wv)
        if Hm[k + 1, k] <= 1e-12:
            m = k + 1
            break
        V[k + 1] = wv / Hm[k + 1, k]
    theta = np.abs(np.linalg.eigvals(Hm[:m, :m]))
    lo, hi = float(theta.min()), float(theta.max())
    return lo, hi, hi / lo

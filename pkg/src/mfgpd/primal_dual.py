"""Chambolle-Pock iteration for the discrete variational MFG problem.

One iteration, with ``(mbar, 0)`` the constraint right-hand side::

    z      <- -Q^{-1} ( C(gamma m~ - n, gamma w~ - v) - gamma (mbar, 0) )
    (n, v) <- C* z
    (m, w) <- prox_{tau phi}(m + tau n, w + tau v)
    (m~, w~) <- (m, w) + theta ((m, w) - (m_old, w_old))

Here ``(n, v)`` is the negated dual variable of the affine constraint, so
that ``(n, v) = C* z`` is a subgradient of the objective at a fixed point.

The prox iterate ``(m, w)`` is nonnegative with ``w`` in the cone, but it
satisfies the linear constraint only up to the CP tolerance. The dual step
also yields ``(m~, w~) + ((n, v)_new - (n, v)_old) / gamma``, which satisfies
``C(m, w) = (mbar, 0)`` up to the linear-solve tolerance; both converge to the
same limit.
At convergence ``z = (lambda, u)`` approximates the multipliers of the
constraint, and ``u`` solves the discrete HJB equation.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator

from .coupling import CouplingSpec, eval_objective, project_K, prox_phi
from .grid import GridSpec, apply_hat_D_h, apply_laplacian
from .krylov import (
    DenseCholesky,
    SolveReport,
    bicgstab,
    conjugate_gradient,
    jacobi_preconditioner,
)
from .multigrid import build_hierarchy, mg_preconditioner
from .operators import (
    apply_A,
    apply_B,
    apply_C,
    apply_C_star,
    apply_Q,
    assemble_Q,
    constraint_rhs,
    multiplier_shape,
)

logger = logging.getLogger(__name__)

LINEAR_SOLVERS = ("direct", "cg", "bicgstab")
PRECONDITIONERS = ("identity", "jacobi", "multigrid")


class ConfigError(ValueError):
    """Invalid solver configuration; ``fields`` names the offending keys."""

    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = tuple(fields)


class SolverBreakdown(RuntimeError):
    pass


@dataclass(frozen=True)
class CPConfig:
    gamma: float = 0.95
    tau: float = 0.95
    theta: float = 1.0
    tol_cp: float = 1e-6
    max_iters: int = 500
    linear_solver: str = "bicgstab"
    preconditioner: str = "multigrid"
    lin_tol: float = 1e-8
    lin_maxit: int = 500
    mg_H: int = 2
    mg_levels: Optional[int] = None
    eta1: int = 2
    eta2: int = 2
    cycle: str = "F"
    general_q: bool = False

    def validate(self) -> "CPConfig":
        if not (self.gamma > 0 and self.tau > 0):
            raise ConfigError("gamma and tau must be positive", ("gamma", "tau"))
        if not self.gamma * self.tau < 1:
            raise ConfigError(
                f"step sizes must satisfy gamma * tau < 1, got gamma = {self.gamma}, "
                f"tau = {self.tau} (product {self.gamma * self.tau:g})",
                ("gamma", "tau"),
            )
        if not 0 <= self.theta <= 1:
            raise ConfigError(f"theta must lie in [0, 1], got {self.theta}", ("theta",))
        if self.linear_solver not in LINEAR_SOLVERS:
            raise ConfigError(
                f"linear_solver must be one of {LINEAR_SOLVERS}, got {self.linear_solver!r}",
                ("linear_solver",),
            )
        if self.preconditioner not in PRECONDITIONERS:
            raise ConfigError(
                f"preconditioner must be one of {PRECONDITIONERS}, got {self.preconditioner!r}",
                ("preconditioner",),
            )
        if self.linear_solver == "cg" and self.preconditioner == "multigrid":
            raise ConfigError(
                "cg needs a symmetric preconditioner; the multigrid cycle is not symmetric",
                ("linear_solver", "preconditioner"),
            )
        if not (self.tol_cp > 0 and self.lin_tol > 0):
            raise ConfigError("tolerances must be positive", ("tol_cp", "lin_tol"))
        if self.max_iters < 1 or self.lin_maxit < 1:
            raise ConfigError("iteration limits must be >= 1", ("max_iters", "lin_maxit"))
        if self.cycle not in ("V", "W", "F"):
            raise ConfigError(f"cycle must be V, W or F, got {self.cycle!r}", ("cycle",))
        return self


class NormalSolver:
    """Solves ``Q z = b`` with the configured backend, warm-started by the caller.

    Iterative solves stop at ``||b - Q z|| <= lin_tol * ||b||``, so a good
    warm start can end a solve after zero iterations.
    """

    def __init__(self, grid: GridSpec, config: CPConfig):
        self.grid = grid
        self.config = config
        self.n = int(np.prod(multiplier_shape(grid)))
        self.hierarchy = None
        self._factor = None
        self._precond = None
        if config.linear_solver == "direct":
            self._factor = DenseCholesky(assemble_Q(grid))
            return
        if config.preconditioner == "multigrid":
            self.hierarchy = build_hierarchy(
                grid,
                H=config.mg_H,
                levels=config.mg_levels,
                eta1=config.eta1,
                eta2=config.eta2,
                cycle=config.cycle,
            )
            self._precond = mg_preconditioner(self.hierarchy)
        elif config.preconditioner == "jacobi":
            self._precond = jacobi_preconditioner(assemble_Q(grid))
        shape = multiplier_shape(grid)
        self.operator = LinearOperator(
            (self.n, self.n),
            matvec=lambda x: apply_Q(np.reshape(x, shape), grid).ravel(),
            dtype=float,
        )

    def solve(self, b: np.ndarray, z0: Optional[np.ndarray] = None) -> SolveReport:
        b = np.asarray(b, dtype=float).ravel()
        if self._factor is not None:
            x = self._factor.solve(b)
            res = float(np.linalg.norm(b - apply_Q(x.reshape(multiplier_shape(self.grid)), self.grid).ravel()))
            bnorm = float(np.linalg.norm(b))
            return SolveReport(x, 1, res, True, history=[(0, bnorm), (1, res)], rhs_norm=bnorm)
        cfg = self.config
        tol = cfg.lin_tol * float(np.linalg.norm(b))
        if cfg.linear_solver == "cg":
            return conjugate_gradient(
                self.operator, b, self._precond, x0=z0, tol=tol, maxit=cfg.lin_maxit
            )
        return bicgstab(
            self.operator, b, P_L=self._precond, x0=z0, tol=tol, maxit=cfg.lin_maxit
        )


@dataclass
class CPState:
    m: np.ndarray
    w: np.ndarray
    m_tilde: np.ndarray
    w_tilde: np.ndarray
    n: np.ndarray
    v: np.ndarray
    z: np.ndarray
    iteration: int = 0
    change: float = np.inf
    m_feas: Optional[np.ndarray] = None
    w_feas: Optional[np.ndarray] = None

    @classmethod
    def initial(cls, mbar: np.ndarray, grid: GridSpec) -> "CPState":
        m = np.broadcast_to(mbar, grid.density_shape).copy()
        w = np.zeros(grid.flux_shape)
        return cls(
            m=m,
            w=w,
            m_tilde=m.copy(),
            w_tilde=w.copy(),
            n=np.zeros(grid.density_shape),
            v=np.zeros(grid.flux_shape),
            z=np.zeros(multiplier_shape(grid)),
        )


@dataclass
class IterationRecord:
    iteration: int
    change: float
    inner_iterations: float
    inner_converged: bool
    linear_residual: float
    objective: float
    time_linear: float
    time_prox: float
    time_other: float
    inner_history: list = field(default_factory=list, repr=False)
    rhs_norm: float = float("nan")


def rms(*arrays: np.ndarray) -> float:
    """Root-mean-square over all entries of the given arrays taken together."""
    total = sum(float(np.sum(np.square(a))) for a in arrays)
    count = sum(np.size(a) for a in arrays)
    return float(np.sqrt(total / count))


def cp_iterate(
    state: CPState,
    config: CPConfig,
    solver: NormalSolver,
    coupling: CouplingSpec,
    rhs: np.ndarray,
    grid: GridSpec,
) -> tuple[CPState, IterationRecord]:
    """One primal-dual step; ``rhs`` is the constraint right-hand side ``(mbar, 0)``."""
    g, t = config.gamma, config.tau
    t0 = time.perf_counter()
    b = -(apply_C(g * state.m_tilde - state.n, g * state.w_tilde - state.v, grid) - g * rhs)
    t1 = time.perf_counter()
    report = solver.solve(b.ravel(), state.z.ravel())
    if report.breakdown is not None or not np.all(np.isfinite(report.x)):
        raise SolverBreakdown(
            f"linear solver failed at CP iteration {state.iteration + 1}: "
            f"{report.breakdown or 'non-finite solution'} (residual {report.final_residual:.3e})"
        )
    t2 = time.perf_counter()
    z = report.x.reshape(multiplier_shape(grid))
    n, v = apply_C_star(z, grid)
    t3 = time.perf_counter()
    m, w = prox_phi(state.m + t * n, state.w + t * v, t, coupling, grid, config.general_q)
    t4 = time.perf_counter()
    dm = m - state.m
    dw = w - state.w
    change = rms(dm, dw)
    new = CPState(
        m=m,
        w=w,
        m_tilde=m + config.theta * dm,
        w_tilde=w + config.theta * dw,
        n=n,
        v=v,
        z=z,
        iteration=state.iteration + 1,
        change=change,
        m_feas=state.m_tilde + (n - state.n) / g,
        w_feas=state.w_tilde + (v - state.v) / g,
    )
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(w))):
        raise SolverBreakdown(f"non-finite primal iterate at CP iteration {new.iteration}")
    objective = eval_objective(m, w, coupling, grid)
    t5 = time.perf_counter()
    record = IterationRecord(
        iteration=new.iteration,
        change=change,
        inner_iterations=report.iterations,
        inner_converged=report.converged,
        linear_residual=report.final_residual,
        objective=objective,
        time_linear=t2 - t1,
        time_prox=t4 - t3,
        time_other=(t1 - t0) + (t3 - t2) + (t5 - t4),
        inner_history=report.history,
        rhs_norm=report.rhs_norm,
    )
    return new, record


@dataclass
class MfgSolution:
    """Converged (or last) primal-dual iterate with its multipliers.

    ``m`` and ``w`` are the constraint-satisfying point of the last dual
    step; ``m_prox`` and ``w_prox`` are the prox iterate (``m_prox >= 0`` and
    ``w_prox`` in the cone exactly). ``u`` has ``N_T + 1`` slices; the last
    one is ``g(x, m^{N_T})``.
    """

    m: np.ndarray
    w: np.ndarray
    m_prox: np.ndarray
    w_prox: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    z: np.ndarray
    converged: bool
    iterations: int
    diagnostics: list
    grid: GridSpec
    config: CPConfig
    mbar: np.ndarray

    @property
    def average_inner_iterations(self) -> float:
        return float(np.mean([r.inner_iterations for r in self.diagnostics]))

    def timings(self) -> dict:
        return {
            "linear": sum(r.time_linear for r in self.diagnostics),
            "prox": sum(r.time_prox for r in self.diagnostics),
            "other": sum(r.time_other for r in self.diagnostics),
        }


def solve_mfg(
    grid: GridSpec,
    coupling: CouplingSpec,
    config: CPConfig = CPConfig(),
    mbar: Optional[np.ndarray] = None,
    solver: Optional[NormalSolver] = None,
    callback=None,
) -> MfgSolution:
    """Run the primal-dual loop until the RMS change of ``(m, w)`` drops below ``tol_cp``.

    ``mbar`` defaults to the uniform density. An unconverged run is returned
    with ``converged=False``.
    """
    config.validate()
    if mbar is None:
        mbar = np.ones((grid.N_h, grid.N_h))
    solver = solver or NormalSolver(grid, config)
    rhs = constraint_rhs(mbar, grid)
    state = CPState.initial(mbar, grid)
    diagnostics = []
    converged = False
    while state.iteration < config.max_iters:
        state, record = cp_iterate(state, config, solver, coupling, rhs, grid)
        diagnostics.append(record)
        logger.debug(
            "cp %4d change %.3e inner %.1f", record.iteration, record.change, record.inner_iterations
        )
        if callback is not None:
            callback(state, record)
        if record.change <= config.tol_cp:
            converged = True
            break
    lam, u = extract_multiplier(state.z, state.m, coupling, grid)
    m_out = state.m if state.m_feas is None else state.m_feas
    w_out = state.w if state.w_feas is None else state.w_feas
    return MfgSolution(
        m=m_out,
        w=w_out,
        m_prox=state.m,
        w_prox=state.w,
        u=u,
        lam=lam,
        z=state.z,
        converged=converged,
        iterations=state.iteration,
        diagnostics=diagnostics,
        grid=grid,
        config=config,
        mbar=np.asarray(mbar, dtype=float),
    )


def extract_multiplier(
    z: np.ndarray, m: np.ndarray, coupling: CouplingSpec, grid: GridSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Split ``z`` into ``lambda`` and ``u``, appending ``u^{N_T} = g(x, m^{N_T})``."""
    z = np.asarray(z, dtype=float).reshape(multiplier_shape(grid))
    i, j = grid.indices()
    terminal = np.broadcast_to(coupling.g(i, j, np.asarray(m)[-1]), (grid.N_h, grid.N_h))
    u = np.concatenate([z[1:], terminal[None]], axis=0)
    return z[0].copy(), u


def _residual_summary(field_):
    return field_, float(np.max(np.abs(field_))), rms(field_)


def _upwind_flux_factor(hat: np.ndarray, q: float) -> np.ndarray:
    """``|hat|^((2-q)/(q-1)) * hat`` with the value 0 where ``hat`` vanishes."""
    norm = np.sqrt(np.sum(hat * hat, axis=-3, keepdims=True))
    expo = (2.0 - q) / (q - 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norm > 0, np.where(norm > 0, norm, 1.0) ** expo, 0.0)
    return scale * hat


def hjb_residual(u: np.ndarray, m: np.ndarray, coupling: CouplingSpec, grid: GridSpec):
    """Pointwise residual of the discrete HJB equation for ``k = 0 .. N_T - 1``.

    ``u`` has ``N_T + 1`` slices. Returns ``(field, sup_norm, rms)``.
    """
    u = np.asarray(u, dtype=float)
    m = np.asarray(m, dtype=float)
    qc = grid.q_conj
    uk = u[:-1]
    hat = apply_hat_D_h(uk, grid)
    ham = np.sum(hat * hat, axis=-3) ** (qc / 2.0) / qc
    i, j = grid.indices()
    res = -(u[1:] - uk) / grid.dt - grid.nu * apply_laplacian(uk, grid) + ham - coupling.f(i, j, m[1:])
    return _residual_summary(res)


def flux_from_value(u: np.ndarray, m: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Optimal flux ``w^{k-1} = m^k |P_K(-D_h u^{k-1})|^((2-q)/(q-1)) P_K(-D_h u^{k-1})``."""
    u = np.asarray(u, dtype=float)[: grid.N_T]
    hat = apply_hat_D_h(u, grid)
    return np.asarray(m, dtype=float)[1:, None] * _upwind_flux_factor(hat, grid.q)


def fp_residual(m: np.ndarray, u: np.ndarray, grid: GridSpec):
    """Discrete Fokker-Planck residual ``A m + B w(u, m)``; returns ``(field, sup, rms)``."""
    w = flux_from_value(u, m, grid)
    return _residual_summary(apply_A(m, grid) + apply_B(w, grid))


def constraint_residual(m: np.ndarray, w: np.ndarray, mbar: np.ndarray, grid: GridSpec) -> float:
    return rms(apply_C(m, w, grid) - constraint_rhs(mbar, grid))


def mass_deviation(m: np.ndarray, grid: GridSpec, total: float = 1.0) -> np.ndarray:
    """``h^2 sum_ij m^k - total`` for every time slice."""
    return grid.h**2 * np.sum(m, axis=(-2, -1)) - total


def turnpike_distance(m: np.ndarray, reference: Optional[np.ndarray], grid: GridSpec) -> np.ndarray:
    """``k -> (h^2 sum (reference - m^k)^2)^(1/2)``; default reference is ``m^{N_T // 2}``."""
    m = np.asarray(m, dtype=float)
    if reference is None:
        reference = m[grid.N_T // 2]
    diff = m - np.asarray(reference, dtype=float)[None]
    return np.sqrt(grid.h**2 * np.sum(diff * diff, axis=(-2, -1)))

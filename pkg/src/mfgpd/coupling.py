"""Running/terminal costs, the cone projection and the proximal map of the objective.

The objective is separable over grid points: each pair ``(m^k_{ij}, w^{k-1}_{ij})``
with ``k >= 1`` contributes ``bhat(m, w) + F(x_ij, m)``, plus ``G(x_ij, m) / dt``
at ``k = N_T``. Its proximal map therefore reduces to a family of independent
two-variable problems, and for each of them the flux can be eliminated in
closed form, leaving a monotone scalar equation in ``m``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .grid import GridSpec

# Point evaluators take integer index arrays (i, j) and a density array m,
# all broadcastable against each other, and return an array.
PointFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class ProxConvergenceError(RuntimeError):
    """Raised when the scalar root-finder of the proximal map fails."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (max |residual| = {residual:.3e})")
        self.residual = residual


def _zero(i, j, m):
    return np.zeros(np.broadcast(i, j, m).shape)


@dataclass(frozen=True)
class CouplingSpec:
    """Local coupling costs sampled on the grid.

    ``f`` and ``g`` are the running and terminal marginal costs, ``F`` and
    ``G`` their antiderivatives in ``m`` with ``F(x, 0) = G(x, 0) = 0``.
    ``df``/``dg`` are optional derivatives in ``m`` (used to polish roots);
    missing derivatives are replaced by finite differences.
    """

    f: PointFn
    F: PointFn
    df: Optional[PointFn] = None
    g: PointFn = _zero
    G: PointFn = _zero
    dg: Optional[PointFn] = _zero
    hbar: Optional[np.ndarray] = None
    name: str = "custom"

    def check(self, grid: GridSpec, samples: int = 64, seed: int = 0) -> None:
        """Spot-check monotonicity of ``f``, ``g`` and the normalization of ``F``, ``G``."""
        rng = np.random.default_rng(seed)
        i = rng.integers(0, grid.N_h, samples)
        j = rng.integers(0, grid.N_h, samples)
        m1 = rng.uniform(0, 5, samples)
        m2 = m1 + rng.uniform(0, 5, samples)
        for name, fn in (("f", self.f), ("g", self.g)):
            if np.any(fn(i, j, m2) < fn(i, j, m1) - 1e-12):
                raise ValueError(f"coupling {name}(x, .) is not non-decreasing")
        zero = np.zeros(samples)
        for name, fn in (("F", self.F), ("G", self.G)):
            if np.any(np.abs(fn(i, j, zero)) > 1e-12):
                raise ValueError(f"coupling {name}(x, 0) must vanish")


def quadratic_coupling(hbar: np.ndarray, name: str = "quadratic") -> CouplingSpec:
    """``f(x, m) = m^2 - hbar(x)`` with ``g = 0``."""
    hbar = np.asarray(hbar, dtype=float)

    def f(i, j, m):
        return m * m - hbar[i, j]

    def F(i, j, m):
        return m**3 / 3.0 - hbar[i, j] * m

    def df(i, j, m):
        return 2.0 * np.broadcast_to(m, np.broadcast(i, j, m).shape)

    return CouplingSpec(f=f, F=F, df=df, hbar=hbar, name=name)


def sincos_hbar(grid: GridSpec) -> np.ndarray:
    x, y = grid.coordinates()
    return np.sin(2 * np.pi * y) + np.sin(2 * np.pi * x) + np.cos(2 * np.pi * x)


def sincos_coupling(grid: GridSpec) -> CouplingSpec:
    """The benchmark coupling ``m^2 - sin(2 pi y) - sin(2 pi x) - cos(2 pi x)``."""
    return quadratic_coupling(sincos_hbar(grid), name="sincos")


def zero_coupling() -> CouplingSpec:
    return CouplingSpec(f=_zero, F=_zero, df=_zero, name="zero")


# --- pointwise pieces --------------------------------------------------------


def project_K(v: np.ndarray) -> np.ndarray:
    """Projection onto ``K = R+ x R- x R+ x R-``; components along axis 0."""
    v = np.asarray(v, dtype=float)
    out = np.empty_like(v)
    out[0] = np.maximum(v[0], 0.0)
    out[1] = np.minimum(v[1], 0.0)
    out[2] = np.maximum(v[2], 0.0)
    out[3] = np.minimum(v[3], 0.0)
    return out


def in_K(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return (w[0] >= 0) & (w[1] <= 0) & (w[2] >= 0) & (w[3] <= 0)


def bhat(m, w, q: float = 2.0):
    """Perspective cost ``|w|^q / (q m^(q-1))`` extended by ``0`` at the origin
    and ``+inf`` outside its domain. ``w`` carries its 4 components on axis 0."""
    m = np.asarray(m, dtype=float)
    w = np.asarray(w, dtype=float)
    norm = np.sqrt(np.sum(w * w, axis=0))
    pos = m > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(pos, norm**q / (q * np.where(pos, m, 1.0) ** (q - 1)), 0.0)
    ok = (pos & in_K(w)) | ((m == 0) & (norm == 0))
    val = np.where(ok, val, np.inf)
    return val[()] if val.ndim == 0 else val


def eval_objective(
    m: np.ndarray, w: np.ndarray, coupling: CouplingSpec, grid: GridSpec
) -> float:
    """Value of ``sum bhat(m^k, w^{k-1}) + sum F(m^k) + sum G(m^{N_T}) / dt``."""
    m = np.asarray(m, dtype=float)
    w = np.asarray(w, dtype=float)
    mk = m[1:]
    if np.any(mk < 0):
        return np.inf
    b = bhat(mk, np.moveaxis(w, 1, 0), grid.q)
    if np.any(np.isinf(b)):
        return np.inf
    i, j = grid.indices()
    total = float(np.sum(b)) + float(np.sum(coupling.F(i, j, mk)))
    total += float(np.sum(coupling.G(i, j, m[-1]))) / grid.dt
    return total


# --- proximal map -------------------------------------------------------------


@dataclass(frozen=True)
class ProxPointResult:
    m: float
    w: np.ndarray
    converged: bool
    iterations: int


def _deriv(fn: Optional[PointFn], base: PointFn):
    if fn is not None:
        return fn

    def fd(i, j, m):
        step = 1e-6 * (1.0 + np.abs(m))
        return (base(i, j, m + step) - base(i, j, np.maximum(m - step, 0.0))) / (
            m + step - np.maximum(m - step, 0.0)
        )

    return fd


def _bracketed_root(r, dr, lo, hi, rtol_scale, active, maxiter=200, tol=1e-12):
    """Safeguarded Newton on ``[lo, hi]`` for increasing ``r`` with ``r(lo) < 0 < r(hi)``.

    Works elementwise on arrays; entries outside ``active`` are ignored.
    Returns ``(root, iterations, max_residual, ok)``.
    """
    x = 0.5 * (lo + hi)
    for it in range(1, maxiter + 1):
        rx = r(x)
        done = (np.abs(rx) <= tol * rtol_scale) | (hi - lo <= 4e-16 * np.maximum(hi, 1.0))
        done |= ~active
        if np.all(done):
            return x, it, float(np.max(np.abs(np.where(active, rx, 0.0)), initial=0.0)), True
        neg = rx < 0
        lo = np.where(neg, x, lo)
        hi = np.where(neg, hi, x)
        d = dr(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = x - rx / d
        ok = np.isfinite(newton) & (newton > lo) & (newton < hi)
        # Newton only once the bracket is reasonably tight; bisect otherwise.
        ok &= (hi - lo) <= 0.5 * np.maximum(np.abs(x), 1e-3) + 1e-12
        x = np.where(done, x, np.where(ok, newton, 0.5 * (lo + hi)))
    rx = np.where(active, r(x), 0.0)
    return x, maxiter, float(np.max(np.abs(rx), initial=0.0)), False


def _flux_ratio(a, m, tau, q, iters=100):
    """Solve ``rho^(q-1) + (m rho - a) / tau = 0`` for ``rho >= 0`` elementwise.

    ``rho * m`` is the optimal flux magnitude at density ``m``.
    """
    lo = np.zeros_like(a)
    with np.errstate(divide="ignore"):
        hi = np.where(m > 0, a / np.where(m > 0, m, 1.0), (a / tau) ** (1.0 / (q - 1)))
    hi = np.minimum(hi, (a / tau) ** (1.0 / (q - 1)))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        val = mid ** (q - 1) + (m * mid - a) / tau
        lo = np.where(val < 0, mid, lo)
        hi = np.where(val < 0, hi, mid)
    return 0.5 * (lo + hi)


def prox_arrays(
    mbar: np.ndarray,
    wbar: np.ndarray,
    tau: float,
    i: np.ndarray,
    j: np.ndarray,
    terminal,
    coupling: CouplingSpec,
    grid: GridSpec,
    general_q: bool = False,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Elementwise proximal map of ``tau * (bhat + F [+ G / dt])``.

    ``mbar`` has shape ``S``, ``wbar`` shape ``(4,) + S``; ``i``, ``j`` and
    ``terminal`` broadcast against ``S``. Returns ``(m, w, iterations)``.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    q = grid.q
    if q != 2.0 and not general_q:
        raise ValueError("q != 2 requires general_q=True")
    mbar = np.asarray(mbar, dtype=float)
    p = project_K(wbar)
    a2 = np.sum(p * p, axis=0)
    a = np.sqrt(a2)
    terminal = np.broadcast_to(np.asarray(terminal, dtype=bool), mbar.shape)
    dt = grid.dt
    f, g = coupling.f, coupling.g
    df = _deriv(coupling.df, f)
    dg = _deriv(coupling.dg, g)

    def cost_grad(m):
        out = f(i, j, m)
        if np.any(terminal):
            out = out + np.where(terminal, g(i, j, m) / dt, 0.0)
        return out

    def cost_hess(m):
        out = df(i, j, m)
        if np.any(terminal):
            out = out + np.where(terminal, dg(i, j, m) / dt, 0.0)
        return out

    if q == 2.0 and not general_q:

        def r(m):
            return -a2 / (2.0 * (m + tau) ** 2) + cost_grad(m) + (m - mbar) / tau

        def dr(m):
            return a2 / (m + tau) ** 3 + cost_hess(m) + 1.0 / tau

    else:
        qc = q / (q - 1.0)

        def r(m):
            rho = _flux_ratio(a, m, tau, q)
            return -(rho**q) / qc + cost_grad(m) + (m - mbar) / tau

        def dr(m):
            return np.full_like(m, np.nan)  # bisection only

    zero = np.zeros_like(mbar)
    r0 = np.broadcast_to(r(zero), mbar.shape)
    active = r0 < 0
    m_out = np.zeros(mbar.shape)
    iters = 0
    if np.any(active):
        hi = np.maximum(mbar, 0.0) + tau * (np.abs(r0) + 1.0)
        for _ in range(60):
            bad = active & (r(hi) <= 0)
            if not np.any(bad):
                break
            hi = np.where(bad, 2.0 * hi, hi)
        root, iters, res, ok = _bracketed_root(
            r, dr, zero, hi, 1.0 + np.abs(r0), active, maxiter=300 if general_q else 200
        )
        if not ok:
            raise ProxConvergenceError("proximal root-finder did not converge", res)
        m_out = np.where(active, root, 0.0)
    if q == 2.0 and not general_q:
        scale = m_out / (m_out + tau)
    else:
        rho = _flux_ratio(a, m_out, tau, q)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(a > 0, m_out * rho / np.where(a > 0, a, 1.0), 0.0)
    w_out = np.where(m_out > 0, scale, 0.0) * p
    return m_out, w_out, iters


def prox_point(
    mbar: float,
    wbar,
    tau: float,
    x_index: tuple[int, int],
    is_terminal: bool,
    coupling: CouplingSpec,
    grid: GridSpec,
    general_q: bool = False,
) -> ProxPointResult:
    """Proximal map at a single grid point; see :func:`prox_arrays`."""
    i, j = x_index
    m, w, it = prox_arrays(
        np.asarray(float(mbar)),
        np.asarray(wbar, dtype=float).reshape(4),
        tau,
        np.asarray(i),
        np.asarray(j),
        is_terminal,
        coupling,
        grid,
        general_q=general_q,
    )
    return ProxPointResult(m=float(m), w=np.asarray(w), converged=True, iterations=it)


def prox_phi(
    m: np.ndarray,
    w: np.ndarray,
    tau: float,
    coupling: CouplingSpec,
    grid: GridSpec,
    general_q: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Proximal map of the full objective; ``m^0`` carries no cost and is copied."""
    m = np.asarray(m, dtype=float)
    w = np.asarray(w, dtype=float)
    i, j = grid.indices()
    terminal = np.zeros((grid.N_T, 1, 1), dtype=bool)
    terminal[-1] = True
    m_new, w_new, _ = prox_arrays(
        m[1:], np.moveaxis(w, 1, 0), tau, i, j, terminal, coupling, grid, general_q
    )
    m_out = np.empty_like(m)
    m_out[0] = m[0]
    m_out[1:] = m_new
    return m_out, np.ascontiguousarray(np.moveaxis(w_new, 0, 1))

"""Space-only (semi-coarsened) geometric multigrid for the normal operator ``Q``.

Level ``k`` uses ``N_h = H * 2**k`` points per axis and the full time grid, so
it carries ``(N_T + 1) * H**2 * 4**k`` unknowns. Coarse operators are
rediscretized from the constraint operators on the coarser grid (same ``nu``,
``dt`` and ``N_T``). Smoothing is forward Gauss-Seidel in the lexicographic
order of the flattened field (time slice, then ``i``, then ``j``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator

from .grid import GridSpec
from .krylov import DenseCholesky, lanczos_condition_estimate
from .operators import assemble_Q

logger = logging.getLogger(__name__)

CYCLES = ("V", "W", "F")


@numba.njit(cache=True)
def _gs_forward(indptr, indices, data, x, b, sweeps):
    n = x.shape[0]
    for _ in range(sweeps):
        for row in range(n):
            acc = b[row]
            diag = 0.0
            for p in range(indptr[row], indptr[row + 1]):
                col = indices[p]
                if col == row:
                    diag = data[p]
                else:
                    acc -= data[p] * x[col]
            x[row] = acc / diag


def gauss_seidel_sweep(Q: sp.csr_matrix, x: np.ndarray, b: np.ndarray, sweeps: int = 1) -> np.ndarray:
    """In-place forward lexicographic Gauss-Seidel sweeps on ``Q x = b``; returns ``x``."""
    if sweeps <= 0:
        return x
    Q = sp.csr_matrix(Q)
    if np.any(Q.diagonal() == 0):
        raise ValueError("Gauss-Seidel needs a nonzero diagonal")
    if x.dtype != np.float64 or not x.flags.c_contiguous:
        raise TypeError("x must be a contiguous float64 array (updated in place)")
    _gs_forward(
        Q.indptr.astype(np.int64),
        Q.indices.astype(np.int64),
        Q.data.astype(np.float64),
        x.reshape(-1),
        np.ascontiguousarray(b, dtype=np.float64).reshape(-1),
        int(sweeps),
    )
    return x


def _as_slices(x: np.ndarray, n_h: int) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(-1, n_h, n_h)


def restrict_field(x: np.ndarray) -> np.ndarray:
    """Nine-point full weighting in space, identity in time.

    ``x`` has shape ``(..., 2n, 2n)``; the result has shape ``(..., n, n)``
    with ``out[i, j]`` centred on ``x[2i, 2j]``.
    """
    x = np.asarray(x, dtype=float)
    s = lambda a, di, dj: np.roll(np.roll(a, -di, axis=-2), -dj, axis=-1)
    full = (
        4.0 * x
        + 2.0 * (s(x, 1, 0) + s(x, -1, 0) + s(x, 0, 1) + s(x, 0, -1))
        + s(x, 1, 1) + s(x, 1, -1) + s(x, -1, 1) + s(x, -1, -1)
    ) / 16.0
    return np.ascontiguousarray(full[..., ::2, ::2])


def interpolate_field(xc: np.ndarray) -> np.ndarray:
    """Periodic bilinear interpolation in space, identity in time."""
    xc = np.asarray(xc, dtype=float)
    n = xc.shape[-1]
    out = np.empty(xc.shape[:-2] + (2 * n, 2 * n))
    ip = np.roll(xc, -1, axis=-2)
    jp = np.roll(xc, -1, axis=-1)
    ijp = np.roll(ip, -1, axis=-1)
    out[..., ::2, ::2] = xc
    out[..., 1::2, ::2] = 0.5 * (xc + ip)
    out[..., ::2, 1::2] = 0.5 * (xc + jp)
    out[..., 1::2, 1::2] = 0.25 * (xc + ip + jp + ijp)
    return out


@dataclass
class Level:
    grid: GridSpec
    Q: sp.csr_matrix

    def __post_init__(self):
        if np.any(self.Q.diagonal() == 0):
            raise ValueError("Gauss-Seidel needs a nonzero diagonal")
        self._csr = (
            self.Q.indptr.astype(np.int64),
            self.Q.indices.astype(np.int64),
            self.Q.data.astype(np.float64),
        )

    @property
    def size(self) -> int:
        return self.Q.shape[0]

    def smooth(self, x: np.ndarray, b: np.ndarray, sweeps: int) -> None:
        if sweeps > 0:
            _gs_forward(*self._csr, x, b, int(sweeps))


@dataclass
class MGHierarchy:
    """Grids and operators of every level, plus cycle settings.

    ``levels[0]`` is the coarsest grid. The hierarchy is read-only after
    :func:`build_hierarchy`; every cycle allocates its own work vectors.
    """

    levels: list
    eta1: int
    eta2: int
    cycle: str
    H: int
    coarse: DenseCholesky = field(repr=False)

    @property
    def finest(self) -> int:
        return len(self.levels) - 1

    def restrict(self, x: np.ndarray, k: int) -> np.ndarray:
        """Restrict a level-``k`` vector to level ``k - 1`` (flat in, flat out)."""
        n_h = self.levels[k].grid.N_h
        return restrict_field(_as_slices(x, n_h)).ravel()

    def interpolate(self, xc: np.ndarray, k: int) -> np.ndarray:
        """Interpolate a level-``k - 1`` vector to level ``k`` (flat in, flat out)."""
        n_h = self.levels[k - 1].grid.N_h
        return interpolate_field(_as_slices(xc, n_h)).ravel()


def build_hierarchy(
    grid: GridSpec,
    H: int = 2,
    levels: Optional[int] = None,
    eta1: int = 2,
    eta2: int = 2,
    cycle: str = "F",
    spd_check_size: int = 4096,
) -> MGHierarchy:
    """Assemble ``Q_k`` on every level and factor the coarsest one.

    ``grid.N_h`` must equal ``H * 2**levels`` with ``levels >= 1``; when
    ``levels`` is omitted it is inferred from ``N_h / H``.
    """
    if cycle not in CYCLES:
        raise ValueError(f"cycle must be one of {CYCLES}, got {cycle!r}")
    if H < 2:
        raise ValueError(f"coarsest grid size H must be >= 2, got {H}")
    if levels is None:
        ratio = grid.N_h // H
        levels = int(round(np.log2(ratio))) if ratio >= 1 else 0
    if levels < 1 or grid.N_h != H * 2**levels:
        raise ValueError(
            f"N_h = {grid.N_h} is not of the form H * 2**levels with H = {H} "
            f"and levels >= 1 (levels = {levels})"
        )
    lv = []
    for k in range(levels + 1):
        g = grid.with_spatial(H * 2**k)
        Q = assemble_Q(g)
        if Q.shape[0] <= spd_check_size and k > 0:
            lanczos_condition_estimate(Q, Q.shape[0], iters=min(30, Q.shape[0]))
        lv.append(Level(g, Q))
    coarse = DenseCholesky(lv[0].Q)
    logger.debug("multigrid hierarchy with %d levels, finest size %d", levels + 1, lv[-1].size)
    return MGHierarchy(lv, int(eta1), int(eta2), cycle, H, coarse)


def mg_cycle(
    hier: MGHierarchy,
    k: int,
    x: np.ndarray,
    b: np.ndarray,
    cycle: Optional[str] = None,
    trace: Optional[list] = None,
) -> np.ndarray:
    """One multigrid cycle on level ``k`` starting from ``x``; returns the new iterate.

    ``trace``, if given, receives a ``(k, cycle)`` tuple for every call.
    """
    cycle = hier.cycle if cycle is None else cycle
    if trace is not None:
        trace.append((k, cycle))
    if k == 0:
        return hier.coarse.solve(b)
    level = hier.levels[k]
    Q = level.Q
    x = np.array(x, dtype=float).ravel()
    b = np.ascontiguousarray(b, dtype=float).ravel()
    level.smooth(x, b, hier.eta1)
    rc = hier.restrict(b - Q @ x, k)
    xc = np.zeros_like(rc)
    xc = mg_cycle(hier, k - 1, xc, rc, cycle, trace)
    if cycle == "W":
        xc = mg_cycle(hier, k - 1, xc, rc, cycle, trace)
    elif cycle == "F":
        xc = mg_cycle(hier, k - 1, xc, rc, "V", trace)
    x += hier.interpolate(xc, k)
    level.smooth(x, b, hier.eta2)
    return x


def mg_preconditioner(hier: MGHierarchy) -> LinearOperator:
    """One cycle from a zero initial guess on the finest level, as a linear operator."""
    n = hier.levels[-1].size
    top = hier.finest

    def apply(y):
        return mg_cycle(hier, top, np.zeros(n), y)

    return LinearOperator((n, n), matvec=apply, dtype=float)

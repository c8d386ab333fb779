"""Periodic space-time grid and the pointwise finite-difference operators.

Fields are plain numpy arrays with the following layouts:

* density ``m``: ``(N_T + 1, N_h, N_h)``, indexed ``m[k, i, j]``
* flux ``w``: ``(N_T, 4, N_h, N_h)``, indexed ``w[k, c, i, j]``
* dual ``u``: ``(N_T, N_h, N_h)``

Memory order is k-major, then ``i`` outer and ``j`` inner (C order), which is
also the lexicographic order used by the Gauss-Seidel smoother. Spatial
indices are periodic: index ``i`` stands for ``i mod N_h``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Discretization and model parameters.

    Parameters
    ----------
    N_h : int
        Points per spatial axis of the unit torus.
    N_T : int
        Number of time steps.
    T : float
        Time horizon.
    nu : float
        Viscosity, non-negative.
    q : float
        Exponent of the cost ``|w|^q / (q m^(q-1))``; must exceed 1.
    """

    N_h: int
    N_T: int
    T: float = 1.0
    nu: float = 0.5
    q: float = 2.0
    h: float = field(init=False)
    dt: float = field(init=False)

    def __post_init__(self):
        if int(self.N_h) != self.N_h or self.N_h < 1:
            raise ValueError(f"N_h must be a positive integer, got {self.N_h!r}")
        if int(self.N_T) != self.N_T or self.N_T < 1:
            raise ValueError(f"N_T must be a positive integer, got {self.N_T!r}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T!r}")
        if not self.nu >= 0:
            raise ValueError(f"nu must be non-negative, got {self.nu!r}")
        if not self.q > 1:
            raise ValueError(f"q must be greater than 1, got {self.q!r}")
        object.__setattr__(self, "N_h", int(self.N_h))
        object.__setattr__(self, "N_T", int(self.N_T))
        object.__setattr__(self, "h", 1.0 / self.N_h)
        object.__setattr__(self, "dt", self.T / self.N_T)

    @property
    def q_conj(self) -> float:
        return self.q / (self.q - 1.0)

    @property
    def density_shape(self) -> tuple[int, int, int]:
        return (self.N_T + 1, self.N_h, self.N_h)

    @property
    def flux_shape(self) -> tuple[int, int, int, int]:
        return (self.N_T, 4, self.N_h, self.N_h)

    @property
    def dual_shape(self) -> tuple[int, int, int]:
        return (self.N_T, self.N_h, self.N_h)

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Return the node coordinates ``x_{i,j} = (i h, j h)`` as two 2-D arrays."""
        s = np.arange(self.N_h) * self.h
        return np.meshgrid(s, s, indexing="ij")

    def indices(self) -> tuple[np.ndarray, np.ndarray]:
        i = np.arange(self.N_h)
        return np.meshgrid(i, i, indexing="ij")

    def with_spatial(self, N_h: int) -> "GridSpec":
        """Same time discretization and model parameters on another spatial grid."""
        return GridSpec(N_h=N_h, N_T=self.N_T, T=self.T, nu=self.nu, q=self.q)


def _check_slice(y: np.ndarray, grid: GridSpec) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape[-2:] != (grid.N_h, grid.N_h):
        raise ValueError(
            f"expected trailing shape ({grid.N_h}, {grid.N_h}), got {y.shape}"
        )
    return y


def apply_D1(y: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Forward difference in the first spatial index, ``(y[i+1, j] - y[i, j]) / h``.

    Works on any array whose last two axes are spatial.
    """
    y = _check_slice(y, grid)
    return (np.roll(y, -1, axis=-2) - y) / grid.h


def apply_D2(y: np.ndarray, grid: GridSpec) -> np.ndarray:
    y = _check_slice(y, grid)
    return (np.roll(y, -1, axis=-1) - y) / grid.h


def apply_D_h(y: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Four-component discrete gradient.

    Returns an array with a new axis of length 4 inserted before the two
    spatial axes: ``(D1 y[i], D1 y[i-1], D2 y[j], D2 y[j-1])``.
    """
    d1 = apply_D1(y, grid)
    d2 = apply_D2(y, grid)
    return np.stack(
        [d1, np.roll(d1, 1, axis=-2), d2, np.roll(d2, 1, axis=-1)], axis=-3
    )


def apply_hat_D_h(y: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Upwind (Godunov) gradient with sign pattern ``(+, -, +, -)``.

    Components are ``((D1 y)^-, -(D1 y)^+[i-1], (D2 y)^-, -(D2 y)^+[j-1])``
    with ``a^+ = max(a, 0)`` and ``a^- = a^+ - a``.
    """
    d1 = apply_D1(y, grid)
    d2 = apply_D2(y, grid)
    return np.stack(
        [
            np.maximum(-d1, 0.0),
            -np.maximum(np.roll(d1, 1, axis=-2), 0.0),
            np.maximum(-d2, 0.0),
            -np.maximum(np.roll(d2, 1, axis=-1), 0.0),
        ],
        axis=-3,
    )


def apply_laplacian(y: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Periodic five-point Laplacian ``-(4 y - sum of neighbours) / h^2``."""
    y = _check_slice(y, grid)
    nb = (
        np.roll(y, -1, axis=-2)
        + np.roll(y, 1, axis=-2)
        + np.roll(y, -1, axis=-1)
        + np.roll(y, 1, axis=-1)
    )
    return (nb - 4.0 * y) / grid.h**2


def time_derivative(m: np.ndarray, k: int, grid: GridSpec) -> np.ndarray:
    """Forward difference ``(m[k+1] - m[k]) / dt`` of a density-shaped field."""
    m = np.asarray(m, dtype=float)
    if m.shape != grid.density_shape:
        raise ValueError(f"expected shape {grid.density_shape}, got {m.shape}")
    if not 0 <= k <= grid.N_T - 1:
        raise IndexError(f"k must lie in [0, {grid.N_T - 1}], got {k}")
    return (m[k + 1] - m[k]) / grid.dt


def discretize_initial_density(
    m0: Callable[[np.ndarray, np.ndarray], np.ndarray],
    grid: GridSpec,
    subsamples: int = 4,
) -> np.ndarray:
    """Cell-average density of ``m0`` on the square cells centred at the nodes.

    The returned values are densities (cell mass divided by ``h^2``), so that
    ``h^2 * sum(mbar) == 1`` when ``m0`` has unit mass. The cell integral is
    approximated by the midpoint rule on a ``subsamples x subsamples``
    sub-grid.

    Parameters
    ----------
    m0 : callable
        Vectorized density ``m0(x, y)`` on the unit torus.
    grid : GridSpec
    subsamples : int
        Sub-samples per cell and axis.
    """
    if subsamples < 1:
        raise ValueError("subsamples must be >= 1")
    h = grid.h
    x, y = grid.coordinates()
    offsets = ((np.arange(subsamples) + 0.5) / subsamples - 0.5) * h
    total = np.zeros_like(x)
    for ox in offsets:
        for oy in offsets:
            vals = np.broadcast_to(
                np.asarray(m0((x + ox) % 1.0, (y + oy) % 1.0), dtype=float), x.shape
            )
            if np.any(vals < 0) or not np.all(np.isfinite(vals)):
                raise ValueError("initial density must be finite and non-negative")
            total = total + vals
    return total / subsamples**2

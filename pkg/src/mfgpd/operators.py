"""Linear constraint operators of the discrete variational problem.

``A`` maps densities to the discrete Fokker-Planck residual without the
transport term, ``B`` is the discrete divergence of the flux. The augmented
operator ``C = [A~ | B~]`` appends the initial condition ``m^0`` as a leading
block, so that the constraint reads ``C(m, w) = (mbar, 0)``.

Multiplier fields ``z`` have shape ``(N_T + 1, N_h, N_h)``: ``z[0]`` is the
multiplier of the initial condition (``lambda``) and ``z[1:]`` holds
``u^0 .. u^{N_T-1}``.

Inner products are plain Euclidean sums without ``h^2 dt`` weights.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .grid import GridSpec, apply_D_h, apply_laplacian


def multiplier_shape(grid: GridSpec) -> tuple[int, int, int]:
    return (grid.N_T + 1, grid.N_h, grid.N_h)


def _expect(x, shape, name):
    x = np.asarray(x, dtype=float)
    if x.shape != tuple(shape):
        raise ValueError(f"{name}: expected shape {tuple(shape)}, got {x.shape}")
    return x


def apply_A(m: np.ndarray, grid: GridSpec) -> np.ndarray:
    m = _expect(m, grid.density_shape, "m")
    return (m[1:] - m[:-1]) / grid.dt - grid.nu * apply_laplacian(m[1:], grid)


def apply_A_star(u: np.ndarray, grid: GridSpec) -> np.ndarray:
    u = _expect(u, grid.dual_shape, "u")
    out = np.zeros(grid.density_shape)
    out[:-1] -= u / grid.dt
    out[1:] += u / grid.dt - grid.nu * apply_laplacian(u, grid)
    return out


def apply_B(w: np.ndarray, grid: GridSpec) -> np.ndarray:
    w = _expect(w, grid.flux_shape, "w")
    h = grid.h
    w1, w2, w3, w4 = w[:, 0], w[:, 1], w[:, 2], w[:, 3]
    return (
        (w1 - np.roll(w1, 1, axis=-2))
        + (np.roll(w2, -1, axis=-2) - w2)
        + (w3 - np.roll(w3, 1, axis=-1))
        + (np.roll(w4, -1, axis=-1) - w4)
    ) / h


def apply_B_star(u: np.ndarray, grid: GridSpec) -> np.ndarray:
    u = _expect(u, grid.dual_shape, "u")
    return -apply_D_h(u, grid)


def apply_C(m: np.ndarray, w: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Return ``(m^0, Am + Bw)`` stacked as a multiplier-shaped array."""
    out = np.empty(multiplier_shape(grid))
    out[0] = _expect(m, grid.density_shape, "m")[0]
    out[1:] = apply_A(m, grid) + apply_B(w, grid)
    return out


def apply_C_star(z: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(A~* z, B~* z)``; the ``lambda`` block only feeds ``m^0``."""
    z = _expect(z, multiplier_shape(grid), "z")
    u = z[1:]
    dm = apply_A_star(u, grid)
    dm[0] += z[0]
    return dm, apply_B_star(u, grid)


def apply_Q(z: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Matrix-free normal operator ``Q z = C C* z``."""
    return apply_C(*apply_C_star(z, grid), grid)


def constraint_rhs(mbar: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Right-hand side ``(mbar, 0)`` of ``C(m, w) = (mbar, 0)``."""
    rhs = np.zeros(multiplier_shape(grid))
    rhs[0] = _expect(mbar, (grid.N_h, grid.N_h), "mbar")
    return rhs


# --- assembled sparse forms -------------------------------------------------


def _shift(n: int) -> sp.csr_matrix:
    """Periodic shift ``(S y)_i = y_{i+1}``."""
    return sp.csr_matrix(
        (np.ones(n), (np.arange(n), (np.arange(n) + 1) % n)), shape=(n, n)
    )


def spatial_matrices(grid: GridSpec) -> dict[str, sp.csr_matrix]:
    """Sparse ``D1``, ``D2``, ``D_h`` (4n x n) and ``Delta_h`` on one time slice."""
    n1 = grid.N_h
    eye1 = sp.identity(n1, format="csr")
    S = _shift(n1)
    d = (S - eye1) / grid.h
    D1 = sp.kron(d, eye1, format="csr")
    D2 = sp.kron(eye1, d, format="csr")
    back_i = sp.kron(S.T, eye1, format="csr")
    back_j = sp.kron(eye1, S.T, format="csr")
    Dh = sp.vstack([D1, back_i @ D1, D2, back_j @ D2], format="csr")
    sec = S + S.T - 2 * eye1
    lap = (sp.kron(sec, eye1) + sp.kron(eye1, sec)) / grid.h**2
    return {"D1": D1, "D2": D2, "Dh": Dh, "lap": sp.csr_matrix(lap)}


def assemble_A(grid: GridSpec) -> sp.csr_matrix:
    n = grid.N_h**2
    L = -spatial_matrices(grid)["lap"]
    eye = sp.identity(n, format="csr")
    NT = grid.N_T
    lower = sp.eye(NT, NT + 1, k=0, format="csr")
    upper = sp.eye(NT, NT + 1, k=1, format="csr")
    return sp.csr_matrix(
        sp.kron(lower, -eye / grid.dt) + sp.kron(upper, grid.nu * L + eye / grid.dt)
    )


def assemble_B(grid: GridSpec) -> sp.csr_matrix:
    M = -spatial_matrices(grid)["Dh"].T
    return sp.kron(sp.identity(grid.N_T), M, format="csr")


def assemble_C(grid: GridSpec) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Sparse ``A~`` and ``B~`` acting on flattened fields."""
    n = grid.N_h**2
    NT = grid.N_T
    top = sp.hstack([sp.identity(n), sp.csr_matrix((n, NT * n))])
    At = sp.vstack([top, assemble_A(grid)], format="csr")
    Bt = sp.vstack([sp.csr_matrix((n, NT * 4 * n)), assemble_B(grid)], format="csr")
    return At, Bt


def assemble_Q(grid: GridSpec) -> sp.csr_matrix:
    """Assembled ``Q = A~ A~^T + B~ B~^T`` in CSR form with sorted indices."""
    At, Bt = assemble_C(grid)
    Q = sp.csr_matrix(At @ At.T + Bt @ Bt.T)
    Q.sum_duplicates()
    Q.eliminate_zeros()
    Q.sort_indices()
    return Q

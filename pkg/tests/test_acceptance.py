"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Full-size runs are marked ``slow`` (minutes). Solver runs use the step sizes
of the shipped presets, ``gamma = 3``, ``tau = 0.3``.
"""

import numpy as np
import pytest

from mfgpd.coupling import prox_point, quadratic_coupling, sincos_coupling
from mfgpd.grid import GridSpec
from mfgpd.krylov import lanczos_condition_estimate, sparse_condition_estimate
from mfgpd.multigrid import build_hierarchy, interpolate_field, mg_cycle, mg_preconditioner, restrict_field
from mfgpd.operators import (
    apply_A,
    apply_A_star,
    apply_B,
    apply_B_star,
    apply_C,
    apply_C_star,
    apply_Q,
    assemble_Q,
    multiplier_shape,
)
from mfgpd.primal_dual import (
    CPConfig,
    fp_residual,
    hjb_residual,
    mass_deviation,
    rms,
    solve_mfg,
    turnpike_distance,
)
from test_coupling import brute_force_prox
from test_operators import dense_A, dense_B, dense_C

STEPS = dict(gamma=3.0, tau=0.3)
BENCH_NUS = (0.046, 0.12, 0.2, 0.36, 0.6)

_runs = {}


def run_32(nu):
    """Full CP run at 32^3, T = 1, cached across criteria."""
    if nu not in _runs:
        g = GridSpec(32, 32, T=1.0, nu=nu)
        _runs[nu] = solve_mfg(g, sincos_coupling(g), CPConfig(**STEPS))
    return _runs[nu]


def _rel_norm(a, b):
    return np.linalg.norm(np.ravel(a) - np.ravel(b)) / max(np.linalg.norm(np.ravel(b)), 1e-300)


def test_criterion_1_operators(acceptance):
    rng = np.random.default_rng(1)
    worst_dense, worst_adj = 0.0, 0.0
    for n, NT in [(8, 3), (16, 5)]:
        g = GridSpec(n, NT, nu=0.3)
        A, B, C = dense_A(g), dense_B(g), dense_C(g)
        Q = C @ C.T
        m = rng.standard_normal(g.density_shape)
        w = rng.standard_normal(g.flux_shape)
        u = rng.standard_normal(g.dual_shape)
        z = rng.standard_normal(multiplier_shape(g))
        dm, dw = apply_C_star(z, g)
        pairs = [
            (apply_A(m, g), A @ m.ravel()),
            (apply_A_star(u, g), A.T @ u.ravel()),
            (apply_B(w, g), B @ w.ravel()),
            (apply_B_star(u, g), B.T @ u.ravel()),
            (apply_C(m, w, g), C @ np.concatenate([m.ravel(), w.ravel()])),
            (np.concatenate([dm.ravel(), dw.ravel()]), C.T @ z.ravel()),
            (apply_Q(z, g), Q @ z.ravel()),
            (assemble_Q(g).toarray(), Q),
        ]
        worst_dense = max(worst_dense, max(_rel_norm(a, b) for a, b in pairs))
        for _ in range(100):
            m = rng.standard_normal(g.density_shape)
            w = rng.standard_normal(g.flux_shape)
            u = rng.standard_normal(g.dual_shape)
            z = rng.standard_normal(multiplier_shape(g))
            dm, dw = apply_C_star(z, g)
            for lhs, rhs in [
                (np.vdot(apply_A(m, g), u), np.vdot(m, apply_A_star(u, g))),
                (np.vdot(apply_B(w, g), u), np.vdot(w, apply_B_star(u, g))),
                (np.vdot(apply_C(m, w, g), z), np.vdot(m, dm) + np.vdot(w, dw)),
            ]:
                worst_adj = max(worst_adj, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
    ok = worst_dense <= 1e-12 and worst_adj <= 1e-12
    acceptance(1, ok, f"dense-oracle max rel err {worst_dense:.2e}, adjoint max rel err {worst_adj:.2e} (<= 1e-12)")
    assert ok


def test_criterion_2_prox_oracle(acceptance):
    rng = np.random.default_rng(2)
    grid = GridSpec(1, 1)
    worst = 0.0
    for _ in range(200):
        mbar = rng.uniform(0, 3)
        d = rng.standard_normal(4)
        wbar = d / np.linalg.norm(d) * rng.uniform(0, 3)
        tau = rng.uniform(0.01, 2)
        hbar = rng.uniform(-3, 3)
        res = prox_point(mbar, wbar, tau, (0, 0), False, quadratic_coupling(np.array([[hbar]])), grid)
        m_ref, w_ref = brute_force_prox(mbar, wbar, tau, hbar)
        worst = max(worst, abs(res.m - m_ref), float(np.max(np.abs(res.w - w_ref))))
    ok = worst <= 1e-4
    acceptance(2, ok, f"200 samples, max |prox - brute force| = {worst:.2e} (<= 1e-4)")
    assert ok


def _restriction_matrices(n):
    R = np.array([restrict_field(e.reshape(n, n)).ravel() for e in np.eye(n * n)]).T
    I = np.array([interpolate_field(e.reshape(n // 2, n // 2)).ravel() for e in np.eye(n * n // 4)]).T
    return R, I


def test_criterion_3_multigrid(acceptance):
    rng = np.random.default_rng(3)
    exact = True
    for n in (4, 8, 16, 32):
        R, I = _restriction_matrices(n)
        exact &= bool(np.array_equal(I, 4.0 * R.T))
    worst_lin, worst_ratio, notes = 0.0, 0.0, []
    for nu in (0.046, 0.6):
        g = GridSpec(32, 8, nu=nu)
        hier = build_hierarchy(g, H=2, eta1=2, eta2=2, cycle="F")
        Q = hier.levels[-1].Q
        P = mg_preconditioner(hier)
        n = Q.shape[0]
        a, b = rng.standard_normal(n), rng.standard_normal(n)
        lhs = P.matvec(1.5 * a - 0.7 * b)
        rhs = 1.5 * P.matvec(a) - 0.7 * P.matvec(b)
        worst_lin = max(worst_lin, np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs))
        ratios, noise = [], []
        for _ in range(5):
            bc = apply_C(rng.standard_normal(g.density_shape), rng.standard_normal(g.flux_shape), g).ravel()
            x = mg_cycle(hier, hier.finest, np.zeros(n), bc)
            ratios.append(np.linalg.norm(bc - Q @ x) / np.linalg.norm(bc))
            bw = rng.standard_normal(n)
            x = mg_cycle(hier, hier.finest, np.zeros(n), bw)
            noise.append(np.linalg.norm(bw - Q @ x) / np.linalg.norm(bw))
        worst_ratio = max(worst_ratio, max(ratios))
        notes.append(f"nu={nu}: {max(ratios):.3f} (white-noise rhs, info only: {max(noise):.3f})")
    ok = exact and worst_lin <= 1e-10 and worst_ratio <= 0.5
    acceptance(
        3, ok,
        f"I = 4 R^T exact: {exact}; linearity rel err {worst_lin:.1e} (<= 1e-10); "
        f"one F-cycle residual ratio on C(m,w) rhs " + "; ".join(notes) + " (<= 0.5)",
    )
    assert ok


def _avg_iterations(sol, factor):
    counts = []
    for r in sol.diagnostics:
        if not r.rhs_norm > 0:
            continue
        hit = next((it for it, res in r.inner_history if res <= factor * r.rhs_norm), None)
        counts.append(r.inner_iterations if hit is None else hit)
    return float(np.mean(counts))


@pytest.mark.slow
def test_criterion_4_krylov_efficiency(acceptance):
    rows, ok = [], True
    for nu in BENCH_NUS:
        sol = run_32(nu)
        a3, a8 = _avg_iterations(sol, 1e-3), _avg_iterations(sol, 1e-8)
        ok &= sol.converged and a3 <= 4 and a8 <= 7
        rows.append(f"nu={nu}: {a3:.2f}/{a8:.2f}")
    acceptance(4, ok, "avg MG-BiCGStab iterations 1e-3/1e-8 at 32^3: " + ", ".join(rows) + " (<= 4 / <= 7)")
    assert ok


@pytest.mark.slow
def test_criterion_5_cp_convergence(acceptance):
    its = {nu: run_32(nu) for nu in (0.046, 0.6)}
    ok = all(s.converged and s.iterations <= 100 for s in its.values())
    detail = ", ".join(f"nu={nu}: {s.iterations} iterations, converged={s.converged}" for nu, s in its.items())
    acceptance(5, ok, f"32^3 to 1e-6 RMS change: {detail} (<= 100)")
    assert ok


@pytest.mark.slow
def test_criterion_6_solution_validity(acceptance):
    sol = run_32(0.5)
    g = sol.grid
    cpl = sincos_coupling(g)
    mass = float(np.max(np.abs(mass_deviation(sol.m, g))))
    mmin = float(np.min(sol.m[1:]))
    _, hjb, _ = hjb_residual(sol.u, sol.m, cpl, g)
    _, fp, _ = fp_residual(sol.m, sol.u, g)
    ok = sol.converged and mass <= 1e-6 and mmin > 0 and hjb <= 1e-3 and fp <= 1e-3
    acceptance(
        6, ok,
        f"32^3 nu=0.5: mass dev {mass:.1e} (<= 1e-6), min m {mmin:.3f} (> 0), "
        f"HJB sup {hjb:.1e}, FP sup {fp:.1e} (<= 1e-3)",
    )
    assert ok


@pytest.mark.slow
def test_criterion_7_conditioning(acceptance):
    nus = (5e-4, 5e-3, 5e-2, 0.5)
    kappas = [sparse_condition_estimate(assemble_Q(GridSpec(32, 10, T=1.0, nu=nu)))[2] for nu in nus]
    increasing = all(b > a for a, b in zip(kappas, kappas[1:]))
    ratio = kappas[-1] / kappas[0]
    worst = 0.0
    plain = []
    for nu in nus:
        Q = assemble_Q(GridSpec(16, 5, T=1.0, nu=nu))
        ev = np.linalg.eigvalsh(Q.toarray())
        dense = ev[-1] / ev[0]
        worst = max(worst, abs(sparse_condition_estimate(Q)[2] - dense) / dense)
        plain.append(abs(lanczos_condition_estimate(Q, Q.shape[0], iters=300)[2] - dense) / dense)
    ok = increasing and ratio >= 100 and worst <= 0.05
    acceptance(
        7, ok,
        "kappa(Q) at 32^2x10: " + ", ".join(f"{k:.3e}" for k in kappas)
        + f"; increasing {increasing}, ratio {ratio:.0f} (>= 100); Lanczos vs dense at 16^2x5 "
        f"max rel err {worst:.1e} (<= 0.05; 300-step plain Lanczos, info only: {max(plain):.2f})",
    )
    assert ok


@pytest.mark.slow
def test_criterion_8_turnpike(acceptance):
    g = GridSpec(64, 64, T=2.0, nu=0.5)
    sol = solve_mfg(g, sincos_coupling(g), CPConfig(**STEPS))
    d = turnpike_distance(sol.m, None, g)
    d0 = d[0]
    quarter = d[g.N_T // 4]
    interior_min = float(np.min(np.delete(d[1:-1], g.N_T // 2 - 1)))
    tail = d[g.N_T - int(np.ceil(0.1 * g.N_T)):]
    rises = bool(np.all(np.diff(tail) > 0))
    ok = sol.converged and quarter <= 0.1 * d0 and rises
    acceptance(
        8, ok,
        f"64^2x64 T=2: {sol.iterations} CP iterations; d0 {d0:.3e}, d[N_T/4] {quarter:.2e} (<= {0.1 * d0:.2e}), "
        f"min off-reference interior {interior_min:.1e}; final 10%: {tail[0]:.2e} -> {tail[-1]:.2e}, "
        f"strictly increasing {rises}",
    )
    assert ok


@pytest.mark.slow
def test_criterion_9_cross_solver(acceptance):
    g = GridSpec(16, 8, nu=0.5)
    cpl = sincos_coupling(g)
    backends = {
        "direct": CPConfig(linear_solver="direct", **STEPS),
        "cg": CPConfig(linear_solver="cg", preconditioner="identity", lin_maxit=5000, **STEPS),
        "mg-bicgstab": CPConfig(linear_solver="bicgstab", preconditioner="multigrid", **STEPS),
    }
    sols = {k: solve_mfg(g, cpl, c) for k, c in backends.items()}
    worst = 0.0
    names = list(sols)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            worst = max(worst, rms(sols[a].m - sols[b].m, sols[a].w - sols[b].w))
    ok = all(s.converged for s in sols.values()) and worst <= 1e-6
    acceptance(
        9, ok,
        f"16^2x8 nu=0.5: max pairwise RMS difference of (m, w) {worst:.1e} (<= 1e-6); iterations "
        + ", ".join(f"{k} {s.iterations}" for k, s in sols.items()),
    )
    assert ok

"""Elliptic assembly and disk solves: oracle formulas and solver contracts."""

import numpy as np
import pytest
import scipy.sparse.linalg as spla
from hypothesis import given, settings, strategies as st

from branchforge.elliptic import (
    DirichletProblem,
    EllipticOperator,
    FieldGrid,
    assemble_tensors_flat,
    assemble_tensors_quadratic,
    build_disk_grid,
    coercivity_margin,
    grid_gradient,
    interior_estimate_report,
    laplacian_operator,
    quadratic_couplings,
    solve_dirichlet,
    _assemble,
)
from branchforge.errors import ConfigViolation, ConvergenceError, RegimeError
from branchforge.fitting import fit_power_law


def apply_l1(op, a_mat):
    # a_mat[i, j] stands for d_j v^i
    return np.einsum("lij,ij->l", op.l1, a_mat)


# ---------------------------------------------------------------------------
# tensor assembly, generator-form regime


def test_flat_assembly_zero_form():
    n = 3
    op = assemble_tensors_flat(np.zeros(n), np.zeros((n, 2)), np.zeros((n, n)),
                               np.zeros((n, n, 2)), q=2)
    assert op.norm_sum() == 0.0
    assert op.smallness_ratio(0.0) == 0.0


def test_flat_assembly_single_coefficient():
    n = 3
    a0 = np.zeros(n)
    a0[0] = 0.7
    op = assemble_tensors_flat(a0, np.zeros((n, 2)), np.zeros((n, n)),
                               np.zeros((n, n, 2)), q=1)
    assert np.array_equal(op.l4, [0.7, 0.0, 0.0])
    assert np.all(op.l1 == 0) and np.all(op.l2 == 0) and np.all(op.l3 == 0)


def test_flat_assembly_matches_basis_oracle():
    # evaluate the defining linear maps on basis elements, independently of
    # the assembly's index gymnastics
    rng = np.random.default_rng(5)
    n, q = 3, 2
    a0 = rng.normal(size=n) * 1e-2
    dax = rng.normal(size=(n, 2)) * 1e-2
    day = rng.normal(size=(n, n)) * 1e-2
    b0 = rng.normal(size=(n, n, 2)) * 1e-2
    op = assemble_tensors_flat(a0, dax, day, b0, q)

    for l in range(n):
        for k in range(n):
            for j in range(2):
                basis = np.zeros((n, 2))
                basis[k, j] = 1.0
                want = q * (b0[l, k, 1] * basis[k, 0] - b0[l, k, 0] * basis[k, 1])
                got = apply_l1(op, basis)[l]
                assert abs(got - want) < 1e-15
        for k in range(n):
            v = np.zeros(n)
            v[k] = 1.0
            assert abs((op.l2 @ v)[l] - day[l, k]) < 1e-15
        for j in range(2):
            w = np.zeros(2)
            w[j] = 1.0
            assert abs((op.l3 @ w)[l] - dax[l, j]) < 1e-15
    assert np.array_equal(op.l4, a0)


def test_flat_assembly_rejects_bad_shapes():
    with pytest.raises(ConfigViolation):
        assemble_tensors_flat(np.zeros(3), np.zeros((3, 2)), np.zeros((2, 3)),
                              np.zeros((3, 3, 2)), q=1)


# ---------------------------------------------------------------------------
# tensor assembly, quadratic-graph regime


def test_quadratic_zero_hessian():
    op = assemble_tensors_quadratic(np.zeros((1, 4, 4)), q=1)
    assert np.all(op.l3 == 0) and np.all(op.l1 == 0)


def test_quadratic_scaling_is_quadratic():
    rng = np.random.default_rng(11)
    v = rng.normal(size=4)
    d2 = np.outer(v, v)[None, :, :]
    l3a = assemble_tensors_quadratic(d2, q=1).l3
    l3b = assemble_tensors_quadratic(2 * d2, q=1).l3
    assert np.allclose(l3b, 4 * l3a, rtol=0, atol=1e-14)
    assert np.linalg.norm(l3a) > 0


def test_quadratic_rejects_asymmetric():
    bad = np.zeros((1, 4, 4))
    bad[0, 0, 1] = 1.0
    with pytest.raises(ConfigViolation):
        assemble_tensors_quadratic(bad, q=1)


def _variation_integrals(d2psi, q, zeta, dzeta, gx, gy, da):
    """Quadrature of the two displayed couplings for one test field.

    zeta has shape (ny, nx, nbar); dzeta is its numerical gradient
    (ny, nx, nbar, 2). Returns (first coupling, second coupling)."""
    pxx = d2psi[:, :2, :2]
    pxy = d2psi[:, :2, 2:]
    x_vec = np.stack([gx, gy], axis=-1)                       # (ny, nx, 2)
    n_of_x = np.einsum("mji,yxi->yxmj", pxx, x_vec)           # Dxx . x
    m_of_z = np.einsum("mjk,yxk->yxmj", pxy, zeta)            # Dxy . zeta
    a_of_x = np.einsum("mjk,yxj->yxmk", pxy, x_vec)           # Dxy . x
    b_of_d = np.einsum("yxmk,yxkj->yxmj", a_of_x, dzeta)      # (...) . Dzeta
    i1 = q * np.sum(m_of_z * n_of_x) * da
    i2 = q * np.sum(b_of_d * n_of_x) * da
    return i1, i2


def test_quadratic_matches_quadrature_oracle():
    # recover the forcing tensor from numerically integrated first variations
    # against compactly supported test fields; independent of the
    # integration-by-parts algebra in the assembly
    rng = np.random.default_rng(23)
    nbar, q = 2, 2
    v = rng.normal(size=2 + nbar)
    d2psi = np.outer(v, v)[None, :, :]

    n_grid = 481
    xs = np.linspace(-1.0, 1.0, n_grid)
    da = (xs[1] - xs[0]) ** 2
    gx, gy = np.meshgrid(xs, xs)
    rr = (gx * gx + gy * gy) / 0.8 ** 2
    bump = np.where(rr < 1.0, (1.0 - rr) ** 3, 0.0)

    moments = np.empty((2, 2))
    comps = [gx, gy]
    for i in range(2):
        for j in range(2):
            moments[i, j] = np.sum(comps[i] * comps[j] * bump) * da

    got_ad, got_cd = quadratic_couplings(d2psi, q)
    phi_full = np.empty((nbar, 2))
    phi_first = np.empty((nbar, 2))
    for k in range(nbar):
        for i in range(2):
            zeta = np.zeros((n_grid, n_grid, nbar))
            zeta[:, :, k] = bump * comps[i]
            dzeta = np.zeros((n_grid, n_grid, nbar, 2))
            dy, dx = np.gradient(zeta[:, :, k], xs, xs)
            dzeta[:, :, k, 0] = dx
            dzeta[:, :, k, 1] = dy
            i1, i2 = _variation_integrals(d2psi, q, zeta, dzeta, gx, gy, da)
            phi_first[k, i] = i1
            phi_full[k, i] = i1 + i2

    l3_oracle = np.linalg.solve(moments, phi_full.T).T
    ad_oracle = np.linalg.solve(moments, phi_first.T).T
    l3 = got_ad + got_cd
    scale = max(np.abs(l3_oracle).max(), 1e-12)
    assert np.abs(l3 - l3_oracle).max() < 2e-3 * scale
    assert np.abs(got_ad - ad_oracle).max() < 2e-3 * max(np.abs(ad_oracle).max(), 1e-12)


# ---------------------------------------------------------------------------
# disk solves


def _boundary_from(fun):
    def g(pts):
        return fun(pts[:, 0], pts[:, 1])
    return g


def _scalar(fun):
    def g(x, y):
        return np.asarray(fun(x, y), dtype=float)[:, None] \
            if np.ndim(fun(x, y)) == 1 else fun(x, y)
    return g


def test_harmonic_linear_is_sharp():
    # the masked scheme reproduces polynomials of degree <= 2 exactly, so a
    # linear boundary extends to its own harmonic extension up to solver tol
    prob = DirichletProblem(laplacian_operator(1), radius=1.0,
                            boundary=_boundary_from(lambda x, y: x[:, None]),
                            h_pde=1.0 / 16)
    v = solve_dirichlet(prob)
    gx, gy = v.grid.coords()
    err = np.abs(v.values[:, :, 0] - gx)[v.grid.inside].max()
    assert err < 1e-7
    assert v.solve_info["rel_residual"] <= 1e-10


def test_quadratic_harmonic_is_sharp():
    prob = DirichletProblem(laplacian_operator(1), radius=1.0,
                            boundary=_boundary_from(
                                lambda x, y: (x * x - y * y)[:, None]),
                            h_pde=1.0 / 16)
    v = solve_dirichlet(prob)
    gx, gy = v.grid.coords()
    err = np.abs(v.values[:, :, 0] - (gx * gx - gy * gy))[v.grid.inside].max()
    assert err < 1e-6


def test_manufactured_quartic_order_two():
    # Re(z^4) is harmonic with genuine interior truncation error
    def exact(x, y):
        return x ** 4 - 6 * x ** 2 * y ** 2 + y ** 4

    errs, hs = [], []
    for k in (8, 16, 32):
        h = 1.0 / k
        prob = DirichletProblem(laplacian_operator(1), radius=1.0,
                                boundary=_boundary_from(
                                    lambda x, y: exact(x, y)[:, None]),
                                h_pde=h)
        v = solve_dirichlet(prob)
        gx, gy = v.grid.coords()
        err = np.abs(v.values[:, :, 0] - exact(gx, gy))[v.grid.inside].max()
        errs.append(err)
        hs.append(h)
    order, _, _ = fit_power_law(hs, errs)
    assert order >= 1.8
    assert errs[-1] <= errs[0]


def test_discrete_max_principle():
    def g(pts):
        th = np.arctan2(pts[:, 1], pts[:, 0])
        return (np.cos(3 * th) + 0.3 * np.sin(7 * th))[:, None]

    prob = DirichletProblem(laplacian_operator(1), radius=1.0, boundary=g,
                            h_pde=1.0 / 24)
    v = solve_dirichlet(prob, tol=1e-13)
    grid, _, _, _ = _assemble(prob)

    # bound by the extremes of the boundary data actually fed to the scheme
    from branchforge.elliptic import _crossing_points
    lo, hi = np.inf, -np.inf
    for _, _, pts in _crossing_points(grid).values():
        if pts.size:
            gv = g(pts)
            lo = min(lo, gv.min())
            hi = max(hi, gv.max())
    vin = v.values[grid.inside, 0]
    assert vin.max() <= hi + 1e-12
    assert vin.min() >= lo - 1e-12


def _small_operator(rng, nbar, scale):
    l1 = rng.normal(size=(nbar, nbar, 2)) * scale
    l2 = rng.normal(size=(nbar, nbar)) * scale
    return EllipticOperator(l1, l2, np.zeros((nbar, 2)), np.zeros(nbar),
                            np.zeros(2))


def test_solver_linearity():
    rng = np.random.default_rng(3)
    op = _small_operator(rng, 1, 5e-3)

    def g1(pts):
        return np.sin(2 * pts[:, 0])[:, None]

    def g2(pts):
        return (pts[:, 1] ** 2)[:, None]

    def g12(pts):
        return 0.7 * g1(pts) - 1.3 * g2(pts)

    zero_rhs = lambda pts: np.zeros((pts.shape[0], 1))
    kw = dict(radius=1.0, h_pde=1.0 / 16, rhs=zero_rhs)
    v1 = solve_dirichlet(DirichletProblem(op, boundary=g1, **kw), tol=1e-12)
    v2 = solve_dirichlet(DirichletProblem(op, boundary=g2, **kw), tol=1e-12)
    v12 = solve_dirichlet(DirichletProblem(op, boundary=g12, **kw), tol=1e-12)
    mix = 0.7 * v1.values - 1.3 * v2.values
    diff = np.abs(v12.values - mix)[v1.grid.inside].max()
    assert diff <= 1e-9


def test_uniqueness_under_initial_iterate():
    rng = np.random.default_rng(9)
    op = _small_operator(rng, 2, 1e-2)

    def g(pts):
        return np.stack([np.cos(pts[:, 0]), pts[:, 0] * pts[:, 1]], axis=1)

    prob = DirichletProblem(op, radius=1.0, boundary=g, h_pde=1.0 / 12)
    va = solve_dirichlet(prob, tol=1e-12)
    seed = np.full((va.grid.xs.size, va.grid.xs.size, 2), 0.0)
    seed[:, :, 0] = 3.0
    seed[:, :, 1] = -2.0
    vb = solve_dirichlet(prob, x0=seed, tol=1e-12)
    assert np.abs(va.values - vb.values)[va.grid.inside].max() <= 1e-9


def test_refinement_cauchy_order():
    rng = np.random.default_rng(17)
    op = _small_operator(rng, 1, 1e-2)

    def g(pts):
        return (np.exp(0.4 * pts[:, 0]) * np.cos(1.3 * pts[:, 1]))[:, None]

    diffs = []
    sols = {}
    for k in (8, 16, 32):
        prob = DirichletProblem(op, radius=1.0, boundary=g, h_pde=1.0 / k)
        sols[k] = solve_dirichlet(prob, tol=1e-12)
    for k in (8, 16):
        coarse, fine = sols[k], sols[2 * k]
        # coarse nodes sit on the fine grid at even offsets
        cv = coarse.values[coarse.grid.inside, 0]
        gx, gy = coarse.grid.coords()
        pts = np.stack([gx[coarse.grid.inside], gy[coarse.grid.inside]], axis=1)
        fv = fine.sample(pts)[:, 0]
        ok = np.isfinite(fv)
        diffs.append(np.abs(cv - fv)[ok].max())
    order = np.log2(diffs[0] / diffs[1])
    assert order >= 1.6
    assert diffs[1] < diffs[0]


def test_energy_estimate_constant_small():
    # measured constant in the gradient bound stays in single digits
    rng = np.random.default_rng(31)
    m0 = 1e-4
    worst = 0.0
    for trial in range(12):
        nbar = 1 + trial % 2
        op = _small_operator(rng, nbar, np.sqrt(m0) * 0.5)
        cf = rng.normal(size=(nbar, 6))

        def g_fun(x, y, cf=cf):
            out = [c[0] * x + c[1] * y + c[2] * (x * x - y * y)
                   + c[3] * x * y + c[4] * np.sin(2 * x) + c[5] for c in cf]
            return np.stack(out, axis=-1)

        def rhs(pts, cf=cf):
            return np.stack([np.full(pts.shape[0], c[5]) + c[0] * pts[:, 0]
                             for c in cf], axis=1)

        radius = 0.5
        prob = DirichletProblem(op, radius=radius,
                                boundary=lambda pts: g_fun(pts[:, 0], pts[:, 1]),
                                h_pde=radius / 14, rhs=rhs)
        v = solve_dirichlet(prob)
        grid = v.grid
        gx, gy = grid.coords()
        gridded_g = g_fun(gx, gy)
        if gridded_g.ndim == 2:
            gridded_g = gridded_g[:, :, None]
        da = grid.h ** 2
        dg = grid_gradient(grid, gridded_g)
        okg = np.isfinite(dg).all(axis=(2, 3)) & grid.inside
        norm_dg = np.sqrt(np.sum(dg[okg] ** 2) * da)
        norm_g = np.sqrt(np.sum(gridded_g[grid.inside] ** 2) * da)
        fv = rhs(np.stack([gx[grid.inside], gy[grid.inside]], axis=1))
        norm_f = np.sqrt(np.sum(fv ** 2) * da)
        r_small = radius / 8
        denom = r_small * (norm_f + np.sqrt(m0) * norm_g) + norm_dg
        c0 = v.norms()["dirichlet"] / denom
        worst = max(worst, c0)
    assert worst <= 10.0


def test_interior_ratio_constant_field():
    grid = build_disk_grid(1.0, 1.0 / 32)
    vals = np.full((grid.xs.size, grid.xs.size, 1), 2.5)
    vals[~grid.inside] = np.nan
    rep = interior_estimate_report(FieldGrid(grid, vals), None, r=1.0)
    assert rep["ratio0"] <= 1.0 + 1e-9


def test_interior_ratio_harmonic_x1():
    # closed forms on the unit disk: sup over the 3/4 disk is 0.75 and the
    # absolute integral is 4/3, so the ratio at unit scale is 0.5625
    grid = build_disk_grid(1.0, 1.0 / 96)
    gx, gy = grid.coords()
    vals = gx[:, :, None].copy()
    vals[~grid.inside] = np.nan
    rep = interior_estimate_report(FieldGrid(grid, vals), None, r=1.0)
    assert abs(rep["l1"] - 4.0 / 3.0) < 5e-3
    assert abs(rep["ratio0"] - 0.5625) < 5e-3


def test_cgnr_matches_direct_solver():
    rng = np.random.default_rng(41)
    op = _small_operator(rng, 1, 2e-2)

    def g(pts):
        return (pts[:, 0] ** 2 - 0.3 * pts[:, 1])[:, None]

    prob = DirichletProblem(op, radius=1.0, boundary=g, h_pde=1.0 / 12)
    v = solve_dirichlet(prob, tol=1e-12)
    grid, ids, a, b = _assemble(prob)
    direct = spla.spsolve(a.tocsc(), b)
    mine = v.values[grid.inside, 0]
    assert np.abs(mine - direct).max() <= 1e-8


def test_noncoercive_operator_rejected():
    nbar = 1
    op = EllipticOperator(np.zeros((nbar, nbar, 2)),
                          np.full((nbar, nbar), 50.0),
                          np.zeros((nbar, 2)), np.zeros(nbar), np.zeros(2))
    assert coercivity_margin(op, 1.0) <= 0
    prob = DirichletProblem(op, radius=1.0,
                            boundary=lambda p: np.zeros((p.shape[0], 1)),
                            h_pde=1.0 / 8)
    with pytest.raises(RegimeError):
        solve_dirichlet(prob)


def test_iteration_cap_raises():
    prob = DirichletProblem(laplacian_operator(1), radius=1.0,
                            boundary=_boundary_from(
                                lambda x, y: np.cos(5 * x)[:, None]),
                            h_pde=1.0 / 24)
    with pytest.raises(ConvergenceError):
        solve_dirichlet(prob, max_iter=3)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4))
def test_affine_rhs_matches_formula(nbar, q):
    rng = np.random.default_rng(nbar * 10 + q)
    l3 = rng.normal(size=(nbar, 2))
    l4 = rng.normal(size=nbar)
    center = rng.normal(size=2)
    op = EllipticOperator(np.zeros((nbar, nbar, 2)), np.zeros((nbar, nbar)),
                          l3, l4, center)
    pts = rng.normal(size=(7, 2))
    want = np.stack([l3 @ (p - center) + l4 for p in pts])
    assert np.allclose(op.affine_rhs(pts), want, atol=1e-13)

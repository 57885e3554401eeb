import numpy as np
import pytest

from branchforge.currents import (
    Ball,
    Cylinder,
    LocalPatch,
    SampledCurrent,
    branching_sheets,
    flat_sheets,
    perturbed_branching_sheets,
    seeded_bump_sheets,
    tilt_sheets,
)
from branchforge.geometry import base_plane, orthonormalize

SQ101 = np.sqrt(1.01)


@pytest.fixture(scope="module")
def tilt_current():
    return SampledCurrent.from_sheets(tilt_sheets(0.1), qbar=1, h=1 / 64)


@pytest.fixture(scope="module")
def branch_current():
    sheets, b = branching_sheets(coeff=0.25, power=5, qbar=2)
    cur = SampledCurrent.from_sheets(sheets, qbar=2, h=1 / 64)
    cur.horn_exp = b
    return cur


def test_tilt_density_is_constant(tilt_current):
    d = tilt_current.density
    fin = np.isfinite(d)
    assert fin.any()
    assert np.nanmax(np.abs(d[fin] - SQ101)) < 1e-12


def test_tilt_mass_over_unit_cylinder(tilt_current):
    # graph of y1 = 0.1 x1 over the unit disk: mass = pi sqrt(1.01)
    cyl = Cylinder(np.zeros(4), 1.0, base_plane(4))
    m = tilt_current.mass(cyl)
    assert m == pytest.approx(np.pi * SQ101, rel=5e-3)


def test_tilt_excess_closed_form(tilt_current):
    # excess against the base plane = sqrt(1.01) - 1 = 4.9875621120890270e-3
    cyl = Cylinder(np.zeros(4), 1.0, base_plane(4))
    ex = tilt_current.tilt_excess(cyl, base_plane(4))
    assert ex == pytest.approx(4.9875621120890270e-3, rel=5e-3)


def test_tilt_optimal_plane_kills_excess(tilt_current):
    cyl = Cylinder(np.zeros(4), 0.5, base_plane(4))
    basis, _ = tilt_current.optimal_plane(cyl)
    ex = tilt_current.tilt_excess(cyl, basis)
    # the graph is a single plane, so the optimum is conical-exact
    assert ex < 1e-10
    # and that plane contains the direction (1, 0, eps, 0)
    v = np.array([1.0, 0.0, 0.1, 0.0])
    v /= np.linalg.norm(v)
    proj = basis @ (basis.T @ v)
    assert np.linalg.norm(proj - v) < 1e-6


def test_flat_mass_is_area(tilt_current):
    flat = SampledCurrent.from_sheets(flat_sheets(1, 2), qbar=1, h=1 / 32)
    cyl = Cylinder(np.zeros(4), 0.75, base_plane(4))
    assert flat.mass(cyl) == pytest.approx(np.pi * 0.75**2, rel=1e-2)


def test_branch_slice_values(branch_current):
    # u = 0.25 w^5 over qbar=2: at z=1/4 the two sheets read +-0.25 * 0.25^2.5
    target = 0.25 * 0.25**2.5
    v0 = branch_current.slice_fiber(0.25 + 0j, 0)
    v1 = branch_current.slice_fiber(0.25 + 0j, 1)
    assert v0[0, 0] == pytest.approx(target, rel=1e-12)
    assert v1[0, 0] == pytest.approx(-target, rel=1e-12)
    assert abs(v0[0, 1]) < 1e-15


def test_branch_density_smooth_across_cut(branch_current):
    # cut-aware differencing: no density spike along the negative real axis.
    # |Du| = 0.625 |z|^1.5 here, so the honest ceiling is 1 + |Du|^2 ~ 2.11
    # at the far corners; a wrong gather would read ~ |2u|/h ~ 10.
    d = branch_current.density
    fin = np.isfinite(d)
    assert np.nanmax(d[fin]) < 2.2
    xs, ys = branch_current.xs, branch_current.ys
    ix = np.searchsorted(xs, -0.5)
    iy = np.searchsorted(ys, 0.0)
    band = d[:, iy - 2 : iy + 3, ix, 0]
    assert np.nanmax(band) < 1.2
    # and it matches the analytic value 1 + (0.625 |z|^1.5)^2 on the cut
    assert np.nanmax(np.abs(band - (1 + (0.625 * 0.5**1.5) ** 2))) < 0.02


def test_branch_horn_margin(branch_current):
    # sheet separation 2 c |z|^(5/2) with c = 0.25, so c_s = c/2 keeps both
    # values inside their horns with margin c_s |z|^(5/2) at offset zero
    m = branch_current.horn_margin(0.5 + 0.2j, 0, branch_current.horn_exp)
    r = abs(0.5 + 0.2j)
    assert m == pytest.approx(0.125 * r**2.5, rel=1e-9)


def test_monodromy_loop_on_values(branch_current):
    # walking the stored grid once around the origin returns to the start
    # only after visiting both sheets
    cur = branch_current
    v0 = cur.slice_fiber(0.5 + 0j, 0)
    v1 = cur.slice_fiber(0.5 + 0j, 1)
    assert np.linalg.norm(v0 - v1) > 1e-3


def test_perturbed_stays_in_horn():
    # offsets decay like |z|^3 and are clipped to 90 percent of the horn
    # width c_s |z|^3, so the margin is at least 0.1 c_s |z|^3 everywhere
    sheets, b = perturbed_branching_sheets(
        coeff=0.25, power=5, qbar=2, q=1, n=2, amp=0.05, decay=3.0, seed=11
    )
    cur = SampledCurrent.from_sheets(sheets, qbar=2, h=1 / 32)
    rng = np.random.default_rng(0)
    c_s = 0.125
    for _ in range(40):
        z = complex(*rng.uniform(-0.9, 0.9, 2))
        if abs(z) < 0.05:
            continue
        for s in range(2):
            m = cur.horn_margin(z, s, 3.0)
            assert m > 0.1 * c_s * abs(z) ** 3.0 - 1e-12


def test_seeded_bump_raises_local_gradient():
    # ride the bump on flat sheets so any far-field density change is noise
    sheets, _ = seeded_bump_sheets(
        coeff=0.0, power=5, qbar=2, q=1, n=2,
        bump_center=0.5 + 0.25j, bump_width=0.05, bump_amp=0.02,
    )
    cur = SampledCurrent.from_sheets(sheets, qbar=2, h=1 / 128)
    d = cur.density
    iy = np.searchsorted(cur.ys, 0.25)
    ix = np.searchsorted(cur.xs, 0.5)
    assert np.nanmax(d[:, iy - 3 : iy + 3, ix - 3 : ix + 3]) > 1.02
    far = d[:, : iy - 40, : ix - 40]
    assert np.nanmax(far[np.isfinite(far)]) < 1.0001


# -- local patches ----------------------------------------------------------

def test_patch_matches_direct_evaluation(branch_current):
    p = LocalPatch.build(branch_current, 0.5 + 0.1j, 0, radius=0.2, nodes=17)
    z = p.xs[3] + 1j * p.ys[9]
    w = branch_current.domain.continue_root(p.z0, p.w0, z)
    direct = branch_current.analytic.values(np.array([z]), np.array([w]))[0]
    assert np.allclose(p.values[9, 3], direct, atol=1e-12)


def test_patch_continuation_across_cut(branch_current):
    # patch centered left of the origin dips below the axis; the closed-form
    # continuation must agree with stepwise root following there
    p = LocalPatch.build(branch_current, -0.5 + 0.1j, 0, radius=0.3, nodes=17)
    z = p.xs[2] + 1j * p.ys[1]
    assert z.imag < 0 and z.real < 0
    w_step = branch_current.domain.continue_root(p.z0, p.w0, z, steps=200)
    zg = p.xs[None, :] + 1j * p.ys[:, None]
    w_closed = p.w0 * np.exp(np.log(zg / p.z0) / 2)
    assert w_closed[1, 2] == pytest.approx(w_step, rel=1e-9)


def test_patch_measure_plane_invariants():
    # mass of any plane graph inside a ball is pi r^2 regardless of tilt
    cur = SampledCurrent.from_sheets(tilt_sheets(0.1), qbar=1, h=1 / 32)
    z0 = 0.4 + 0.2j
    p0 = np.array([z0.real, z0.imag, 0.1 * z0.real, 0.0])
    r = 0.15
    patch = LocalPatch.build(cur, z0, 0, radius=r * 1.05, nodes=129)
    mass, exnum, height = patch.measure(Ball(p0, r), base_plane(4))
    assert mass == pytest.approx(np.pi * r**2, rel=0.02)
    dev2 = 2.0 * (1.0 - 1.0 / SQ101)
    assert exnum == pytest.approx(mass * dev2, rel=1e-9)
    assert height == pytest.approx(2 * 0.1 * r / SQ101, rel=0.04)
    graph_dirs = orthonormalize(
        np.array([[1.0, 0.0], [0.0, 1.0], [0.1, 0.0], [0.0, 0.0]])
    )
    _, exnum2, height2 = patch.measure(Ball(p0, r), graph_dirs)
    assert exnum2 < 1e-12
    assert height2 < 1e-12


def test_patch_curvature_and_spread_readings(branch_current):
    p = LocalPatch.build(branch_current, 0.5 + 0j, 0, radius=0.1, nodes=33)
    # second differences of 0.25 w^5 near z=0.5: |D^2 u| ~ 0.25 * 15/4 * |z|^(1/2)
    k2 = p.second_difference_sup()
    assert 0.1 < k2 < 2.0
    assert p.value_spread() == 0.0  # q = 1 has no spread

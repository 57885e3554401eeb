import numpy as np
import pytest

from branchforge.approx import (PiApproximation, difference_mass,
                                graph_excess, pi_approximation,
                                projected_average)
from branchforge.currents import (AnalyticSheets, Cylinder, SampledCurrent,
                                  branching_sheets, flat_sheets, tilt_sheets)
from branchforge.errors import ConfigViolation, RegimeError
from branchforge.geometry import base_plane, graph_plane, qdist


def _pi0(dim):
    return base_plane(dim)


def test_flat_two_point_graph():
    cur = SampledCurrent.from_sheets(flat_sheets(2, 2), qbar=1, h=1 / 16)
    f = pi_approximation(cur, _pi0(4), np.zeros(4), radius=0.5, nodes=21)
    assert f.degree_target == 2
    assert not f.bad_set.any()
    assert np.nanmax(np.abs(f.values)) < 1e-10
    assert f.lip < 1e-10
    # both value slots sit on the same point of the plane, every node logged
    assert f.collisions >= int(f.inside.sum())


def test_tilt_over_own_plane_vanishes():
    eps = 0.1
    cur = SampledCurrent.from_sheets(tilt_sheets(eps), qbar=1, h=1 / 16)
    a = np.array([[eps, 0.0], [0.0, 0.0]])
    plane = graph_plane(a)
    f = pi_approximation(cur, plane, np.zeros(4), radius=0.4, nodes=25)
    assert not f.bad_set.any()
    assert np.nanmax(np.abs(f.values)) < 1e-8
    assert f.lip < 1e-8
    assert graph_excess(f) < 1e-12


def test_branched_pair_matches_closed_form():
    sheets, _ = branching_sheets(0.1, 5, qbar=2)
    cur = SampledCurrent.from_sheets(sheets, qbar=2, h=1 / 32)
    center = np.array([0.25, 0.0, 0.0, 0.0])
    f = pi_approximation(cur, _pi0(4), center, radius=0.04, nodes=17)
    assert not f.bad_set.any()
    assert f.bad_fraction() == 0.0
    got = f.center_values()          # (2, 2) both cover points
    # w = +-0.5 over z=0.25, so the normal values are +-0.1 * 0.5**5
    want = np.array([[0.003125, 0.0], [-0.003125, 0.0]])
    assert qdist(got, want) < 1e-8
    # every sliced node carries one value from each sheet
    good = f.good_mask()
    labels = np.sort(f.sheets[good], axis=1)
    assert (labels == np.array([0, 1])).all()


def test_branched_values_match_evaluator_everywhere():
    sheets, _ = branching_sheets(0.08, 5, qbar=2)
    cur = SampledCurrent.from_sheets(sheets, qbar=2, h=1 / 32)
    center = np.array([0.3, 0.05, 0.0, 0.0])
    f = pi_approximation(cur, _pi0(4), center, radius=0.05, nodes=13)
    iy, ix = np.nonzero(f.good_mask())
    z = (center[0] + f.xs[ix]) + 1j * (center[1] + f.xs[iy])
    for s in range(2):
        w = cur.domain.root(z, s)
        direct = sheets.values(z, w)[:, 0, :]           # (k, 2)
        slot = np.argmax(f.sheets[iy, ix] == s, axis=1)
        got = f.values[iy, ix, slot, :] + center[None, 2:]
        assert np.max(np.abs(got - direct)) < 1e-8


def test_requires_closed_form_evaluator():
    cur = SampledCurrent.from_sheets(flat_sheets(1, 2), qbar=1, h=1 / 8)
    cur.analytic = None
    with pytest.raises(RegimeError, match="closed-form"):
        pi_approximation(cur, _pi0(4), np.zeros(4), radius=0.3, nodes=11)


def test_nongraphical_when_iteration_starved():
    sheets, _ = branching_sheets(0.1, 5, qbar=2)
    cur = SampledCurrent.from_sheets(sheets, qbar=2, h=1 / 32)
    a = np.array([[0.1, 0.0], [0.0, 0.0]])
    plane = graph_plane(a)
    center = np.array([0.3, 0.0, 0.03, 0.0])
    # starved of iterations the tilted slicing cannot converge anywhere
    with pytest.raises(RegimeError, match="not graphical"):
        pi_approximation(cur, plane, center, radius=0.04, nodes=13,
                         max_iter=0)
    # the same geometry with the normal budget is fine
    f = pi_approximation(cur, plane, center, radius=0.04, nodes=13)
    assert not f.bad_set.any()


def test_boundary_clearance_guard():
    cur = SampledCurrent.from_sheets(flat_sheets(1, 2), qbar=1, h=1 / 8)
    center = np.array([0.5, 0.0, 0.0, 0.0])
    with pytest.raises(RegimeError, match="boundary"):
        pi_approximation(cur, _pi0(4), center, radius=0.6, nodes=11)


def test_input_validation():
    cur = SampledCurrent.from_sheets(flat_sheets(1, 2), qbar=1, h=1 / 8)
    with pytest.raises(ConfigViolation):
        pi_approximation(cur, np.eye(3)[:, :2], np.zeros(4), radius=0.3)
    skew = np.array([[1.0, 1.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ConfigViolation):
        pi_approximation(cur, skew, np.zeros(4), radius=0.3)
    with pytest.raises(ConfigViolation):
        pi_approximation(cur, _pi0(4), np.zeros(4), radius=0.3, nodes=5)


def test_projected_average_cancels_symmetric_offsets():
    v = np.array([0.05, 0.02])

    def offs(z, w):
        out = np.zeros((len(z), 2, 2))
        out[:, 0, :] = v
        out[:, 1, :] = -v
        return out

    sheets = AnalyticSheets(q=2, n=2,
                            branching=lambda z, w: np.zeros((len(z), 2)),
                            offsets=offs)
    cur = SampledCurrent.from_sheets(sheets, qbar=1, h=1 / 16)
    f = pi_approximation(cur, _pi0(4), np.zeros(4), radius=0.4, nodes=17)
    eta = projected_average(f, mode="flat")
    good = f.good_mask()
    assert np.max(np.abs(eta[good])) < 1e-10
    # the raw slots still carry the split
    spread = np.ptp(f.values[good][:, :, 0], axis=1)
    assert np.allclose(spread, 2 * v[0], atol=1e-10)


def test_projected_average_modes():
    cur = SampledCurrent.from_sheets(tilt_sheets(0.1), qbar=1, h=1 / 16)
    f = pi_approximation(cur, _pi0(4), np.zeros(4), radius=0.4, nodes=17)
    eta = projected_average(f, mode="flat")
    gx, gy = np.meshgrid(f.xs, f.xs)
    good = f.good_mask()
    assert np.allclose(eta[good][:, 0], 0.1 * gx[good], atol=1e-9)
    assert np.max(np.abs(eta[good][:, 1])) < 1e-9
    kappa = np.array([[1.0], [0.0]])
    proj = projected_average(f, mode="quadratic-graph", kappa=kappa)
    assert proj.shape == eta.shape[:2] + (1,)
    assert np.allclose(proj[good][:, 0], 0.1 * gx[good], atol=1e-9)
    with pytest.raises(ConfigViolation):
        projected_average(f, mode="quadratic-graph")
    with pytest.raises(ConfigViolation):
        projected_average(f, mode="nope")


def test_difference_mass_counts_failed_fibers():
    cur = SampledCurrent.from_sheets(flat_sheets(1, 2), qbar=1, h=1 / 16)
    f = pi_approximation(cur, _pi0(4), np.zeros(4), radius=0.4, nodes=17)
    assert difference_mass(cur, f) == 0.0
    f.bad_set[8, 8] = True
    one = difference_mass(cur, f)
    assert one == pytest.approx(2 * f.grid_step**2)
    f.bad_set[8, 9] = True
    assert difference_mass(cur, f) == pytest.approx(2 * one)


def test_reprojection_round_trip():
    cur = SampledCurrent.from_sheets(tilt_sheets(0.1), qbar=1, h=1 / 32)
    f1 = pi_approximation(cur, _pi0(4), np.zeros(4), radius=0.4, nodes=41)
    samp = f1.eta_interpolator()

    def branching(z, w):
        return samp(np.stack([z.real, z.imag], axis=1))

    sheets2 = AnalyticSheets(q=1, n=2, branching=branching)
    cur2 = SampledCurrent.from_sheets(sheets2, qbar=1, h=1 / 32,
                                      half_width=0.3)
    f2 = pi_approximation(cur2, _pi0(4), np.zeros(4), radius=0.2, nodes=21)
    assert not f2.bad_set.any()
    iy, ix = np.nonzero(f2.good_mask() & f2.inside)
    pts = np.stack([f2.xs[ix], f2.xs[iy]], axis=1)
    want = samp(pts)
    got = f2.values[iy, ix, 0, :]
    assert np.max(np.abs(got - want)) < 1e-10


def test_oscillation_bounded_by_lipschitz_diameter():
    sheets, _ = branching_sheets(0.1, 5, qbar=2)
    cur = SampledCurrent.from_sheets(sheets, qbar=2, h=1 / 32)
    center = np.array([0.3, 0.0, 0.0, 0.0])
    f = pi_approximation(cur, _pi0(4), center, radius=0.05, nodes=21)
    assert not f.bad_set.any()
    assert f.lip > 0
    g = f.xs.size
    mid = f.values[g // 2, g // 2]
    iy, ix = np.nonzero(f.good_mask())
    worst = max(qdist(f.values[a, b], mid) for a, b in zip(iy, ix))
    diam = 2 * f.meta["slice_radius"] * np.sqrt(2)
    assert worst <= f.lip * diam * (1 + 1e-9)


def test_single_sheet_slicing_continuous_across_cut():
    sheets, _ = branching_sheets(0.1, 5, qbar=2)
    cur = SampledCurrent.from_sheets(sheets, qbar=2, h=1 / 32)
    center = np.array([-0.3, 0.0, 0.0, 0.0])
    f = pi_approximation(cur, _pi0(4), center, radius=0.03, nodes=15, sheet=0)
    assert f.degree_target == 1
    assert not f.bad_set.any()
    # values follow one continued branch: compare against center-root
    # continuation instead of the cut-discontinuous principal root
    iy, ix = np.nonzero(f.good_mask())
    z = (center[0] + f.xs[ix]) + 1j * (center[1] + f.xs[iy])
    zc = complex(center[0], center[1])
    wc = complex(np.asarray(cur.domain.root(np.array([zc]), 0))[0])
    w = wc * np.exp(np.log(z / zc) / 2)
    direct = sheets.values(z, w)[:, 0, :]
    got = f.values[iy, ix, 0, :] + center[None, 2:]
    assert np.max(np.abs(got - direct)) < 1e-8
    # a lipschitz bound exists and the grid field is smooth (no branch jumps)
    eta = f.eta_field()
    jump = np.nanmax(np.abs(np.diff(eta, axis=0)))
    assert jump < 4 * f.lip * f.grid_step


def test_graph_excess_tracks_current_excess():
    sheets, _ = branching_sheets(0.1, 5, qbar=2)
    cur = SampledCurrent.from_sheets(sheets, qbar=2, h=1 / 64)
    center = np.array([0.3, 0.0, 0.0, 0.0])
    radius = 0.1
    f = pi_approximation(cur, _pi0(4), center, radius=radius, nodes=33)
    ours = graph_excess(f)
    region = Cylinder(center=center, radius=radius, basis=_pi0(4))
    theirs = cur.tilt_excess(region, _pi0(4), subsample=4)
    assert ours > 0
    assert abs(ours - theirs) <= 0.1 * max(ours, theirs)

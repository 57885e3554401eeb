import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import branchforge.manifold as M
import branchforge.whitney as W
from branchforge.currents import (SampledCurrent, branching_sheets,
                                  flat_sheets, tilt_sheets)
from branchforge.errors import InvariantViolation, RegimeError
from branchforge.params import Params


def tilt_setup(eps=0.1):
    cur = SampledCurrent.from_sheets(tilt_sheets(eps), 1, 1 / 64)
    p = Params(qbar=1, q=1)
    return cur, p


# ---------------------------------------------------------------------------
# blending ingredients

def test_bump_profile_values():
    assert M.bump_profile(0.0) == 1.0
    assert M.bump_profile(1.0) == 1.0
    assert M.bump_profile(17 / 16) == 0.0
    assert M.bump_profile(2.0) == 0.0
    mid = M.bump_profile(1.0 + 0.5 / 16)
    assert 0.0 < mid < 1.0
    # symmetric in the sign of the offset
    assert M.bump_profile(-1.02) == M.bump_profile(1.02)
    w = M.bump_weight(0.5, -0.25, 1.0)
    assert w == 1.0
    assert M.bump_weight(1.03, 0.0, 1.0) == M.bump_profile(1.03)


@settings(max_examples=60, deadline=None)
@given(st.floats(min_value=0.0, max_value=4.0),
       st.floats(min_value=0.0, max_value=4.0))
def test_bump_profile_monotone(a, b):
    lo, hi = sorted((a, b))
    va, vb = M.bump_profile(lo), M.bump_profile(hi)
    assert 0.0 <= vb <= va <= 1.0


def test_annulus_estimate():
    assert M.annulus_of(np.array([0.75]), np.array([0.0]))[0] == 0
    assert M.annulus_of(np.array([0.3]), np.array([0.1]))[0] == 1
    assert M.annulus_of(np.array([0.1]), np.array([0.05]))[0] == 3
    assert M.annulus_of(np.array([0.0]), np.array([0.0]))[0] == -1
    assert M.annulus_of(np.array([1.5]), np.array([0.0]))[0] == -1


def test_branched_circle_order_walks_the_cover():
    from branchforge.currents import BranchedDomain
    nth, qb = 8, 2
    theta = 2 * np.pi * (np.arange(nth) + 0.5) / nth
    aa, ss = M.branched_circle_order(theta, qb)
    assert len(aa) == nth * qb
    dom = BranchedDomain(qb)
    w = dom.root(np.exp(1j * theta[aa]), ss)
    psi = np.unwrap(np.angle(w))
    gaps = np.diff(psi)
    assert np.allclose(gaps, np.pi / nth, atol=1e-12)
    # closing the loop comes back to the start
    assert abs((psi[-1] + np.pi / nth) % (2 * np.pi) - psi[0] % (2 * np.pi)) < 1e-12


# ---------------------------------------------------------------------------
# single patches

def test_tilt_patch_reproduces_linear_graph():
    cur, p = tilt_setup(0.1)
    key = int(W.pack_keys(0, p.start_depth, 3000, 100, 0))
    cfg = M.ManifoldConfig(patch_nodes=13, pde_factor=8)
    patch = M.build_interpolation_patch(cur, p, key, cfg)
    assert patch.tilt == pytest.approx(0.1 / math.sqrt(1.01), rel=1e-6)
    ell = patch.ell
    zc = patch.center_z
    zs = zc + np.array([0.0, 0.9j * ell, -1.2 * ell, 0.7 * ell - 0.4j * ell])
    vals = patch.values_at(zs)
    want = np.stack([0.1 * zs.real, np.zeros(len(zs))], axis=1)
    assert np.abs(vals - want).max() <= 1e-8
    assert patch.worst_residual <= 1e-10


def test_reparametrize_wrapper_reports_residual():
    cur, p = tilt_setup(0.05)
    key = int(W.pack_keys(0, p.start_depth, 2500, -700, 0))
    patch = M.build_interpolation_patch(
        cur, p, key, M.ManifoldConfig(patch_nodes=11, pde_factor=8))
    vals, res = M.reparametrize_to_base(patch, [patch.center_z])
    assert vals.shape == (1, 2)
    assert res <= 1e-10


def test_tilt_too_large_raises():
    cur, p = tilt_setup(1.2)
    key = int(W.pack_keys(0, p.start_depth, 3000, 100, 0))
    with pytest.raises(RegimeError):
        M.build_interpolation_patch(
            cur, p, key, M.ManifoldConfig(patch_nodes=11, pde_factor=8))


# ---------------------------------------------------------------------------
# gluing a compliant tilted book

@pytest.fixture(scope="module")
def tilt_book():
    cur, p = tilt_setup(0.1)
    cfg = W.RefineConfig(k_extra=2, j_max=1, spots_per_level=4, seed=3)
    book = W.refine(cur, p, cfg)
    return cur, p, book


def test_tilt_glue_matches_linear_graph(tilt_book):
    cur, p, book = tilt_book
    cfg = M.ManifoldConfig(patch_nodes=13, pde_factor=8)
    cache = M.PatchCache(cur, p, cfg, book=book)
    rng = np.random.default_rng(2)
    t = rng.uniform(0.3, 0.9, size=24)
    ang = rng.uniform(0, 2 * np.pi, size=24)
    z = t * np.exp(1j * ang)
    glued = M.glue_level(cur, p, book, z, 0, book.k_max, cache)
    want = np.stack([0.1 * z.real, np.zeros(len(z))], axis=1)
    assert np.abs(glued.phi - want).max() <= 1e-8
    assert glued.unit_error <= 1e-12
    assert glued.multiplicity.min() >= 1
    assert glued.weight.min() > 0


def test_single_support_exact_and_convex_blend(tilt_book):
    cur, p, book = tilt_book
    cfg = M.ManifoldConfig(patch_nodes=13, pde_factor=8)
    cache = M.PatchCache(cur, p, cfg, book=book)
    key = int(W.pack_keys(0, book.k_max, 3000 * 2 ** (book.k_max - p.start_depth),
                          100 * 2 ** (book.k_max - p.start_depth), 0))
    xc, yc = W.centers_of(np.array([key], np.int64))
    zc = complex(float(xc[0]), float(yc[0]))
    ell = float(W.ell_of(0, book.k_max))
    # dead center: exactly one bump is nonzero and the blend is that patch
    g1 = M.glue_level(cur, p, book, [zc], 0, book.k_max, cache)
    assert g1.multiplicity[0] == 1
    direct = cache.get(key).values_at([zc])
    assert np.array_equal(g1.phi, direct)
    # inside the overlap band the blend stays between the contributors
    zb = zc + (1.0 + 1.0 / 32) * ell
    g2 = M.glue_level(cur, p, book, [zb], 0, book.k_max, cache)
    assert g2.multiplicity[0] >= 2
    vals = [cache.get(int(k)).values_at([zb])[0] for k in g2.participants]
    lo = np.min(vals, axis=0) - 1e-12
    hi = np.max(vals, axis=0) + 1e-12
    assert np.all(g2.phi[0] >= lo) and np.all(g2.phi[0] <= hi)


def test_glue_level_bounds_checked(tilt_book):
    cur, p, book = tilt_book
    cache = M.PatchCache(cur, p, M.ManifoldConfig(), book=book)
    from branchforge.errors import ConfigViolation
    with pytest.raises(ConfigViolation):
        M.glue_level(cur, p, book, [0.7 + 0j], 0, p.start_depth - 1, cache)
    with pytest.raises(ConfigViolation):
        M.glue_level(cur, p, book, [1.7 + 0j], 0, book.k_max, cache)


def test_uncovered_node_raises(tilt_book):
    cur, p, book = tilt_book
    key = int(W.pack_keys(0, p.start_depth, 3000, 100, 0))
    removed = np.array([key], dtype=np.int64)
    doctored = dataclasses.replace(book, we=removed, _w_sorted=removed)
    cache = M.PatchCache(cur, p, M.ManifoldConfig(patch_nodes=11,
                                                  pde_factor=8), book=doctored)
    xc, yc = W.centers_of(removed)
    zc = complex(float(xc[0]), float(yc[0]))
    with pytest.raises(InvariantViolation, match="uncovered"):
        M.glue_level(cur, p, doctored, [zc], 0, p.start_depth, cache)


def test_quadratic_graph_mode_plumbing(tilt_book):
    cur, p, book = tilt_book

    def psi(xy, hbar):
        return np.zeros((len(np.atleast_2d(xy)), 1))

    cfg = M.ManifoldConfig(patch_nodes=13, pde_factor=8,
                           mode="quadratic-graph", nbar=1, psi=psi)
    cache = M.PatchCache(cur, p, cfg, book=book)
    z = np.array([0.71 + 0.05j, 0.4 - 0.3j])
    glued = M.glue_level(cur, p, book, z, 0, book.k_max, cache)
    want = np.stack([0.1 * z.real, np.zeros(len(z))], axis=1)
    assert np.abs(glued.phi - want).max() <= 1e-8


# ---------------------------------------------------------------------------
# the branched manifold against the closed form

@pytest.fixture(scope="module")
def branched_manifold():
    sheets, b = branching_sheets(0.1, 5, 2)
    cur = SampledCurrent.from_sheets(sheets, 2, 1 / 64)
    p = Params(qbar=2, q=1, excess_gate=1e7, height_gate=1e3)
    book = W.refine(cur, p, W.RefineConfig(k_extra=3, j_max=1,
                                           spots_per_level=4, seed=5))
    # 24 angles: the tangential stencils must resolve the e^{i 5 theta / 2}
    # oscillation (symbol attenuation at 8 angles is ~20 percent on D^2)
    cfg = M.ManifoldConfig(probe_angles=24, patch_nodes=13, pde_factor=8,
                           stab_sample=2)
    cm = M.build_center_manifold(cur, p, book, cfg)
    return cur, p, book, cm


def test_branched_manifold_tracks_closed_form(branched_manifold):
    cur, p, book, cm = branched_manifold
    h = cur.h
    hp = cm.resolutions["h_pde_max"]
    bound = 5.0 * (h * h + hp * hp)
    for rec in cm.annuli:
        assert rec["sup_err"] <= bound
        assert rec["sup_phi"] > 0
    assert cm.unit_error <= 1e-12
    assert np.all(cm.origin_value == 0.0)
    assert cm.patch_count > 0


def test_branched_manifold_estimates(branched_manifold):
    cur, p, book, cm = branched_manifold
    c = 0.1
    for rec in cm.annuli:
        t = rec["t"]
        d1 = math.sqrt(2.0) * 2.5 * c * t ** 1.5
        d2 = 2.0 * 3.75 * c * t ** 0.5
        # third derivative along the circle arclength: each theta derivative
        # of exp(i b theta) brings down b = 5/2, so the modulus is b^3 c t^(b-3)
        d3 = 2.5 ** 3 * c * t ** -0.5
        assert rec["sup_d1"] == pytest.approx(d1, rel=0.15)
        assert rec["sup_d2"] == pytest.approx(d2, rel=0.15)
        assert rec["sup_d3"] == pytest.approx(d3, rel=0.15)
        assert rec["holder3"] >= 0.0
        assert np.isfinite(rec["holder3"])
    est = cm.estimate_constants
    assert est["trend_ok"]
    assert len(est["scaled_d1"]) == len(cm.annuli)
    assert est["c1"] > 0 and est["c2"] > 0


def test_branched_manifold_decay_bookkeeping(branched_manifold):
    cur, p, book, cm = branched_manifold
    # two annuli cannot support a power-law fit; the report says so
    assert cm.decay["used_phi"] == 2
    assert math.isnan(cm.decay["slope_phi"])
    assert cm.decay["annuli"] == 2


def test_branched_manifold_phi_callable(branched_manifold):
    cur, p, book, cm = branched_manifold
    row = cm.chart_rows[3]
    z = complex(row["x"], row["y"])
    got = cm.phi(np.array([z]), np.array([row["sheet"]]))
    assert np.abs(got[0] - np.array(row["phi"])).max() <= 1e-12
    assert cm.phi(np.array([0.0 + 0.0j]), np.array([0]))[0].tolist() == [0.0, 0.0]


def test_branched_manifold_structures(branched_manifold):
    cur, p, book, cm = branched_manifold
    assert cm.whitney_regions == []
    assert cm.stabilization["audit"]["checked"] == 0
    assert cm.stabilization["audit"]["violations"] == []
    nth = 24
    assert len(cm.chart_rows) == (book.config.j_max + 1) * p.qbar * nth
    for k in ("h", "h_pde_max", "approx_step_max"):
        assert k in cm.resolutions
    assert cm.resolutions["h_pde_max"] < 1e-3


# ---------------------------------------------------------------------------
# decay fit bookkeeping on synthetic records

def test_decay_fit_recovers_exponents():
    t = 0.75 * 2.0 ** -np.arange(6)
    recs = [{"t": float(tv), "sup_phi": 2.0 * tv ** 1.14,
             "sup_err": 0.3 * tv ** 2.54} for tv in t]
    out = M._decay_fits(recs, 1e-13)
    assert out["slope_phi"] == pytest.approx(1.14, abs=1e-9)
    assert out["slope_err"] == pytest.approx(2.54, abs=1e-9)
    assert out["resid_phi"] <= 1e-12
    assert out["used_phi"] == 6


def test_decay_fit_floor_and_sentinels():
    t = 0.75 * 2.0 ** -np.arange(6)
    recs = [{"t": float(tv), "sup_phi": 0.0,
             "sup_err": 1e-15 if i >= 4 else 0.3 * tv ** 2.0}
            for i, tv in enumerate(t)]
    out = M._decay_fits(recs, 1e-13)
    assert out["slope_phi"] == math.inf          # identically resolved zero
    assert out["used_err"] == 4                  # floor strips the tail
    assert out["slope_err"] == pytest.approx(2.0, abs=1e-9)
    short = M._decay_fits(recs[:3], 1e-13)
    assert math.isnan(short["slope_err"])
    assert short["used_err"] == 3


# ---------------------------------------------------------------------------
# flat current: the manifold vanishes

def test_flat_manifold_is_zero():
    cur = SampledCurrent.from_sheets(flat_sheets(1, 2), 1, 1 / 64)
    p = Params(qbar=1, q=1)
    book = W.refine(cur, p, W.RefineConfig(k_extra=2, j_max=1,
                                           spots_per_level=2, seed=9))
    cfg = M.ManifoldConfig(probe_angles=8, patch_nodes=11, pde_factor=8)
    cm = M.build_center_manifold(cur, p, book, cfg)
    for rec in cm.annuli:
        assert rec["sup_phi"] <= 1e-12
        assert rec["sup_err"] <= 1e-12
    assert cm.decay["slope_phi"] == math.inf
    assert cm.unit_error <= 1e-12
    assert np.all(cm.origin_value == 0.0)


# ---------------------------------------------------------------------------
# stabilization around a forced removal cascade

@pytest.fixture(scope="module")
def cascade_book():
    p = Params(qbar=2, q=1)
    cur = SampledCurrent.from_sheets(flat_sheets(1, 1), 2, 1 / 64)
    seed = int(W.pack_keys(1, p.start_depth, -3000, -1, 0))

    def override(keys, zc):
        e = np.where(np.asarray(keys) == seed, 1.0, 0.0)
        return e, np.zeros(len(keys))

    cfg = W.RefineConfig(k_extra=4, j_max=2, spots_per_level=0,
                         force_candidates=np.array([seed], np.int64),
                         measure_override=override)
    return cur, p, W.refine(cur, p, cfg)


def test_cascade_audit_is_clean(cascade_book):
    cur, p, book = cascade_book
    assert len(book.w_all()) > 12
    report = M.stabilization_audit(p, book)
    assert report["violations"] == []
    assert report["checked"] >= 1
    assert report["truncation_edge"] == 0
    assert report["checked"] + report["unverifiable"] == len(book.w_all())


def test_cascade_spot_checks_agree(cascade_book):
    cur, p, book = cascade_book
    cfg = M.ManifoldConfig(probe_angles=8, patch_nodes=11, pde_factor=8,
                           stab_sample=3)
    cache = M.PatchCache(cur, p, cfg, book=book)
    rng = np.random.default_rng(cfg.seed)
    out = M.stabilization_spot_check(cur, p, book, cache, rng,
                                     sample=cfg.stab_sample)
    assert out["squares"] >= 1
    assert out["max_gap"] <= 1e-12
    for pair in out["pairs"]:
        assert pair["gap"] <= 1e-12


def test_cascade_manifold_reports_regions(cascade_book):
    cur, p, book = cascade_book
    cfg = M.ManifoldConfig(probe_angles=8, patch_nodes=11, pde_factor=8,
                           stab_sample=2)
    cm = M.build_center_manifold(cur, p, book, cfg)
    assert len(cm.whitney_regions) == len(book.w_all())
    one = cm.whitney_regions[0]
    for k in ("key", "generation", "annulus", "sheet", "center", "ell",
              "half_width"):
        assert k in one
    assert cm.stabilization["audit"]["violations"] == []
    assert cm.stabilization["numeric"]["max_gap"] <= 1e-12
    # a flat current glues to zero even across the removal collar
    for rec in cm.annuli:
        assert rec["sup_phi"] <= 1e-12

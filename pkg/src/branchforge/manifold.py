"""Branched center manifold built from tilted elliptic patches.

Per dyadic square the current is sliced over the square's optimal plane,
the sheet average is extended through a constant-coefficient elliptic solve
on the tilted disk, and the solution is reparametrized as a graph over the
base coordinates. The per-square graphs are blended with a compactly
supported partition of unity on the branched cover. The blend is evaluated
lazily at probe points, so only squares whose bump supports are actually
hit ever get built; at the working depths a full materialization of one
generation would need tens of millions of squares.

The blend stabilizes near removed squares: once a square is removed, the
refinement collar keeps later-generation survivors so far away that their
bump supports cannot reach the removed square's concentric neighborhood.
That separation is audited combinatorially for every removed square and
spot-checked numerically on a sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .approx import pi_approximation
from .currents import SampledCurrent
from .elliptic import (DirichletProblem, _fill_ring, laplacian_operator,
                       solve_dirichlet)
from .errors import ConfigViolation, InvariantViolation, RegimeError
from .fitting import fit_power_law
from .params import Params
from .whitney import (RefineConfig, SquareBook, _ancestor_hits, _isin_sorted,
                      centers_of, ell_of, in_annulus, measure_squares,
                      pack_keys, sheet_shift, unpack_keys)

SUPPORT = 17.0 / 16.0


def bump_profile(t):
    """C^4 cutoff: 1 for t <= 1, 0 for t >= 17/16, degree-9 ramp between."""
    t = np.abs(np.asarray(t, dtype=float))
    u = np.clip((t - 1.0) * 16.0, 0.0, 1.0)
    ramp = u**5 * (126.0 + u * (-420.0 + u * (540.0 + u * (-315.0 + u * 70.0))))
    return 1.0 - ramp


def bump_weight(dx, dy, ell):
    return bump_profile(np.asarray(dx) / ell) * bump_profile(np.asarray(dy) / ell)


def annulus_of(x, y):
    """Dyadic ring index from the sup-norm, -1 for the origin or outside."""
    m = np.maximum(np.abs(np.asarray(x, float)), np.abs(np.asarray(y, float)))
    out = np.full(m.shape, -1, dtype=np.int64)
    ok = (m > 0) & (m <= 1.0)
    j = np.ceil(-np.log2(m, where=ok, out=np.ones_like(m))) - 1
    out[ok] = np.maximum(j[ok].astype(np.int64), 0)
    return out


@dataclass
class ManifoldConfig:
    patch_nodes: int = 25        # slicing grid per patch side
    pde_factor: int = 12         # elliptic step = patch radius / pde_factor
    probe_angles: int = 32       # angular samples per annulus circle
    fd_radii: int = 5            # radial stencil rows per annulus
    fd_step: float = 0.02        # relative radial spacing of the stencil
    newton_tol: float = 1e-12
    rep_tol: float = 1e-8        # reparametrization residual ceiling
    solver_tol: float = 1e-10
    floor: float = 1e-13         # decay-fit resolution floor
    stab_sample: int = 6         # removed squares given the numeric check
    seed: int = 11
    mode: str = "flat"           # or "quadratic-graph"
    nbar: Optional[int] = None   # reduced components in quadratic-graph mode
    psi: Optional[Callable] = None   # (x(k,2), hbar(k,nbar)) -> (k, n-nbar)
    operator: Optional[object] = None


# ---------------------------------------------------------------------------
# single-square patches

@dataclass
class InterpolationPatch:
    """Solved graph of one square, evaluable over the base coordinates.

    The elliptic solution lives over the square's tilted plane; values_at
    intersects that tilted graph with vertical fibers, so the patch acts as
    a function of the base coordinate like every other glued piece.
    """

    key: int
    sheet: int
    center_z: complex
    ell: float
    radius: float                # tilted disk radius
    base_point: np.ndarray       # (dim,) ambient anchor on the current
    plane: np.ndarray            # (dim, 2)
    perp: np.ndarray             # (dim, dim-2)
    approx: object               # PiApproximation
    field: object                # FieldGrid of the elliptic solution
    tilt: float
    mode: str
    nbar: int
    psi: Optional[Callable]
    rep_tol: float
    meta: dict = field(default_factory=dict)
    worst_residual: float = 0.0
    _table: Optional[Callable] = None

    def h_values(self, x):
        """Solution over the tilted plane, lifted in quadratic-graph mode."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self._table is not None:
            hbar = self._table(x[:, ::-1])
        else:
            hbar = self.field.sample(x)
        if self.mode == "flat":
            return hbar
        extra = np.atleast_2d(self.psi(x, hbar))
        return np.concatenate([hbar, extra], axis=1)

    def values_at(self, z):
        """Graph values over base points z, shape (k, n).

        Newton on the plane coordinate: find x with the tilted graph point
        p + plane@x + perp@h(x) sitting on the vertical fiber of z.
        """
        z = np.asarray(z, dtype=complex).ravel()
        target = np.stack([z.real, z.imag], axis=1) - self.base_point[None, :2]
        a = self.plane[:2, :]                    # (2, 2)
        b = self.perp[:2, :]                     # (2, m)
        x = np.linalg.solve(a, target.T).T
        delta = max(self.field.grid.h * 0.25, 1e-9)
        res = None
        for _ in range(30):
            h = self.h_values(x)
            res = x @ a.T + h @ b.T - target
            rn = np.linalg.norm(res, axis=1)
            if rn.max() <= 1e-13 * max(1.0, self.radius):
                break
            hx = (self.h_values(x + [delta, 0.0]) - self.h_values(x - [delta, 0.0])) / (2 * delta)
            hy = (self.h_values(x + [0.0, delta]) - self.h_values(x - [0.0, delta])) / (2 * delta)
            jac = np.empty((len(x), 2, 2))
            jac[:, :, 0] = a[None, :, 0] + hx @ b.T
            jac[:, :, 1] = a[None, :, 1] + hy @ b.T
            step = np.linalg.solve(jac, res[..., None])[..., 0]
            x = x - step
        h = self.h_values(x)
        res = x @ a.T + h @ b.T - target
        worst = float(np.linalg.norm(res, axis=1).max()) if len(res) else 0.0
        self.worst_residual = max(self.worst_residual, worst)
        if worst > self.rep_tol:
            raise InvariantViolation(
                f"reparametrization stalled at residual {worst:.3e} on "
                f"square key {self.key}")
        pts = (self.base_point[None, :] + x @ self.plane.T + h @ self.perp.T)
        return pts[:, 2:]


def _optimal_basis(cur, p, key, book=None, rcfg=None):
    key_arr = np.array([key], dtype=np.int64)
    if book is not None and len(book.measured_keys):
        idx = np.searchsorted(book.measured_keys, key_arr)
        idx = np.clip(idx, 0, len(book.measured_keys) - 1)
        if book.measured_keys[idx[0]] == key:
            return book.measured_basis[idx[0]].copy()
    cfg = rcfg or (book.config if book is not None else RefineConfig())
    _, _, basis, _ = measure_squares(cur, p, cfg, key_arr)
    return basis[0]


def build_interpolation_patch(cur: SampledCurrent, p: Params, key: int,
                              cfg: ManifoldConfig, book: Optional[SquareBook] = None,
                              plane_key: Optional[int] = None) -> InterpolationPatch:
    """Slice, solve, and wrap one square's interpolating graph.

    plane_key lets a coarser square lend its plane and operator while the
    domain is scaled by the square itself; by default the square is its own
    host.
    """
    j, k, ix, iy, s = (int(v[0]) for v in unpack_keys(np.array([key], np.int64)))
    ell = float(ell_of(j, k))
    xc, yc = centers_of(np.array([key], dtype=np.int64))
    zc = complex(float(xc[0]), float(yc[0]))
    radius = 8.0 * p.ball_radius(ell)

    basis = _optimal_basis(cur, p, plane_key if plane_key is not None else key,
                           book=book)
    tilt = float(np.linalg.norm(basis[2:, :], 2))
    if tilt >= 0.5:
        raise RegimeError(
            f"plane tilt {tilt:.3f} too large for a graph over the base "
            f"coordinates (square key {key})")

    wc = complex(np.asarray(cur.domain.root(np.array([zc]), s))[0])
    vals_c = cur.analytic.values(np.array([zc]), np.array([wc]))[0]   # (q, n)
    ub_c = np.asarray(cur.analytic.branching(
        np.array([zc]), np.array([wc])))[0]
    pick = int(np.argmin(np.linalg.norm(vals_c - ub_c[None, :], axis=1)))
    base_point = np.concatenate([[zc.real, zc.imag], vals_c[pick]])

    f = pi_approximation(cur, basis, base_point, radius,
                         nodes=cfg.patch_nodes, sheet=s,
                         newton_tol=cfg.newton_tol, square_key=key)

    nbar = cur.n if cfg.mode == "flat" else int(cfg.nbar or cur.n)
    if cfg.mode == "quadratic-graph" and cfg.psi is None and nbar < cur.n:
        raise ConfigViolation("quadratic-graph patches need the graph map")
    samp = f.eta_interpolator()

    def boundary(pts):
        return samp(pts)[:, :nbar]

    op = cfg.operator if cfg.operator is not None else laplacian_operator(nbar)
    prob = DirichletProblem(operator=op, radius=radius, boundary=boundary,
                            h_pde=radius / cfg.pde_factor)
    fld = solve_dirichlet(prob, tol=cfg.solver_tol)

    # one interpolation table per patch; the graph intersection resamples the
    # field a handful of times per glue node
    from scipy.interpolate import RegularGridInterpolator
    filled = _fill_ring(fld.grid, fld.values)
    table = RegularGridInterpolator((fld.grid.xs, fld.grid.xs), filled,
                                    bounds_error=False, fill_value=np.nan)

    return InterpolationPatch(
        key=int(key), sheet=s, center_z=zc, ell=ell, radius=radius,
        base_point=base_point, plane=basis, perp=f.perp, approx=f, field=fld,
        tilt=tilt, mode=cfg.mode, nbar=nbar, psi=cfg.psi, rep_tol=cfg.rep_tol,
        meta={"h_pde": radius / cfg.pde_factor,
              "approx_step": f.grid_step,
              "solve": dict(fld.solve_info)},
        _table=table)


def reparametrize_to_base(patch: InterpolationPatch, z):
    """Graph values of the patch over base points plus the worst residual."""
    vals = patch.values_at(z)
    return vals, patch.worst_residual


class PatchCache:
    """Lazy keyed store of interpolation patches, bounded in size.

    Eviction only costs a deterministic rebuild, so the bound caps memory
    without changing any value.
    """

    def __init__(self, cur, p, cfg, book=None, max_patches=8192):
        from collections import OrderedDict
        self.cur = cur
        self.p = p
        self.cfg = cfg
        self.book = book
        self.max_patches = max_patches
        self.store = OrderedDict()
        self.built = 0
        self.h_pde_max = 0.0
        self.approx_step_max = 0.0

    def get(self, key):
        key = int(key)
        if key in self.store:
            self.store.move_to_end(key)
            return self.store[key]
        patch = build_interpolation_patch(self.cur, self.p, key, self.cfg,
                                          book=self.book)
        self.store[key] = patch
        self.built += 1
        self.h_pde_max = max(self.h_pde_max, patch.meta["h_pde"])
        self.approx_step_max = max(self.approx_step_max,
                                   patch.meta["approx_step"])
        while len(self.store) > self.max_patches:
            self.store.popitem(last=False)
        return patch

    @property
    def count(self):
        return self.built

    def resolution_report(self):
        return {"h_pde_max": self.h_pde_max,
                "approx_step_max": self.approx_step_max}


# ---------------------------------------------------------------------------
# gluing

@dataclass
class GluedLevel:
    level: int
    z: np.ndarray                # (k,) complex probes
    sheet: np.ndarray            # (k,)
    phi: np.ndarray              # (k, n)
    weight: np.ndarray           # (k,) bump mass at each probe
    multiplicity: np.ndarray     # (k,) contributing squares
    participants: np.ndarray     # sorted distinct square keys used
    unit_error: float            # partition-of-unity defect through the blend


def _gather_contributors(p: Params, book: SquareBook, x, y, sheet, level):
    """(probe index, square key, bump weight) triples for one glue level.

    Participating squares at level g are the current-generation survivors
    plus every square removed at generations up to g; candidates come from
    the 3x3 lattice windows of the three reachable rings, and sheet labels
    are transported from the probe to each candidate center.
    """
    n0 = p.start_depth
    qb = p.qbar
    w_all = book._w_sorted
    jann = annulus_of(x, y)
    if np.any(jann < 0):
        bad = int(np.nonzero(jann < 0)[0][0])
        raise ConfigViolation(
            f"glue probe outside the chart at x={x[bad]} y={y[bad]}")
    pieces = []
    for ju in np.unique(jann):
        sel = np.nonzero(jann == ju)[0]
        xs_, ys_, sh_ = x[sel], y[sel], sheet[sel]
        for j2 in (int(ju) - 1, int(ju), int(ju) + 1):
            if j2 < 0:
                continue
            for gen in range(n0, level + 1):
                side = 2.0 ** (1 - j2 - gen)
                ell = 0.5 * side
                ix0 = np.floor(xs_ / side).astype(np.int64)
                iy0 = np.floor(ys_ / side).astype(np.int64)
                for ox in (-1, 0, 1):
                    for oy in (-1, 0, 1):
                        ixc = ix0 + ox
                        iyc = iy0 + oy
                        xc = (ixc + 0.5) * side
                        yc = (iyc + 0.5) * side
                        w = bump_weight(xs_ - xc, ys_ - yc, ell)
                        cand = (w > 0) & in_annulus(gen, ixc, iyc)
                        if not cand.any():
                            continue
                        idx = np.nonzero(cand)[0]
                        shift = sheet_shift(qb, xs_[idx], ys_[idx],
                                            xc[idx], yc[idx])
                        keys = pack_keys(np.full(len(idx), j2),
                                         np.full(len(idx), gen),
                                         ixc[idx], iyc[idx],
                                         (sh_[idx] + shift) % qb)
                        if gen < level:
                            member = _isin_sorted(keys, w_all)
                        else:
                            member = ~_ancestor_hits(keys, w_all, qb, n0)
                        if not member.any():
                            continue
                        pieces.append((sel[idx[member]], keys[member],
                                       w[idx[member]]))
    if not pieces:
        return (np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0))
    pi = np.concatenate([a for a, _, _ in pieces])
    kk = np.concatenate([b for _, b, _ in pieces])
    ww = np.concatenate([c for _, _, c in pieces])
    return pi, kk, ww


def glue_level(cur: SampledCurrent, p: Params, book: SquareBook,
               z, sheet, level: int, cache: PatchCache) -> GluedLevel:
    """Blend the participating squares' graphs at the probe points."""
    z = np.asarray(z, dtype=complex).ravel()
    sheet = np.broadcast_to(np.asarray(sheet, dtype=np.int64), z.shape).copy()
    if level < p.start_depth or level > book.k_max:
        raise ConfigViolation(
            f"glue level {level} outside [{p.start_depth}, {book.k_max}]")
    n = cur.n
    phi = np.zeros((len(z), n))
    wsum = np.zeros(len(z))
    unit = np.zeros(len(z))
    mult = np.zeros(len(z), dtype=np.int64)

    live = np.abs(z) > 0
    pi, kk, ww = _gather_contributors(p, book, z.real[live], z.imag[live],
                                      sheet[live], level)
    live_idx = np.nonzero(live)[0]
    pi = live_idx[pi]
    np.add.at(wsum, pi, ww)
    order = np.argsort(kk, kind="stable")
    pi, kk, ww = pi[order], kk[order], ww[order]
    for key in np.unique(kk):
        sl = slice(*np.searchsorted(kk, [key, key + 1]))
        rows = pi[sl]
        patch = cache.get(key)
        vals = patch.values_at(z[rows])
        phi[rows] += ww[sl, None] * vals
        unit[rows] += ww[sl]
        mult[rows] += 1

    uncovered = live & (wsum <= 0)
    if uncovered.any():
        b = int(np.nonzero(uncovered)[0][0])
        raise InvariantViolation(
            f"uncovered glue node z=({z[b].real:.6g},{z[b].imag:.6g}) "
            f"sheet={int(sheet[b])} at level {level}")
    phi[live] /= wsum[live, None]
    unit_err = float(np.max(np.abs(unit[live] / wsum[live] - 1.0))) if live.any() else 0.0

    cfg = cache.cfg
    if cfg.mode == "quadratic-graph" and cfg.psi is not None:
        nbar = int(cfg.nbar or n)
        xy = np.stack([z.real, z.imag], axis=1)
        phibar = phi[:, :nbar]
        phi = np.concatenate([phibar, np.atleast_2d(cfg.psi(xy, phibar))],
                             axis=1)
        phi[~live] = 0.0

    return GluedLevel(level=level, z=z, sheet=sheet, phi=phi, weight=wsum,
                      multiplicity=mult, participants=np.unique(kk),
                      unit_error=unit_err)


# ---------------------------------------------------------------------------
# stabilization

def stabilization_audit(p: Params, book: SquareBook):
    """Combinatorial no-touch check for every removed square.

    For a square removed at generation i, survivors of generation i+2 whose
    bump support reaches the 9/8-concentric neighborhood would make later
    glue levels disagree there. Survivor supports shrink with depth and
    ancestors' supports contain their descendants', so a clean generation
    i+2 settles every later generation at once.
    """
    w_all = book._w_sorted
    report = {"checked": 0, "unverifiable": 0, "truncation_edge": 0,
              "violations": []}
    if not len(w_all):
        return report
    n0 = p.start_depth
    qb = p.qbar
    jw, kw, ixw, iyw, sw = unpack_keys(w_all)
    xw, yw = centers_of(w_all)
    for t in range(len(w_all)):
        i = int(kw[t])
        g = i + 2
        if g > book.k_max:
            report["unverifiable"] += 1
            continue
        report["checked"] += 1
        ell = float(ell_of(int(jw[t]), i))
        half_h = 1.125 * ell
        for j2 in (int(jw[t]) - 1, int(jw[t]), int(jw[t]) + 1):
            if j2 < 0:
                continue
            if j2 > book.config.j_max:
                # the refinement stops at j_max; deeper rings are never
                # subdivided, so a neighborhood crossing into them cannot be
                # certified either way
                inner = 2.0 ** (-j2)
                if (abs(xw[t]) - half_h < inner
                        and abs(yw[t]) - half_h < inner):
                    report["truncation_edge"] += 1
                continue
            side = 2.0 ** (1 - j2 - g)
            reach = half_h + SUPPORT * 0.5 * side
            lo_x = int(math.floor((xw[t] - reach) / side))
            hi_x = int(math.floor((xw[t] + reach) / side))
            lo_y = int(math.floor((yw[t] - reach) / side))
            hi_y = int(math.floor((yw[t] + reach) / side))
            gx = np.arange(lo_x, hi_x + 1, dtype=np.int64)
            gy = np.arange(lo_y, hi_y + 1, dtype=np.int64)
            ixc, iyc = (a.ravel() for a in np.meshgrid(gx, gy))
            keep = in_annulus(g, ixc, iyc)
            # strict support overlap with the 9/8 neighborhood, per axis
            xc = (ixc + 0.5) * side
            yc = (iyc + 0.5) * side
            ovl = ((np.abs(xc - xw[t]) < reach) & (np.abs(yc - yw[t]) < reach))
            keep &= ovl
            if not keep.any():
                continue
            ixc, iyc, xc, yc = ixc[keep], iyc[keep], xc[keep], yc[keep]
            shift = sheet_shift(qb, np.full(len(xc), xw[t]),
                                np.full(len(xc), yw[t]), xc, yc)
            keys = pack_keys(np.full(len(xc), j2), np.full(len(xc), g),
                             ixc, iyc, (int(sw[t]) + shift) % qb)
            alive = ~_ancestor_hits(keys, w_all, qb, n0)
            if alive.any():
                hit = keys[alive][:4]
                report["violations"].append(
                    {"square": int(w_all[t]), "generation": i,
                     "survivors": [int(v) for v in hit]})
    return report


def stabilization_spot_check(cur, p, book, cache, rng, sample=6):
    """Numeric agreement of two glue levels on sampled removed squares."""
    w_all = book._w_sorted
    out = {"squares": 0, "max_gap": 0.0, "pairs": []}
    if not len(w_all):
        return out
    jw, kw, _, _, sw = unpack_keys(w_all)
    ok = kw + 2 <= book.k_max
    idx = np.nonzero(ok)[0]
    if not len(idx):
        return out
    pick = rng.choice(idx, size=min(sample, len(idx)), replace=False)
    pick = np.sort(pick)
    for t in pick:
        key = w_all[t]
        i = int(kw[t])
        ell = float(ell_of(int(jw[t]), i))
        xc, yc = centers_of(np.array([key], np.int64))
        span = np.linspace(-1.0, 1.0, 3) * 1.125 * ell
        gx, gy = np.meshgrid(span + float(xc[0]), span + float(yc[0]))
        z = (gx + 1j * gy).ravel()
        keep = annulus_of(z.real, z.imag) >= 0
        z = z[keep]
        # keep the probes on the removed square's branch across the cut
        lab = (int(sw[t]) + sheet_shift(p.qbar,
                                        np.full(len(z), float(xc[0])),
                                        np.full(len(z), float(yc[0])),
                                        z.real, z.imag)) % p.qbar
        lo = glue_level(cur, p, book, z, lab, i + 2, cache)
        hi = glue_level(cur, p, book, z, lab, book.k_max, cache)
        gap = float(np.max(np.abs(lo.phi - hi.phi))) if len(z) else 0.0
        out["pairs"].append({"square": int(key), "generation": i, "gap": gap})
        out["max_gap"] = max(out["max_gap"], gap)
    out["squares"] = len(pick)
    return out


# ---------------------------------------------------------------------------
# the manifold

@dataclass
class CenterManifold:
    level: int
    mode: str
    m0: float
    annuli: list                 # per-annulus probe and derivative records
    decay: dict                  # fitted slopes of sup|phi| and sup|u - phi|
    stabilization: dict
    resolutions: dict
    whitney_regions: list
    chart_rows: list
    unit_error: float
    patch_count: int
    origin_value: np.ndarray
    phi: Callable                # (z, sheet, level=None) -> (k, n)
    params: Params = None
    estimate_constants: dict = None


def _fourth_diff_periodic(f, h, order):
    """4th-order periodic tangential derivatives along axis 0."""
    if order == 1:
        return (np.roll(f, 2, 0) - 8 * np.roll(f, 1, 0)
                + 8 * np.roll(f, -1, 0) - np.roll(f, -2, 0)) / (12 * h)
    if order == 2:
        return (-np.roll(f, 2, 0) + 16 * np.roll(f, 1, 0) - 30 * f
                + 16 * np.roll(f, -1, 0) - np.roll(f, -2, 0)) / (12 * h * h)
    if order == 3:
        return (-np.roll(f, 3, 0) + 8 * np.roll(f, 2, 0)
                - 13 * np.roll(f, 1, 0) + 13 * np.roll(f, -1, 0)
                - 8 * np.roll(f, -2, 0) + np.roll(f, -3, 0)) / (8 * h**3)
    raise ConfigViolation("tangential stencil supports orders 1..3")


def branched_circle_order(theta, qb):
    """(angle index, sheet) pairs tracing the cover's circle once, in order.

    A fixed sheet label does not close up: each passage of the cut at angle
    pi continues onto the next sheet, so the closed curve concatenates the
    below-cut and above-cut arcs of consecutive labels. Along it the root
    angle advances uniformly, which is what the periodic stencils need.
    """
    theta = np.asarray(theta, dtype=float)
    lo = np.nonzero(theta < np.pi)[0]
    hi = np.nonzero(theta > np.pi)[0]
    if len(lo) + len(hi) != len(theta):
        raise ConfigViolation("circle samples must avoid the cut angle")
    aa, ss = [], []
    for m in range(qb):
        aa.append(lo)
        ss.append(np.full(len(lo), m, dtype=np.int64))
        aa.append(hi)
        ss.append(np.full(len(hi), (m + 1) % qb, dtype=np.int64))
    return np.concatenate(aa), np.concatenate(ss)


def _annulus_record(cur, p, book, cache, cfg, j, level):
    nr, nth = cfg.fd_radii, cfg.probe_angles
    if nr != 5:
        raise ConfigViolation("the radial stencil is calibrated for 5 rows")
    t0 = 0.75 * 2.0 ** (-j)
    radii = t0 * (1.0 + cfg.fd_step * (np.arange(nr) - (nr - 1) / 2.0))
    theta = 2 * np.pi * (np.arange(nth) + 0.5) / nth
    qb = p.qbar
    zz = radii[None, :, None] * np.exp(1j * theta[:, None, None])
    zz = np.broadcast_to(zz, (nth, nr, qb)).copy()
    ss = np.broadcast_to(np.arange(qb)[None, None, :], zz.shape).copy()
    glued = glue_level(cur, p, book, zz.ravel(), ss.ravel(), level, cache)
    phi = glued.phi.reshape(nth, nr, qb, cur.n)

    w = cur.domain.root(zz.ravel(), ss.ravel())
    ub = np.asarray(cur.analytic.branching(zz.ravel(), w)).reshape(
        nth, nr, qb, cur.n)
    err = np.linalg.norm(phi - ub, axis=3)
    mag = np.linalg.norm(phi, axis=3)

    # reorder onto the closed branched circle before any tangential stencil
    aa, sh = branched_circle_order(theta, qb)
    big = phi[aa, :, sh, :]                       # (qb*nth, nr, n)
    dr = radii[1] - radii[0]
    mid = (nr - 1) // 2
    r = radii[mid]
    dth = theta[1] - theta[0]
    c0, c1, c2, c3, c4 = (big[:, i] for i in range(5))
    phi_r = (c0 - 8 * c1 + 8 * c3 - c4) / (12 * dr)
    phi_rr = (-c0 + 16 * c1 - 30 * c2 + 16 * c3 - c4) / (12 * dr * dr)
    phi_t = _fourth_diff_periodic(c2, dth, 1)
    phi_tt = _fourth_diff_periodic(c2, dth, 2)
    phi_rt = _fourth_diff_periodic(phi_r, dth, 1)
    # rotated-frame Hessian entries of each component
    h_a = phi_rr
    h_b = phi_rt / r - phi_t / r**2
    h_c = phi_tt / r**2 + phi_r / r
    grad = np.sqrt(phi_r**2 + (phi_t / r) ** 2)
    hess = np.sqrt(h_a**2 + 2 * h_b**2 + h_c**2)
    d3_arc = _fourth_diff_periodic(c2, dth, 3) / r**3
    sup_d1 = float(np.sqrt((grad**2).sum(axis=1)).max())
    sup_d2 = float(np.sqrt((hess**2).sum(axis=1)).max())
    sup_d3 = float(np.sqrt((d3_arc**2).sum(axis=1)).max())

    # tangential Hoelder quotient of the third arclength derivative
    flat3 = np.linalg.norm(d3_arc, axis=1)        # (qb*nth,)
    kappa = p.holder_kappa
    nbig = len(flat3)
    pos = np.arange(nbig) * (r * dth)
    total = nbig * r * dth
    hold = 0.0
    for a in range(0, nbig, 2):
        dists = np.abs(pos - pos[a])
        dists = np.minimum(dists, total - dists)
        okp = dists > 0
        quot = np.abs(flat3[okp] - flat3[a]) / dists[okp] ** kappa
        if quot.size:
            hold = max(hold, float(quot.max()))

    return {
        "annulus": int(j), "t": float(r), "level": int(level),
        "sup_phi": float(mag.max()), "sup_err": float(err.max()),
        "sup_d1": sup_d1, "sup_d2": sup_d2, "sup_d3": sup_d3,
        "holder3": hold,
        "scaled_d1": sup_d1 * 2.0 ** (j * (1 - p.gamma0)),
        "scaled_d2": sup_d2 * 2.0 ** (j * (2 - p.gamma0)),
        "probes": int(nth * nr * qb),
        "mean_multiplicity": float(glued.multiplicity.mean()),
        "unit_error": glued.unit_error,
        "mid_phi": phi[:, mid], "mid_u": ub[:, mid], "theta": theta,
    }


def _decay_fits(records, floor):
    t = np.array([r["t"] for r in records])
    sup_phi = np.array([r["sup_phi"] for r in records])
    sup_err = np.array([r["sup_err"] for r in records])
    out = {"floor": floor, "annuli": len(records)}
    for name, ys in (("phi", sup_phi), ("err", sup_err)):
        ok = ys > floor
        if not ok.any():
            out[f"slope_{name}"] = math.inf
            out[f"amp_{name}"] = -math.inf
            out[f"resid_{name}"] = 0.0
            out[f"used_{name}"] = 0
            continue
        if ok.sum() < 4:
            out[f"slope_{name}"] = math.nan
            out[f"amp_{name}"] = math.nan
            out[f"resid_{name}"] = math.nan
            out[f"used_{name}"] = int(ok.sum())
            continue
        slope, amp, resid = fit_power_law(t[ok], ys[ok])
        out[f"slope_{name}"] = slope
        out[f"amp_{name}"] = amp
        out[f"resid_{name}"] = resid
        out[f"used_{name}"] = int(ok.sum())
    return out


def build_center_manifold(cur: SampledCurrent, p: Params, book: SquareBook,
                          cfg: Optional[ManifoldConfig] = None) -> CenterManifold:
    """Glue the deepest level along probe rings and audit stabilization."""
    cfg = cfg or ManifoldConfig()
    cache = PatchCache(cur, p, cfg, book=book)
    level = book.k_max
    rng = np.random.default_rng(cfg.seed)

    records = []
    chart_rows = []
    for j in range(book.config.j_max + 1):
        rec = _annulus_record(cur, p, book, cache, cfg, j, level)
        mid_phi = rec.pop("mid_phi")
        mid_u = rec.pop("mid_u")
        theta = rec.pop("theta")
        for s in range(p.qbar):
            for a in range(len(theta)):
                zv = rec["t"] * complex(math.cos(theta[a]), math.sin(theta[a]))
                chart_rows.append({
                    "annulus": j, "sheet": s, "theta": float(theta[a]),
                    "t": rec["t"], "x": zv.real, "y": zv.imag,
                    "phi": mid_phi[a, s].tolist(),
                    "u": mid_u[a, s].tolist(),
                })
        records.append(rec)

    decay = _decay_fits(records, cfg.floor)
    audit = stabilization_audit(p, book)
    spots = stabilization_spot_check(cur, p, book, cache, rng,
                                     sample=cfg.stab_sample)
    stab = {"audit": audit, "numeric": spots}

    regions = []
    if len(book._w_sorted):
        jw, kw, _, _, sw = unpack_keys(book._w_sorted)
        xw, yw = centers_of(book._w_sorted)
        for t in range(len(book._w_sorted)):
            ell = float(ell_of(int(jw[t]), int(kw[t])))
            regions.append({
                "key": int(book._w_sorted[t]), "generation": int(kw[t]),
                "annulus": int(jw[t]), "sheet": int(sw[t]),
                "center": (float(xw[t]), float(yw[t])), "ell": ell,
                "half_width": SUPPORT * ell,
            })

    def phi(z, sheet, lv=None):
        g = glue_level(cur, p, book, z, sheet, level if lv is None else lv,
                       cache)
        return g.phi

    zero = phi(np.array([0.0 + 0.0j]), np.array([0]))
    scaled1 = [r["scaled_d1"] for r in records]
    scaled2 = [r["scaled_d2"] for r in records]
    head1 = max(scaled1[:3]) if scaled1 else 0.0
    head2 = max(scaled2[:3]) if scaled2 else 0.0
    est = {
        "scaled_d1": scaled1, "scaled_d2": scaled2,
        "c1": max(scaled1) if scaled1 else 0.0,
        "c2": max(scaled2) if scaled2 else 0.0,
        "holder3": max((r["holder3"] for r in records), default=0.0),
        "trend_ok": (len(scaled1) < 4
                     or (scaled1[-1] <= 3 * head1 + 1e-30
                         and scaled2[-1] <= 3 * head2 + 1e-30)),
    }

    res = cache.resolution_report()
    res["h"] = cur.h
    return CenterManifold(
        level=level, mode=cfg.mode, m0=book.m0, annuli=records, decay=decay,
        stabilization=stab, resolutions=res, whitney_regions=regions,
        chart_rows=chart_rows,
        unit_error=max((r["unit_error"] for r in records), default=0.0),
        patch_count=cache.count, origin_value=zero[0], phi=phi, params=p,
        estimate_constants=est)


def compare_to_branching(cm: CenterManifold):
    """Decay report of sup|u - phi| and sup|phi| over the probe annuli."""
    return dict(cm.decay)

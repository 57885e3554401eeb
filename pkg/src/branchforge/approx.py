"""Multivalued Lipschitz approximations of a current over tilted planes.

A sampled graph current restricted to a cylinder over a small plane disk is,
in the working regime, itself a multivalued graph over that disk. This module
recovers those graph values by slicing fibers: for every plane grid node the
ambient support points on the transversal fiber are found branch by branch
with a Newton iteration in the cover coordinate. The result is a gridded
Q-point field together with the bookkeeping the later interpolation steps
need (failed fibers, measured Lipschitz constant, collision log).

Slicing runs in the cover coordinate w rather than the base coordinate, so
branches never jump sheets when an iterate crosses the branch cut.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .currents import SampledCurrent
from .errors import ConfigViolation, RegimeError
from .geometry import eta_mean, qdist

_AREA = math.pi


@dataclass
class PiApproximation:
    """Gridded multivalued graph of a current over one tilted plane.

    values[iy, ix] holds the degree-many fiber points expressed in the
    orthonormal frame perp (coordinates transverse to the plane); roots and
    sheets record where on the cover each value came from. The stats mask
    `inside` is the closed disk of the nominal radius; the grid itself
    extends a little further so interpolation on the rim circle is clean.
    """

    plane: np.ndarray            # (dim, 2) orthonormal
    perp: np.ndarray             # (dim, dim-2) orthonormal complement
    base_center: np.ndarray      # (dim,)
    radius: float                # nominal disk radius
    xs: np.ndarray               # (g,) shared axis coordinates
    inside: np.ndarray           # (g, g) stats disk mask
    sliced: np.ndarray           # (g, g) nodes where fibers were attempted
    values: np.ndarray           # (g, g, Q, m) NaN on failed nodes
    roots: np.ndarray            # (g, g, Q) complex cover roots
    sheets: np.ndarray           # (g, g, Q) int8 sheet of each value
    bad_set: np.ndarray          # (g, g) attempted and failed
    lip: float
    collisions: int
    degree_target: int
    square_key: Optional[int] = None
    meta: dict = field(default_factory=dict)

    @property
    def grid_step(self) -> float:
        return float(self.xs[1] - self.xs[0])

    @property
    def codim(self) -> int:
        return self.values.shape[3]

    def good_mask(self) -> np.ndarray:
        return self.sliced & ~self.bad_set

    def bad_fraction(self) -> float:
        n_in = int(self.inside.sum())
        if n_in == 0:
            return 0.0
        return float((self.bad_set & self.inside).sum()) / n_in

    def eta_field(self) -> np.ndarray:
        """Nodewise average of the Q values, shape (g, g, m)."""
        return np.mean(self.values, axis=2)

    def eta_interpolator(self):
        from scipy.interpolate import RegularGridInterpolator
        field_vals = np.nan_to_num(self.eta_field(), nan=0.0)
        it = RegularGridInterpolator((self.xs, self.xs), field_vals,
                                     bounds_error=False, fill_value=0.0)

        def sample(pts):
            pts = np.asarray(pts, dtype=float)
            return it(np.stack([pts[:, 1], pts[:, 0]], axis=1))

        return sample

    def center_values(self) -> np.ndarray:
        g = self.xs.size
        return self.values[g // 2, g // 2]


def _perp_frame(plane: np.ndarray) -> np.ndarray:
    u, _, _ = np.linalg.svd(plane, full_matrices=True)
    # align the leading block with the plane to keep the complement stable
    return u[:, 2:]


def pi_approximation(cur: SampledCurrent, plane, base_center, radius,
                     nodes: int = 37, degree: Optional[int] = None,
                     square_key: Optional[int] = None,
                     newton_tol: float = 1e-12,
                     max_iter: int = 40,
                     sheet: Optional[int] = None) -> PiApproximation:
    """Slice the current into a multivalued graph over a plane disk.

    plane is an orthonormal (dim, 2) basis, base_center the ambient disk
    center, radius the disk radius. With sheet=None every cover branch is
    sliced (degree qbar*q); with an explicit sheet only that branch is
    followed, seeded by cut-free continuation from the disk center, which
    keeps the labels consistent when the disk straddles the negative real
    axis. Fails loudly when the projection is not graphical (more than 5%
    failed fibers) or when the current's outer rim projects into the
    slicing region.
    """
    plane = np.asarray(plane, dtype=float)
    base_center = np.asarray(base_center, dtype=float)
    dim = cur.dim
    if plane.shape != (dim, 2):
        raise ConfigViolation("plane basis must be (ambient dim, 2)")
    if not np.allclose(plane.T @ plane, np.eye(2), atol=1e-8):
        raise ConfigViolation("plane basis must be orthonormal")
    if nodes < 9:
        raise ConfigViolation("slicing grid needs at least 9 nodes per side")
    if cur.analytic is None:
        raise RegimeError("fiber slicing needs the closed-form evaluator")
    if sheet is None:
        branch_sheets = list(range(cur.qbar))
        if degree is None:
            degree = cur.qbar * cur.q
    else:
        branch_sheets = [int(sheet) % cur.qbar]
        if degree is None:
            degree = cur.q
    m = dim - 2
    perp = _perp_frame(plane)

    # rim of the current must stay clear of every sliced fiber
    r_slice = radius * (1.0 + 3.5 / nodes)
    theta = np.linspace(0.0, 2 * math.pi, 181)
    rim_min = math.inf
    for s in range(cur.qbar):
        zb = cur.half_width * np.exp(1j * theta)
        wb = cur.domain.root(zb, s)
        vb = cur.analytic.values(zb, wb)          # (k, q, n)
        for j in range(cur.q):
            pts = np.concatenate([np.stack([zb.real, zb.imag], axis=1),
                                  vb[:, j, :]], axis=1)
            xi = (pts - base_center[None, :]) @ plane
            rim_min = min(rim_min, float(np.linalg.norm(xi, axis=1).min()))
    if rim_min <= r_slice:
        raise RegimeError(
            f"current boundary projects into the slicing disk "
            f"(clearance {rim_min:.3e} vs radius {r_slice:.3e})")

    xs = np.linspace(-r_slice, r_slice, nodes)
    delta = xs[1] - xs[0]
    gx, gy = np.meshgrid(xs, xs)
    rr = gx * gx + gy * gy
    sliced = rr <= r_slice * r_slice * (1 + 1e-12)
    inside = rr <= radius * radius * (1 + 1e-12)

    iy, ix = np.nonzero(sliced)
    targets = np.stack([gx[iy, ix], gy[iy, ix]], axis=1)      # (k, 2)
    k = targets.shape[0]
    seeds_ambient = base_center[None, :] + targets @ plane.T
    z_seed = seeds_ambient[:, 0] + 1j * seeds_ambient[:, 1]

    atol = newton_tol * max(1.0, radius)
    escape = (4.0 * max(cur.half_width, 1.0)) ** (1.0 / cur.qbar)

    g = nodes
    values = np.full((g, g, degree, m), np.nan)
    roots = np.full((g, g, degree), np.nan + 0j, dtype=complex)
    sheet_lab = np.full((g, g, degree), -1, dtype=np.int8)
    ok_count = np.zeros((g, g), dtype=np.int32)

    branch = 0
    for s in branch_sheets:
        if sheet is None:
            w = cur.domain.root(z_seed, s).astype(complex)
        else:
            # cut-free seeding: continue the center root along the disk
            zc0 = complex(base_center[0], base_center[1])
            if abs(zc0) == 0.0:
                raise RegimeError("sheet slicing needs a center off the origin")
            ratio = z_seed / zc0
            if np.any(np.abs(np.angle(ratio)) >= 0.5 * math.pi):
                raise RegimeError("slicing disk wraps too far around the origin")
            wc0 = complex(np.asarray(cur.domain.root(np.array([zc0]), s))[0])
            w = wc0 * np.exp(np.log(ratio) / cur.qbar)
        for j in range(cur.q):

            def fiber_gap(wv, sel=None):
                zv = wv ** cur.qbar
                vals = cur.analytic.values(zv, wv)
                pts = np.concatenate([np.stack([zv.real, zv.imag], axis=1),
                                      vals[:, j, :]], axis=1)
                tg = targets if sel is None else targets[sel]
                gap = (pts - base_center[None, :]) @ plane - tg
                fv = (pts - base_center[None, :]) @ perp
                return gap, fv

            wj = w.copy()
            live = np.ones(k, dtype=bool)
            gap, fv = fiber_gap(wj)
            res = np.linalg.norm(gap, axis=1)
            for _ in range(max_iter):
                live = (res > atol) & (np.abs(wj) < escape) & np.isfinite(res)
                if not live.any():
                    break
                dw = np.maximum(np.abs(wj[live]), 1e-6) * 1e-7
                g0 = gap[live]
                g1, _ = fiber_gap(wj[live] + dw, live)
                g2, _ = fiber_gap(wj[live] + 1j * dw, live)
                j11 = (g1[:, 0] - g0[:, 0]) / dw
                j21 = (g1[:, 1] - g0[:, 1]) / dw
                j12 = (g2[:, 0] - g0[:, 0]) / dw
                j22 = (g2[:, 1] - g0[:, 1]) / dw
                det = j11 * j22 - j12 * j21
                det = np.where(np.abs(det) < 1e-300, np.nan, det)
                sx = (g0[:, 0] * j22 - g0[:, 1] * j12) / det
                sy = (g0[:, 1] * j11 - g0[:, 0] * j21) / det
                wj[live] = wj[live] - (sx + 1j * sy)
                gap, fv = fiber_gap(wj)
                res = np.linalg.norm(gap, axis=1)
            good = (res <= atol) & (np.abs(wj) < escape)
            values[iy[good], ix[good], branch, :] = fv[good]
            roots[iy[good], ix[good], branch] = wj[good]
            sheet_lab[iy[good], ix[good], branch] = s
            ok_count[iy[good], ix[good]] += 1
            branch += 1

    bad = sliced & (ok_count < degree)
    bad_frac = float((bad & inside).sum()) / max(int(inside.sum()), 1)
    if bad_frac > 0.05:
        raise RegimeError(
            f"projection not graphical: {bad_frac:.1%} of fibers failed "
            f"to produce {degree} values")
    values[bad] = np.nan
    roots[bad] = np.nan
    sheet_lab[bad] = -1

    # collision log: distinct branches landing on the same cover point
    zr = roots.reshape(g * g, degree)
    fin = np.isfinite(zr.real)
    coll = 0
    for a in range(degree):
        for b in range(a + 1, degree):
            both = fin[:, a] & fin[:, b]
            coll += int(np.count_nonzero(
                np.abs(zr[both, a] - zr[both, b]) < 1e-9))

    lip = _edge_lipschitz(values, sliced & ~bad, delta, degree)

    f = PiApproximation(
        plane=plane, perp=perp, base_center=base_center, radius=float(radius),
        xs=xs, inside=inside, sliced=sliced, values=values, roots=roots,
        sheets=sheet_lab, bad_set=bad, lip=lip, collisions=coll,
        degree_target=degree, square_key=square_key,
        meta={"bad_fraction": bad_frac, "rim_clearance": rim_min,
              "grid_step": float(delta), "slice_radius": float(r_slice)})
    return f


def _edge_lipschitz(values, good, delta, degree):
    worst = 0.0
    for axis in (0, 1):
        a = values[:, :-1] if axis == 1 else values[:-1, :]
        b = values[:, 1:] if axis == 1 else values[1:, :]
        ga = good[:, :-1] if axis == 1 else good[:-1, :]
        gb = good[:, 1:] if axis == 1 else good[1:, :]
        both = ga & gb
        if not both.any():
            continue
        va = a[both]
        vb = b[both]
        if degree == 1:
            d = np.linalg.norm(va[:, 0, :] - vb[:, 0, :], axis=1)
        elif degree == 2:
            d_id = (np.sum((va[:, 0] - vb[:, 0]) ** 2, axis=1)
                    + np.sum((va[:, 1] - vb[:, 1]) ** 2, axis=1))
            d_sw = (np.sum((va[:, 0] - vb[:, 1]) ** 2, axis=1)
                    + np.sum((va[:, 1] - vb[:, 0]) ** 2, axis=1))
            d = np.sqrt(np.minimum(d_id, d_sw))
        else:
            d = np.array([qdist(x, y) for x, y in zip(va, vb)])
        if d.size:
            worst = max(worst, float(d.max()) / delta)
    return worst


def projected_average(f: PiApproximation, mode: str = "flat", kappa=None):
    """Average of the Q values, optionally projected onto a model subspace.

    flat mode returns the plain nodewise average; quadratic-graph mode
    composes it with the orthogonal projection onto the columns of kappa
    (expressed in the perp frame, shape (m, nbar))."""
    eta = f.eta_field()
    if mode == "flat":
        return eta
    if mode == "quadratic-graph":
        if kappa is None:
            raise ConfigViolation("quadratic-graph averaging needs the model subspace")
        kappa = np.asarray(kappa, dtype=float)
        if kappa.shape[0] != f.codim:
            raise ConfigViolation("model subspace rows must match the transverse dim")
        return eta @ kappa
    raise ConfigViolation(f"unknown averaging mode {mode!r}")


def difference_mass(cur: SampledCurrent, f: PiApproximation) -> float:
    """Mass unaccounted for by the graph over the failed fibers.

    Both the current's sheet area and the approximation's are near-flat at
    this scale, so each side is quadratured as fiber degree times cell area.
    """
    count = int(f.bad_set.sum())
    cell = f.grid_step ** 2
    return 2.0 * f.degree_target * cell * count


def graph_excess(f: PiApproximation) -> float:
    """Tilt excess of the interpolated graph relative to its own plane.

    Cell-centered gradients over complete good cells; the integrand per
    branch is the area excess sqrt(det(I + Df^T Df)) - 1, normalized by the
    plane area of the nominal disk (same convention as the current's
    excess measurement).
    """
    delta = f.grid_step
    good = f.good_mask()
    cells = good[:-1, :-1] & good[:-1, 1:] & good[1:, :-1] & good[1:, 1:]
    # restrict to cells whose center is in the stats disk
    xc = 0.5 * (f.xs[:-1] + f.xs[1:])
    cgx, cgy = np.meshgrid(xc, xc)
    cells &= (cgx ** 2 + cgy ** 2) <= f.radius ** 2
    if not cells.any():
        return 0.0
    total = 0.0
    v = f.values
    for branch in range(f.degree_target):
        vb = v[:, :, branch, :]
        fx = (vb[:-1, 1:] + vb[1:, 1:] - vb[:-1, :-1] - vb[1:, :-1]) / (2 * delta)
        fy = (vb[1:, :-1] + vb[1:, 1:] - vb[:-1, :-1] - vb[:-1, 1:]) / (2 * delta)
        gxx = 1.0 + np.sum(fx * fx, axis=2)
        gyy = 1.0 + np.sum(fy * fy, axis=2)
        gxy = np.sum(fx * fy, axis=2)
        det = gxx * gyy - gxy * gxy
        total += float(np.sum((np.sqrt(det[cells]) - 1.0) * delta * delta))
    return total / (_AREA * f.radius ** 2)

"""Sampled multivalued graph currents and their integral measurements.

A current here is a multivalued graph over the branched disk: at every grid
node of the z-square and on every sheet of the cover we store a point group
(q values in R^n). Densities and tangent planes come from one-sided finite
differences of the sheet values, taken cut-aware so differencing never mixes
sheets across the branch line.

Measurements (mass, tilt excess, height, optimal plane) integrate over
regions of the ambient R^{2+n}. Boundary cells are subsampled so the
staircase error stays quadratic in the grid step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigViolation, RegimeError
from .geometry import BranchedDomain, orthonormalize, projector

AREA_UNIT_DISK = np.pi


# ---------------------------------------------------------------------------
# regions

@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def member(self, pts):
        d = pts - np.asarray(self.center)[..., :]
        return np.einsum("...i,...i->...", d, d) <= self.radius**2 * (1 + 1e-14)


@dataclass(frozen=True)
class Cylinder:
    """Points whose projection onto the spanning plane lies in a 2-disk."""

    center: np.ndarray
    radius: float
    basis: np.ndarray  # (dim, 2) orthonormal

    def member(self, pts):
        d = pts - np.asarray(self.center)[..., :]
        proj = d @ self.basis
        return np.einsum("...i,...i->...", proj, proj) <= self.radius**2 * (1 + 1e-14)


@dataclass(frozen=True)
class WholeSpace:
    def member(self, pts):
        return np.ones(pts.shape[:-1], dtype=bool)


# ---------------------------------------------------------------------------
# analytic sheet descriptions

@dataclass
class AnalyticSheets:
    """Closed-form values for each of the q points over (z, w).

    branching(z, w) is the single admissible branching the values cluster
    around; offsets(z, w) are per-value deviations (may be zero). Both are
    vectorized over flat complex arrays and return (m, n) resp. (m, q, n).
    """

    q: int
    n: int
    branching: Callable[[np.ndarray, np.ndarray], np.ndarray]
    offsets: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    sep_coeff: float = 0.0      # c_s in the horn bound c_s |z|^a
    deriv_coeff: float = 0.0    # bound for |Du| / |z|^{b-1}

    def values(self, z, w):
        z = np.asarray(z, dtype=complex).ravel()
        w = np.asarray(w, dtype=complex).ravel()
        u = np.asarray(self.branching(z, w), dtype=float).reshape(len(z), self.n)
        vals = np.repeat(u[:, None, :], self.q, axis=1)
        if self.offsets is not None:
            vals = vals + np.asarray(self.offsets(z, w), dtype=float).reshape(
                len(z), self.q, self.n
            )
        return vals


def _embed2(c, n):
    """Complex scalar field into the first two of n normal coordinates."""
    out = np.zeros(c.shape + (n,), dtype=float)
    out[..., 0] = c.real
    if n >= 2:
        out[..., 1] = c.imag
    return out


def flat_sheets(q, n):
    return AnalyticSheets(q, n, lambda z, w: np.zeros((len(z), n)))


def tilt_sheets(eps, q=1, n=2):
    def u(z, w):
        out = np.zeros((len(z), n))
        out[:, 0] = eps * z.real
        return out

    return AnalyticSheets(q, n, u, deriv_coeff=abs(eps))


def branching_sheets(coeff, power, qbar, q=1, n=2):
    """u = coeff * w^power embedded in the normal slot; power/qbar > 1."""
    if power <= qbar:
        raise ConfigViolation("branch power must exceed the cover order")

    def u(z, w):
        return _embed2(coeff * w**power, n)

    b = power / qbar
    return AnalyticSheets(
        q, n, u, sep_coeff=coeff / 2.0, deriv_coeff=coeff * power
    ), b


def perturbed_branching_sheets(coeff, power, qbar, q, n, amp, decay, seed):
    """Branching plus seeded smooth per-value offsets, clipped inside the horn.

    Offsets scale like |z|^decay with a low-harmonic angular pattern so the
    graph stays a legitimate perturbation of the branching at every scale.
    """
    base, b = branching_sheets(coeff, power, qbar, q, n)
    rng = np.random.default_rng(seed)
    # one (q, n, 3) coefficient block: constant + cos + sin in the cone angle
    pat = rng.standard_normal((q, n, 3))
    pat /= max(1.0, np.max(np.abs(pat)))
    clip = 0.9 * (coeff / 2.0) if coeff > 0 else amp

    def offsets(z, w):
        ang = qbar * np.angle(w)
        r = np.abs(z)
        basefac = amp * r**decay
        out = (
            pat[None, :, :, 0]
            + pat[None, :, :, 1] * np.cos(ang)[:, None, None]
            + pat[None, :, :, 2] * np.sin(ang)[:, None, None]
        ) * basefac[:, None, None]
        # keep every value strictly inside its horn with 10 percent margin
        lim = clip * r**decay
        norm = np.linalg.norm(out, axis=-1, keepdims=True)
        scale = np.minimum(1.0, lim[:, None, None] / np.maximum(norm, 1e-300))
        return out * scale

    return AnalyticSheets(
        base.q,
        base.n,
        base.branching,
        offsets=offsets,
        sep_coeff=base.sep_coeff,
        deriv_coeff=base.deriv_coeff + amp * (decay + 1) * 4.0,
    ), b


def seeded_bump_sheets(coeff, power, qbar, q, n, bump_center, bump_width, bump_amp):
    """Branching plus one localized ridge, used to trip refinement gates.

    The ridge lives on a single sheet region around bump_center (a z-point),
    with gradients ~ bump_amp / bump_width, so the excess gate fires exactly
    in the squares that see it.
    """
    base, b = branching_sheets(coeff, power, qbar, q, n)
    zc = complex(bump_center)

    def offsets(z, w):
        d2 = np.abs(z - zc) ** 2 / bump_width**2
        prof = np.where(d2 < 1.0, np.exp(1.0 - 1.0 / np.maximum(1.0 - d2, 1e-300)), 0.0)
        out = np.zeros((len(z), q, n))
        out[:, :, -1] = (bump_amp * prof)[:, None]
        return out

    return AnalyticSheets(
        base.q, base.n, base.branching, offsets=offsets,
        sep_coeff=base.sep_coeff, deriv_coeff=base.deriv_coeff,
    ), b


# ---------------------------------------------------------------------------
# the sampled current

@dataclass
class SampledCurrent:
    domain: BranchedDomain
    q: int
    n: int
    half_width: float
    h: float
    xs: np.ndarray              # (nx,) node abscissae
    ys: np.ndarray              # (ny,)
    values: np.ndarray          # (qbar, ny, nx, q, n), NaN off-domain
    analytic: Optional[AnalyticSheets] = None
    sep_coeff: float = 0.0
    deriv_coeff: float = 0.0
    tangents: np.ndarray = field(default=None, repr=False)  # (qbar, ny, nx, q, n, 2)
    density: np.ndarray = field(default=None, repr=False)   # (qbar, ny, nx, q)

    @property
    def qbar(self):
        return self.domain.qbar

    @property
    def dim(self):
        return 2 + self.n

    # -- construction -------------------------------------------------------

    @classmethod
    def from_sheets(cls, sheets: AnalyticSheets, qbar, h, half_width=1.0, rho=2.0):
        dom = BranchedDomain(qbar=qbar, rho=rho)
        m = int(round(2 * half_width / h))
        xs = -half_width + h * (np.arange(m + 1))
        ys = xs.copy()
        zg = xs[None, :] + 1j * ys[:, None]
        vals = np.full((qbar, m + 1, m + 1, sheets.q, sheets.n), np.nan)
        mask = np.abs(zg) > 1e-12
        zf = zg[mask]
        for s in range(qbar):
            wf = dom.root(zf, s)
            vals[s][mask] = sheets.values(zf, wf)
        cur = cls(
            domain=dom, q=sheets.q, n=sheets.n, half_width=half_width, h=h,
            xs=xs, ys=ys, values=vals, analytic=sheets,
            sep_coeff=sheets.sep_coeff, deriv_coeff=sheets.deriv_coeff,
        )
        cur._build_differentials()
        return cur

    def _neighbor_sheet(self, s, ix, iy_from, iy_to):
        """Sheet label after stepping one node in y, cut-aware.

        The cut sits on the negative real axis. Stepping downward across it
        advances the sheet, stepping upward rewinds it. x-steps never cross.
        """
        x = self.xs[ix]
        if x >= 0 or self.qbar == 1:
            return s
        y0, y1 = self.ys[iy_from], self.ys[iy_to]
        # nodes exactly on the cut count as the upper side (principal angle pi)
        up0 = y0 >= 0
        up1 = y1 >= 0
        if up0 and not up1:
            return (s + 1) % self.qbar
        if up1 and not up0:
            return (s - 1) % self.qbar
        return s

    def _build_differentials(self):
        qb, ny, nx = self.qbar, len(self.ys), len(self.xs)
        tg = np.full((qb, ny, nx, self.q, self.n, 2), np.nan)
        dens = np.full((qb, ny, nx, self.q), np.nan)
        vals = self.values
        h = self.h
        for s in range(qb):
            v = vals[s]
            # x-direction: forward where the neighbor exists, else backward
            dx = np.full_like(v, np.nan)
            fwd = v[:, 1:, :, :] - v[:, :-1, :, :]
            dx[:, :-1] = fwd
            bad = ~np.isfinite(dx)
            dx_b = np.full_like(v, np.nan)
            dx_b[:, 1:] = fwd
            dx = np.where(bad, dx_b, dx) / h
            # y-direction needs the cut-aware gather
            dy = np.full_like(v, np.nan)
            for iy in range(ny):
                for step in (1, -1):
                    jy = iy + step
                    if not 0 <= jy < ny:
                        continue
                    need = ~np.isfinite(dy[iy, :, 0, 0]) if step == -1 else np.ones(nx, bool)
                    for ix in np.nonzero(need)[0]:
                        if not np.isfinite(v[iy, ix, 0, 0]):
                            continue
                        s2 = self._neighbor_sheet(s, ix, iy, jy)
                        nb = vals[s2][jy, ix]
                        if np.isfinite(nb[0, 0]):
                            dy[iy, ix] = (nb - v[iy, ix]) * step / h
            tg[s, ..., 0] = dx
            tg[s, ..., 1] = dy
            g11 = 1.0 + np.einsum("yxqn,yxqn->yxq", dx, dx)
            g22 = 1.0 + np.einsum("yxqn,yxqn->yxq", dy, dy)
            g12 = np.einsum("yxqn,yxqn->yxq", dx, dy)
            dens[s] = np.sqrt(np.maximum(g11 * g22 - g12**2, 0.0))
        self.tangents = tg
        self.density = dens

    # -- graph points -------------------------------------------------------

    def graph_points(self, s, iy, ix):
        """(q, 2+n) ambient points over one node of one sheet."""
        z = self.xs[ix] + 1j * self.ys[iy]
        out = np.zeros((self.q, self.dim))
        out[:, 0] = z.real
        out[:, 1] = z.imag
        out[:, 2:] = self.values[s, iy, ix]
        return out

    def node_points_all(self):
        """Flat arrays (m, 2+n), plus index arrays (sheet, iy, ix, value)."""
        qb, ny, nx = self.qbar, len(self.ys), len(self.xs)
        zg = self.xs[None, :] + 1j * self.ys[:, None]
        pts, idx = [], []
        for s in range(qb):
            ok = np.isfinite(self.values[s, :, :, 0, 0])
            jy, jx = np.nonzero(ok)
            for a in range(self.q):
                p = np.empty((len(jy), self.dim))
                p[:, 0] = zg[jy, jx].real
                p[:, 1] = zg[jy, jx].imag
                p[:, 2:] = self.values[s, jy, jx, a]
                pts.append(p)
                idx.append(np.stack([np.full(len(jy), s), jy, jx, np.full(len(jy), a)], 1))
        return np.concatenate(pts), np.concatenate(idx)

    # -- quadrature ---------------------------------------------------------

    def _cell_weights(self, region, subsample=8):
        """Per-(sheet,node,value) area weights for a region integral.

        Nodes whose entire h-cell maps inside get weight h^2, outside get 0,
        boundary cells are midpoint-subsampled s x s using the local tangent
        as a first-order model of the sheet.
        """
        qb, ny, nx = self.qbar, len(self.ys), len(self.xs)
        w = np.zeros((qb, ny, nx, self.q))
        zg = self.xs[None, :] + 1j * self.ys[:, None]
        off = self.h / 2.0
        corners = np.array([[-off, -off], [off, -off], [-off, off], [off, off]])
        sub = (np.arange(subsample) + 0.5) / subsample - 0.5
        sx, sy = np.meshgrid(sub * self.h, sub * self.h)
        subpts = np.stack([sx.ravel(), sy.ravel()], 1)
        for s in range(qb):
            fin = np.isfinite(self.density[s, :, :, 0])
            jy, jx = np.nonzero(fin)
            base = np.empty((len(jy), self.q, self.dim))
            base[:, :, 0] = zg[jy, jx].real[:, None]
            base[:, :, 1] = zg[jy, jx].imag[:, None]
            base[:, :, 2:] = self.values[s, jy, jx]
            tg = self.tangents[s, jy, jx]  # (m, q, n, 2)
            for a in range(self.q):
                # first-order model p(dx,dy) = base + (dx,dy, Df (dx,dy))
                cp = np.zeros((len(jy), 4, self.dim))
                cp[:, :, 0] = base[:, a, 0, None] + corners[None, :, 0]
                cp[:, :, 1] = base[:, a, 1, None] + corners[None, :, 1]
                cp[:, :, 2:] = base[:, None, a, 2:] + np.einsum(
                    "mnr,cr->mcn", tg[:, a], corners
                )
                inside = region.member(cp)
                all_in = inside.all(axis=1)
                none_in = ~inside.any(axis=1)
                w_cell = np.where(all_in, self.h**2, 0.0)
                mixed = ~(all_in | none_in)
                if mixed.any():
                    mi = np.nonzero(mixed)[0]
                    sp = np.zeros((len(mi), len(subpts), self.dim))
                    sp[:, :, 0] = base[mi, a, 0, None] + subpts[None, :, 0]
                    sp[:, :, 1] = base[mi, a, 1, None] + subpts[None, :, 1]
                    sp[:, :, 2:] = base[mi, None, a, 2:] + np.einsum(
                        "mnr,cr->mcn", tg[mi, a], subpts
                    )
                    frac = region.member(sp).mean(axis=1)
                    w_cell[mi] = frac * self.h**2
                w[s, jy, jx, a] = w_cell
        return w

    def mass(self, region=None, subsample=8):
        region = region or WholeSpace()
        w = self._cell_weights(region, subsample)
        return float(np.nansum(w * np.nan_to_num(self.density)))

    def tilt_excess(self, region, plane_basis, subsample=8):
        """Mean-squared tangent-plane deviation, normalized by 2 w2 r^2."""
        r = getattr(region, "radius", None)
        if r is None:
            raise ConfigViolation("excess needs a ball or cylinder region")
        w = self._cell_weights(region, subsample)
        total = 0.0
        b = np.asarray(plane_basis)
        for s in range(self.qbar):
            tg = self.tangents[s]  # (ny, nx, q, n, 2)
            fin = np.isfinite(self.density[s])
            v1 = np.zeros(tg.shape[:3] + (self.dim,))
            v2 = np.zeros_like(v1)
            v1[..., 0] = 1.0
            v1[..., 2:] = tg[..., 0]
            v2[..., 1] = 1.0
            v2[..., 2:] = tg[..., 1]
            g11 = np.einsum("...i,i->...", v1, b[:, 0])
            g12 = np.einsum("...i,i->...", v1, b[:, 1])
            g21 = np.einsum("...i,i->...", v2, b[:, 0])
            g22 = np.einsum("...i,i->...", v2, b[:, 1])
            inner = np.where(
                fin & (self.density[s] > 0),
                (g11 * g22 - g12 * g21) / np.maximum(self.density[s], 1e-300),
                0.0,
            )
            dev2 = 2.0 * (1.0 - np.clip(inner, -1.0, 1.0))
            total += np.nansum(w[s] * np.nan_to_num(self.density[s]) * dev2)
        return total / (2.0 * AREA_UNIT_DISK * r**2)

    def height(self, region, plane_basis, subsample=2):
        """Diagonal of the coordinate bounding box transverse to the plane."""
        b = np.asarray(plane_basis)
        full = orthonormalize(np.hstack([b, np.eye(self.dim)]))
        perp = full[:, 2:]
        w = self._cell_weights(region, subsample)
        lo = np.full(self.dim - 2, np.inf)
        hi = np.full(self.dim - 2, -np.inf)
        pts, idx = self.node_points_all()
        wflat = w[idx[:, 0], idx[:, 1], idx[:, 2], idx[:, 3]]
        used = wflat > 0
        if not used.any():
            return 0.0
        coords = pts[used] @ perp
        lo = coords.min(axis=0)
        hi = coords.max(axis=0)
        return float(np.sqrt(np.sum((hi - lo) ** 2)))

    def optimal_plane(self, region, init_basis=None, subsample=4, tol=1e-12):
        """Plane minimizing the tilt excess over the region.

        Eigen-initialized from the weight-averaged tangent projector, then
        refined by cyclic Givens line searches until the excess stops
        improving by more than tol.
        """
        w = self._cell_weights(region, subsample)
        avg = np.zeros((self.dim, self.dim))
        for s in range(self.qbar):
            fin = np.isfinite(self.density[s])
            jy, jx, ja = np.nonzero(fin & (w[s] > 0))
            for yy, xx, aa in zip(jy, jx, ja):
                tg = self.tangents[s, yy, xx, aa]
                v1 = np.zeros(self.dim)
                v2 = np.zeros(self.dim)
                v1[0] = 1.0
                v1[2:] = tg[:, 0]
                v2[1] = 1.0
                v2[2:] = tg[:, 1]
                bb = orthonormalize(np.stack([v1, v2], 1))
                avg += w[s, yy, xx, aa] * self.density[s, yy, xx, aa] * projector(bb)
        if init_basis is not None:
            basis = np.asarray(init_basis, dtype=float).copy()
        else:
            vals, vecs = np.linalg.eigh(avg)
            basis = orthonormalize(vecs[:, ::-1][:, :2])
        # cached weights make each excess evaluation cheap enough to search
        def ex(bb):
            return self._excess_with_weights(w, bb)

        full = orthonormalize(np.hstack([basis, np.eye(self.dim)]))
        cur = ex(full[:, :2])
        for _ in range(6):
            improved = 0.0
            for i in range(2):
                for m in range(2, self.dim):
                    def rot(theta):
                        f = full.copy()
                        c, sn = np.cos(theta), np.sin(theta)
                        f[:, i], f[:, m] = (
                            c * full[:, i] + sn * full[:, m],
                            -sn * full[:, i] + c * full[:, m],
                        )
                        return f

                    theta, val = _golden_min(lambda t: ex(rot(t)[:, :2]), -0.6, 0.6, 1e-9)
                    if val < cur - 1e-16:
                        improved += cur - val
                        full = orthonormalize(rot(theta))
                        cur = val
            if improved < tol:
                break
        return full[:, :2], cur

    def _excess_with_weights(self, w, plane_basis):
        r = 1.0  # normalization cancels in the minimization; report raw sum
        b = np.asarray(plane_basis)
        total = 0.0
        for s in range(self.qbar):
            tg = self.tangents[s]
            fin = np.isfinite(self.density[s])
            v1 = np.zeros(tg.shape[:3] + (self.dim,))
            v2 = np.zeros_like(v1)
            v1[..., 0] = 1.0
            v1[..., 2:] = tg[..., 0]
            v2[..., 1] = 1.0
            v2[..., 2:] = tg[..., 1]
            g11 = np.einsum("...i,i->...", v1, b[:, 0])
            g12 = np.einsum("...i,i->...", v1, b[:, 1])
            g21 = np.einsum("...i,i->...", v2, b[:, 0])
            g22 = np.einsum("...i,i->...", v2, b[:, 1])
            inner = np.where(
                fin & (self.density[s] > 0),
                (g11 * g22 - g12 * g21) / np.maximum(self.density[s], 1e-300),
                0.0,
            )
            dev2 = 2.0 * (1.0 - np.clip(inner, -1.0, 1.0))
            total += np.nansum(w[s] * np.nan_to_num(self.density[s]) * dev2)
        return total / r

    # -- fibers and horn ----------------------------------------------------

    def slice_fiber(self, z, sheet):
        """The q values over one point of one sheet, interpolated if needed."""
        z = complex(z)
        if self.analytic is not None:
            w = self.domain.root(np.array([z]), sheet)
            return self.analytic.values(np.array([z]), w)[0]
        return self._interp_values(z, sheet)

    def _interp_values(self, z, sheet):
        x, y = z.real, z.imag
        ix = int(np.clip(np.searchsorted(self.xs, x) - 1, 0, len(self.xs) - 2))
        iy = int(np.clip(np.searchsorted(self.ys, y) - 1, 0, len(self.ys) - 2))
        tx = (x - self.xs[ix]) / self.h
        ty = (y - self.ys[iy]) / self.h
        out = np.zeros((self.q, self.n))
        tot = 0.0
        for dy in (0, 1):
            for dx in (0, 1):
                wgt = (tx if dx else 1 - tx) * (ty if dy else 1 - ty)
                s2 = sheet
                if dy:
                    s2 = self._neighbor_sheet(sheet, ix + dx, iy, iy + 1)
                v = self.values[s2, iy + dy, ix + dx]
                if np.isfinite(v[0, 0]) and wgt > 0:
                    out += wgt * v
                    tot += wgt
        if tot <= 0:
            raise RegimeError("fiber sample fell outside the sampled support")
        return out / tot

    def horn_margin(self, z, sheet, horn_exp):
        """min over values of c_s |z|^a - |value - branching|; >0 means inside."""
        if self.analytic is None or self.analytic.sep_coeff == 0:
            return float("inf")
        z = complex(z)
        w = self.domain.root(np.array([z]), sheet)
        u = np.asarray(self.analytic.branching(np.array([z]), w))[0]
        vals = self.slice_fiber(z, sheet)
        dev = np.linalg.norm(vals - u[None, :], axis=1).max()
        return float(self.sep_coeff * abs(z) ** horn_exp - dev)


# ---------------------------------------------------------------------------
# local measurement patches

@dataclass
class LocalPatch:
    """Dense measurement stencil over a chart disk on one continued sheet.

    Values come from the analytic evaluator along the closed-form sheet
    continuation w(z) = w0 (z/z0)^{1/qbar} (principal branch; valid because
    the disk stays inside the chart, so Re(z/z0) > 0). Derivatives are
    central differences on the stencil, which exists only as measurement
    apparatus, unlike the stored one-sided global arrays.
    """

    z0: complex
    w0: complex
    radius: float
    xs: np.ndarray
    ys: np.ndarray
    h: float
    values: np.ndarray          # (m, m, q, n)
    tangents: np.ndarray        # (m, m, q, n, 2)
    density: np.ndarray         # (m, m, q)
    inside: np.ndarray          # (m, m) chart-disk mask
    q: int
    n: int

    @classmethod
    def build(cls, current: SampledCurrent, z0, sheet, radius, nodes=17):
        if current.analytic is None:
            raise RegimeError(
                "local refinement needs evaluator coverage at this depth; "
                "the sampled grid alone cannot resolve it"
            )
        z0 = complex(z0)
        if radius >= abs(z0):
            raise ConfigViolation("patch radius must stay inside the chart")
        w0 = complex(current.domain.root(np.array([z0]), sheet)[0])
        m = nodes
        t = np.linspace(-radius, radius, m)
        h = t[1] - t[0]
        zg = (z0.real + t[None, :]) + 1j * (z0.imag + t[:, None])
        ratio = zg / z0
        wg = w0 * np.exp(np.log(ratio) / current.qbar)
        vals = current.analytic.values(zg.ravel(), wg.ravel()).reshape(
            m, m, current.q, current.n
        )
        tg = np.zeros((m, m, current.q, current.n, 2))
        tg[:, 1:-1, :, :, 0] = (vals[:, 2:] - vals[:, :-2]) / (2 * h)
        tg[:, 0, :, :, 0] = (vals[:, 1] - vals[:, 0]) / h
        tg[:, -1, :, :, 0] = (vals[:, -1] - vals[:, -2]) / h
        tg[1:-1, :, :, :, 1] = (vals[2:] - vals[:-2]) / (2 * h)
        tg[0, :, :, :, 1] = (vals[1] - vals[0]) / h
        tg[-1, :, :, :, 1] = (vals[-1] - vals[-2]) / h
        g11 = 1.0 + np.einsum("yxqn,yxqn->yxq", tg[..., 0], tg[..., 0])
        g22 = 1.0 + np.einsum("yxqn,yxqn->yxq", tg[..., 1], tg[..., 1])
        g12 = np.einsum("yxqn,yxqn->yxq", tg[..., 0], tg[..., 1])
        dens = np.sqrt(np.maximum(g11 * g22 - g12**2, 0.0))
        inside = (t[None, :] ** 2 + t[:, None] ** 2) <= radius**2 * (1 + 1e-14)
        return cls(
            z0=z0, w0=w0, radius=radius, xs=z0.real + t, ys=z0.imag + t, h=h,
            values=vals, tangents=tg, density=dens, inside=inside,
            q=current.q, n=current.n,
        )

    def points(self):
        m = len(self.xs)
        pts = np.zeros((m, m, self.q, 2 + self.n))
        pts[..., 0] = self.xs[None, :, None]
        pts[..., 1] = self.ys[:, None, None]
        pts[..., 2:] = self.values
        return pts

    def measure(self, region, plane_basis):
        """(mass, excess_numerator, height) over the region on this stencil.

        Node-indicator quadrature: each stencil node carries h^2. The excess
        numerator omits the 1/(2 w2 r^2) normalization so callers can apply
        the radius of their ball.
        """
        pts = self.points()
        member = region.member(pts) & self.inside[:, :, None]
        b = np.asarray(plane_basis)
        dim = 2 + self.n
        v1 = np.zeros(self.tangents.shape[:3] + (dim,))
        v2 = np.zeros_like(v1)
        v1[..., 0] = 1.0
        v1[..., 2:] = self.tangents[..., 0]
        v2[..., 1] = 1.0
        v2[..., 2:] = self.tangents[..., 1]
        g11 = np.einsum("...i,i->...", v1, b[:, 0])
        g12 = np.einsum("...i,i->...", v1, b[:, 1])
        g21 = np.einsum("...i,i->...", v2, b[:, 0])
        g22 = np.einsum("...i,i->...", v2, b[:, 1])
        inner = (g11 * g22 - g12 * g21) / np.maximum(self.density, 1e-300)
        dev2 = 2.0 * (1.0 - np.clip(inner, -1.0, 1.0))
        w = member * self.h**2
        mass = float(np.sum(w * self.density))
        exnum = float(np.sum(w * self.density * dev2))
        if member.any():
            full = orthonormalize(np.hstack([b, np.eye(dim)]))
            perp = full[:, 2:]
            coords = pts[member] @ perp
            height = float(np.sqrt(np.sum((coords.max(0) - coords.min(0)) ** 2)))
        else:
            height = 0.0
        return mass, exnum, height

    def second_difference_sup(self):
        """sup of centered second differences / h^2, a curvature reading."""
        v = self.values
        d2x = np.abs(v[:, 2:] - 2 * v[:, 1:-1] + v[:, :-2]).max() if v.shape[1] > 2 else 0.0
        d2y = np.abs(v[2:] - 2 * v[1:-1] + v[:-2]).max() if v.shape[0] > 2 else 0.0
        dxy = np.abs(
            v[2:, 2:] - v[2:, :-2] - v[:-2, 2:] + v[:-2, :-2]
        ).max() / 4.0 if min(v.shape[:2]) > 2 else 0.0
        return float(max(d2x, d2y, dxy)) / self.h**2

    def value_spread(self):
        """sup over stencil of the q-point diameter plus branch deviation."""
        if self.q == 1:
            return 0.0
        m = self.values
        sup = 0.0
        for a in range(self.q):
            for c in range(a + 1, self.q):
                sup = max(sup, float(np.linalg.norm(m[..., a, :] - m[..., c, :], axis=-1).max()))
        return sup


def _golden_min(f, lo, hi, tol):
    """Golden-section scalar minimize; deterministic, derivative-free."""
    invphi = (np.sqrt(5.0) - 1) / 2
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while abs(b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    xm = (a + b) / 2
    return xm, f(xm)

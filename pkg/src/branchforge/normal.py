"""Normal approximation of a sampled current about its center manifold.

The current's fiber over a graph point is sliced by the normal disk of the
matching horn, the vertical gaps are projected off the measured tangent
plane, and the resulting multivalued normal field is integrated into the
radial quantities (Dirichlet-type energy, boundary height, weighted tail)
and the stripe/separation diagnostics.

Conventions fixed here once:
  - tangent frames are measured in polar directions (radial and angular
    chords), which never cross the branch cut for interior probe angles;
  - multivalued finite differences pair neighbor stacks by the minimal
    transport permutation;
  - nodes whose fiber does not resolve exactly Q matched values are left
    out of the resolved set and their cells accumulate into the mass
    difference, so every difference mass is an upper bound by construction.
"""

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (ConfigViolation, ConvergenceError, InvariantViolation,
                     RegimeError)
from .fitting import fit_power_law
from .manifold import branched_circle_order
from .whitney import centers_of, ell_of, side_of, unpack_keys

ORTH_TOL = 1e-8          # relative orthogonality ceiling, asserted per node
GAP_FLOOR = 1e-11        # fiber spread below this marks a branch-set node
_PERMS = {m: [list(pp) for pp in itertools.permutations(range(m))]
          for m in range(1, 5)}


# ---------------------------------------------------------------------------
# multivalued pairing

def align_stack(ref, other):
    """Reorder other's rows to minimize the summed squared match with ref.

    Exhaustive over permutations for q <= 4 (the regime here); identity
    order above that, which only weakens derivative estimates, never the
    invariants.
    """
    q = ref.shape[0]
    if q == 1:
        return other
    perms = _PERMS.get(q)
    if perms is None:
        return other
    best, keep = np.inf, other
    for pp in perms:
        d = float(np.sum((other[pp] - ref) ** 2))
        if d < best:
            best, keep = d, other[pp]
    return keep


def fiber_g(a, b):
    """G-distance between two stacks of q points (root of min-pair sum)."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    bb = align_stack(a, b)
    return float(np.sqrt(np.sum((bb - a) ** 2)))


# ---------------------------------------------------------------------------
# fiber slicing

def _phi_callable(cm):
    return cm.phi if hasattr(cm, "phi") else cm


def make_fiber(cur, cm, horn=None, ang_step=0.02):
    """Closure evaluating the matched normal stack over points of one sheet.

    horn is (c_s, b_exp): the matching radius is c_s |z|^b / 2. Defaults to
    the current's separation coefficient with the configured graph exponent;
    a degenerate coefficient leaves a single analytic stack and every value
    is taken.
    """
    phi = _phi_callable(cm)
    prm = getattr(cm, "params", None)
    qb, q, n = cur.qbar, cur.q, cur.n
    if horn is None:
        b_exp = prm.b if prm is not None else 2.5
        horn = (float(cur.sep_coeff), float(b_exp))
    c_s, b_exp = horn

    def fiber(z, sheet):
        z = np.asarray(z, dtype=complex).ravel()
        m = len(z)
        r = np.abs(z)
        if np.any(r <= 0):
            raise ConfigViolation("fiber probes must avoid the branch point")
        th = np.angle(z)
        ds = ang_step
        if qb > 1:
            # the cut sits on the negative real axis; |angle(-z)| is the
            # angular distance to it
            da = np.minimum(ang_step, np.maximum(0.4 * np.abs(np.angle(-z)),
                                                 1e-6))
        else:
            da = np.full(m, ang_step)
        v0 = np.asarray(phi(z, sheet), float).reshape(m, n)
        vp = np.asarray(phi(z * math.exp(ds), sheet), float).reshape(m, n)
        vm = np.asarray(phi(z * math.exp(-ds), sheet), float).reshape(m, n)
        wp = np.asarray(phi(z * np.exp(1j * da), sheet), float).reshape(m, n)
        wm = np.asarray(phi(z * np.exp(-1j * da), sheet), float).reshape(m, n)
        d_rad = (vp - vm) / (r * 2 * math.sinh(ds))[:, None]
        d_ang = (wp - wm) / (r * 2 * np.sin(da))[:, None]
        t1 = np.zeros((m, 2 + n))
        t2 = np.zeros((m, 2 + n))
        t1[:, 0], t1[:, 1], t1[:, 2:] = np.cos(th), np.sin(th), d_rad
        t2[:, 0], t2[:, 1], t2[:, 2:] = -np.sin(th), np.cos(th), d_ang
        t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
        t2 -= np.sum(t2 * t1, axis=1, keepdims=True) * t1
        t2 /= np.linalg.norm(t2, axis=1, keepdims=True)

        cand = np.empty((m, qb * q, n))
        for mm in range(qb):
            w = cur.domain.root(z, mm)
            cand[:, mm * q:(mm + 1) * q, :] = np.asarray(
                cur.analytic.values(z, w), float).reshape(m, q, n)
        gaps = cand - v0[:, None, :]
        gapnorm = np.linalg.norm(gaps, axis=2)
        rad = (c_s * r ** b_exp / 2.0) if c_s > 0 else np.full(m, np.inf)
        matched = gapnorm <= rad[:, None] + GAP_FLOOR
        count = matched.sum(axis=1)
        k_mask = count == q
        # working stack: the q best-matching values (ties keep fiber order)
        order = np.argsort(np.where(matched, gapnorm, gapnorm + 1e6), axis=1,
                           kind="stable")[:, :q]
        sel = np.take_along_axis(gaps, order[:, :, None], axis=1)
        selnorm = np.take_along_axis(gapnorm, order, axis=1)

        nv = np.zeros((m, q, 2 + n))
        nv[:, :, 2:] = sel
        for t in (t1, t2):
            nv -= np.sum(nv * t[:, None, :], axis=2, keepdims=True) * t[:, None, :]
        branch = selnorm.max(axis=1) <= GAP_FLOOR
        nv[branch] = 0.0
        eta = nv.mean(axis=1)
        nn = np.linalg.norm(nv, axis=2)
        ip = np.maximum(np.abs(np.sum(nv * t1[:, None, :], axis=2)),
                        np.abs(np.sum(nv * t2[:, None, :], axis=2)))
        orth = float(np.max(ip / np.maximum(nn, 1e-15), initial=0.0))
        return {"values": cand, "gaps": sel, "normals": nv, "eta": eta,
                "matched": matched, "count": count, "k_mask": k_mask,
                "branch": branch, "frames": np.stack([t1, t2], axis=1),
                "phi": v0, "orth": orth, "radius": rad}

    fiber.horn = (c_s, b_exp)
    fiber.shape = (qb, q, n)
    return fiber


# ---------------------------------------------------------------------------
# nearest-point projection

def nearest_projection(cm, p, sheet=None, horn=None, x0=None, step=1e-5,
                       tol=1e-12, max_iter=60):
    """Foot and offset of the nearest graph point under p.

    Gauss-Newton on the base coordinate; the returned offset is orthogonal
    to the measured tangent plane at the foot (asserted to 1e-8 relative).
    horn = (c_s, b_exp) gates admission: the vertical distance at the start
    must sit inside c_s |x|^b / 2 for some sheet.
    """
    phi = _phi_callable(cm)
    prm = getattr(cm, "params", None)
    qb = prm.qbar if prm is not None else 1
    p = np.asarray(p, float).ravel()
    n = len(p) - 2
    if n < 1:
        raise ConfigViolation("ambient points need at least one height")
    z0 = complex(p[0], p[1]) if x0 is None else complex(x0)
    if abs(z0) <= 0:
        raise ConfigViolation("projection base point must avoid the origin")
    sheets = [sheet] if sheet is not None else list(range(qb))

    def vertical_gap(s):
        v = np.asarray(phi(np.array([z0]), s), float).ravel()
        return float(np.linalg.norm(p[2:] - v))

    gapss = [(vertical_gap(s), s) for s in sheets]
    if horn is not None:
        c_s, b_exp = horn
        lid = c_s * abs(z0) ** b_exp / 2.0
        gapss = [(g, s) for g, s in gapss if g < lid]
        if not gapss:
            raise RegimeError(
                "point outside the horned graph neighborhood at |x|=%.3g"
                % abs(z0))
    gapss.sort()
    s = gapss[0][1]

    zq = z0
    for _ in range(max_iter):
        za = np.array([zq, zq + step, zq - step, zq + 1j * step,
                       zq - 1j * step])
        vv = np.asarray(phi(za, s), float).reshape(5, n)
        dx = (vv[1] - vv[2]) / (2 * step)
        dy = (vv[3] - vv[4]) / (2 * step)
        pt = np.concatenate(([zq.real, zq.imag], vv[0]))
        res = pt - p
        jac = np.zeros((2 + n, 2))
        jac[0, 0] = jac[1, 1] = 1.0
        jac[2:, 0], jac[2:, 1] = dx, dy
        g = jac.T @ res
        hess = jac.T @ jac
        try:
            dq = np.linalg.solve(hess, -g)
        except np.linalg.LinAlgError:
            raise ConvergenceError("projection normal equations singular")
        lim = 0.25 * max(1.0, abs(zq))
        sc = np.linalg.norm(dq)
        if not np.isfinite(sc):
            raise ConvergenceError("projection iteration diverged")
        if sc > lim:
            dq *= lim / sc
        zq = zq + complex(dq[0], dq[1])
        if abs(zq) > 10 * (1 + abs(z0)):
            raise ConvergenceError("projection iteration left the chart")
        if sc <= tol * max(1.0, abs(zq)):
            break
    else:
        raise ConvergenceError("projection did not converge in %d steps"
                               % max_iter)

    za = np.array([zq, zq + step, zq - step, zq + 1j * step, zq - 1j * step])
    vv = np.asarray(phi(za, s), float).reshape(5, n)
    foot = np.concatenate(([zq.real, zq.imag], vv[0]))
    offset = p - foot
    dx = (vv[1] - vv[2]) / (2 * step)
    dy = (vv[3] - vv[4]) / (2 * step)
    t1 = np.concatenate(([1.0, 0.0], dx))
    t2 = np.concatenate(([0.0, 1.0], dy))
    t1 /= np.linalg.norm(t1)
    t2 -= (t2 @ t1) * t1
    t2 /= np.linalg.norm(t2)
    size = np.linalg.norm(offset)
    worst = max(abs(offset @ t1), abs(offset @ t2))
    if worst > ORTH_TOL * max(size, 1e-15):
        raise InvariantViolation(
            "projection offset not orthogonal: %.3g against %.3g" %
            (worst, size))
    return foot, offset


# ---------------------------------------------------------------------------
# the sampled field

@dataclass
class NormalField:
    qbar: int
    q: int
    n: int
    radii: np.ndarray            # (R,)
    thetas: np.ndarray           # (T,) probe angles, cut avoided
    normals: np.ndarray          # (qbar, R, T, q, 2+n)
    eta: np.ndarray              # (qbar, R, T, 2+n) fiber averages
    k_mask: np.ndarray           # (qbar, R, T) resolved-and-matched
    counts: np.ndarray           # (qbar, R, T) matched candidates
    branch: np.ndarray           # (qbar, R, T) collapsed-fiber nodes
    phi_vals: np.ndarray         # (qbar, R, T, n)
    horn: tuple
    orth_max: float
    m0: float
    fiber: Callable = None
    params: object = None
    region_stats: dict = field(default_factory=dict)

    def g_norm(self):
        """G(N, Q [[0]]) per node; zero where the fiber is unresolved."""
        g = np.sqrt(np.sum(self.normals ** 2, axis=(3, 4)))
        return np.where(self.k_mask, g, 0.0)

    def cell_areas(self):
        """Node-centered polar cell areas (R, T broadcastable)."""
        r = self.radii
        edges = np.empty(len(r) + 1)
        edges[1:-1] = 0.5 * (r[1:] + r[:-1])
        edges[0] = max(r[0] - 0.5 * (r[1] - r[0]), 0.0)
        edges[-1] = r[-1] + 0.5 * (r[-1] - r[-2])
        widths = edges[1:] - edges[:-1]
        dtheta = 2 * np.pi / len(self.thetas)
        return (r * widths)[:, None] * np.ones(len(self.thetas)) * dtheta


def _probe_angles(count):
    # offsets keep every probe off the branch cut at angle pi
    return (np.arange(count) + 0.5) / count * 2 * np.pi - np.pi


def build_normal_approximation(cur, cm, rings=24, angles=48, r_min=None,
                               r_max=0.75, horn=None, book=None,
                               region_cap=192, ang_step=0.02):
    """Sample the matched normal stacks on a polar grid of the cover.

    The grid is log-spaced in radius so the radial functionals see the
    same relative resolution per scale; angles keep clear of the cut.
    Region statistics (sup and Lipschitz quotients of the stacks) are
    attached per removed square when a book is supplied.
    """
    qb, q, n = cur.qbar, cur.q, cur.n
    if r_min is None:
        r_min = max(8 * cur.h, 0.02)
    if not (0 < r_min < r_max):
        raise ConfigViolation("radial window must satisfy 0 < r_min < r_max")
    fiber = make_fiber(cur, cm, horn=horn, ang_step=ang_step)
    radii = np.exp(np.linspace(math.log(r_min), math.log(r_max), rings))
    thetas = _probe_angles(angles)

    normals = np.zeros((qb, rings, angles, q, 2 + n))
    eta = np.zeros((qb, rings, angles, 2 + n))
    k_mask = np.zeros((qb, rings, angles), dtype=bool)
    counts = np.zeros((qb, rings, angles), dtype=np.int64)
    branch = np.zeros((qb, rings, angles), dtype=bool)
    phi_vals = np.zeros((qb, rings, angles, n))
    orth_max = 0.0
    rr, tt = np.meshgrid(radii, thetas, indexing="ij")
    zz = (rr * np.exp(1j * tt)).ravel()
    for s in range(qb):
        out = fiber(zz, s)
        normals[s] = out["normals"].reshape(rings, angles, q, 2 + n)
        eta[s] = out["eta"].reshape(rings, angles, 2 + n)
        k_mask[s] = out["k_mask"].reshape(rings, angles)
        counts[s] = out["count"].reshape(rings, angles)
        branch[s] = out["branch"].reshape(rings, angles)
        phi_vals[s] = out["phi"].reshape(rings, angles, n)
        orth_max = max(orth_max, out["orth"])
    if orth_max > ORTH_TOL:
        raise InvariantViolation(
            "normal field lost orthogonality: %.3g" % orth_max)

    nf = NormalField(qbar=qb, q=q, n=n, radii=radii, thetas=thetas,
                     normals=normals, eta=eta, k_mask=k_mask, counts=counts,
                     branch=branch, phi_vals=phi_vals, horn=fiber.horn,
                     orth_max=orth_max, m0=getattr(cm, "m0", 1.0),
                     fiber=fiber, params=getattr(cm, "params", None))
    if book is not None:
        nf.region_stats = _region_statistics(nf, book, cap=region_cap)
    return nf


def _region_statistics(nf, book, cap=192, local=8):
    """Per removed square: sup of G(N, Q[[0]]) and a Lipschitz quotient.

    Probes the fiber at the square center and a ring at half the ball
    radius; squares beyond the cap are skipped (the cap keeps pipeline
    runs bounded; removal families here are small or manufactured). All
    probes of one sheet go through a single batched fiber call.
    """
    prm = book.params
    rows = []
    seen = 0
    for status, keys in (("we", book.we), ("wh", book.wh), ("wn", book.wn)):
        for key in np.asarray(keys, dtype=np.int64).tolist():
            if seen >= cap:
                break
            seen += 1
            j, k, ix, iy, s = (int(v) for v in unpack_keys(np.array([key])))
            side = side_of(j, k)
            ell = float(ell_of(j, k))
            zc = complex((ix + 0.5) * side, (iy + 0.5) * side)
            rb = 0.5 * prm.ball_radius(ell)
            zs = np.concatenate(([zc],
                                 zc + rb * np.exp(1j * _probe_angles(local))))
            rows.append((key, status, s, (j, k), zc, ell, zs))

    stats = {}
    for s in range(nf.qbar):
        mine = [rr for rr in rows if rr[2] == s]
        if not mine:
            continue
        flat = np.concatenate([rr[6] for rr in mine])
        out = nf.fiber(flat, s)
        pos = 0
        for key, status, _, level, zc, ell, zs in mine:
            m = len(zs)
            nv = out["normals"][pos:pos + m]
            km = out["k_mask"][pos:pos + m]
            pos += m
            gz = np.sqrt(np.sum(nv ** 2, axis=(1, 2)))
            lip = 0.0
            for a in range(m):
                for b in range(a + 1, m):
                    dz = abs(zs[a] - zs[b])
                    if dz > 0:
                        lip = max(lip, fiber_g(nv[a], nv[b]) / dz)
            stats[key] = {"status": status, "sheet": s, "level": level,
                          "center": (zc.real, zc.imag), "ell": ell,
                          "sup": float(gz.max()), "lip": float(lip),
                          "resolved": bool(km.all())}
    return stats


# ---------------------------------------------------------------------------
# radial functionals

@dataclass
class RadialFunctionals:
    radii: np.ndarray
    dirichlet: np.ndarray        # D(r), prefix sums, exact monotone
    boundary: np.ndarray         # H(r), circle quadrature
    tail: np.ndarray             # F(r), weighted trapezoid with fitted head
    total: np.ndarray            # Lambda = D + F
    gamma0: float
    d_head: float
    f_head: float
    deriv_unresolved: int        # stencil nodes skipped for matching

    def at(self, r, name):
        r = float(r)
        if r > self.radii[-1] * (1 + 1e-12):
            raise ConfigViolation(
                "radius %.3g beyond the sampled chart (max %.3g)"
                % (r, self.radii[-1]))
        table = getattr(self, name)
        if r <= self.radii[0]:
            return float(table[0])
        return float(np.interp(r, self.radii, table))


def _nonuniform_radial_derivative(stacks, radii, i):
    # 3-point central on the log-spaced rings; one-sided at the ends
    if i == 0:
        return (stacks[1] - stacks[0]) / (radii[1] - radii[0])
    if i == len(radii) - 1:
        return (stacks[-1] - stacks[-2]) / (radii[-1] - radii[-2])
    hm = radii[i] - radii[i - 1]
    hp = radii[i + 1] - radii[i]
    return (hm * hm * stacks[2] + (hp * hp - hm * hm) * stacks[1]
            - hp * hp * stacks[0]) / (hp * hm * (hp + hm))


def _power_head(r1, g1, r2, g2, weight_pow):
    """Integral of the fitted power law over [0, r1] against t^weight_pow."""
    if g1 <= 0 or g2 <= 0:
        return 0.0
    p = math.log(g2 / g1) / math.log(r2 / r1)
    p = min(max(p, -0.5 * (weight_pow + 1) - 0.4), 8.0)
    return g1 * r1 ** (weight_pow + 1) / (p + weight_pow + 1)


def radial_functionals(nf, p=None):
    """Tabulate D, H, F, Lambda over the field's radius grid.

    D integrates |DN|^2 with minimal-transport paired differences along the
    branched circle and across rings; H is the circle quadrature of |N|^2;
    F is the weighted trapezoid of H(t)/t^(2-gamma0) with a power-law head
    for the unsampled core. Monotonicity of D and F and Lambda >= D hold by
    construction and are asserted.
    """
    prm = p if p is not None else nf.params
    if prm is None:
        raise ConfigViolation("radial functionals need the parameter block")
    g0 = prm.gamma0
    qb, R, T, q = nf.qbar, len(nf.radii), len(nf.thetas), nf.q
    radii = nf.radii
    dtheta = 2 * np.pi / T
    order_a, order_s = branched_circle_order(nf.thetas + np.pi, qb)
    cyc = len(order_a)

    dsq = np.zeros((R, cyc))
    ok = np.zeros((R, cyc), dtype=bool)
    unresolved = 0
    for i in range(R):
        r = radii[i]
        for c in range(cyc):
            s, t = int(order_s[c]), int(order_a[c])
            if not nf.k_mask[s, i, t]:
                unresolved += 1
                continue
            ref = nf.normals[s, i, t]
            cn, ca = int(order_s[(c + 1) % cyc]), int(order_a[(c + 1) % cyc])
            cp, cb = int(order_s[(c - 1) % cyc]), int(order_a[(c - 1) % cyc])
            if not (nf.k_mask[cn, i, ca] and nf.k_mask[cp, i, cb]):
                unresolved += 1
                continue
            nxt = align_stack(ref, nf.normals[cn, i, ca])
            prv = align_stack(ref, nf.normals[cp, i, cb])
            d_ang = (nxt - prv) / (2 * r * dtheta)
            lo, hi = max(i - 1, 0), min(i + 1, R - 1)
            if not (nf.k_mask[s, lo, t] and nf.k_mask[s, hi, t]):
                unresolved += 1
                continue
            tri = np.stack([align_stack(ref, nf.normals[s, lo, t]),
                            ref,
                            align_stack(ref, nf.normals[s, hi, t])])
            if lo == i:
                d_rad = (tri[2] - tri[1]) / (radii[hi] - radii[i])
            elif hi == i:
                d_rad = (tri[1] - tri[0]) / (radii[i] - radii[lo])
            else:
                d_rad = _nonuniform_radial_derivative(tri, radii[lo:hi + 1],
                                                      1)
            dsq[i, c] = float(np.sum(d_rad ** 2) + np.sum(d_ang ** 2))
            ok[i, c] = True

    # angular integrals per ring
    g_ring = dsq.sum(axis=1) * dtheta                 # integral over angles
    nsq = np.sum(nf.normals ** 2, axis=(3, 4))
    nsq = np.where(nf.k_mask, nsq, 0.0)
    h_ring = np.zeros(R)
    a_ring = np.zeros(R)                              # |eta| angular integral
    ensq = np.sqrt(np.sum(nf.eta ** 2, axis=3))
    ensq = np.where(nf.k_mask, ensq, 0.0)
    for i in range(R):
        h_ring[i] = float(nsq[:, i, :].sum()) * dtheta
        a_ring[i] = float(ensq[:, i, :].sum()) * dtheta

    dirichlet = np.zeros(R)
    dirichlet[0] = _power_head(radii[0], g_ring[0], radii[1], g_ring[1], 1)
    for i in range(1, R):
        dirichlet[i] = dirichlet[i - 1] + 0.5 * (
            g_ring[i - 1] * radii[i - 1] + g_ring[i] * radii[i]) * (
                radii[i] - radii[i - 1])
    d_head = dirichlet[0]

    boundary = radii * h_ring

    f_int = boundary / radii ** (2 - g0)
    tail = np.zeros(R)
    tail[0] = _power_head(radii[0], f_int[0], radii[1], f_int[1], 0)
    f_head = tail[0]
    for i in range(1, R):
        tail[i] = tail[i - 1] + 0.5 * (f_int[i - 1] + f_int[i]) * (
            radii[i] - radii[i - 1])

    total = dirichlet + tail
    rf = RadialFunctionals(radii=radii, dirichlet=dirichlet,
                           boundary=boundary, tail=tail, total=total,
                           gamma0=g0, d_head=d_head, f_head=f_head,
                           deriv_unresolved=unresolved)
    if np.any(dirichlet < -1e-30) or np.any(boundary < -1e-30):
        raise InvariantViolation("radial functionals went negative")
    if np.any(np.diff(dirichlet) < -1e-30) or np.any(np.diff(tail) < -1e-30):
        raise InvariantViolation("radial prefix sums lost monotonicity")
    if np.any(total - dirichlet < -1e-30):
        raise InvariantViolation("Lambda fell below the energy part")
    return rf


def weighted_average_integral(nf, p, r, m0=None, eta0=0.01, rf=None):
    """Weighted average of |eta . N| against |z|^(gamma0-1) d theta dt.

    Returns the measured value m0^eta0 * integral, the comparison side
    Lambda^eta0(r) D(r) + F(r), and their quotient (the measured constant).
    """
    prm = p if p is not None else nf.params
    g0 = prm.gamma0
    if m0 is None:
        m0 = nf.m0
    radii = nf.radii
    if r > radii[-1] * (1 + 1e-12):
        raise ConfigViolation(
            "radius %.3g beyond the sampled chart (max %.3g)" % (r, radii[-1]))
    dtheta = 2 * np.pi / len(nf.thetas)
    ensq = np.sqrt(np.sum(nf.eta ** 2, axis=3))
    ensq = np.where(nf.k_mask, ensq, 0.0)
    a_ring = ensq.sum(axis=(0, 2)) * dtheta
    f_int = radii ** (g0 - 1) * a_ring
    val = _power_head(radii[0], f_int[0], radii[1], f_int[1], 0)
    i = 1
    while i < len(radii) and radii[i] <= r:
        val += 0.5 * (f_int[i - 1] + f_int[i]) * (radii[i] - radii[i - 1])
        i += 1
    if i < len(radii) and radii[i - 1] < r:
        # partial cell up to r, integrand interpolated linearly
        frac = (r - radii[i - 1]) / (radii[i] - radii[i - 1])
        fr = f_int[i - 1] + frac * (f_int[i] - f_int[i - 1])
        val += 0.5 * (f_int[i - 1] + fr) * (r - radii[i - 1])
    value = m0 ** eta0 * val
    if rf is None:
        rf = radial_functionals(nf, prm)
    bound = (rf.at(r, "total") ** eta0 * rf.at(r, "dirichlet")
             + rf.at(r, "tail"))
    ratio = value / bound if bound > 0 else math.inf
    return {"r": float(r), "value": float(value), "bound": float(bound),
            "measured_constant": float(ratio)}


def mass_difference(nf, r):
    """Upper bound on the two-sided mass defect inside radius r.

    Every polar cell whose fiber failed to resolve exactly Q matches is
    charged on both sides (current and graph), 2 Q cells' worth of area.
    Monotone in r by construction.
    """
    areas = nf.cell_areas()
    sel = nf.radii <= r * (1 + 1e-12)
    bad = ~nf.k_mask[:, sel, :]
    return float(2 * nf.q * np.sum(bad * areas[None, sel, :]))


# ---------------------------------------------------------------------------
# stripes

@dataclass
class StripeDecomposition:
    sigma: float
    threshold: float
    restriction: float
    excess: float
    r: float
    centers: list
    half_width: float
    counts: list
    q_of: list
    q_total: int
    n_samples: int


def stripe_decomposition(heights, r, excess, c_sigma=1.0, n_samples=1,
                         q_total=None):
    """Cluster fiber heights into stripes by gap splitting.

    sigma = c_sigma * excess^(1/4); heights closer than the threshold
    2 r sigma join one stripe. Requires excess < 1 (the stripe regime).
    Sheet counts divide each stripe's membership by the sample count.
    """
    heights = np.asarray(heights, float).ravel()
    if len(heights) == 0:
        raise ConfigViolation("stripe decomposition needs fiber heights")
    if excess >= 1.0:
        raise RegimeError("excess %.3g outside the stripe regime" % excess)
    if excess > 0:
        sigma = c_sigma * excess ** 0.25
        restriction = r * (1.0 - sigma * abs(math.log(excess)))
    else:
        sigma, restriction = 0.0, r
    if restriction <= 0:
        raise RegimeError(
            "restricted cylinder vanished: sigma |log E| = %.3g"
            % (sigma * abs(math.log(excess)) if excess > 0 else 0.0))
    threshold = 2.0 * r * sigma
    order = np.argsort(heights, kind="stable")
    hs = heights[order]
    cuts = np.nonzero(np.diff(hs) > threshold)[0]
    bounds = np.concatenate(([0], cuts + 1, [len(hs)]))
    centers, counts, q_of = [], [], []
    for a, b in zip(bounds[:-1], bounds[1:]):
        centers.append(float(hs[a:b].mean()))
        counts.append(int(b - a))
        q_of.append(int(round((b - a) / n_samples)))
    if q_total is not None and sum(q_of) != q_total:
        raise InvariantViolation(
            "stripe sheet counts %s do not add to the degree %d"
            % (q_of, q_total))
    hw = r * sigma
    for c0, c1 in zip(centers[:-1], centers[1:]):
        if c1 - c0 <= 2 * hw:
            raise InvariantViolation("stripe intervals overlap")
    return StripeDecomposition(sigma=float(sigma), threshold=float(threshold),
                               restriction=float(restriction),
                               excess=float(excess), r=float(r),
                               centers=centers, half_width=float(hw),
                               counts=counts, q_of=q_of,
                               q_total=int(sum(q_of)),
                               n_samples=int(n_samples))


def cylinder_excess(nf, center, sheet, r, rings=3, arms=8):
    """Tilt excess of the fiber over a small disk, from paired differences.

    Mean of sqrt(1 + slope^2) - 1 over radial and angular chords of a
    polar probe grid; exact for uniformly tilted stacks.
    """
    center = complex(center)
    rr = np.linspace(r / rings, r, rings)
    ang = _probe_angles(arms)
    zs = (center + rr[:, None] * np.exp(1j * ang)[None, :]).ravel()
    out = nf.fiber(np.concatenate(([center], zs)), sheet)
    vals = (out["phi"][:, None, :] + out["gaps"]).reshape(
        1 + rings * arms, nf.q, nf.n)
    grid = vals[1:].reshape(rings, arms, nf.q, nf.n)
    zg = zs.reshape(rings, arms)
    terms = []
    for i in range(rings):
        for a in range(arms):
            nxt = (a + 1) % arms
            dz = abs(zg[i, nxt] - zg[i, a])
            dv = align_stack(grid[i, a], grid[i, nxt]) - grid[i, a]
            slope2 = float(np.sum(dv ** 2)) / (nf.q * dz * dz)
            terms.append(math.sqrt(1 + slope2) - 1)
            if i + 1 < rings:
                dz = abs(zg[i + 1, a] - zg[i, a])
                dv = align_stack(grid[i, a], grid[i + 1, a]) - grid[i, a]
                slope2 = float(np.sum(dv ** 2)) / (nf.q * dz * dz)
                terms.append(math.sqrt(1 + slope2) - 1)
    base = vals[0]
    for a in range(arms):
        dz = abs(zg[0, a] - center)
        dv = align_stack(base, grid[0, a]) - base
        slope2 = float(np.sum(dv ** 2)) / (nf.q * dz * dz)
        terms.append(math.sqrt(1 + slope2) - 1)
    return float(np.mean(terms))


def collect_stripes(nf, center, sheet, r, c_sigma=1.0, n_samples=48, seed=3,
                    excess=None):
    """Sample fiber heights in the restricted cylinder and decompose.

    Heights are projections on the dominant direction of the collected
    values; the restriction radius shrinks the sampling disk first, so the
    decomposition sees only the interior the estimates control.
    """
    center = complex(center)
    if excess is None:
        excess = cylinder_excess(nf, center, sheet, r)
    if excess >= 1.0:
        raise RegimeError("excess %.3g outside the stripe regime" % excess)
    sigma = c_sigma * excess ** 0.25 if excess > 0 else 0.0
    shrink = r * (1.0 - sigma * abs(math.log(excess))) if excess > 0 else r
    if shrink <= 0:
        raise RegimeError("restricted cylinder vanished at r=%.3g" % r)
    rng = np.random.default_rng(seed)
    rad = shrink * np.sqrt(rng.uniform(0.0, 1.0, n_samples))
    ang = rng.uniform(0.0, 2 * np.pi, n_samples)
    zs = center + rad * np.exp(1j * ang)
    out = nf.fiber(zs, sheet)
    vals = (out["phi"][:, None, :] + out["gaps"]).reshape(-1, nf.n)
    dev = vals - vals.mean(axis=0)
    spread = float(np.sqrt(np.sum(dev ** 2)))
    if spread > 0:
        _, _, vt = np.linalg.svd(dev, full_matrices=False)
        axis = vt[0]
    else:
        axis = np.zeros(nf.n)
        axis[0] = 1.0
    heights = vals @ axis
    return stripe_decomposition(heights, r, excess, c_sigma=c_sigma,
                                n_samples=n_samples, q_total=nf.q)


# ---------------------------------------------------------------------------
# separation and splitting diagnostics

def _touches(cx, cy, half, cx2, cy2, half2):
    return (abs(cx - cx2) <= half + half2 + 1e-15
            and abs(cy - cy2) <= half + half2 + 1e-15)


_DIAG_ARMS = 8
_DIAG_RINGS = 3
_DIAG_GRID = 7


def _polar_probe(zc, radius):
    rr = np.linspace(radius / _DIAG_RINGS, radius, _DIAG_RINGS)
    ang = _probe_angles(_DIAG_ARMS)
    return np.concatenate(([zc],
                           (zc + rr[:, None]
                            * np.exp(1j * ang)[None, :]).ravel()))


def _probe_excess(zs, vals, q):
    """Tilt excess from paired chord slopes of a _polar_probe value set."""
    grid = vals[1:].reshape(_DIAG_RINGS, _DIAG_ARMS, q, -1)
    zg = zs[1:].reshape(_DIAG_RINGS, _DIAG_ARMS)
    terms = []

    def slope_term(a, b, dz):
        dv = align_stack(a, b) - a
        s2 = float(np.sum(dv ** 2)) / (q * dz * dz)
        terms.append(math.sqrt(1 + s2) - 1)

    for i in range(_DIAG_RINGS):
        for a in range(_DIAG_ARMS):
            nxt = (a + 1) % _DIAG_ARMS
            slope_term(grid[i, a], grid[i, nxt],
                       abs(zg[i, nxt] - zg[i, a]))
            if i + 1 < _DIAG_RINGS:
                slope_term(grid[i, a], grid[i + 1, a],
                           abs(zg[i + 1, a] - zg[i, a]))
    for a in range(_DIAG_ARMS):
        slope_term(vals[0].reshape(q, -1), grid[0, a],
                   abs(zg[0, a] - zs[0]))
    return float(np.mean(terms))


def _grid_probe(zc, radius):
    ax = np.linspace(-radius, radius, _DIAG_GRID)
    xx, yy = np.meshgrid(ax, ax, indexing="ij")
    return zc + (xx + 1j * yy).ravel()


def _grid_energy(zs, normals, q, radius, mask_disk):
    """Quadrature of |DN|^2 and |N|^2 on a _grid_probe point set."""
    g = _DIAG_GRID
    hh = 2 * radius / (g - 1)
    nv = normals.reshape(g, g, q, -1)
    rel = zs.reshape(g, g) - zs.reshape(g, g)[(g - 1) // 2, (g - 1) // 2]
    inside = (np.abs(rel) <= radius + 1e-15) if mask_disk \
        else np.ones((g, g), bool)
    e_sum, n_sum = 0.0, 0.0
    for a in range(g):
        for b in range(g):
            if not inside[a, b]:
                continue
            ref = nv[a, b]
            n_sum += float(np.sum(ref ** 2)) * hh * hh
            if 0 < a < g - 1 and 0 < b < g - 1:
                dx = (align_stack(ref, nv[a + 1, b])
                      - align_stack(ref, nv[a - 1, b])) / (2 * hh)
                dy = (align_stack(ref, nv[a, b + 1])
                      - align_stack(ref, nv[a, b - 1])) / (2 * hh)
                e_sum += float(np.sum(dx ** 2) + np.sum(dy ** 2)) * hh * hh
    return e_sum, n_sum


def separation_splitting_diagnostics(book, nf, p, c_sigma=0.5, sample=16,
                                     seed=5, cap=128):
    """Report-only surrogates of the separation and splitting estimates.

    Height squares: stripe count in the Whitney ball, absence of touching
    half-size neighbor-closure squares, and the minimal fiber spread
    G(N, Q [[eta . N]]) over the 4 ell disk against a quarter of the height
    threshold at the book's own gate. Excess squares: the two split ratios
    over small interior probes. Probes for all squares of a sheet share one
    batched fiber evaluation; entries beyond the cap are left out and the
    truncation is recorded. Nothing raises; notes carry regime failures.
    """
    m0 = nf.m0
    rng = np.random.default_rng(seed)
    wh_all = np.sort(np.asarray(book.wh, dtype=np.int64))
    we_all = np.sort(np.asarray(book.we, dtype=np.int64))
    report = {"wh": [], "we": [],
              "wh_total": int(len(wh_all)), "we_total": int(len(we_all)),
              "capped": bool(len(wh_all) > cap or len(we_all) > cap)}

    wn_keys = np.asarray(book.wn, dtype=np.int64)
    wn_geo = []
    if len(wn_keys):
        jn, kn, _, _, sn = unpack_keys(wn_keys)
        cxn, cyn = centers_of(wn_keys)
        for i in range(len(wn_keys)):
            wn_geo.append((float(cxn[i]), float(cyn[i]),
                           side_of(int(jn[i]), int(kn[i])), int(sn[i])))

    jobs = []
    for key in wh_all.tolist()[:cap]:
        j, k, ix, iy, s = (int(v) for v in unpack_keys(np.array([key])))
        side = side_of(j, k)
        ell = float(ell_of(j, k))
        zc = complex((ix + 0.5) * side, (iy + 0.5) * side)
        rb = p.ball_radius(ell)
        probe = _polar_probe(zc, 0.75 * rb)
        ang = rng.uniform(0, 2 * np.pi, sample)
        rad = 4 * ell * np.sqrt(rng.uniform(0, 1, sample))
        cloud = np.concatenate(([zc], zc + rad * np.exp(1j * ang)))
        jobs.append({"kind": "wh", "key": key, "j": j, "k": k, "sheet": s,
                     "zc": zc, "ell": ell, "side": side, "rb": rb,
                     "pts": [probe, cloud]})
    for key in we_all.tolist()[:cap]:
        j, k, ix, iy, s = (int(v) for v in unpack_keys(np.array([key])))
        side = side_of(j, k)
        ell = float(ell_of(j, k))
        zc = complex((ix + 0.5) * side, (iy + 0.5) * side)
        jobs.append({"kind": "we", "key": key, "j": j, "k": k, "sheet": s,
                     "zc": zc, "ell": ell, "side": side,
                     "pts": [_grid_probe(zc, ell / 8),
                             _grid_probe(zc, side / 2)]})

    outs = {}
    for s in range(nf.qbar):
        mine = [jb for jb in jobs if jb["sheet"] == s]
        if not mine:
            continue
        flat = np.concatenate([pp for jb in mine for pp in jb["pts"]])
        res = nf.fiber(flat, s)
        pos = 0
        for jb in mine:
            sl = []
            for pp in jb["pts"]:
                m = len(pp)
                sl.append({k2: res[k2][pos:pos + m]
                           for k2 in ("normals", "eta", "gaps", "phi",
                                      "k_mask")})
                pos += m
            outs[jb["key"]] = sl

    for jb in jobs:
        if jb["kind"] != "wh":
            continue
        probe_out, cloud_out = outs[jb["key"]]
        zc, ell, side, rb = jb["zc"], jb["ell"], jb["side"], jb["rb"]
        dl = 2.0 ** (-jb["j"] - 1)
        probe = jb["pts"][0]
        vals = probe_out["phi"][:, None, :] + probe_out["gaps"]
        excess = _probe_excess(probe, vals, nf.q)

        stripes, s1_ok, note = None, False, ""
        try:
            if excess >= 1.0:
                raise RegimeError("excess %.3g outside the stripe regime"
                                  % excess)
            sigma = c_sigma * excess ** 0.25 if excess > 0 else 0.0
            shrink_f = (1.0 - sigma * abs(math.log(excess))) \
                if excess > 0 else 1.0
            if shrink_f <= 0:
                raise RegimeError("restricted cylinder vanished")
            keep = np.abs(probe - zc) <= 0.75 * rb * shrink_f + 1e-15
            hv = vals[keep].reshape(-1, nf.n)
            dev = hv - hv.mean(axis=0)
            if float(np.sum(dev ** 2)) > 0:
                _, _, vt = np.linalg.svd(dev, full_matrices=False)
                axis = vt[0]
            else:
                axis = np.zeros(nf.n)
                axis[0] = 1.0
            stripes = stripe_decomposition(hv @ axis, rb, excess,
                                           c_sigma=c_sigma,
                                           n_samples=int(keep.sum()),
                                           q_total=nf.q)
            s1_ok = len(stripes.centers) >= 2
        except (RegimeError, InvariantViolation) as exc:
            note = str(exc)

        touch_half = False
        for cx2, cy2, side2, s2 in wn_geo:
            if s2 == jb["sheet"] and abs(side2 - side / 2) <= 1e-12 * side:
                if _touches(zc.real, zc.imag, side / 2, cx2, cy2, side2 / 2):
                    touch_half = True
                    break

        spread = np.sqrt(np.sum((cloud_out["normals"]
                                 - cloud_out["eta"][:, None, :]) ** 2,
                                axis=(1, 2)))
        min_g = float(spread.min())
        bound = 0.25 * p.height_threshold(m0, dl, ell)
        report["wh"].append(
            {"key": int(jb["key"]), "level": (jb["j"], jb["k"]),
             "sheet": jb["sheet"], "center": (zc.real, zc.imag), "ell": ell,
             "excess": float(excess),
             "stripe_count": len(stripes.centers) if stripes else 0,
             "stripe_centers": stripes.centers if stripes else [],
             "stripe_q": stripes.q_of if stripes else [],
             "stripe_note": note,
             "s1_ok": bool(s1_ok), "s2_ok": bool(not touch_half),
             "s3_min_gap": min_g, "s3_bound": float(bound),
             "s3_margin": float(min_g - bound),
             "s3_ok": bool(min_g >= bound)})

    for jb in jobs:
        if jb["kind"] != "we":
            continue
        omega_out, square_out = outs[jb["key"]]
        zc, ell = jb["zc"], jb["ell"]
        dl = 2.0 ** (-jb["j"] - 1)
        target = (p.excess_gate * m0
                  * dl ** (2 * p.gamma0 - 2 + 2 * p.delta1)
                  * ell ** (4 - 2 * p.delta1))
        e_omega, n_omega = _grid_energy(jb["pts"][0], omega_out["normals"],
                                        nf.q, ell / 8, True)
        e_square, _ = _grid_energy(jb["pts"][1], square_out["normals"],
                                   nf.q, jb["side"] / 2, False)
        ratio_energy = target / e_omega if e_omega > 0 else math.inf
        den = n_omega / ell ** 2
        ratio_poincare = e_square / den if den > 0 else math.inf
        report["we"].append(
            {"key": int(jb["key"]), "level": (jb["j"], jb["k"]),
             "sheet": jb["sheet"], "center": (zc.real, zc.imag), "ell": ell,
             "energy_omega": float(e_omega), "height_omega": float(n_omega),
             "energy_square": float(e_square),
             "ratio_energy": float(ratio_energy),
             "ratio_poincare": float(ratio_poincare)})
    return report


def _disk_energy(nf, center, sheet, radius, grid=7):
    """Quadrature of |DN|^2 and |N|^2 over a small disk via a local grid."""
    center = complex(center)
    hh = 2 * radius / (grid - 1)
    ax = np.linspace(-radius, radius, grid)
    xx, yy = np.meshgrid(ax, ax, indexing="ij")
    zs = center + (xx + 1j * yy).ravel()
    out = nf.fiber(zs, sheet)
    nv = out["normals"].reshape(grid, grid, nf.q, 2 + nf.n)
    inside = (xx ** 2 + yy ** 2) <= radius ** 2 + 1e-15
    e_sum, n_sum = 0.0, 0.0
    for a in range(grid):
        for b in range(grid):
            if not inside[a, b]:
                continue
            ref = nv[a, b]
            n_sum += float(np.sum(ref ** 2)) * hh * hh
            if 0 < a < grid - 1 and 0 < b < grid - 1:
                dx = (align_stack(ref, nv[a + 1, b])
                      - align_stack(ref, nv[a - 1, b])) / (2 * hh)
                dy = (align_stack(ref, nv[a, b + 1])
                      - align_stack(ref, nv[a, b - 1])) / (2 * hh)
                e_sum += float(np.sum(dx ** 2) + np.sum(dy ** 2)) * hh * hh
    return e_sum, n_sum


# ---------------------------------------------------------------------------
# decay shape

def decay_shape(nf, p=None, m0=None):
    """Measured constant of the shape bound sup |N| <= C m0^(1/4) r^(1+g/2).

    Ring suprema of G(N, Q[[0]]) are prefix-maximized to genuine ball
    suprema; the reported constant is the worst quotient over the resolved
    radius range.
    """
    prm = p if p is not None else nf.params
    g0 = prm.gamma0
    if m0 is None:
        m0 = nf.m0
    g = nf.g_norm()
    ring_sup = g.max(axis=(0, 2))
    ball_sup = np.maximum.accumulate(ring_sup)
    quot = ball_sup / (m0 ** 0.25 * nf.radii ** (1 + g0 / 2))
    fit = fit_power_law(nf.radii, np.maximum(ball_sup, 1e-300)) \
        if np.all(ball_sup > 0) else (math.nan, math.nan, math.nan)
    return {"radii": nf.radii, "ball_sup": ball_sup,
            "constants": quot, "constant": float(quot.max()),
            "slope": float(fit[0]), "fit_residual": float(fit[2])}

"""Constant-coefficient elliptic systems on disks.

The interpolation step of the pipeline averages a multivalued approximation
and replaces it with the solution of a small linear elliptic system

    Delta v^k + (L1)^k_{ij} d_j v^i + (L2)^k_i v^i  =  (L3)^k_i (x - x_c)^i + (L4)^k

on a disk, with Dirichlet data on the circle. This module owns the tensor
assembly (two regimes: a generator 3-form, or the second fundamental form of
a quadratic graph model), the masked finite-difference discretization with
Shortley-Weller corrections at the circle, and the normal-equation CG solve.

Everything is deterministic: assembly order is fixed by the grid layout and
the iteration carries no randomness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigViolation, ConvergenceError, RegimeError

# first Dirichlet eigenvalue of the unit disk enters the coercivity margin
_J01 = 2.404825557695773


# ---------------------------------------------------------------------------
# operators


@dataclass(frozen=True)
class EllipticOperator:
    """Constant tensors of one interpolation system.

    l1 has shape (nbar, nbar, 2): l1[l, i, j] multiplies d_j v^i in row l.
    l2 is (nbar, nbar), l3 is (nbar, 2), l4 is (nbar,). center is the base
    point x_c of the affine right-hand side, in the disk's own coordinates.
    """

    l1: np.ndarray
    l2: np.ndarray
    l3: np.ndarray
    l4: np.ndarray
    center: np.ndarray

    @property
    def nbar(self) -> int:
        return self.l4.shape[0]

    def norm_sum(self) -> float:
        """|L1| + |L2| + |L3| + |L4| in Frobenius norms."""
        return float(np.linalg.norm(self.l1) + np.linalg.norm(self.l2)
                     + np.linalg.norm(self.l3) + np.linalg.norm(self.l4))

    def smallness_ratio(self, m0: float) -> float:
        """Measured constant in  norm_sum <= C * m0^(1/2); inf when m0 = 0."""
        s = self.norm_sum()
        if m0 <= 0.0:
            return 0.0 if s == 0.0 else float("inf")
        return s / math.sqrt(m0)

    def affine_rhs(self, pts: np.ndarray) -> np.ndarray:
        """(L3)(x - x_c) + L4 at points of shape (k, 2)."""
        return (pts - self.center[None, :]) @ self.l3.T + self.l4[None, :]


def laplacian_operator(nbar: int) -> EllipticOperator:
    z = np.zeros
    return EllipticOperator(z((nbar, nbar, 2)), z((nbar, nbar)), z((nbar, 2)),
                            z((nbar,)), z((2,)))


def assemble_tensors_flat(a0, dax, day, b0, q: int) -> EllipticOperator:
    """Tensors from the value and first derivatives of a generator 3-form.

    a0[l] is the dy^l ^ dx^1 ^ dx^2 coefficient at the base point, dax[l, j]
    and day[l, k] its x- and y-derivatives, b0[l, k, j] the coefficient of
    dy^l ^ dy^k ^ dx^j. The first variation of the graph against a vertical
    test field turns these into

        L1 A . e_l = q * sum_k (b0[l,k,2] A[k,1] - b0[l,k,1] A[k,2])
        L2 v . e_l = sum_k day[l, k] v[k]
        L3 w . e_l = sum_j dax[l, j] w[j]
        L4   . e_l = a0[l]
    """
    a0 = np.asarray(a0, dtype=float)
    dax = np.asarray(dax, dtype=float)
    day = np.asarray(day, dtype=float)
    b0 = np.asarray(b0, dtype=float)
    n = a0.shape[0]
    if dax.shape != (n, 2) or day.shape != (n, n) or b0.shape != (n, n, 2):
        raise ConfigViolation("3-form coefficient arrays have inconsistent shapes")
    l1 = np.zeros((n, n, 2))
    l1[:, :, 0] = q * b0[:, :, 1]    # coefficient of d_1 v^k
    l1[:, :, 1] = -q * b0[:, :, 0]   # coefficient of d_2 v^k
    return EllipticOperator(l1, day.copy(), dax.copy(), a0.copy(), np.zeros(2))


def quadratic_couplings(d2psi, q: int):
    """The two bilinear couplings of the quadratic graph model.

    d2psi has shape (m, 2 + nbar, 2 + nbar), symmetric in the last two slots:
    the Hessian at the base point of the map whose graph is the model. The
    first variation against a vertical test field zeta produces two integrals,

        q * (Dxy . zeta) : (Dxx . x)          ->  int (l_ad x) . zeta
        q * ((Dxy . x) . Dzeta) : (Dxx . x)   ->  int (l_cd x) . zeta ,

    the second after moving the derivative off the test field, which cancels
    the first coupling and leaves only the trace term. Returns (l_ad, l_cd),
    each of shape (nbar, 2).
    """
    d2psi = np.asarray(d2psi, dtype=float)
    if d2psi.ndim != 3 or d2psi.shape[1] != d2psi.shape[2] or d2psi.shape[1] < 3:
        raise ConfigViolation("second-derivative tensor must be (m, 2+nbar, 2+nbar)")
    if not np.allclose(d2psi, np.swapaxes(d2psi, 1, 2), atol=1e-12, rtol=0):
        raise ConfigViolation("second-derivative tensor is not symmetric")
    pxx = d2psi[:, :2, :2]           # (m, 2, 2)
    pxy = d2psi[:, :2, 2:]           # (m, 2, nbar)
    l_ad = q * np.einsum("mjk,mji->ki", pxy, pxx)
    trace = pxx[:, 0, 0] + pxx[:, 1, 1]
    l_cd = -l_ad - q * np.einsum("mik,m->ki", pxy, trace)
    return l_ad, l_cd


def assemble_tensors_quadratic(d2psi, q: int) -> EllipticOperator:
    """Operator for the quadratic-graph regime: only the affine forcing term.

    The lower-order tensors vanish in this regime and the forcing gradient is
    the sum of the two couplings of quadratic_couplings.
    """
    l_ad, l_cd = quadratic_couplings(d2psi, q)
    l3 = l_ad + l_cd
    nbar = l3.shape[0]
    return EllipticOperator(np.zeros((nbar, nbar, 2)), np.zeros((nbar, nbar)),
                            l3, np.zeros(nbar), np.zeros(2))


# ---------------------------------------------------------------------------
# disk grid


@dataclass(frozen=True)
class DiskGrid:
    """Uniform grid masked to the open disk of the given radius.

    thetas hold the fractional arm lengths toward the circle for the four
    directions (1.0 on regular arms); indexing is [iy, ix] throughout.
    """

    radius: float
    h: float
    xs: np.ndarray
    inside: np.ndarray
    theta_e: np.ndarray
    theta_w: np.ndarray
    theta_n: np.ndarray
    theta_s: np.ndarray

    @property
    def node_count(self) -> int:
        return int(self.inside.sum())

    def coords(self):
        gx, gy = np.meshgrid(self.xs, self.xs)
        return gx, gy


def build_disk_grid(radius: float, h: float) -> DiskGrid:
    if not (0 < h <= radius / 4):
        raise ConfigViolation("disk grid needs h <= radius/4")
    m = int(math.floor(radius / h + 1e-12))
    xs = (np.arange(2 * m + 1) - m) * h
    gx, gy = np.meshgrid(xs, xs)
    rr = gx * gx + gy * gy
    inside = rr < radius * radius * (1 - 1e-14)

    # fractional arms where a neighbor leaves the disk; crossing point lies on
    # the circle at the same ordinate (x arms) or abscissa (y arms)
    pad = np.pad(inside, 1, constant_values=False)
    half_x = np.sqrt(np.maximum(radius * radius - gy * gy, 0.0))
    half_y = np.sqrt(np.maximum(radius * radius - gx * gx, 0.0))
    theta_e = np.ones_like(gx)
    theta_w = np.ones_like(gx)
    theta_n = np.ones_like(gx)
    theta_s = np.ones_like(gx)
    cut_e = inside & ~pad[1:-1, 2:]
    cut_w = inside & ~pad[1:-1, :-2]
    cut_n = inside & ~pad[2:, 1:-1]
    cut_s = inside & ~pad[:-2, 1:-1]
    theta_e[cut_e] = (half_x[cut_e] - gx[cut_e]) / h
    theta_w[cut_w] = (gx[cut_w] + half_x[cut_w]) / h
    theta_n[cut_n] = (half_y[cut_n] - gy[cut_n]) / h
    theta_s[cut_s] = (gy[cut_s] + half_y[cut_s]) / h
    # clip: a crossing numerically at the node itself would blow up the stencil
    for th in (theta_e, theta_w, theta_n, theta_s):
        np.clip(th, 1e-6, 1.0, out=th)
    return DiskGrid(radius, h, xs, inside, theta_e, theta_w, theta_n, theta_s)


def _crossing_points(grid: DiskGrid):
    """Boundary crossing coordinates per direction, dict of (iy, ix) -> (k,2)."""
    gx, gy = grid.coords()
    out = {}
    for name, th, dx, dy in (("e", grid.theta_e, 1, 0), ("w", grid.theta_w, -1, 0),
                             ("n", grid.theta_n, 0, 1), ("s", grid.theta_s, 0, -1)):
        cut = grid.inside & (th < 1.0)
        iy, ix = np.nonzero(cut)
        pts = np.stack([gx[cut] + dx * th[cut] * grid.h,
                        gy[cut] + dy * th[cut] * grid.h], axis=1)
        out[name] = (iy, ix, pts)
    return out


# ---------------------------------------------------------------------------
# fields on the grid


class FieldGrid:
    """Vector field on a masked disk grid; NaN off the disk.

    values has shape (ny, nx, nbar). Treat instances as immutable; norms are
    computed on demand from the current values so nothing can go stale.
    """

    def __init__(self, grid: DiskGrid, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.ndim == 2:
            values = values[:, :, None]
        self.grid = grid
        self.values = values
        self.solve_info: dict = {}

    @property
    def nbar(self) -> int:
        return self.values.shape[2]

    def norms(self) -> dict:
        g = self.grid
        v = self.values[g.inside]
        mag = np.sqrt(np.sum(v * v, axis=1))
        da = g.h * g.h
        grad = grid_gradient(g, self.values)
        ok = np.isfinite(grad).all(axis=(2, 3)) & g.inside
        energy = float(np.sqrt(np.sum(grad[ok] ** 2) * da))
        return {
            "l1": float(np.sum(mag) * da),
            "l2": float(np.sqrt(np.sum(mag * mag) * da)),
            "linf": float(mag.max()) if mag.size else 0.0,
            "dirichlet": energy,
        }

    def sample(self, pts: np.ndarray) -> np.ndarray:
        """Bilinear values at points (k, 2); needs the cell corners on-disk."""
        from scipy.interpolate import RegularGridInterpolator
        filled = _fill_ring(self.grid, self.values)
        it = RegularGridInterpolator((self.grid.xs, self.grid.xs), filled,
                                     bounds_error=False, fill_value=np.nan)
        pts = np.asarray(pts, dtype=float)
        return it(np.stack([pts[:, 1], pts[:, 0]], axis=1))


def _fill_ring(grid: DiskGrid, values: np.ndarray, passes: int = 2) -> np.ndarray:
    # nearest-arm extension of the first off-disk ring so bilinear cells that
    # clip the circle still interpolate from finite numbers
    out = values.copy()
    out[~grid.inside] = np.nan
    for _ in range(passes):
        bad = ~np.isfinite(out[:, :, 0])
        if not bad.any():
            break
        acc = np.zeros_like(out)
        cnt = np.zeros(out.shape[:2])
        for sy, sx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            sh = np.roll(out, (sy, sx), axis=(0, 1))
            good = np.isfinite(sh[:, :, 0]) & bad
            acc[good] += sh[good]
            cnt[good] += 1
        fix = bad & (cnt > 0)
        out[fix] = acc[fix] / cnt[fix][:, None]
    return out


def grid_gradient(grid: DiskGrid, values: np.ndarray) -> np.ndarray:
    """Centered first derivatives, shape (ny, nx, nbar, 2); NaN where the
    centered stencil leaves the disk."""
    if values.ndim == 2:
        values = values[:, :, None]
    ny, nx, nb = values.shape
    out = np.full((ny, nx, nb, 2), np.nan)
    pad = np.pad(grid.inside, 1, constant_values=False)
    okx = grid.inside & pad[1:-1, 2:] & pad[1:-1, :-2]
    oky = grid.inside & pad[2:, 1:-1] & pad[:-2, 1:-1]
    dx = (values[:, 2:] - values[:, :-2]) / (2 * grid.h)
    dy = (values[2:, :] - values[:-2, :]) / (2 * grid.h)
    out[:, 1:-1, :, 0] = dx
    out[1:-1, :, :, 1] = dy
    out[~okx, :, 0] = np.nan
    out[~oky, :, 1] = np.nan
    return out


# ---------------------------------------------------------------------------
# Dirichlet problems


@dataclass
class DirichletProblem:
    """One solve: operator, disk radius, circle data, and grid step.

    boundary(pts) returns (k, nbar) values on circle points. rhs overrides
    the operator's affine forcing when given (same calling convention).
    """

    operator: EllipticOperator
    radius: float
    boundary: Callable[[np.ndarray], np.ndarray]
    h_pde: float
    rhs: Optional[Callable[[np.ndarray], np.ndarray]] = None


def coercivity_margin(op: EllipticOperator, radius: float) -> float:
    """Lower bound for the definiteness of the bilinear form on the disk.

    Uses the disk Poincare constant radius/j01: the form controls
    (1 - |L1| rho - |L2| rho^2) of the gradient energy with rho = radius/j01.
    """
    rho = radius / _J01
    n1 = float(np.linalg.norm(op.l1))
    n2 = float(np.linalg.norm(op.l2))
    return 1.0 - n1 * rho - n2 * rho * rho


def _assemble(prob: DirichletProblem):
    op = prob.operator
    nb = op.nbar
    grid = build_disk_grid(prob.radius, prob.h_pde)
    h = grid.h
    ny = nx = grid.xs.size
    ids = np.full((ny, nx), -1, dtype=np.int64)
    ids[grid.inside] = np.arange(grid.node_count)
    n_nodes = grid.node_count
    gx, gy = grid.coords()

    iy, ix = np.nonzero(grid.inside)
    row_node = ids[iy, ix]
    the = grid.theta_e[iy, ix]
    thw = grid.theta_w[iy, ix]
    thn = grid.theta_n[iy, ix]
    ths = grid.theta_s[iy, ix]

    # neighbor ids; -1 marks an arm that ends on the circle
    pad_ids = np.pad(ids, 1, constant_values=-1)
    id_e = pad_ids[iy + 1, ix + 2]
    id_w = pad_ids[iy + 1, ix]
    id_n = pad_ids[iy + 2, ix + 1]
    id_s = pad_ids[iy, ix + 1]

    # circle values where arms are cut
    def crossing(th, dx, dy):
        return np.stack([gx[iy, ix] + dx * th * h, gy[iy, ix] + dy * th * h], axis=1)

    gvals = {}
    for name, th, idn, dx, dy in (("e", the, id_e, 1, 0), ("w", thw, id_w, -1, 0),
                                  ("n", thn, id_n, 0, 1), ("s", ths, id_s, 0, -1)):
        cut = idn < 0
        vals = np.zeros((iy.size, nb))
        if cut.any():
            pts = crossing(th, dx, dy)[cut]
            bv = np.asarray(prob.boundary(pts), dtype=float)
            if bv.ndim == 1:
                bv = bv[:, None]
            vals[cut] = bv
        gvals[name] = vals

    rows, cols, data = [], [], []
    b = np.zeros(nb * n_nodes)

    def add(rcomp, rnode, ccomp, cnode_or_g, coef, gval=None):
        # cnode_or_g < 0 means the arm ends on the circle: fold into the rhs
        live = cnode_or_g >= 0
        rows.append(rcomp * n_nodes + rnode[live])
        cols.append(ccomp * n_nodes + cnode_or_g[live])
        data.append(coef[live])
        dead = ~live
        if dead.any():
            np.subtract.at(b, rcomp * n_nodes + rnode[dead],
                           coef[dead] * gval[dead, ccomp])

    inv_h2 = 1.0 / (h * h)
    ce = 2.0 * inv_h2 / (the * (the + thw))
    cw = 2.0 * inv_h2 / (thw * (the + thw))
    cn = 2.0 * inv_h2 / (thn * (thn + ths))
    cs = 2.0 * inv_h2 / (ths * (thn + ths))
    cc = -2.0 * inv_h2 * (1.0 / (the * thw) + 1.0 / (thn * ths))

    # unequal-arm centered first derivatives
    dxe = thw / (the * (the + thw)) / h
    dxw = -the / (thw * (the + thw)) / h
    dxc = (the - thw) / (the * thw) / h
    dye = ths / (thn * (thn + ths)) / h
    dys = -thn / (ths * (thn + ths)) / h
    dyc = (thn - ths) / (thn * ths) / h

    for l in range(nb):
        add(l, row_node, l, id_e, ce, gvals["e"])
        add(l, row_node, l, id_w, cw, gvals["w"])
        add(l, row_node, l, id_n, cn, gvals["n"])
        add(l, row_node, l, id_s, cs, gvals["s"])
        add(l, row_node, l, row_node, cc)
        for i in range(nb):
            a1 = op.l1[l, i, 0]
            a2 = op.l1[l, i, 1]
            if a1 != 0.0:
                add(l, row_node, i, id_e, a1 * dxe, gvals["e"])
                add(l, row_node, i, id_w, a1 * dxw, gvals["w"])
                add(l, row_node, i, row_node, a1 * dxc)
            if a2 != 0.0:
                add(l, row_node, i, id_n, a2 * dye, gvals["n"])
                add(l, row_node, i, id_s, a2 * dys, gvals["s"])
                add(l, row_node, i, row_node, a2 * dyc)
            if op.l2[l, i] != 0.0:
                add(l, row_node, i, row_node,
                    np.full(iy.size, op.l2[l, i]))

    pts = np.stack([gx[grid.inside], gy[grid.inside]], axis=1)
    f = prob.rhs(pts) if prob.rhs is not None else op.affine_rhs(pts)
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    for l in range(nb):
        b[l * n_nodes + row_node] += f[:, l]

    a = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nb * n_nodes, nb * n_nodes)).tocsr()
    return grid, ids, a, b


def _cgnr(a: sp.csr_matrix, b: np.ndarray, x0, tol: float, max_iter: int):
    """CG on the normal equations, stopped on the plain-system residual."""
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b), 0, 0.0
    at = a.T.tocsr()
    ata = (at @ a).tocsr()
    atb = at @ b
    dinv = 1.0 / np.maximum(ata.diagonal(), 1e-300)
    x = np.zeros_like(b) if x0 is None else np.asarray(x0, dtype=float).copy()
    r = atb - ata @ x
    z = dinv * r
    p = z.copy()
    rz = float(r @ z)
    best = float("inf")
    since_best = 0
    for it in range(1, max_iter + 1):
        ap = ata @ p
        denom = float(p @ ap)
        if denom <= 0.0:
            break
        alpha = rz / denom
        x += alpha * p
        r -= alpha * ap
        if it % 8 == 0 or it == max_iter:
            res = float(np.linalg.norm(a @ x - b)) / bnorm
            if res <= tol:
                return x, it, res
            if res < best * (1 - 1e-3):
                best, since_best = res, 0
            else:
                since_best += 1
                if since_best > 60:
                    raise ConvergenceError(
                        f"normal-equation iteration stalled at relative "
                        f"residual {res:.3e} after {it} steps")
        z = dinv * r
        rz_new = float(r @ z)
        if rz <= 0.0:
            break
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = float(np.linalg.norm(a @ x - b)) / bnorm
    if res > tol:
        raise ConvergenceError(
            f"normal-equation iteration hit the step cap at relative "
            f"residual {res:.3e}")
    return x, max_iter, res


def solve_dirichlet(prob: DirichletProblem, x0: Optional[np.ndarray] = None,
                    tol: float = 1e-10, max_iter: Optional[int] = None) -> FieldGrid:
    """Solve one Dirichlet problem; raises when the form loses definiteness
    or the iteration cannot reach the target residual."""
    margin = coercivity_margin(prob.operator, prob.radius)
    if margin <= 0.0:
        raise RegimeError(
            f"lower-order tensors too large for a definite form "
            f"(margin {margin:.3e}); input outside the smallness regime")
    grid, ids, a, b = _assemble(prob)
    nb = prob.operator.nbar
    n_nodes = grid.node_count
    flat0 = None
    if x0 is not None:
        flat0 = np.zeros(nb * n_nodes)
        for l in range(nb):
            flat0[l * n_nodes:(l + 1) * n_nodes] = x0[grid.inside, l]
    cap = max_iter if max_iter is not None else max(4000, 40 * nb * n_nodes)
    x, iters, res = _cgnr(a, b, flat0, tol, cap)
    ny = nx = grid.xs.size
    vals = np.full((ny, nx, nb), np.nan)
    for l in range(nb):
        comp = np.full(ny * nx, np.nan)
        comp[ids.ravel() >= 0] = x[l * n_nodes:(l + 1) * n_nodes][
            ids.ravel()[ids.ravel() >= 0]]
        vals[:, :, l] = comp.reshape(ny, nx)
    out = FieldGrid(grid, vals)
    out.solve_info = {"iterations": iters, "rel_residual": res,
                      "coercivity_margin": margin,
                      "unknowns": nb * n_nodes}
    return out


# ---------------------------------------------------------------------------
# interior estimates


def _stencil_hessian(grid: DiskGrid, values: np.ndarray) -> np.ndarray:
    """Second derivatives (xx, xy, yy) where the full 3x3 block is on-disk."""
    if values.ndim == 2:
        values = values[:, :, None]
    ny, nx, nb = values.shape
    h2 = grid.h * grid.h
    out = np.full((ny, nx, nb, 3), np.nan)
    pad = np.pad(grid.inside, 1, constant_values=False)
    ok = grid.inside.copy()
    for sy in (-1, 0, 1):
        for sx in (-1, 0, 1):
            ok &= pad[1 + sy: 1 + sy + ny, 1 + sx: 1 + sx + nx]
    v = values
    out[1:-1, 1:-1, :, 0] = (v[1:-1, 2:] - 2 * v[1:-1, 1:-1] + v[1:-1, :-2]) / h2
    out[1:-1, 1:-1, :, 2] = (v[2:, 1:-1] - 2 * v[1:-1, 1:-1] + v[:-2, 1:-1]) / h2
    out[1:-1, 1:-1, :, 1] = (v[2:, 2:] - v[2:, :-2] - v[:-2, 2:] + v[:-2, :-2]) / (4 * h2)
    out[~ok] = np.nan
    return out


def interior_estimate_report(v: FieldGrid, f_rhs: Optional[FieldGrid],
                             r: float) -> dict:
    """Ratios of interior sups to the scale-weighted data norms.

    The field is taken to live on the disk of radius 8r-equivalent (the grid's
    own radius); sups of the field and its first two derivative levels over
    the concentric 6/8 disk are compared against
    r^(-2-l) ||v||_L1  +  r^2 sum_j r^(j-l) ||D^j F||_inf.
    """
    g = v.grid
    gx, gy = g.coords()
    inner = (gx * gx + gy * gy <= (0.75 * g.radius) ** 2) & g.inside
    da = g.h * g.h
    mag = np.sqrt(np.sum(v.values[g.inside] ** 2, axis=1))
    l1 = float(np.sum(mag) * da)

    grad = grid_gradient(g, v.values)
    hess = _stencil_hessian(g, v.values)
    sup0 = float(np.nanmax(np.abs(v.values[inner]))) if inner.any() else 0.0
    gi = grad[inner]
    hi = hess[inner]
    sup1 = float(np.nanmax(np.abs(gi))) if np.isfinite(gi).any() else 0.0
    sup2 = float(np.nanmax(np.abs(hi))) if np.isfinite(hi).any() else 0.0

    fsup = [0.0, 0.0, 0.0]
    if f_rhs is not None:
        fv = f_rhs.values
        fsup[0] = float(np.nanmax(np.abs(fv[g.inside]))) if g.inside.any() else 0.0
        fg = grid_gradient(g, fv)
        fh = _stencil_hessian(g, fv)
        fsup[1] = float(np.nanmax(np.abs(fg[g.inside]))) if np.isfinite(fg[g.inside]).any() else 0.0
        fsup[2] = float(np.nanmax(np.abs(fh[g.inside]))) if np.isfinite(fh[g.inside]).any() else 0.0

    out = {"l1": l1, "sups": [sup0, sup1, sup2], "f_sups": fsup}
    for l in (0, 1, 2):
        denom = r ** (-2 - l) * l1 + r * r * sum(
            r ** (j - l) * fsup[j] for j in range(l + 1))
        out[f"ratio{l}"] = float("inf") if denom == 0.0 else out["sups"][l] / denom
    return out

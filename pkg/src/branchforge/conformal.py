"""Isothermal coordinates and conformal reparametrization of branched graphs.

The flow: pull the ambient metric back onto the branched disk, push it down
to the plane disk through the covering map, normalize away the conformal
cover factor, flatten the remainder with a least-squares Beltrami solve on
a triangulated grid, and compose everything into the reparametrization Psi
together with its conformal factor. The solve works in the perturbative
regime where the metric stays uniformly close to the identity; everything
else is rejected up front.

Measurement convention: the conformality defect of Lambda is evaluated in
forward form, at image points of the interior grid nodes of the flattening
solve. There the chain rule gives D Lambda = (Dw)^{-1} from exact solved
data, so the certified residual never touches the interpolated inverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import sparse
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import spsolve

from .currents import BranchedDomain
from .elliptic import DiskGrid, _fill_ring, build_disk_grid
from .errors import (ConfigViolation, ConvergenceError, InvariantViolation,
                     RegimeError)
from .fitting import fit_power_law

EIG_LO, EIG_HI = 0.5, 1.5
FLATNESS_LIMIT = 0.25       # sup |tau - e| admitted by the flattening solve
CORE_MARGIN = 3             # rim cells excluded from certified suprema


# ---------------------------------------------------------------------------
# metric fields


@dataclass
class MetricField:
    """Symmetric 2x2 metric per grid node, stored on the full rectangle.

    The disk mask of the grid marks where the field is contractually valid;
    the rectangle fringe carries whatever the constructor computed there and
    exists only to keep central stencils and interpolation simple.
    """

    grid: DiskGrid
    mat: np.ndarray                     # (ny, nx, 2, 2)
    center: complex = 0.0 + 0.0j        # chart offset in the base plane
    origin_oscillation: float = 0.0

    def eigen_range(self):
        m = self.mat[self.grid.inside]
        tr = m[:, 0, 0] + m[:, 1, 1]
        disc = np.sqrt(np.maximum(
            (m[:, 0, 0] - m[:, 1, 1]) ** 2 + 4 * m[:, 0, 1] ** 2, 0.0))
        lo = 0.5 * (tr - disc)
        hi = 0.5 * (tr + disc)
        return float(lo.min()), float(hi.max())

    def sup_identity_distance(self):
        d = self.mat[self.grid.inside] - np.eye(2)
        return float(np.abs(d).max())

    def sup_norm(self):
        return float(np.abs(self.mat[self.grid.inside]).max())

    def validate(self):
        lo, hi = self.eigen_range()
        if lo < EIG_LO or hi > EIG_HI:
            raise RegimeError(
                f"metric eigenvalues [{lo:.4f}, {hi:.4f}] leave the "
                f"perturbative band [{EIG_LO}, {EIG_HI}]")
        return self


def _rect_graph_values(fn, grid: DiskGrid, margin: int = 2):
    """fn over the grid rectangle enlarged by `margin` cells, plus central
    first derivatives cropped back to the original rectangle.

    Returns (values (ny, nx, n), grads (ny, nx, n, 2))."""
    h = grid.h
    ext = np.concatenate([grid.xs[0] - h * np.arange(margin, 0, -1),
                          grid.xs,
                          grid.xs[-1] + h * np.arange(1, margin + 1)])
    gx, gy = np.meshgrid(ext, ext)
    z = (gx + 1j * gy).ravel()
    vals = np.asarray(fn(z), dtype=float)
    n = vals.shape[1]
    vals = vals.reshape(len(ext), len(ext), n)
    dy, dx = np.gradient(vals, h, h, axis=(0, 1))
    sl = slice(margin, -margin)
    grads = np.stack([dx[sl, sl], dy[sl, sl]], axis=3)
    return vals[sl, sl], grads


def pullback_metric(graph_fn: Callable, grid: DiskGrid,
                    center: complex) -> MetricField:
    """First fundamental form I + Du^T Du of a single-branch graph on a disk
    chart centered at `center`; the chart must keep the branch point outside.
    """
    center = complex(center)
    if abs(center) <= grid.radius:
        raise ConfigViolation(
            f"graph chart of radius {grid.radius} centered at {center} "
            f"touches the branch point")
    _, du = _rect_graph_values(lambda z: graph_fn(z + center), grid)
    g = np.einsum("yxna,yxnb->yxab", du, du) + np.eye(2)
    return MetricField(grid, g, center=center).validate()


def cover_normalized_metric(branch_fn: Callable, order: int,
                            grid: DiskGrid) -> MetricField:
    """Metric of the covering pullback, with the conformal cover factor
    divided out: tau = e + Du~^T Du~ / (Q^2 |w|^(2Q-2)) on the w-plane disk.

    branch_fn(z, w) -> (k, n) values of the branching at root coordinates w.
    The covering derivative is conformal, so its sandwich collapses to the
    scalar Q^2 |w|^(2Q-2); the identity block is exact and only the graph
    term needs finite differences.
    """
    if order < 1:
        raise ConfigViolation("cover order must be >= 1")
    _, du = _rect_graph_values(lambda w: branch_fn(w ** order, w), grid)
    gx, gy = grid.coords()
    rr = gx * gx + gy * gy
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = (order ** 2) * rr ** (order - 1)
        tau = np.einsum("yxna,yxnb->yxab", du, du) / scale[:, :, None, None]
    tau = tau + np.eye(2)
    bad = ~np.isfinite(tau).all(axis=(2, 3))
    if bad.any():
        # removable singularity at the branch point: continuous extension
        iy, ix = np.nonzero(bad)
        for a, b in zip(iy, ix):
            patch = tau[max(a - 1, 0):a + 2, max(b - 1, 0):b + 2]
            ok = np.isfinite(patch).all(axis=(2, 3))
            tau[a, b] = patch[ok].mean(axis=0)
    near = rr <= (4 * grid.h) ** 2
    osc = float(np.abs(tau[near] - tau[near].mean(axis=0)).max()) if near.any() else 0.0
    if osc > 0.1:
        raise RegimeError(
            f"normalized cover metric oscillates by {osc:.3e} at the branch "
            f"point; no continuous extension")
    return MetricField(grid, tau, origin_oscillation=osc).validate()


def continued_branch(analytic, domain: BranchedDomain, center: complex,
                     sheet: int) -> Callable:
    """Single-valued branch of a branched graph on a disk away from 0.

    Continues the root from the chart center, so the chart may cross the
    fixed cut of the sheet labels without jumps."""
    center = complex(center)
    if center == 0:
        raise ConfigViolation("branch continuation needs an off-origin center")
    wc = complex(np.asarray(domain.root(np.array([center]), sheet))[0])

    def fn(z):
        ratio = np.asarray(z, dtype=complex) / center
        if np.any(ratio.real <= 0):
            raise ConfigViolation("chart wraps too far for branch continuation")
        w = wc * np.exp(np.log(ratio) / domain.qbar)
        return analytic.branching(np.asarray(z, dtype=complex), w)

    return fn


# ---------------------------------------------------------------------------
# Beltrami flattening


def beltrami_coefficient(mf: MetricField) -> np.ndarray:
    e = mf.mat[:, :, 0, 0]
    f = mf.mat[:, :, 0, 1]
    g = mf.mat[:, :, 1, 1]
    det = np.maximum(e * g - f * f, 1e-300)
    return (e - g + 2j * f) / (e + g + 2 * np.sqrt(det))


def _triangulate(grid: DiskGrid):
    """Split every fully interior cell into two triangles, alternating the
    diagonal per cell parity so no checkerboard mode survives the solve."""
    inside = grid.inside
    ny, nx = inside.shape
    cell = inside[:-1, :-1] & inside[:-1, 1:] & inside[1:, :-1] & inside[1:, 1:]
    iy, ix = np.nonzero(cell)
    flat = lambda a, b: a * nx + b
    p00 = flat(iy, ix)
    p10 = flat(iy, ix + 1)
    p01 = flat(iy + 1, ix)
    p11 = flat(iy + 1, ix + 1)
    even = (iy + ix) % 2 == 0
    tris = np.concatenate([
        np.stack([p00[even], p10[even], p11[even]], axis=1),
        np.stack([p00[even], p11[even], p01[even]], axis=1),
        np.stack([p10[~even], p11[~even], p01[~even]], axis=1),
        np.stack([p10[~even], p01[~even], p00[~even]], axis=1),
    ])
    nodes = np.unique(tris)
    remap = np.full(ny * nx, -1, dtype=np.int64)
    remap[nodes] = np.arange(len(nodes))
    return remap[tris], nodes, remap


def _shape_coefficients(grid: DiskGrid, tris, nodes):
    gx, gy = grid.coords()
    px = gx.ravel()[nodes][tris]              # (T, 3)
    py = gy.ravel()[nodes][tris]
    e1x, e1y = px[:, 1] - px[:, 0], py[:, 1] - py[:, 0]
    e2x, e2y = px[:, 2] - px[:, 0], py[:, 2] - py[:, 0]
    area = 0.5 * (e1x * e2y - e1y * e2x)
    if np.any(area <= 0):
        raise ConfigViolation("triangulation produced a degenerate cell")
    grads_x = np.empty_like(px)
    grads_y = np.empty_like(px)
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        grads_x[:, i] = -(py[:, k] - py[:, j]) / (2 * area)
        grads_y[:, i] = (px[:, k] - px[:, j]) / (2 * area)
    a = 0.5 * (grads_x - 1j * grads_y)        # coefficients of d/dz
    b = 0.5 * (grads_x + 1j * grads_y)        # coefficients of d/dzbar
    return a, b, area


class _Triangulation:
    def __init__(self, grid: DiskGrid):
        self.grid = grid
        self.tris, self.nodes, self.remap = _triangulate(grid)
        self.a, self.b, self.area = _shape_coefficients(
            grid, self.tris, self.nodes)
        m = (len(grid.xs) - 1) // 2
        self.i0 = self.remap[m * len(grid.xs) + m]
        if self.i0 < 0:
            raise ConfigViolation("the origin node left the triangulation")

    def solve(self, mu_tri: np.ndarray):
        """Least-squares PL flattening w with w_zbar = mu w_z per triangle,
        pinned w(0) = 0 and area-mean w_z = 1."""
        tris, a, b, area = self.tris, self.a, self.b, self.area
        n_nodes = len(self.nodes)
        t_idx = np.repeat(np.arange(len(tris)), 3)
        coef = (np.sqrt(area)[:, None] * (b - mu_tri[:, None] * a)).ravel()
        c = sparse.coo_matrix((coef, (t_idx, tris.ravel())),
                              shape=(len(tris), n_nodes)).tocsr()
        gz = np.zeros(n_nodes, dtype=complex)
        np.add.at(gz, tris.ravel(), (area[:, None] * a).ravel())
        gz /= area.sum()
        h = (c.conj().T @ c).tocsr()
        grow = sparse.csr_matrix((gz, (np.zeros(n_nodes, int),
                                       np.arange(n_nodes))),
                                 shape=(1, n_nodes))
        erow = sparse.csr_matrix(([1.0], ([0], [self.i0])),
                                 shape=(1, n_nodes))
        kkt = sparse.bmat([[h, grow.conj().T, erow.conj().T],
                           [grow, None, None],
                           [erow, None, None]], format="csc", dtype=complex)
        rhs = np.zeros(n_nodes + 2, dtype=complex)
        rhs[n_nodes] = 1.0
        sol = spsolve(kkt, rhs)
        w = sol[:n_nodes]
        if not np.all(np.isfinite(w)):
            raise ConvergenceError("Beltrami least-squares system is singular")
        w_grid = np.full(self.grid.inside.shape, np.nan + 0j, dtype=complex)
        w_grid.ravel()[self.nodes] = w
        return w_grid, float(np.linalg.norm(c @ w))

    def achieved_mu(self, w_grid: np.ndarray):
        wv = w_grid.ravel()[self.nodes][self.tris]
        wz = (self.a * wv).sum(axis=1)
        wzb = (self.b * wv).sum(axis=1)
        small = np.abs(wz) < 1e-12
        return np.where(small, 0.0, wzb / np.where(small, 1.0, wz))

    def tri_mean(self, nodal: np.ndarray):
        return nodal.ravel()[self.nodes][self.tris].mean(axis=1)


def _beltrami_solve(grid: DiskGrid, mu: np.ndarray):
    tri = _Triangulation(grid)
    return tri.solve(tri.tri_mean(mu))


def _complex_interpolators(grid: DiskGrid, f_grid: np.ndarray):
    """Bilinear interpolators for a complex field and its derivatives, after
    extending across the rim so near-boundary queries stay finite."""
    stacked = np.stack([f_grid.real, f_grid.imag], axis=2)
    filled = _fill_ring(grid, stacked, passes=4)
    still = ~np.isfinite(filled[:, :, 0])
    filled[still] = 0.0
    dy, dx = np.gradient(filled, grid.h, grid.h, axis=(0, 1))
    xs = grid.xs
    mk = lambda arr: RegularGridInterpolator((xs, xs), arr, bounds_error=False,
                                             fill_value=None)
    return mk(filled), mk(dx), mk(dy)


def _invert_map(grid: DiskGrid, f_grid: np.ndarray, targets: np.ndarray,
                tol: float = 1e-12, max_iter: int = 40):
    """Newton inverse of a near-identity complex grid field at target points.

    A preimage is only accepted when its surrounding interpolation cell
    consists of genuinely solved nodes; preimages that drift into the
    extension ring are rejected rather than trusted.

    Returns (preimages (k,) complex, accepted (k,) bool)."""
    genuine = np.isfinite(f_grid)
    fi, fdx, fdy = _complex_interpolators(grid, f_grid)
    tg = np.stack([targets.real, targets.imag], axis=1)
    x = tg.copy()
    atol = tol * max(1.0, grid.radius)
    for _ in range(max_iter):
        q = np.stack([x[:, 1], x[:, 0]], axis=1)
        val = fi(q)
        res = val - tg
        if np.nanmax(np.abs(res)) <= atol:
            break
        jx = fdx(q)
        jy = fdy(q)
        det = jx[:, 0] * jy[:, 1] - jy[:, 0] * jx[:, 1]
        det = np.where(np.abs(det) < 1e-300, np.nan, det)
        sx = (res[:, 0] * jy[:, 1] - res[:, 1] * jy[:, 0]) / det
        sy = (res[:, 1] * jx[:, 0] - res[:, 0] * jx[:, 1]) / det
        step = np.stack([sx, sy], axis=1)
        np.clip(step, -4 * grid.h, 4 * grid.h, out=step)
        x = x - step
    q = np.stack([x[:, 1], x[:, 0]], axis=1)
    res = fi(q) - tg
    ok = np.isfinite(res).all(axis=1) & (np.abs(res).max(axis=1) <= 1e3 * atol)
    xs0, h = grid.xs[0], grid.h
    with np.errstate(invalid="ignore"):
        fx = np.floor((x[:, 0] - xs0) / h)
        fy = np.floor((x[:, 1] - xs0) / h)
    ix = np.where(np.isfinite(fx), fx, -1).astype(int)
    iy = np.where(np.isfinite(fy), fy, -1).astype(int)
    nmax = len(grid.xs) - 1
    inb = (ix >= 0) & (ix < nmax) & (iy >= 0) & (iy < nmax)
    ixc = np.clip(ix, 0, nmax - 1)
    iyc = np.clip(iy, 0, nmax - 1)
    cell_ok = (genuine[iyc, ixc] & genuine[iyc, ixc + 1]
               & genuine[iyc + 1, ixc] & genuine[iyc + 1, ixc + 1]) & inb
    return x[:, 0] + 1j * x[:, 1], ok & cell_ok


def _grid_jacobian(grid: DiskGrid, f_grid: np.ndarray):
    stacked = np.stack([f_grid.real, f_grid.imag], axis=2)
    filled = _fill_ring(grid, stacked, passes=4)
    dy, dx = np.gradient(filled, grid.h, grid.h, axis=(0, 1))
    jac = np.empty(f_grid.shape + (2, 2))
    jac[:, :, :, 0] = dx
    jac[:, :, :, 1] = dy
    return jac


def _forward_residual(grid: DiskGrid, tau: MetricField, w_grid: np.ndarray,
                      meas: np.ndarray, fieldm: np.ndarray):
    """Conformality defect of Lambda = w^{-1} measured at image points of
    the solved nodes: D Lambda(w(x)) = Dw(x)^{-1} on exact data.

    Returns (lambda-bar field over `fieldm` indexed by x, residual over
    `meas`, min det Dw over `meas`)."""
    jac = _grid_jacobian(grid, w_grid)
    lam_fwd = np.full(grid.inside.shape, np.nan)
    j = jac[fieldm]
    det = j[:, 0, 0] * j[:, 1, 1] - j[:, 0, 1] * j[:, 1, 0]
    safe = np.abs(det) > 1e-300
    a = np.empty_like(j)
    a[safe, 0, 0] = j[safe, 1, 1] / det[safe]
    a[safe, 1, 1] = j[safe, 0, 0] / det[safe]
    a[safe, 0, 1] = -j[safe, 0, 1] / det[safe]
    a[safe, 1, 0] = -j[safe, 1, 0] / det[safe]
    a[~safe] = np.nan
    t = tau.mat[fieldm]
    p = np.einsum("kca,kcd,kdb->kab", a, t, a)
    lam = 0.5 * (p[:, 0, 0] + p[:, 1, 1])
    lam_fwd[fieldm] = lam
    sub = meas[fieldm]
    dev = p[sub] - lam[sub, None, None] * np.eye(2)
    resid = float(np.abs(dev).max() / tau.sup_norm()) if sub.any() else 0.0
    dets = det[sub]
    det_min = float(dets.min()) if dets.size else 1.0
    return lam_fwd, resid, det_min


@dataclass
class IsothermalMap:
    """Discrete flattening chart: Lambda on the grid with its conformal
    factor, contract residual, and normalization diagnostics."""

    grid: DiskGrid
    tau: MetricField
    w_grid: np.ndarray                   # (ny, nx) complex forward solve
    map_grid: np.ndarray                 # (ny, nx) complex Lambda values
    lam_fwd: np.ndarray                  # (ny, nx) lambda-bar at w(x), x-indexed
    valid: np.ndarray
    core: np.ndarray
    residual: float
    residual_trace: list
    det_min: float
    dmap0: np.ndarray                    # 2x2 D Lambda(0) after gauge fixing
    lam0: float
    scale: float
    rotation: float
    mu_sup: float
    fit_norm: float
    _interp: Optional[tuple] = field(default=None, repr=False)

    def _interps(self):
        if self._interp is None:
            mi, _, _ = _complex_interpolators(self.grid, self.map_grid)
            lam = np.stack([np.where(np.isfinite(self.lam_fwd),
                                     self.lam_fwd, np.nan),
                            np.zeros_like(self.lam_fwd)], axis=2)
            lamf = _fill_ring(self.grid, lam, passes=4)[:, :, 0]
            lamf[~np.isfinite(lamf)] = 1.0
            xs = self.grid.xs
            li = RegularGridInterpolator((xs, xs), lamf, bounds_error=False,
                                         fill_value=None)
            self._interp = (mi, li)
        return self._interp

    def map_at(self, zeta: np.ndarray) -> np.ndarray:
        zeta = np.asarray(zeta, dtype=complex).ravel()
        mi, _ = self._interps()
        v = mi(np.stack([zeta.imag, zeta.real], axis=1))
        return v[:, 0] + 1j * v[:, 1]

    def lambda_at(self, zeta: np.ndarray) -> np.ndarray:
        """lambda-bar at plane points: the forward factor field evaluated at
        the preimage Lambda(zeta)."""
        x = self.map_at(zeta)
        _, li = self._interps()
        return li(np.stack([x.imag, x.real], axis=1))


def isothermal(tau: MetricField, tol: float = 1e-6,
               max_sweeps: int = 3) -> IsothermalMap:
    """Flattening coordinates for tau: Lambda whose tau-pullback is a scalar
    multiple of the identity, normalized to unit factor and rotation-free
    derivative at the origin.

    The Beltrami equation is linear, so the first least-squares solve
    usually lands inside tolerance; leftover defect is retargeted through
    per-cell coefficient corrections, and a stall raises with the full
    residual trace.
    """
    tau.validate()
    flat = tau.sup_identity_distance()
    if flat > FLATNESS_LIMIT:
        raise RegimeError(
            f"metric is {flat:.3f} from the identity; the flattening solve "
            f"is only trusted below {FLATNESS_LIMIT}")
    grid = tau.grid
    mu = beltrami_coefficient(tau)
    mu_sup = float(np.abs(mu[grid.inside]).max())

    gx, gy = grid.coords()
    rr2 = gx * gx + gy * gy
    core_disk = rr2 <= (grid.radius - CORE_MARGIN * grid.h) ** 2

    tri = _Triangulation(grid)
    mu_target = tri.tri_mean(mu)
    mu_in = mu_target.copy()
    trace = []
    w_grid = None
    fit = np.inf
    best = None
    for sweep in range(max_sweeps):
        w_try, fit = tri.solve(mu_in)
        solved = np.isfinite(w_try)
        lam_fwd, resid, det_min = _forward_residual(
            grid, tau, w_try, core_disk, solved)
        trace.append(resid)
        if best is None or resid < best[1]:
            best = (w_try, resid, lam_fwd, det_min)
        w_grid = w_try
        if resid <= tol:
            break
        if len(trace) >= 2 and trace[-1] > 0.5 * trace[-2]:
            break
        mu_in = mu_in + (mu_target - tri.achieved_mu(w_try))
    w_grid, resid, lam_fwd, det_min = best
    if resid > tol:
        raise ConvergenceError(
            "conformality residual stalled at "
            + ", ".join(f"{r:.3e}" for r in trace))

    # gauge fixing on forward values: w -> e^{i phi} w / c is exact
    m = (len(grid.xs) - 1) // 2
    h = grid.h
    jx = (w_grid[m, m + 1] - w_grid[m, m - 1]) / (2 * h)
    jy = (w_grid[m + 1, m] - w_grid[m - 1, m]) / (2 * h)
    dw0 = np.array([[jx.real, jy.real], [jx.imag, jy.imag]])
    a0 = np.linalg.inv(dw0)
    tau0 = tau.mat[m, m]
    lam0 = 0.5 * np.trace(a0.T @ tau0 @ a0)
    c = 1.0 / math.sqrt(lam0)
    s = a0 @ a0.T
    evals, evecs = np.linalg.eigh(s)
    p = evecs @ np.diag(np.sqrt(np.maximum(evals, 1e-300))) @ evecs.T
    v = np.linalg.solve(p, a0)
    phi = math.atan2(v[1, 0], v[0, 0])
    if abs(c - 1.0) > 1e-15 or abs(phi) > 1e-15:
        w_grid = w_grid * (np.exp(1j * phi) / c)
        solved = np.isfinite(w_grid)
        lam_fwd, resid, det_min = _forward_residual(
            grid, tau, w_grid, core_disk, solved)
        trace.append(resid)
        if resid > tol:
            raise ConvergenceError(
                f"normalization left the conformality residual at {resid:.3e}")
    if det_min <= 0:
        raise InvariantViolation(
            f"flattening map loses orientation (min det {det_min:.3e})")

    targets = (gx + 1j * gy)[grid.inside]
    inv, ok = _invert_map(grid, w_grid, targets)
    lam_map = np.full(grid.inside.shape, np.nan + 0j, dtype=complex)
    lam_map[grid.inside] = np.where(ok, inv, np.nan + 0j)
    valid = np.isfinite(lam_map)

    jx = (w_grid[m, m + 1] - w_grid[m, m - 1]) / (2 * h)
    jy = (w_grid[m + 1, m] - w_grid[m - 1, m]) / (2 * h)
    dw0 = np.array([[jx.real, jy.real], [jx.imag, jy.imag]])
    dmap0 = np.linalg.inv(dw0)
    lam0_final = float(lam_fwd[m, m])
    return IsothermalMap(grid=grid, tau=tau, w_grid=w_grid,
                         map_grid=lam_map, lam_fwd=lam_fwd, valid=valid,
                         core=core_disk & np.isfinite(w_grid),
                         residual=resid, residual_trace=trace,
                         det_min=det_min, dmap0=dmap0, lam0=lam0_final,
                         scale=c, rotation=phi, mu_sup=mu_sup, fit_norm=fit)


# ---------------------------------------------------------------------------
# the composed parametrization


@dataclass
class ConformalChart:
    """Psi = Phi o W o Lambda o W^{-1} with its conformal factor.

    Points of the branched disk enter as (z, sheet); the fixed cut of the
    sheet labels sits on the negative real axis and roots continue along
    radial rays, so W^{-1}(z, w) is literally the root coordinate.
    """

    order: int
    n: int
    iso: IsothermalMap
    branch_fn: Callable
    domain: BranchedDomain

    def roots(self, z, sheet):
        return self.domain.root(np.asarray(z, dtype=complex).ravel(),
                                np.asarray(sheet))

    def psi(self, z, sheet):
        z = np.asarray(z, dtype=complex).ravel()
        w = self.roots(z, sheet)
        x = self.iso.map_at(w)
        z2 = x ** self.order
        vals = np.asarray(self.branch_fn(z2, x), dtype=float)
        out = np.empty((len(z), 2 + self.n))
        out[:, 0] = z2.real
        out[:, 1] = z2.imag
        out[:, 2:] = vals
        return out

    def conformal_factor(self, z, sheet):
        z = np.asarray(z, dtype=complex).ravel()
        if np.any(z == 0):
            raise ConfigViolation("the conformal factor needs |z| > 0")
        w = self.roots(z, sheet)
        x = self.iso.map_at(w)
        q = self.order
        return (np.abs(x) ** (2 * q - 2) / np.abs(z) ** (2 - 2.0 / q)
                * self.iso.lambda_at(w))

    def pullback_check(self, zeta, step=None):
        """Isothermality of the composition at plane points zeta, by finite
        differences through the full evaluation path of Psi.

        Pulling the ambient metric through zeta -> Psi(W(zeta)) must give
        Q^2 |Lambda(zeta)|^(2Q-2) lambda-bar(zeta) times the identity; the
        squared cover derivative on either side of Psi cancels down to that
        factor. Returns the worst relative deviations. This route runs
        through the interpolated map, so its noise floor sits at the
        interpolation error, not at the solve residual."""
        zeta = np.asarray(zeta, dtype=complex).ravel()
        h = step if step is not None else self.iso.grid.h / 8.0

        def emb(zz):
            x = self.iso.map_at(zz)
            z2 = x ** self.order
            vals = np.asarray(self.branch_fn(z2, x), dtype=float)
            return np.concatenate(
                [np.stack([z2.real, z2.imag], axis=1), vals], axis=1)

        dx = (emb(zeta + h) - emb(zeta - h)) / (2 * h)
        dy = (emb(zeta + 1j * h) - emb(zeta - 1j * h)) / (2 * h)
        p00 = np.sum(dx * dx, axis=1)
        p01 = np.sum(dx * dy, axis=1)
        p11 = np.sum(dy * dy, axis=1)
        q = self.order
        ref = ((q ** 2) * np.abs(self.iso.map_at(zeta)) ** (2 * q - 2)
               * self.iso.lambda_at(zeta))
        return {
            "offdiag": float(np.abs(p01 / ref).max()),
            "diag_gap": float(np.abs((p00 - p11) / ref).max()),
            "factor": float(np.abs(0.5 * (p00 + p11) / ref - 1.0).max()),
        }

    def nodewise_check(self):
        """Isothermality of Psi at the image points of the solved grid
        nodes, where D Lambda = (Dw)^{-1} is available from exact data.

        The pullback of the ambient metric through Psi factors exactly as
        Q^2 |x|^(2Q-2) times the Lambda-pullback of tau, so at these points
        the check inherits solve accuracy instead of interpolation noise."""
        iso = self.iso
        jac = _grid_jacobian(iso.grid, iso.w_grid)
        mask = iso.core
        j = jac[mask]
        det = j[:, 0, 0] * j[:, 1, 1] - j[:, 0, 1] * j[:, 1, 0]
        a = np.empty_like(j)
        a[:, 0, 0] = j[:, 1, 1] / det
        a[:, 1, 1] = j[:, 0, 0] / det
        a[:, 0, 1] = -j[:, 0, 1] / det
        a[:, 1, 0] = -j[:, 1, 0] / det
        t = iso.tau.mat[mask]
        p = np.einsum("kca,kcd,kdb->kab", a, t, a)
        lam = 0.5 * (p[:, 0, 0] + p[:, 1, 1])
        return {
            "offdiag": float(np.abs(p[:, 0, 1] / lam).max()),
            "diag_gap": float(np.abs((p[:, 0, 0] - p[:, 1, 1]) / lam).max()),
        }


def conformal_parametrization(branch_fn: Callable, iso: IsothermalMap,
                              order: int, n: int,
                              rho: float = 2.0) -> ConformalChart:
    dom = BranchedDomain(qbar=order, rho=rho)
    return ConformalChart(order=order, n=n, iso=iso, branch_fn=branch_fn,
                          domain=dom)


def conformal_decay(chart: ConformalChart, angles: int = 24,
                    t_top: float = 0.75):
    """Per-annulus suprema of |Psi - (z, 0)| and |lambda - 1| with their
    log-log fits, on circles the flattening grid actually resolves."""
    iso = chart.iso
    q = chart.order
    rows = []
    records = []
    j = 0
    while True:
        t = t_top * 2.0 ** (-j)
        if t ** (1.0 / q) < 8 * iso.grid.h:
            break
        if t ** (1.0 / q) >= iso.grid.radius - CORE_MARGIN * iso.grid.h:
            j += 1
            continue
        theta = 2 * np.pi * (np.arange(angles) + 0.5) / angles
        zc = t * np.exp(1j * theta)
        sup_psi = 0.0
        sup_lam = 0.0
        for s in range(q):
            ss = np.full(len(zc), s)
            w = chart.roots(zc, ss)
            psi = chart.psi(zc, ss)
            lam = chart.conformal_factor(zc, ss)
            flatv = np.concatenate(
                [np.stack([zc.real, zc.imag], axis=1),
                 np.zeros((len(zc), chart.n))], axis=1)
            gap = np.linalg.norm(psi - flatv, axis=1)
            sup_psi = max(sup_psi, float(gap.max()))
            sup_lam = max(sup_lam, float(np.abs(lam - 1.0).max()))
            lambar = iso.lambda_at(w)
            lmap = iso.map_at(w)
            for i in range(len(zc)):
                rows.append({
                    "z_re": float(zc[i].real), "z_im": float(zc[i].imag),
                    "w_re": float(w[i].real), "w_im": float(w[i].imag),
                    "Lambda_re": float(lmap[i].real),
                    "Lambda_im": float(lmap[i].imag),
                    "lambda_bar": float(lambar[i]),
                    "lambda": float(lam[i]),
                    **{f"psi_{k + 1}": float(psi[i, k])
                       for k in range(2 + chart.n)},
                })
        records.append({"annulus": j, "t": t, "sup_psi_gap": sup_psi,
                        "sup_lambda_gap": sup_lam})
        j += 1
    t = np.array([r["t"] for r in records])
    sp = np.array([r["sup_psi_gap"] for r in records])
    sl = np.array([r["sup_lambda_gap"] for r in records])
    floor = 1e-13
    out = {"annuli": records, "rows": rows}
    for name, vals in (("psi", sp), ("lambda", sl)):
        use = vals > floor
        if use.sum() == 0:
            out[f"slope_{name}"] = float("inf")
            out[f"amp_{name}"] = float("-inf")
            out[f"resid_{name}"] = 0.0
        elif use.sum() < 4:
            out[f"slope_{name}"] = float("nan")
            out[f"amp_{name}"] = float("nan")
            out[f"resid_{name}"] = float("nan")
        else:
            s, amp, resid = fit_power_law(t[use], vals[use])
            out[f"slope_{name}"] = s
            out[f"amp_{name}"] = amp
            out[f"resid_{name}"] = resid
        out[f"used_{name}"] = int(use.sum())
    return out

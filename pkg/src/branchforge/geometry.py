"""Geometric primitives: Q-point multisets, 2-planes, and the branched disk.

A Q-point is an (Q, n) float array of unordered values; the metric between two
of them is the minimum over pairings of the root-sum-square of distances,
computed exactly via the assignment problem on squared distances.

A plane is an orthonormal (ambient_dim, 2) basis matrix; distances between
planes are Frobenius distances between orthogonal projectors.

The branched disk of order qbar and radius rho is the set of pairs (z, w) with
w^qbar = z, |z| < rho, carrying the flat cone metric of total angle
2*pi*qbar. Points are identified by the uniformizing coordinate w; per-sheet
labels use the principal root with the cut on the negative real axis.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigViolation


# ---------------------------------------------------------------------------
# Q-points

def qpoint(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[None, :]
    return v


def qdist(p, r) -> float:
    """Optimal-pairing distance between two Q-point multisets.

    min over permutations sigma of sqrt( sum_i |p_i - r_{sigma(i)}|^2 ).
    Exact: assignment on the squared-distance matrix.
    """
    p = qpoint(p)
    r = qpoint(r)
    if p.shape != r.shape:
        raise ValueError("Q-point shapes differ")
    cost = np.sum((p[:, None, :] - r[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    return math.sqrt(float(cost[rows, cols].sum()))


def qmatch(p, r) -> np.ndarray:
    """Permutation sigma realizing qdist: r[sigma] pairs with p in order."""
    p = qpoint(p)
    r = qpoint(r)
    cost = np.sum((p[:, None, :] - r[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(len(rows), dtype=int)
    out[rows] = cols
    return out


def eta_mean(p) -> np.ndarray:
    """Average of the values of a Q-point."""
    return qpoint(p).mean(axis=0)


def qspread(p) -> float:
    """Diameter of the value multiset (max pairwise distance)."""
    p = qpoint(p)
    d = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=2)
    return float(d.max())


# ---------------------------------------------------------------------------
# Planes

def orthonormalize(vectors) -> np.ndarray:
    """Orthonormal columns spanning the input columns' space, via QR with a
    sign convention making the result deterministic. Dependent columns are
    dropped, so feeding [basis | identity] completes a full frame."""
    a = np.asarray(vectors, dtype=float)
    if a.ndim != 2:
        raise ValueError("expected spanning column vectors")
    m = a.shape[0]
    cols = []
    for j in range(a.shape[1]):
        v = a[:, j].copy()
        for u in cols:
            v -= (u @ v) * u
        nv = np.linalg.norm(v)
        if nv > 1e-12 * max(1.0, np.linalg.norm(a[:, j])):
            cols.append(v / nv)
        if len(cols) == m:
            break
    out = np.stack(cols, axis=1)
    return out


def base_plane(dim: int) -> np.ndarray:
    """The horizontal coordinate 2-plane in R^dim."""
    b = np.zeros((dim, 2))
    b[0, 0] = 1.0
    b[1, 1] = 1.0
    return b


def graph_plane(a: np.ndarray) -> np.ndarray:
    """Plane of the graph of the linear map x -> a @ x, a of shape (n, 2)."""
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    span = np.zeros((2 + n, 2))
    span[0, 0] = 1.0
    span[1, 1] = 1.0
    span[2:, 0] = a[:, 0]
    span[2:, 1] = a[:, 1]
    return orthonormalize(span)


def projector(basis: np.ndarray) -> np.ndarray:
    return basis @ basis.T


def plane_distance(b1: np.ndarray, b2: np.ndarray) -> float:
    """Frobenius distance of the orthogonal projectors."""
    return float(np.linalg.norm(projector(b1) - projector(b2)))


def project_tangential(basis: np.ndarray, v) -> np.ndarray:
    """Coordinates of v in the plane's basis (shape (..., 2))."""
    return np.tensordot(np.asarray(v, dtype=float), basis, axes=([-1], [0]))


def project_normal(basis: np.ndarray, v) -> np.ndarray:
    """Component of v orthogonal to the plane (ambient coordinates)."""
    v = np.asarray(v, dtype=float)
    return v - project_tangential(basis, v) @ basis.T


def simple_2vector_inner(b1: np.ndarray, b2: np.ndarray) -> float:
    """Inner product of the unit simple 2-vectors of two oriented planes:
    det of the 2x2 Gram matrix of the orthonormal bases."""
    g = b1.T @ b2
    return float(g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0])


# ---------------------------------------------------------------------------
# Branched disk

@dataclass(frozen=True)
class BranchedDomain:
    """Branched disk of order qbar and radius rho over the z-plane."""

    qbar: int = 2
    rho: float = 2.0

    def __post_init__(self):
        if self.qbar < 1:
            raise ConfigViolation("branch order must be >= 1")
        if self.rho <= 0:
            raise ConfigViolation("branched disk radius must be positive")

    def contains_z(self, z: complex) -> bool:
        return abs(z) < self.rho

    def roots(self, z: complex) -> np.ndarray:
        """All qbar w-roots over z, ordered by sheet label."""
        return np.array([self.root(z, s) for s in range(self.qbar)])

    def root(self, z, sheet: int):
        """w over z on the given sheet; principal branch, cut on the negative
        real axis, sheets advancing counterclockwise. Vectorized over z."""
        za = np.asarray(z, dtype=complex)
        r = np.abs(za) ** (1.0 / self.qbar)
        th = np.angle(za) / self.qbar + 2.0 * math.pi * (sheet % self.qbar) / self.qbar
        out = r * np.exp(1j * th)
        if out.ndim == 0:
            return complex(out)
        return out

    def sheet_of(self, z: complex, w: complex) -> int:
        """Sheet label of the root w over z (nearest label; roots are
        separated by 2|w| sin(pi/qbar) so this is stable away from 0)."""
        if self.qbar == 1:
            return 0
        if z == 0:
            return 0
        th = cmath.phase(w) - cmath.phase(z) / self.qbar
        s = round(th * self.qbar / (2.0 * math.pi))
        return int(s % self.qbar)

    def continue_root(self, z0: complex, w0: complex, z1: complex,
                      steps: int = 0) -> complex:
        """Follow the root w along the straight segment z0 -> z1.

        The segment must avoid 0 (dyadic squares guarantee it). Step count is
        chosen so the per-step argument change stays well under pi/qbar.
        """
        if self.qbar == 1:
            return z1
        if steps <= 0:
            # bound the total winding by the segment's angular extent
            dmin = _segment_distance_to_origin(z0, z1)
            if dmin <= 0:
                raise ValueError("root continuation through the cone point")
            steps = 8 + int(4 * abs(z1 - z0) / dmin)
        w = w0
        for i in range(1, steps + 1):
            z = z0 + (z1 - z0) * (i / steps)
            cand = self.roots(z)
            w = cand[np.argmin(np.abs(cand - w))]
        return complex(w)

    def cone_angle(self, z: complex, w: complex) -> float:
        """Unrolled angle coordinate in [0, 2*pi*qbar)."""
        th = cmath.phase(w) % (2.0 * math.pi)
        return th * self.qbar % (2.0 * math.pi * self.qbar)

    def geodesic_distance(self, p1, p2) -> float:
        """Flat-cone distance between points (z, w) of the branched disk.

        Either the straight chord in the unrolled cone (when the angular gap
        is at most pi) or the path through the cone point.
        """
        z1, w1 = p1
        z2, w2 = p2
        r1, r2 = abs(z1), abs(z2)
        if r1 == 0 or r2 == 0:
            return r1 + r2
        t1 = self.cone_angle(z1, w1)
        t2 = self.cone_angle(z2, w2)
        gap = abs(t1 - t2)
        gap = min(gap, 2.0 * math.pi * self.qbar - gap)
        through_vertex = r1 + r2
        if gap <= math.pi:
            chord = math.sqrt(r1 * r1 + r2 * r2 - 2 * r1 * r2 * math.cos(gap))
            return min(chord, through_vertex)
        return through_vertex

    def chart_radius(self, z0: complex) -> float:
        """Largest r with qbar pairwise-disjoint embedded disks over B_r(z0):
        min(|z0|, rho - |z0|)."""
        return min(abs(z0), self.rho - abs(z0))

    def chart_disks_disjoint(self, z0: complex, r: float) -> bool:
        return 0 < r <= self.chart_radius(z0)


def _segment_distance_to_origin(z0: complex, z1: complex) -> float:
    dz = z1 - z0
    L2 = abs(dz) ** 2
    if L2 == 0:
        return abs(z0)
    t = -((z0.real * dz.real) + (z0.imag * dz.imag)) / L2
    t = min(1.0, max(0.0, t))
    return abs(z0 + t * dz)

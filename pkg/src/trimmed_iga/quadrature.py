"""Gauss rules on reference boxes and simplices, and push-forwards through tiles.

All volume rules live on the unit reference domain: ``[0, 1]^d`` for boxes and
the unit triangle ``{x >= 0, y >= 0, x + y <= 1}`` for simplices.  Tile maps
are Lagrange interpolants of degree ``r`` on equidistant lattices; pushing a
rule through a tile multiplies each weight by the Jacobian determinant of the
tile map at the quadrature point.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np


@dataclass(frozen=True)
class QuadratureRule:
    """Points and weights on a reference domain."""

    points: np.ndarray  # (m, d)
    weights: np.ndarray  # (m,)

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class BoundaryQuadrature:
    """Quadrature on a boundary face, carrying the physical surface measure.

    ``weights`` already include the surface Jacobian, so summing them gives the
    physical measure of the face.  ``normals`` are unit vectors in physical
    space, oriented outward from the kept region.
    """

    param_points: np.ndarray  # (m, d) points in the parametric domain
    phys_points: np.ndarray  # (m, d) mapped physical points
    weights: np.ndarray  # (m,)
    normals: np.ndarray  # (m, d)


@lru_cache(maxsize=None)
def _gauss_1d(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes/weights of the n-point Gauss-Legendre rule on [0, 1].

    Nodes are computed by Newton iteration on the Legendre polynomial,
    starting from the Chebyshev-like initial guess; iteration stops when the
    update drops below 1e-15.
    """
    if not 1 <= n <= 30:
        raise ValueError(f"Gauss-Legendre order must be in [1, 30], got {n}")
    k = np.arange(1, n + 1)
    x = np.cos(np.pi * (4 * k - 1) / (4 * n + 2))
    for _ in range(100):
        # Evaluate P_n and P_{n-1} by the three-term recurrence.
        p0 = np.ones_like(x)
        p1 = x.copy()
        if n == 1:
            pn, pn1 = p1, p0
        else:
            for m in range(2, n + 1):
                p0, p1 = p1, ((2 * m - 1) * x * p1 - (m - 1) * p0) / m
            pn, pn1 = p1, p0
        dpn = n * (x * pn - pn1) / (x * x - 1.0)
        dx = pn / dpn
        x -= dx
        if np.max(np.abs(dx)) < 1e-15:
            break
    # Final derivative evaluation at the converged nodes for the weights.
    p0 = np.ones_like(x)
    p1 = x.copy()
    if n == 1:
        pn, pn1 = p1, p0
    else:
        for m in range(2, n + 1):
            p0, p1 = p1, ((2 * m - 1) * x * p1 - (m - 1) * p0) / m
        pn, pn1 = p1, p0
    dpn = n * (x * pn - pn1) / (x * x - 1.0)
    w = 2.0 / ((1.0 - x * x) * dpn * dpn)
    order = np.argsort(x)
    x, w = x[order], w[order]
    # Map from [-1, 1] to [0, 1].
    return (x + 1.0) / 2.0, w / 2.0


def _tensor_grid(arrays_x: list[np.ndarray], arrays_w: list[np.ndarray]):
    """Tensor product with the first direction fastest."""
    d = len(arrays_x)
    grids = np.meshgrid(*arrays_x, indexing="ij")
    wgrids = np.meshgrid(*arrays_w, indexing="ij")
    # 'ij' indexing makes the last axis vary fastest under C-order ravel, so
    # transpose to keep direction 0 fastest.
    pts = np.stack([g.transpose(*range(d - 1, -1, -1)).ravel() for g in grids], axis=1)
    w = np.ones(pts.shape[0])
    for wg in wgrids:
        w = w * wg.transpose(*range(d - 1, -1, -1)).ravel()
    return pts, w


def gauss_legendre(n: int, d: int = 1) -> QuadratureRule:
    """Tensor Gauss-Legendre rule with n points per direction on [0, 1]^d."""
    x, w = _gauss_1d(n)
    if d == 1:
        return QuadratureRule(x[:, None].copy(), w.copy())
    pts, ww = _tensor_grid([x] * d, [w] * d)
    return QuadratureRule(pts, ww)


def collapsed_triangle(n: int) -> QuadratureRule:
    """Duffy-collapsed Gauss rule on the unit triangle {x, y >= 0, x + y <= 1}.

    The square rule (u, v) is mapped through (x, y) = (u, v (1 - u)) and the
    weights pick up the collapse factor (1 - u).  The result integrates
    polynomials of total degree 2n - 2 exactly.
    """
    x, w = _gauss_1d(n)
    u = np.repeat(x, n)
    v = np.tile(x, n)
    wu = np.repeat(w, n)
    wv = np.tile(w, n)
    pts = np.stack([u, v * (1.0 - u)], axis=1)
    return QuadratureRule(pts, wu * wv * (1.0 - u))


# ---------------------------------------------------------------------------
# Lagrange bases for tile maps
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _equidistant_inv_weights(r: int) -> np.ndarray:
    nodes = np.linspace(0.0, 1.0, r + 1)
    w = np.empty(r + 1)
    for i in range(r + 1):
        w[i] = 1.0 / np.prod(nodes[i] - np.delete(nodes, i))
    return w


def lagrange_1d(r: int, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values and derivatives of the degree-r equidistant Lagrange basis.

    Returns arrays of shape (len(ts), r + 1).
    """
    ts = np.asarray(ts, dtype=float)
    nodes = np.linspace(0.0, 1.0, r + 1)
    wbar = _equidistant_inv_weights(r)
    m = ts.shape[0]
    diff = ts[:, None] - nodes[None, :]
    vals = np.empty((m, r + 1))
    ders = np.empty((m, r + 1))
    hit = np.abs(diff) < 5e-15
    regular = ~hit.any(axis=1)
    if regular.any():
        dreg = diff[regular]
        prod = np.prod(dreg, axis=1)
        dprod = prod[:, None] * np.sum(1.0 / dreg, axis=1)[:, None]
        vals[regular] = prod[:, None] * wbar[None, :] / dreg
        ders[regular] = wbar[None, :] * (dprod * dreg - prod[:, None]) / (dreg * dreg)
    special = np.nonzero(~regular)[0]
    for row in special:
        j = int(np.argmin(np.abs(diff[row])))
        vals[row] = 0.0
        vals[row, j] = 1.0
        dj = np.zeros(r + 1)
        for i in range(r + 1):
            if i != j:
                dj[i] = (wbar[i] / wbar[j]) / (nodes[j] - nodes[i])
        dj[j] = -np.sum(dj)
        ders[row] = dj
    return vals, ders


def tensor_lagrange(r: int, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tensor-product Lagrange basis on [0, 1]^d at the given points.

    Returns (values (m, (r+1)^d), gradients (m, (r+1)^d, d)) with the
    direction-0 node index varying fastest in the basis ordering.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    m, d = pts.shape
    vals_d = []
    ders_d = []
    for k in range(d):
        v, dv = lagrange_1d(r, pts[:, k])
        vals_d.append(v)
        ders_d.append(dv)
    nb = (r + 1) ** d
    values = np.ones((m, 1))
    for k in range(d - 1, -1, -1):
        values = np.einsum("mi,mj->mij", values, vals_d[k]).reshape(m, -1)
    grads = np.empty((m, nb, d))
    for g in range(d):
        acc = np.ones((m, 1))
        for k in range(d - 1, -1, -1):
            factor = ders_d[k] if k == g else vals_d[k]
            acc = np.einsum("mi,mj->mij", acc, factor).reshape(m, -1)
        grads[:, :, g] = acc
    return values, grads


def simplex_lattice(r: int) -> np.ndarray:
    """Equidistant lattice on the unit triangle, ordered j (y) outer, i inner."""
    out = []
    for j in range(r + 1):
        for i in range(r + 1 - j):
            out.append((i / r, j / r))
    return np.array(out)


def prism_lagrange(r: int, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lagrange basis on the unit prism (triangle x interval).

    Points are (x, y, z) with (x, y) in the unit triangle and z in [0, 1].
    Node ordering is z-layer outer, :func:`simplex_lattice` order inner.
    Returns values (m, n_nodes) and gradients (m, n_nodes, 3).
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    sv, sg = simplex_lagrange(r, pts[:, :2])
    lv, ld = lagrange_1d(r, pts[:, 2])
    m = pts.shape[0]
    vals = (lv[:, :, None] * sv[:, None, :]).reshape(m, -1)
    gx = (lv[:, :, None] * sg[:, None, :, 0]).reshape(m, -1)
    gy = (lv[:, :, None] * sg[:, None, :, 1]).reshape(m, -1)
    gz = (ld[:, :, None] * sv[:, None, :]).reshape(m, -1)
    return vals, np.stack([gx, gy, gz], axis=2)


@lru_cache(maxsize=None)
def _simplex_vandermonde_inv(r: int) -> tuple[np.ndarray, tuple]:
    exps = tuple((a, b) for b in range(r + 1) for a in range(r + 1 - b))
    lat = simplex_lattice(r)
    V = np.stack([lat[:, 0] ** a * lat[:, 1] ** b for a, b in exps], axis=1)
    return np.linalg.inv(V), exps

def simplex_lagrange(r: int, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Degree-r Lagrange basis on the unit triangle at the given points.

    Node ordering matches :func:`simplex_lattice`.  Returns values
    (m, n_nodes) and gradients (m, n_nodes, 2).
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    Vinv, exps = _simplex_vandermonde_inv(r)
    x, y = pts[:, 0], pts[:, 1]
    mono = np.stack([x**a * y**b for a, b in exps], axis=1)
    dmx = np.stack(
        [a * x ** max(a - 1, 0) * y**b if a > 0 else np.zeros_like(x) for a, b in exps],
        axis=1,
    )
    dmy = np.stack(
        [b * x**a * y ** max(b - 1, 0) if b > 0 else np.zeros_like(x) for a, b in exps],
        axis=1,
    )
    vals = mono @ Vinv
    grads = np.stack([dmx @ Vinv, dmy @ Vinv], axis=2)
    return vals, grads


# ---------------------------------------------------------------------------
# Push-forward of rules through tiles and boundary faces
# ---------------------------------------------------------------------------


def tile_reference_rule(tile, n: int) -> QuadratureRule:
    """Reference rule matching the tile kind."""
    if tile.kind == "triangle":
        return collapsed_triangle(n)
    if tile.kind == "prism":
        tri = collapsed_triangle(n)
        z, wz = _gauss_1d(n)
        nt = tri.points.shape[0]
        pts = np.concatenate(
            [np.repeat(tri.points, n, axis=0), np.tile(z, nt)[:, None]], axis=1
        )
        return QuadratureRule(pts, np.repeat(tri.weights, n) * np.tile(wz, nt))
    d = 3 if tile.kind == "hex" else 2
    return gauss_legendre(n, d)


def tile_map(tile, ref_pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the tile map and its Jacobian at reference points.

    Returns (points (m, d), jacobians (m, d, d)); d is the parametric
    dimension of the tile nodes.
    """
    if tile.kind == "triangle":
        vals, grads = simplex_lagrange(tile.degree, ref_pts)
    elif tile.kind == "prism":
        vals, grads = prism_lagrange(tile.degree, ref_pts)
    else:
        vals, grads = tensor_lagrange(tile.degree, ref_pts)
    pts = vals @ tile.nodes
    jac = np.einsum("mng,nd->mdg", grads, tile.nodes)
    return pts, jac


def map_through_tile(tile, rule: QuadratureRule) -> QuadratureRule:
    """Push a reference rule through a tile map.

    The returned points live in the tile's parametric domain and the weights
    carry the tile Jacobian determinant.  A non-positive determinant at any
    quadrature point is refused.
    """
    pts, jac = tile_map(tile, rule.points)
    det = np.linalg.det(jac)
    if np.any(det <= 0.0):
        raise ValueError(
            f"tile map has non-positive Jacobian (min {det.min():.3e}) at a quadrature point"
        )
    return QuadratureRule(pts, rule.weights * det)


def boundary_rule(face, geo_map, n: int) -> BoundaryQuadrature:
    """Quadrature along a boundary face with physical measure and unit normals.

    ``face`` is a curve tile (2D domains) or a surface tile (3D domains); its
    ``orient`` field fixes which side of the face is outward.
    """
    d = face.nodes.shape[1]
    if d == 2:
        rule = gauss_legendre(n, 1)
        vals, ders = lagrange_1d(face.degree, rule.points[:, 0])
        ppts = vals @ face.nodes
        tan_param = ders @ face.nodes
        phys = geo_map.map_point(ppts)
        J = geo_map.jacobian(ppts)
        tan = np.einsum("mij,mj->mi", J, tan_param)
        norm_t = np.linalg.norm(tan, axis=1)
        normals = np.stack([tan[:, 1], -tan[:, 0]], axis=1) / norm_t[:, None]
        return BoundaryQuadrature(ppts, phys, rule.weights * norm_t, face.orient * normals)
    if d == 3:
        q = face.degree
        if face.nodes.shape[0] == (q + 1) * (q + 2) // 2:
            rule = collapsed_triangle(n)
            vals, grads = simplex_lagrange(q, rule.points)
        else:
            rule = gauss_legendre(n, 2)
            vals, grads = tensor_lagrange(q, rule.points)
        ppts = vals @ face.nodes
        t1 = np.einsum("mn,nd->md", grads[:, :, 0], face.nodes)
        t2 = np.einsum("mn,nd->md", grads[:, :, 1], face.nodes)
        phys = geo_map.map_point(ppts)
        J = geo_map.jacobian(ppts)
        T1 = np.einsum("mij,mj->mi", J, t1)
        T2 = np.einsum("mij,mj->mi", J, t2)
        cross = np.cross(T1, T2)
        area = np.linalg.norm(cross, axis=1)
        return BoundaryQuadrature(ppts, phys, rule.weights * area, face.orient * cross / area[:, None])
    raise ValueError(f"unsupported face dimension {d}")

"""Tensor-product B-spline spaces on open knot vectors, and geometry maps.

Every parametric domain here is the unit box ``[0, 1]^d``; the physical
placement of the patch (a box, a smoothly distorted box, or a general spline
geometry) is the job of the geometry map.  Basis evaluation uses the Cox-de
Boor recursion; no Bezier extraction is performed anywhere.

Index conventions (used consistently across the package): tensor indices are
flattened with direction 0 fastest, i.e. ``flat = i0 + n0*(i1 + n1*i2)``,
both for basis functions and for elements.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product

import numpy as np

from .quadrature import gauss_legendre


@dataclass(frozen=True)
class KnotVector:
    """Open knot vector with its polynomial degree.

    Raises
    ------
    ValueError
        If the knots are not nondecreasing, not open (first and last knot
        repeated degree + 1 times), an interior knot exceeds multiplicity
        ``degree``, or there is no nonempty span.
    """

    degree: int
    knots: np.ndarray

    def __post_init__(self):
        p = self.degree
        t = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", t)
        if p < 0:
            raise ValueError("degree must be nonnegative")
        if len(t) < 2 * (p + 1):
            raise ValueError("knot vector too short for an open vector")
        if np.any(np.diff(t) < 0):
            raise ValueError("knots must be nondecreasing")
        if not (np.all(t[: p + 1] == t[0]) and np.all(t[-(p + 1):] == t[-1])):
            raise ValueError("knot vector must be open (end knots repeated degree+1 times)")
        interior = t[p + 1 : len(t) - p - 1]
        if interior.size:
            uniq, counts = np.unique(interior, return_counts=True)
            if np.any(counts > p):
                raise ValueError("interior knot multiplicity exceeds the degree")
            if uniq.size and (uniq[0] <= t[0] or uniq[-1] >= t[-1]):
                raise ValueError("interior knots must lie strictly inside the end knots")
        if t[0] == t[-1]:
            raise ValueError("knot vector has no nonempty span")

    @property
    def num_basis(self) -> int:
        return len(self.knots) - self.degree - 1

    @property
    def breakpoints(self) -> np.ndarray:
        return np.unique(self.knots)

    @property
    def num_elements(self) -> int:
        return len(self.breakpoints) - 1

    def span_of_element(self, e: int) -> int:
        """Knot-span index whose half-open interval is element ``e``."""
        lo = self.breakpoints[e]
        # Rightmost knot equal to lo.
        return int(np.searchsorted(self.knots, lo, side="right") - 1)

    def element_bounds(self, e: int) -> tuple[float, float]:
        bp = self.breakpoints
        return float(bp[e]), float(bp[e + 1])

    def greville(self) -> np.ndarray:
        """Greville abscissae (knot averages), one per basis function."""
        p = self.degree
        if p == 0:
            return 0.5 * (self.knots[:-1] + self.knots[1:])
        n = self.num_basis
        return np.array([np.mean(self.knots[i + 1 : i + p + 1]) for i in range(n)])


def uniform_open_knots(degree: int, num_elements: int) -> KnotVector:
    """Open knot vector with ``num_elements`` uniform spans on [0, 1]."""
    interior = np.linspace(0.0, 1.0, num_elements + 1)[1:-1]
    knots = np.concatenate(
        [np.zeros(degree + 1), interior, np.ones(degree + 1)]
    )
    return KnotVector(degree, knots)


def basis_values_derivs(kv: KnotVector, span: int, us: np.ndarray):
    """Values and first derivatives of the degree-p basis active on a span.

    Parameters
    ----------
    span : int
        Knot-span index; the active functions are ``span - p .. span``.
    us : array
        Evaluation points, all inside (or on the closure of) the span.

    Returns
    -------
    (values, derivs) : arrays of shape (len(us), p + 1)
        One-sided limits from inside the span are used on its boundary.
    """
    t = kv.knots
    p = kv.degree
    us = np.asarray(us, dtype=float)
    m = us.shape[0]
    N = np.ones((m, 1))
    Nlower = N
    for q in range(1, p + 1):
        f = span - q + np.arange(q + 1)
        d1 = t[f + q] - t[f]
        d2 = t[f + q + 1] - t[f + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(d1 > 0.0, (us[:, None] - t[f][None, :]) / d1, 0.0)
            b = np.where(d2 > 0.0, (t[f + q + 1][None, :] - us[:, None]) / d2, 0.0)
        prev_left = np.concatenate([np.zeros((m, 1)), N], axis=1)
        prev_right = np.concatenate([N, np.zeros((m, 1))], axis=1)
        if q == p:
            Nlower = N
        N = a * prev_left + b * prev_right
    if p == 0:
        return N, np.zeros_like(N)
    f = span - p + np.arange(p + 1)
    d1 = t[f + p] - t[f]
    d2 = t[f + p + 1] - t[f + 1]
    low_left = np.concatenate([np.zeros((m, 1)), Nlower], axis=1)
    low_right = np.concatenate([Nlower, np.zeros((m, 1))], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        term1 = np.where(d1 > 0.0, low_left / d1, 0.0)
        term2 = np.where(d2 > 0.0, low_right / d2, 0.0)
    return N, p * (term1 - term2)


class TensorBSplineSpace:
    """Tensor-product spline space on ``[0, 1]^d``."""

    def __init__(self, knot_vectors: tuple[KnotVector, ...]):
        self.kvs = tuple(knot_vectors)
        self.dim = len(self.kvs)
        self.degrees = tuple(kv.degree for kv in self.kvs)
        self.n_per_dir = tuple(kv.num_basis for kv in self.kvs)
        self.num_basis = int(np.prod(self.n_per_dir))
        self.nel_per_dir = tuple(kv.num_elements for kv in self.kvs)
        self.num_elements = int(np.prod(self.nel_per_dir))

    @classmethod
    def uniform(cls, degrees, num_elements) -> "TensorBSplineSpace":
        if np.isscalar(degrees):
            degrees = (degrees,) * len(np.atleast_1d(num_elements))
        return cls(tuple(uniform_open_knots(p, n) for p, n in zip(degrees, np.atleast_1d(num_elements))))

    # -- index bookkeeping ---------------------------------------------------

    def element_multi_index(self, e: int) -> tuple[int, ...]:
        out = []
        for n in self.nel_per_dir:
            out.append(e % n)
            e //= n
        return tuple(out)

    def element_flat_index(self, mi) -> int:
        e = 0
        for n, i in zip(reversed(self.nel_per_dir), reversed(tuple(mi))):
            e = e * n + i
        return e

    def function_multi_index(self, f: int) -> tuple[int, ...]:
        out = []
        for n in self.n_per_dir:
            out.append(f % n)
            f //= n
        return tuple(out)

    def function_flat_index(self, mi) -> int:
        f = 0
        for n, i in zip(reversed(self.n_per_dir), reversed(tuple(mi))):
            f = f * n + i
        return f

    def element_box(self, e: int) -> tuple[np.ndarray, np.ndarray]:
        mi = self.element_multi_index(e)
        lo = np.array([self.kvs[k].element_bounds(i)[0] for k, i in enumerate(mi)])
        hi = np.array([self.kvs[k].element_bounds(i)[1] for k, i in enumerate(mi)])
        return lo, hi

    # -- evaluation ----------------------------------------------------------

    def eval_basis(self, e: int, pts: np.ndarray):
        """Basis values/gradients of the functions active on element ``e``.

        Returns (indices, values, grads): flat global indices (nb,), values
        (m, nb) and parametric gradients (m, nb, d), with the direction-0
        local index varying fastest.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        m = pts.shape[0]
        mi = self.element_multi_index(e)
        vals_d, ders_d, idx_d = [], [], []
        for k, ei in enumerate(mi):
            kv = self.kvs[k]
            span = kv.span_of_element(ei)
            v, dv = basis_values_derivs(kv, span, pts[:, k])
            vals_d.append(v)
            ders_d.append(dv)
            idx_d.append(span - kv.degree + np.arange(kv.degree + 1))
        values = np.ones((m, 1))
        for k in range(self.dim - 1, -1, -1):
            values = np.einsum("mi,mj->mij", values, vals_d[k]).reshape(m, -1)
        nb = values.shape[1]
        grads = np.empty((m, nb, self.dim))
        for g in range(self.dim):
            acc = np.ones((m, 1))
            for k in range(self.dim - 1, -1, -1):
                factor = ders_d[k] if k == g else vals_d[k]
                acc = np.einsum("mi,mj->mij", acc, factor).reshape(m, -1)
            grads[:, :, g] = acc
        # Flat global indices with the same fastest-first ordering as the columns.
        idx = idx_d[-1].astype(np.int64)
        for k in range(self.dim - 2, -1, -1):
            idx = (idx[:, None] * self.n_per_dir[k] + idx_d[k][None, :]).reshape(-1)
        return idx, values, grads

    def active_elements_of_function(self, f: int) -> np.ndarray:
        """Flat indices of the elements in the support of basis function ``f``."""
        mi = self.function_multi_index(f)
        per_dir = []
        for k, g in enumerate(mi):
            kv = self.kvs[k]
            els = []
            for e in range(kv.num_elements):
                s = kv.span_of_element(e)
                if s - kv.degree <= g <= s:
                    els.append(e)
            per_dir.append(els)
        out = []
        for combo in product(*reversed(per_dir)):
            out.append(self.element_flat_index(tuple(reversed(combo))))
        return np.array(sorted(out), dtype=np.int64)

    def tabulate_elements_1d(self, k: int, nq: int):
        """Per-element Gauss tabulation along direction ``k``.

        Returns (points (nel, nq), scale (nel,), values (nel, nq, p+1),
        derivs (nel, nq, p+1), first_index (nel,)); ``scale`` is the span
        length (the 1D reference-to-element Jacobian), and quadrature weights
        on the reference [0, 1] must be multiplied by it.
        """
        kv = self.kvs[k]
        rule = gauss_legendre(nq, 1)
        xs, ws = rule.points[:, 0], rule.weights
        nel = kv.num_elements
        p = kv.degree
        pts = np.empty((nel, nq))
        scale = np.empty(nel)
        vals = np.empty((nel, nq, p + 1))
        ders = np.empty((nel, nq, p + 1))
        first = np.empty(nel, dtype=np.int64)
        for e in range(nel):
            a, b = kv.element_bounds(e)
            u = a + xs * (b - a)
            span = kv.span_of_element(e)
            v, dv = basis_values_derivs(kv, span, u)
            pts[e], scale[e], vals[e], ders[e] = u, b - a, v, dv
            first[e] = span - p
        return pts, scale, vals, ders, first, ws


# ---------------------------------------------------------------------------
# Geometry maps
# ---------------------------------------------------------------------------


class GeometryMap:
    """Base class: smooth map from the parametric box [0,1]^d to physical space."""

    kind = "abstract"
    dim: int

    def map_point(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def physical_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box of the physical patch."""
        raise NotImplementedError

    @property
    def diameter(self) -> float:
        lo, hi = self.physical_box()
        return float(np.linalg.norm(hi - lo))


class IdentityBoxMap(GeometryMap):
    """Affine placement of the parametric box onto a physical box."""

    kind = "identity-box"

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if np.any(self.hi <= self.lo):
            raise ValueError("physical box must have positive extents")
        self.dim = len(self.lo)
        self._ext = self.hi - self.lo

    def map_point(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return self.lo + pts * self._ext

    def jacobian(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        J = np.zeros((pts.shape[0], self.dim, self.dim))
        J[:, np.arange(self.dim), np.arange(self.dim)] = self._ext
        return J

    def physical_box(self):
        return self.lo.copy(), self.hi.copy()


class PolynomialDistortionMap(GeometryMap):
    """Box placement composed with a fixed interior polynomial distortion.

    The perturbation vanishes on the whole boundary of the box (so corners and
    edges are preserved) and its magnitude is a few percent of the box size;
    the Jacobian stays strongly diagonally dominant, hence invertible.
    """

    kind = "polynomial-distortion"

    def __init__(self, lo, hi, amplitude: float = 0.5):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.dim = len(self.lo)
        if self.dim != 2:
            raise ValueError("polynomial distortion preset is two-dimensional")
        self.amplitude = float(amplitude)
        self._ext = self.hi - self.lo
        self._c = self.amplitude * float(np.max(self._ext))

    def map_point(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        u, v = pts[:, 0], pts[:, 1]
        su, sv = u * (1 - u), v * (1 - v)
        out = self.lo + pts * self._ext
        out = out.copy()
        out[:, 0] += self._c * su * sv * (1 - 2 * v)
        out[:, 1] -= self._c * su * sv * (1 - 2 * u)
        return out

    def jacobian(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        u, v = pts[:, 0], pts[:, 1]
        su, sv = u * (1 - u), v * (1 - v)
        dsu, dsv = 1 - 2 * u, 1 - 2 * v
        J = np.zeros((pts.shape[0], 2, 2))
        J[:, 0, 0] = self._ext[0] + self._c * dsu * sv * dsv
        J[:, 0, 1] = self._c * su * (dsv * dsv - 2 * sv)
        J[:, 1, 0] = -self._c * (dsu * dsu - 2 * su) * sv
        J[:, 1, 1] = self._ext[1] - self._c * su * dsv * dsu
        return J

    def physical_box(self):
        # The boundary is fixed, so the image equals the box.
        return self.lo.copy(), self.hi.copy()


class SplineGeometryMap(GeometryMap):
    """Geometry defined by control coefficients over a spline space."""

    kind = "spline-coefficients"

    def __init__(self, space: TensorBSplineSpace, coeffs: np.ndarray):
        self.space = space
        self.coeffs = np.asarray(coeffs, dtype=float)
        if self.coeffs.shape[0] != space.num_basis:
            raise ValueError("coefficient count does not match the space dimension")
        self.dim = self.coeffs.shape[1]

    def _locate(self, pts):
        """Element index per point (points may sit on element boundaries)."""
        els = np.zeros(pts.shape[0], dtype=np.int64)
        stride = 1
        for k, kv in enumerate(self.space.kvs):
            bp = kv.breakpoints
            e = np.clip(np.searchsorted(bp, pts[:, k], side="right") - 1, 0, kv.num_elements - 1)
            els += e * stride
            stride *= kv.num_elements
        return els

    def _eval(self, pts, want_jac):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        els = self._locate(pts)
        out = np.empty((pts.shape[0], self.dim))
        jac = np.empty((pts.shape[0], self.dim, self.space.dim)) if want_jac else None
        for e in np.unique(els):
            sel = els == e
            idx, vals, grads = self.space.eval_basis(int(e), pts[sel])
            out[sel] = vals @ self.coeffs[idx]
            if want_jac:
                jac[sel] = np.einsum("mng,nd->mdg", grads, self.coeffs[idx])
        return out, jac

    def map_point(self, pts):
        return self._eval(pts, False)[0]

    def jacobian(self, pts):
        return self._eval(pts, True)[1]

    def physical_box(self):
        return self.coeffs.min(axis=0), self.coeffs.max(axis=0)


def greville_identity_coeffs(space: TensorBSplineSpace) -> np.ndarray:
    """Control coefficients reproducing the identity on the parametric box."""
    grevs = [kv.greville() for kv in space.kvs]
    coeffs = np.empty((space.num_basis, space.dim))
    for f in range(space.num_basis):
        mi = space.function_multi_index(f)
        coeffs[f] = [grevs[k][i] for k, i in enumerate(mi)]
    return coeffs


@dataclass
class BezierMesh:
    """The Bezier elements of a space together with their mapped size."""

    space: TensorBSplineSpace
    geo_map: GeometryMap
    h: float = field(init=False)

    def __post_init__(self):
        self.h = self._max_diameter()

    def _max_diameter(self) -> float:
        space, gmap = self.space, self.geo_map
        corners_per_dir = [kv.breakpoints for kv in space.kvs]
        grids = np.meshgrid(*corners_per_dir, indexing="ij")
        nodes = np.stack([g.ravel() for g in grids], axis=1)
        phys = gmap.map_point(nodes)
        shape = tuple(len(c) for c in corners_per_dir)
        phys = phys.reshape(*shape, space.dim)
        hmax = 0.0
        d = space.dim
        for e in range(space.num_elements):
            mi = space.element_multi_index(e)
            sl = tuple(slice(i, i + 2) for i in mi)
            cs = phys[sl].reshape(-1, d)
            dists = np.linalg.norm(cs[:, None, :] - cs[None, :, :], axis=2)
            hmax = max(hmax, float(dists.max()))
        return hmax

    @property
    def num_elements(self) -> int:
        return self.space.num_elements

    def element_box(self, e: int):
        return self.space.element_box(e)

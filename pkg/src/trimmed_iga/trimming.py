"""Implicit trimming of a spline patch: classification and intersections.

A trimming boundary is the zero set of a signed-distance-like function
``phi`` over physical space; ``keep_side`` says which sign survives.  Element
classification is sample based: each Bezier element is probed on a closed
tensor grid (corners, edges and interior points) and labeled Interior, Cut or
Exterior, with a tolerance band ``eps_geo`` around the zero set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .splines import BezierMesh, GeometryMap, TensorBSplineSpace

INTERIOR, CUT, EXTERIOR = 0, 1, 2
_LABEL_NAMES = {INTERIOR: "interior", CUT: "cut", EXTERIOR: "exterior"}


class TrimmingError(RuntimeError):
    """Raised for degenerate trimming configurations (tangential cuts etc.)."""


@dataclass(frozen=True)
class TrimmingBoundary:
    """Implicitly defined trimming surface.

    ``phi`` maps physical points (m, d) to values (m,); ``grad_phi`` returns
    (m, d).  The kept region is where ``phi`` is negative or positive
    according to ``keep_side``.  ``scale`` is a characteristic length used to
    nondimensionalize tolerances (the radius for circles and spheres).
    """

    phi: Callable[[np.ndarray], np.ndarray]
    grad_phi: Callable[[np.ndarray], np.ndarray]
    keep_side: str
    scale: float
    name: str = "custom"

    def __post_init__(self):
        if self.keep_side not in ("negative", "positive"):
            raise ValueError("keep_side must be 'negative' or 'positive'")

    @property
    def sign(self) -> float:
        return 1.0 if self.keep_side == "negative" else -1.0

    def signed(self, pts: np.ndarray) -> np.ndarray:
        """phi with its sign flipped so the kept side is always negative."""
        return self.sign * self.phi(np.atleast_2d(pts))

    def signed_grad(self, pts: np.ndarray) -> np.ndarray:
        return self.sign * self.grad_phi(np.atleast_2d(pts))

    @staticmethod
    def circle(center, radius: float, keep_side: str = "negative") -> "TrimmingBoundary":
        c = np.asarray(center, dtype=float)

        def phi(x):
            return np.linalg.norm(np.atleast_2d(x) - c, axis=1) - radius

        def grad(x):
            d = np.atleast_2d(x) - c
            n = np.linalg.norm(d, axis=1)
            n = np.where(n == 0.0, 1.0, n)
            return d / n[:, None]

        return TrimmingBoundary(phi, grad, keep_side, radius, name="circle")

    @staticmethod
    def sphere(center, radius: float, keep_side: str = "negative") -> "TrimmingBoundary":
        b = TrimmingBoundary.circle(center, radius, keep_side)
        return TrimmingBoundary(b.phi, b.grad_phi, keep_side, radius, name="sphere")

    @staticmethod
    def none(dim: int) -> "TrimmingBoundary":
        """No trimming: phi is identically -1, everything is kept."""

        def phi(x):
            return -np.ones(np.atleast_2d(x).shape[0])

        def grad(x):
            return np.zeros_like(np.atleast_2d(x))

        return TrimmingBoundary(phi, grad, "negative", 1.0, name="none")


class ParamLevelSet:
    """The trimming function pulled back to the parametric domain."""

    def __init__(self, geo_map: GeometryMap, boundary: TrimmingBoundary):
        self.geo_map = geo_map
        self.boundary = boundary

    def value(self, pts: np.ndarray) -> np.ndarray:
        return self.boundary.signed(self.geo_map.map_point(pts))

    def grad(self, pts: np.ndarray) -> np.ndarray:
        """Parametric gradient J^T grad(phi)."""
        pts = np.atleast_2d(pts)
        g = self.boundary.signed_grad(self.geo_map.map_point(pts))
        J = self.geo_map.jacobian(pts)
        return np.einsum("mij,mi->mj", J, g)


@dataclass
class ElementClassification:
    labels: np.ndarray  # (num_elements,) int8 with INTERIOR / CUT / EXTERIOR
    eps_geo: float
    samples_per_dir: int

    @property
    def interior(self) -> np.ndarray:
        return np.nonzero(self.labels == INTERIOR)[0]

    @property
    def cut(self) -> np.ndarray:
        return np.nonzero(self.labels == CUT)[0]

    @property
    def exterior(self) -> np.ndarray:
        return np.nonzero(self.labels == EXTERIOR)[0]

    @property
    def active(self) -> np.ndarray:
        return np.nonzero(self.labels != EXTERIOR)[0]

    def counts(self) -> dict[str, int]:
        return {name: int(np.sum(self.labels == lab)) for lab, name in _LABEL_NAMES.items()}


def _element_sample_extrema(mesh: BezierMesh, boundary: TrimmingBoundary, samples_per_dir: int):
    """Min/max of the signed trimming function over each element's sample grid.

    The grid is closed: ``samples_per_dir`` interior points plus the two
    boundary points per direction, so corners and edges are always probed.
    """
    space, gmap = mesh.space, mesh.geo_map
    d = space.dim
    npts = samples_per_dir + 2
    ref = np.linspace(0.0, 1.0, npts)
    # Per-direction sample coordinates for every 1D element.
    coords = []
    for kv in space.kvs:
        bp = kv.breakpoints
        coords.append(bp[:-1, None] + np.diff(bp)[:, None] * ref[None, :])  # (nel_k, npts)
    nel = space.num_elements
    mins = np.empty(nel)
    maxs = np.empty(nel)
    # Batch over elements in chunks to bound memory.
    chunk = max(1, 2_000_000 // (npts**d))
    flat = np.arange(nel)
    for start in range(0, nel, chunk):
        els = flat[start : start + chunk]
        mi = np.stack([(els // int(np.prod(space.nel_per_dir[:k], dtype=np.int64))) % space.nel_per_dir[k] for k in range(d)], axis=1)
        per_dir = [coords[k][mi[:, k]] for k in range(d)]  # (ne, npts) each
        ne = len(els)
        if d == 2:
            X = np.repeat(per_dir[0][:, :, None], npts, axis=2)
            Y = np.repeat(per_dir[1][:, None, :], npts, axis=1)
            pts = np.stack([X.reshape(ne, -1), Y.reshape(ne, -1)], axis=2)
        else:
            X = np.repeat(np.repeat(per_dir[0][:, :, None], npts, axis=2)[:, :, :, None], npts, axis=3)
            Y = np.repeat(np.repeat(per_dir[1][:, None, :], npts, axis=1)[:, :, :, None], npts, axis=3)
            Z = np.repeat(np.repeat(per_dir[2][:, None, :], npts, axis=1)[:, None, :, :], npts, axis=1)
            pts = np.stack([X.reshape(ne, -1), Y.reshape(ne, -1), Z.reshape(ne, -1)], axis=2)
        vals = boundary.signed(gmap.map_point(pts.reshape(-1, d))).reshape(ne, -1)
        mins[els] = vals.min(axis=1)
        maxs[els] = vals.max(axis=1)
    return mins, maxs


def default_eps_geo(geo_map: GeometryMap) -> float:
    return 1e-12 * geo_map.diameter


def classify(
    mesh: BezierMesh,
    boundary: TrimmingBoundary,
    samples_per_dir: int | None = None,
    eps_geo: float | None = None,
) -> ElementClassification:
    """Label every Bezier element Interior, Cut or Exterior.

    An element is Cut when its samples change sign or fall inside the
    ``eps_geo`` band around the zero set.  A cut that is everywhere tangential
    (all samples inside the band) is refused.
    """
    if samples_per_dir is None:
        samples_per_dir = max(mesh.space.degrees) + 2
    if eps_geo is None:
        eps_geo = default_eps_geo(mesh.geo_map)
    mins, maxs = _element_sample_extrema(mesh, boundary, samples_per_dir)
    labels = np.full(mesh.space.num_elements, CUT, dtype=np.int8)
    labels[maxs < -eps_geo] = INTERIOR
    labels[mins > eps_geo] = EXTERIOR
    tangential = (np.abs(mins) <= eps_geo) & (np.abs(maxs) <= eps_geo)
    if np.any(tangential):
        e = int(np.nonzero(tangential)[0][0])
        raise TrimmingError(
            f"element {e} is tangential to the trimming surface "
            f"(all samples within eps_geo = {eps_geo:.3e})"
        )
    return ElementClassification(labels, eps_geo, samples_per_dir)


def slice_mesh(
    mesh: BezierMesh,
    boundary: TrimmingBoundary,
    samples_per_dir: int | None = None,
    eps_geo: float | None = None,
):
    """Recursive bisection of the patch into labeled Bezier elements.

    The patch is split along its longest parametric direction at a middle
    breakpoint; recursion stops early on boxes whose samples are uniformly on
    one side of the trimming surface.  Returns the per-element labels (equal
    to :func:`classify` on the same sample grids) and the number of leaf
    visits, which is smaller than the element count whenever early
    termination fires.
    """
    space = mesh.space
    if samples_per_dir is None:
        samples_per_dir = max(space.degrees) + 2
    if eps_geo is None:
        eps_geo = default_eps_geo(mesh.geo_map)
    mins_flat, maxs_flat = _element_sample_extrema(mesh, boundary, samples_per_dir)
    d = space.dim
    shape = space.nel_per_dir
    # Reshape flat (dir-0 fastest) arrays into [i0, i1, ...] indexing.
    mins = mins_flat.reshape(*shape[::-1]).transpose(*range(d - 1, -1, -1))
    maxs = maxs_flat.reshape(*shape[::-1]).transpose(*range(d - 1, -1, -1))
    labels = np.empty(shape[::-1], dtype=np.int8).transpose(*range(d - 1, -1, -1))
    breakpoints = [kv.breakpoints for kv in space.kvs]
    leaf_visits = 0

    def visit(ranges):
        nonlocal leaf_visits
        sl = tuple(slice(a, b) for a, b in ranges)
        box_max = maxs[sl].max()
        box_min = mins[sl].min()
        if box_max < -eps_geo:
            labels[sl] = INTERIOR
            leaf_visits += 1
            return
        if box_min > eps_geo:
            labels[sl] = EXTERIOR
            leaf_visits += 1
            return
        if all(b - a == 1 for a, b in ranges):
            labels[sl] = CUT
            leaf_visits += 1
            return
        lengths = [
            breakpoints[k][b] - breakpoints[k][a] if b - a > 1 else -1.0
            for k, (a, b) in enumerate(ranges)
        ]
        k = int(np.argmax(lengths))
        a, b = ranges[k]
        mid = (a + b) // 2
        left = list(ranges)
        right = list(ranges)
        left[k] = (a, mid)
        right[k] = (mid, b)
        visit(tuple(left))
        visit(tuple(right))

    visit(tuple((0, n) for n in shape))
    flat_labels = labels.transpose(*range(d - 1, -1, -1)).reshape(-1)
    return ElementClassification(flat_labels.copy(), eps_geo, samples_per_dir), leaf_visits


def intersect_segment(
    levelset,
    a: np.ndarray,
    b: np.ndarray,
    n_sub: int = 64,
    tol_phi: float | None = None,
):
    """Roots of the trimming function along the parametric segment a->b.

    The segment is scanned on ``n_sub`` uniform subintervals for sign
    changes; each bracketed root is polished by bisection plus Newton until
    ``|phi| < tol_phi``.  Returns (ts, endpoint_flags): the sorted root
    parameters in [0, 1] and whether any root coincides with an endpoint.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if tol_phi is None:
        tol_phi = 1e-13 * levelset.boundary.scale

    def f(ts):
        ts = np.atleast_1d(ts)
        return levelset.value(a[None, :] + ts[:, None] * (b - a)[None, :])

    def fprime(ts):
        ts = np.atleast_1d(ts)
        g = levelset.grad(a[None, :] + ts[:, None] * (b - a)[None, :])
        return g @ (b - a)

    ts_scan = np.linspace(0.0, 1.0, n_sub + 1)
    vals = f(ts_scan)
    roots = []
    exact = np.abs(vals) <= tol_phi
    for i in np.nonzero(exact)[0]:
        roots.append(ts_scan[i])
    sign_change = (vals[:-1] * vals[1:] < 0.0) & ~exact[:-1] & ~exact[1:]
    for i in np.nonzero(sign_change)[0]:
        lo, hi = ts_scan[i], ts_scan[i + 1]
        flo = vals[i]
        for _ in range(8):
            mid = 0.5 * (lo + hi)
            fm = float(f(np.array([mid]))[0])
            if flo * fm <= 0.0:
                hi = mid
            else:
                lo, flo = mid, fm
        t = 0.5 * (lo + hi)
        for _ in range(60):
            ft = float(f(np.array([t]))[0])
            if abs(ft) < tol_phi:
                break
            dft = float(fprime(np.array([t]))[0])
            if dft == 0.0:
                break
            step = ft / dft
            tn = t - step
            if not (lo - 1e-12 <= tn <= hi + 1e-12):
                # Fall back to bisection inside the bracket.
                fm = float(f(np.array([0.5 * (lo + hi)]))[0])
                if flo * fm <= 0.0:
                    hi = 0.5 * (lo + hi)
                else:
                    lo, flo = 0.5 * (lo + hi), fm
                tn = 0.5 * (lo + hi)
            t = tn
        roots.append(float(np.clip(t, 0.0, 1.0)))
    roots = np.array(sorted(set(np.round(np.array(roots), 15))))
    # Merge near-duplicates from adjacent brackets.
    if roots.size > 1:
        keep = np.concatenate([[True], np.diff(roots) > 1e-12])
        roots = roots[keep]
    endpoint = bool(np.any(roots < 1e-10) or np.any(roots > 1.0 - 1e-10))
    return roots, endpoint


def active_index_set(space: TensorBSplineSpace, classification: ElementClassification) -> np.ndarray:
    """Sorted flat indices of functions supported on Interior or Cut elements."""
    mark = np.zeros(space.num_basis, dtype=bool)
    firsts = []
    for kv in space.kvs:
        firsts.append(
            np.array([kv.span_of_element(e) - kv.degree for e in range(kv.num_elements)], dtype=np.int64)
        )
    for e in classification.active:
        mi = space.element_multi_index(int(e))
        idx = firsts[-1][mi[-1]] + np.arange(space.degrees[-1] + 1, dtype=np.int64)
        for k in range(space.dim - 2, -1, -1):
            loc = firsts[k][mi[k]] + np.arange(space.degrees[k] + 1, dtype=np.int64)
            idx = (idx[:, None] * space.n_per_dir[k] + loc[None, :]).reshape(-1)
        mark[idx] = True
    return np.nonzero(mark)[0].astype(np.int64)

"""Curved tile re-parameterization of cut elements.

Each cut Bezier element is covered by degree-r Lagrange tiles (quads and
curved triangles in 2D, hexes in 3D) whose union approximates the kept part
of the element.  Curved tile edges interpolate the trimming curve at points
equidistant in arc length, which is what produces the odd/even
superconvergence of geometric measures.

The construction works entirely in the parametric domain on the pulled-back
trimming function.  In 2D the zero curve is treated as a graph over the
coordinate direction orthogonal to the dominant gradient component; the kept
region then splits into full-height side columns plus a stack of strips
between the curve and the straight keep-side edge.  A strip end touching
that edge collapses into a curved triangle (a cap cut produces a small fan
of them).  In 3D a single graph direction is chosen per element and the
cross-section is refined by a quadtree until every column of a cell crosses
the surface exactly once; cells unresolved at the bottom depth fall back to
trilinear clamped tiles whose volume defect sits at the quadtree resolution
and is negligible at the depths used.  Failures of the graph assumption
trigger dyadic subdivision of the element itself, up to ``max_depth``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quadrature import simplex_lattice, tile_map, tile_reference_rule
from .trimming import ParamLevelSet, intersect_segment

__all__ = [
    "Tile",
    "GammaFace",
    "CutElementReparam",
    "ReparamConfig",
    "ReparamError",
    "reparam_cut_element",
    "reparam_all",
    "validate",
    "boundary_faces",
    "tiles_measure",
]


class ReparamError(RuntimeError):
    pass


class _GraphFailure(Exception):
    """Internal: the graph / two-crossing assumption failed in this box."""


@dataclass
class Tile:
    kind: str  # "quad" | "triangle" | "hex"
    degree: int
    nodes: np.ndarray  # (n_nodes, d) parametric coordinates


@dataclass
class GammaFace:
    """A piece of the approximated trimming boundary, owned by one element."""

    degree: int
    nodes: np.ndarray  # (q+1, 2) curve or ((q+1)^2, 3) surface, tensor layout
    orient: float  # sign that makes boundary-rule normals point outward
    element: int


@dataclass
class CutElementReparam:
    element: int
    box_lo: np.ndarray
    box_hi: np.ndarray
    tiles: list[Tile]
    gamma_faces: list[GammaFace]


@dataclass
class ReparamConfig:
    max_depth: int = 4
    geo_precision: float = 0.0  # node coordinate precision floor; 0 disables it
    eps_fit_rel: float = 1e-13  # on-curve node tolerance, relative to domain diameter
    min_height_frac: float = 0.02  # 3D graph-cell degeneracy guard
    xsection_depth: int | None = None  # 3D cross-section quadtree depth (None: auto)


@dataclass
class ValidationReport:
    min_detJ: float
    max_gamma_phi: float
    containment_violation: float

    def ok(self, eps_fit: float, slack: float) -> bool:
        return (
            self.min_detJ > 0.0
            and self.max_gamma_phi <= eps_fit
            and self.containment_violation <= slack
        )


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _phys_extents(geo_map) -> np.ndarray:
    lo, hi = geo_map.physical_box()
    return hi - lo


def _snap_nodes(nodes: np.ndarray, geo_map, gp: float) -> np.ndarray:
    """Round node coordinates to a lattice of physical spacing ``gp``.

    Emulates a geometric kernel that only knows positions on the trimming
    boundary up to ``gp`` in physical units.
    """
    if gp <= 0.0:
        return nodes
    eta = gp / _phys_extents(geo_map)
    return np.round(nodes / eta) * eta


def _box_state(lev: ParamLevelSet, lo, hi, npts: int = 5, tol: float = 0.0) -> str:
    """Sign state of the trimming function on a closed sample grid.

    ``tol`` absorbs root-finder residuals: a sample that touches zero within
    tol does not flip an otherwise uniform box to "mixed".
    """
    ref = np.linspace(0.0, 1.0, npts)
    d = len(lo)
    grids = np.meshgrid(*([ref] * d), indexing="ij")
    pts = np.asarray(lo) + np.stack([g.ravel() for g in grids], axis=1) * (
        np.asarray(hi) - np.asarray(lo)
    )
    v = lev.value(pts)
    if np.all(v < tol) and np.any(v < -tol):
        return "in"
    if np.all(v > -tol) and np.any(v > tol):
        return "out"
    return "mixed"


def _box_tile(lo, hi, r: int) -> Tile:
    """Straight tensor tile covering a whole parametric box."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    d = len(lo)
    ref = np.linspace(0.0, 1.0, r + 1)
    grids = np.meshgrid(*([ref] * d), indexing="ij")
    # direction 0 fastest in the node ordering
    pts = np.stack([g.transpose(*range(d - 1, -1, -1)).ravel() for g in grids], axis=1)
    nodes = lo + pts * (hi - lo)
    return Tile("hex" if d == 3 else "quad", r, nodes)


def _column_roots(lev: ParamLevelSet, lo, hi, gdim: int, X: np.ndarray, tol: float, ns: int):
    """Roots of the pulled-back trimming function along g-direction columns.

    ``X`` holds the fixed sweep coordinates, one row per column.  Returns
    (roots, counts): ``roots[i]`` is the g-coordinate of the root in column i
    (nan if none), ``counts[i]`` the number of crossings seen on the scan
    grid.  Only single-crossing columns are solved; callers treat any other
    nonzero count as a topology failure.
    """
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    d = len(lo)
    sdims = [k for k in range(d) if k != gdim]
    nc = X.shape[0]
    glo = lo[gdim]
    gext = hi[gdim] - glo

    def phi_at(idx, t):
        pts = np.empty((len(idx), d))
        for j, sd in enumerate(sdims):
            pts[:, sd] = X[idx, j]
        pts[:, gdim] = glo + t * gext
        return pts

    ts = np.linspace(0.0, 1.0, ns)
    scan = np.empty((nc, ns, d))
    for j, sd in enumerate(sdims):
        scan[:, :, sd] = X[:, j][:, None]
    scan[:, :, gdim] = glo + ts[None, :] * gext
    vals = lev.value(scan.reshape(-1, d)).reshape(nc, ns)
    sg = np.where(vals >= 0.0, 1.0, -1.0)
    changes = sg[:, :-1] != sg[:, 1:]
    counts = changes.sum(axis=1)
    roots = np.full(nc, np.nan)

    # Tangential touches: a near-zero sample without a sign change.
    graze = (np.abs(vals) <= tol).any(axis=1) & (counts == 0)
    for i in np.nonzero(graze)[0]:
        j = int(np.argmin(np.abs(vals[i])))
        roots[i] = glo + ts[j] * gext
        counts[i] = 1

    act = np.nonzero(changes.any(axis=1) & (counts == 1))[0]
    if act.size:
        first = np.argmax(changes[act], axis=1)
        tlo = ts[first].copy()
        thi = ts[first + 1].copy()
        flo = vals[act, first].copy()
        for _ in range(16):
            tm = 0.5 * (tlo + thi)
            fm = lev.value(phi_at(act, tm))
            left = flo * fm <= 0.0
            thi = np.where(left, tm, thi)
            tlo = np.where(left, tlo, tm)
            flo = np.where(left, flo, fm)
        t = 0.5 * (tlo + thi)
        for _ in range(6):
            p = phi_at(act, t)
            f = lev.value(p)
            if np.all(np.abs(f) < tol):
                break
            dg = lev.grad(p)[:, gdim] * gext
            dg = np.where(dg == 0.0, 1.0, dg)
            t = np.clip(t - f / dg, tlo, thi)
        roots[act] = glo + t * gext
    return roots, counts


def _orient_face(lev: ParamLevelSet, fnodes: np.ndarray) -> GammaFace:
    """Attach the orientation sign that makes physical normals outward."""
    d = fnodes.shape[1]
    mid = fnodes.mean(axis=0, keepdims=True)
    J = lev.geo_map.jacobian(mid)[0]
    g = lev.boundary.signed_grad(lev.geo_map.map_point(mid))[0]
    if d == 2:
        T = J @ (fnodes[-1] - fnodes[0])
        n_cand = np.array([T[1], -T[0]])
        q = fnodes.shape[0] - 1
    else:
        c = fnodes.shape[0]
        s = int(round(np.sqrt(c)))
        if s * s == c:  # tensor-layout face
            q = s - 1
            grid = fnodes.reshape(q + 1, q + 1, d)  # [second dir, first dir]
            T1 = J @ (grid[0, -1] - grid[0, 0])
            T2 = J @ (grid[-1, 0] - grid[0, 0])
        else:  # simplex-layout face
            q = int(round((np.sqrt(8 * c + 1) - 3) / 2))
            T1 = J @ (fnodes[q] - fnodes[0])
            T2 = J @ (fnodes[-1] - fnodes[0])
        n_cand = np.cross(T1, T2)
    orient = 1.0 if float(n_cand @ g) > 0.0 else -1.0
    return GammaFace(q, fnodes, orient, -1)


class _SliceShimMap:
    """Minimal geometry-map stand-in for cross-section level sets.

    Only the pieces the 2D tiler touches: the domain diameter (for fit
    tolerances) and the physical box (for precision-floor snapping).
    """

    def __init__(self, diameter, lo2, hi2):
        self.diameter = diameter
        self._lo2 = np.asarray(lo2, float)
        self._hi2 = np.asarray(hi2, float)

    def physical_box(self):
        return self._lo2, self._hi2


class _SliceLevelSet:
    """Trimming function restricted to a cross-section plane of a 3D box."""

    def __init__(self, lev3: ParamLevelSet, gdim: int, sdims, gvalue: float, sign: float, shim):
        self._lev3 = lev3
        self._gdim = gdim
        self._sdims = sdims
        self._gvalue = gvalue
        self._sign = sign
        self.geo_map = shim

    def _embed(self, X: np.ndarray) -> np.ndarray:
        pts = np.empty((X.shape[0], 3))
        pts[:, self._sdims[0]] = X[:, 0]
        pts[:, self._sdims[1]] = X[:, 1]
        pts[:, self._gdim] = self._gvalue
        return pts

    def value(self, X: np.ndarray) -> np.ndarray:
        return self._sign * self._lev3.value(self._embed(np.atleast_2d(X)))

    def grad(self, X: np.ndarray) -> np.ndarray:
        g = self._lev3.grad(self._embed(np.atleast_2d(X)))
        return self._sign * g[:, self._sdims]


# ---------------------------------------------------------------------------
# 2D construction
# ---------------------------------------------------------------------------


def _edge_crossings_2d(lev, lo, hi, tol):
    corners = {
        (0, 0): np.array([lo[0], lo[1]]),
        (1, 0): np.array([hi[0], lo[1]]),
        (0, 1): np.array([lo[0], hi[1]]),
        (1, 1): np.array([hi[0], hi[1]]),
    }
    edges = [
        (corners[(0, 0)], corners[(1, 0)]),
        (corners[(0, 1)], corners[(1, 1)]),
        (corners[(0, 0)], corners[(0, 1)]),
        (corners[(1, 0)], corners[(1, 1)]),
    ]
    pts = []
    for a, b in edges:
        ts, _ = intersect_segment(lev, a, b, tol_phi=tol)
        for t in ts:
            pts.append(a + t * (b - a))
    diag = float(np.linalg.norm(np.asarray(hi) - np.asarray(lo)))
    dedup: list[np.ndarray] = []
    for q in pts:
        if not any(np.linalg.norm(q - w) < 1e-9 * diag for w in dedup):
            dedup.append(q)
    return dedup


def _triangle_from_strip(s_nodes, v_nodes, base, r, sweep_dim, apex_at_end):
    """Curved-triangle nodes for a strip with one end on the base edge.

    With the apex at sweep parameter 0 the map is bot(xi) + eta * H(xi)/xi
    where the height H vanishes at the apex, so the map stays a polynomial
    of total degree r.
    """
    lat = simplex_lattice(r)
    nodes = np.empty((len(lat), 2))
    for n, (x, y) in enumerate(lat):
        i = int(round(x * r))
        j = int(round(y * r))
        q = i + j
        idx = (r - q) if apex_at_end else q
        if q == 0:
            sv, vv = s_nodes[idx], base
        else:
            sv = s_nodes[idx]
            vv = base + (j / q) * (v_nodes[idx] - base)
        nodes[n, sweep_dim] = sv
        nodes[n, 1 - sweep_dim] = vv
    tile = Tile("triangle", r, nodes)
    _, J = tile_map(tile, np.array([[0.3, 0.3]]))
    if np.linalg.det(J[0]) < 0.0:
        # Transposing the lattice flips the orientation of the map.
        order = {(round(x * r), round(y * r)): n for n, (x, y) in enumerate(lat)}
        perm = [order[(round(y * r), round(x * r))] for (x, y) in lat]
        tile = Tile("triangle", r, nodes[perm])
    return tile


def _graph_tiles_2d(lev, lo, hi, crossings, r, m, cfg, tiles, faces, tol):
    ext = hi - lo
    mid_cross = 0.5 * (crossings[0] + crossings[1])
    grad = lev.grad(mid_cross[None, :])[0]
    gdim = int(np.argmax(np.abs(grad)))
    sdim = 1 - gdim
    if abs(crossings[0][sdim] - crossings[1][sdim]) < 1e-10 * ext[sdim]:
        gdim, sdim = sdim, gdim
        if abs(crossings[0][sdim] - crossings[1][sdim]) < 1e-10 * ext[sdim]:
            raise _GraphFailure
    A, B = sorted(crossings, key=lambda q: q[sdim])
    a, b = A[sdim], B[sdim]
    glo, ghi = lo[gdim], hi[gdim]
    gext = ghi - glo

    def col(svals):
        X = np.asarray(svals, float)[:, None]
        return _column_roots(lev, lo, hi, gdim, X, tol, ns=max(9, 2 * r + 7))

    # Dense scan of the curve between the crossings for the arc parameter.
    Kd = max(4 * m * (r + 1) + 1, 9)
    s_dense = np.linspace(a, b, Kd)
    roots_d, counts_d = col(s_dense[1:-1])
    if np.any(counts_d != 1) or np.any(np.isnan(roots_d)):
        raise _GraphFailure
    v_dense = np.concatenate([[A[gdim]], roots_d, [B[gdim]]])

    # Which side of the graph is kept.
    probe = np.empty((1, 2))
    probe[0, sdim] = s_dense[Kd // 2]
    probe[0, gdim] = 0.5 * (v_dense[Kd // 2] + glo)
    keep_below = lev.value(probe)[0] < 0.0
    base = glo if keep_below else ghi

    # Columns outside the crossing span are uniform; keep side quads whole.
    for s0, s1 in ((lo[sdim], a), (b, hi[sdim])):
        if s1 - s0 <= 1e-10 * ext[sdim]:
            continue
        clo, chi = lo.copy(), hi.copy()
        clo[sdim], chi[sdim] = s0, s1
        state = _box_state(lev, clo, chi, npts=4, tol=10.0 * tol)
        if state == "mixed":
            raise _GraphFailure
        if state == "in":
            tiles.append(_box_tile(clo, chi, r))

    # A cap cut (both crossings on the base edge) needs at least two strips
    # so each triangle has a single collapsed end.
    m_eff = m
    if m == 1 and abs(A[gdim] - base) < 1e-9 * gext and abs(B[gdim] - base) < 1e-9 * gext:
        m_eff = 2

    # Interpolation nodes equidistant in arc length along the curve.
    n_nodes = m_eff * r + 1
    seg = np.hypot(np.diff(s_dense), np.diff(v_dense))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, cum[-1], n_nodes)
    s_all = np.interp(targets, cum, s_dense)
    s_all[0], s_all[-1] = a, b
    inner_roots, inner_counts = col(s_all[1:-1])
    if np.any(inner_counts != 1) or np.any(np.isnan(inner_roots)):
        raise _GraphFailure
    v_all = np.concatenate([[A[gdim]], inner_roots, [B[gdim]]])

    curve = np.empty((n_nodes, 2))
    curve[:, sdim] = s_all
    curve[:, gdim] = v_all
    curve = _snap_nodes(curve, lev.geo_map, cfg.geo_precision)
    np.clip(curve, lo, hi, out=curve)
    s_all = curve[:, sdim]
    v_all = curve[:, gdim]
    if np.any(np.diff(s_all) <= 0.0):
        raise _GraphFailure

    gp_param = 0.0
    if cfg.geo_precision > 0.0:
        gp_param = cfg.geo_precision / float(np.min(_phys_extents(lev.geo_map)))
    tol_h = max(1e-9 * gext, 3.0 * gp_param)

    for k in range(m_eff):
        s_nodes = s_all[k * r : k * r + r + 1]
        v_nodes = v_all[k * r : k * r + r + 1]
        h0 = abs(v_nodes[0] - base)
        hr = abs(v_nodes[-1] - base)
        if h0 < tol_h and hr < tol_h:
            raise _GraphFailure
        if h0 < tol_h or hr < tol_h:
            tiles.append(
                _triangle_from_strip(s_nodes, v_nodes, base, r, sdim, apex_at_end=hr < tol_h)
            )
        else:
            eta = np.linspace(0.0, 1.0, r + 1)
            nodes = np.empty(((r + 1) * (r + 1), 2))
            n = 0
            for j in range(r + 1):
                for i in range(r + 1):
                    nodes[n, sdim] = s_nodes[i]
                    nodes[n, gdim] = base + eta[j] * (v_nodes[i] - base)
                    n += 1
            # The map orientation is the parity of the (sweep, value) axis
            # pair times the blend direction; reverse the blend axis when
            # that product is negative.
            if (sdim == 1) != (not keep_below):
                nodes = nodes.reshape(r + 1, r + 1, 2)[::-1].reshape(-1, 2)
            tiles.append(Tile("quad", r, nodes))
        if faces is not None:
            fnodes = np.empty((r + 1, 2))
            fnodes[:, sdim] = s_nodes
            fnodes[:, gdim] = v_nodes
            faces.append(_orient_face(lev, fnodes))


def _build_2d(lev, lo, hi, r, m, cfg, depth, tiles, faces):
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    tol = cfg.eps_fit_rel * lev.geo_map.diameter

    def subdivide():
        if depth >= cfg.max_depth:
            raise ReparamError(
                f"cut topology not resolved after {cfg.max_depth} dyadic "
                f"subdivisions of box {lo.tolist()} .. {hi.tolist()}"
            )
        mid = 0.5 * (lo + hi)
        for cy in range(2):
            for cx in range(2):
                clo = np.array([lo[0] if cx == 0 else mid[0], lo[1] if cy == 0 else mid[1]])
                chi = np.array([mid[0] if cx == 0 else hi[0], mid[1] if cy == 0 else hi[1]])
                state = _box_state(lev, clo, chi, npts=r + 3, tol=10.0 * tol)
                if state == "in":
                    tiles.append(_box_tile(clo, chi, r))
                elif state == "mixed":
                    _build_2d(lev, clo, chi, r, m, cfg, depth + 1, tiles, faces)

    crossings = _edge_crossings_2d(lev, lo, hi, tol)
    if len(crossings) == 0:
        state = _box_state(lev, lo, hi, npts=r + 3, tol=10.0 * tol)
        if state == "in":
            tiles.append(_box_tile(lo, hi, r))
        elif state == "mixed":
            subdivide()
        return
    if len(crossings) != 2:
        subdivide()
        return
    nt = len(tiles)
    nf = len(faces) if faces is not None else 0
    try:
        _graph_tiles_2d(lev, lo, hi, crossings, r, m, cfg, tiles, faces, tol)
    except _GraphFailure:
        del tiles[nt:]
        if faces is not None:
            del faces[nf:]
        subdivide()


# ---------------------------------------------------------------------------
# 3D construction
# ---------------------------------------------------------------------------


def _build_3d(lev, lo, hi, r, h_t, cfg, depth, tiles, faces):
    """Tile the kept part of a 3D box by extruding a cross-section tiling.

    Columns along the dominant-gradient direction cross the surface at most
    once, so the kept region is described by a height field over the
    cross-section.  The footprint of nonempty columns is a 2D trimmed region
    bounded by the exit curve (surface meeting the keep-side face) and the
    height field has a crease along the curve where the surface leaves
    through the far face.  The two curves are separated by at least the
    element thickness over the graph slope, so a shallow quadtree isolates
    them; each cell then needs at most one run of the 2D tiler, and every 2D
    tile is extruded into a hex or prism blended from the keep-side face to
    the interpolated surface.
    """
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    tol = cfg.eps_fit_rel * lev.geo_map.diameter
    center = 0.5 * (lo + hi)
    grad = lev.grad(center[None, :])[0]
    gdim = int(np.argmax(np.abs(grad)))
    sdims = [k for k in range(3) if k != gdim]
    glo, ghi = lo[gdim], hi[gdim]
    gext = ghi - glo
    kb = grad[gdim] > 0.0  # kept (negative) side toward small g
    base = glo if kb else ghi
    far = ghi if kb else glo
    sgn = 1.0 if kb else -1.0

    xlo2 = lo[sdims]
    xhi2 = hi[sdims]
    plo, phi_box = lev.geo_map.physical_box()
    shim = _SliceShimMap(lev.geo_map.diameter, plo[sdims], phi_box[sdims])
    sl_base = _SliceLevelSet(lev, gdim, sdims, base, 1.0, shim)
    sl_far = _SliceLevelSet(lev, gdim, sdims, far, 1.0, shim)
    sl_far_flip = _SliceLevelSet(lev, gdim, sdims, far, -1.0, shim)

    def extrude(tiles2d, graph):
        for t2 in tiles2d:
            X = t2.nodes
            nl = X.shape[0]
            if graph:
                roots, counts = _column_roots(
                    lev, lo, hi, gdim, X, tol, ns=max(9, 2 * r + 7)
                )
                if np.any(counts > 1):
                    raise _GraphFailure
                lamb = sl_base.value(X)
                h_nodes = np.where(
                    np.isnan(roots),
                    np.where(lamb < 0.0, gext, 0.0),
                    sgn * (roots - base),
                )
                if cfg.geo_precision > 0.0:
                    top = np.empty((nl, 3))
                    top[:, sdims[0]] = X[:, 0]
                    top[:, sdims[1]] = X[:, 1]
                    top[:, gdim] = base + sgn * h_nodes
                    top = _snap_nodes(top, lev.geo_map, cfg.geo_precision)
                    np.clip(top, lo, hi, out=top)
                    h_nodes = sgn * (top[:, gdim] - base)
                h_nodes = np.clip(h_nodes, 0.0, gext)
                if np.all(h_nodes <= 1e-12 * gext):
                    continue
            else:
                h_nodes = np.full(nl, gext)
            nb1 = r + 1
            zi = np.linspace(0.0, 1.0, nb1)
            # Orientation: parity of the (sweep0, sweep1, graph) axis triple
            # times the blend direction; reverse the blend axis when the
            # product is negative.
            if (not kb) != (gdim == 1):
                zi = zi[::-1]
            nodes = np.empty((nb1 * nl, 3))
            for kz in range(nb1):
                blk = slice(kz * nl, (kz + 1) * nl)
                nodes[blk, sdims[0]] = X[:, 0]
                nodes[blk, sdims[1]] = X[:, 1]
                nodes[blk, gdim] = base + sgn * zi[kz] * h_nodes
            tiles.append(Tile("prism" if t2.kind == "triangle" else "hex", r, nodes))
            if graph:
                fn = np.empty((nl, 3))
                fn[:, sdims[0]] = X[:, 0]
                fn[:, sdims[1]] = X[:, 1]
                fn[:, gdim] = base + sgn * h_nodes
                faces.append(_orient_face(lev, fn))

    def run_slice(slice_lev, clo2, chi2):
        out2: list[Tile] = []
        try:
            _build_2d(slice_lev, clo2, chi2, r, 1, cfg, 0, out2, None)
        except ReparamError:
            raise _GraphFailure
        return out2

    def cell(clo2, chi2, d):
        sb = _box_state(sl_base, clo2, chi2, npts=r + 3, tol=10.0 * tol)
        sf = _box_state(sl_far, clo2, chi2, npts=r + 3, tol=10.0 * tol)
        if sb == "out":
            if sf == "in":
                raise _GraphFailure  # empty at base but full at far: non-monotone
            return
        if sb == "in" and sf == "in":
            clo, chi = lo.copy(), hi.copy()
            clo[sdims[0]], chi[sdims[0]] = clo2[0], chi2[0]
            clo[sdims[1]], chi[sdims[1]] = clo2[1], chi2[1]
            tiles.append(_box_tile(clo, chi, r))
            return
        if sb == "in" and sf == "out":
            # Probe the tile-node columns; a missing root means one of the
            # curves slipped between the state samples.
            bt = _box_tile(clo2, chi2, r)
            roots, counts = _column_roots(lev, lo, hi, gdim, bt.nodes, tol, ns=max(9, 2 * r + 7))
            if np.any(counts > 1):
                raise _GraphFailure
            if np.any(np.isnan(roots)):
                lamb = sl_base.value(bt.nodes[np.isnan(roots)])
                if np.any(lamb >= 0.0):
                    extrude(run_slice(sl_base, clo2, chi2), graph=True)
                else:
                    extrude(run_slice(sl_far, clo2, chi2), graph=False)
                    extrude(run_slice(sl_far_flip, clo2, chi2), graph=True)
            else:
                extrude([bt], graph=True)
            return
        if sb == "mixed" and sf == "mixed":
            if d >= 3:
                raise _GraphFailure
            xm = 0.5 * (clo2 + chi2)
            cell(clo2.copy(), xm.copy(), d + 1)
            cell(np.array([xm[0], clo2[1]]), np.array([chi2[0], xm[1]]), d + 1)
            cell(np.array([clo2[0], xm[1]]), np.array([xm[0], chi2[1]]), d + 1)
            cell(xm.copy(), chi2.copy(), d + 1)
            return
        if sf == "mixed":  # sb == "in": crease inside a fully kept footprint
            extrude(run_slice(sl_far, clo2, chi2), graph=False)
            extrude(run_slice(sl_far_flip, clo2, chi2), graph=True)
            return
        # sb mixed, sf uniform
        if sf == "in":
            raise _GraphFailure  # some columns empty yet all full at far
        extrude(run_slice(sl_base, clo2, chi2), graph=True)

    def subdivide_element():
        if depth >= cfg.max_depth:
            raise ReparamError(
                f"cut topology not resolved after {cfg.max_depth} dyadic "
                f"subdivisions of box {lo.tolist()} .. {hi.tolist()}"
            )
        mid = 0.5 * (lo + hi)
        for cz in range(2):
            for cy in range(2):
                for cx in range(2):
                    c = (cx, cy, cz)
                    clo = np.array([lo[k] if c[k] == 0 else mid[k] for k in range(3)])
                    chi = np.array([mid[k] if c[k] == 0 else hi[k] for k in range(3)])
                    st = _box_state(lev, clo, chi, npts=r + 3, tol=10.0 * tol)
                    if st == "in":
                        tiles.append(_box_tile(clo, chi, r))
                    elif st == "mixed":
                        _build_3d(lev, clo, chi, r, h_t, cfg, depth + 1, tiles, faces)

    nt, nf = len(tiles), len(faces)
    try:
        nsplit = max(1, int(h_t))
        xs = np.linspace(xlo2[0], xhi2[0], nsplit + 1)
        ys = np.linspace(xlo2[1], xhi2[1], nsplit + 1)
        for j in range(nsplit):
            for i in range(nsplit):
                cell(np.array([xs[i], ys[j]]), np.array([xs[i + 1], ys[j + 1]]), 0)
    except _GraphFailure:
        del tiles[nt:], faces[nf:]
        subdivide_element()


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def reparam_cut_element(
    lev: ParamLevelSet,
    element: int,
    box_lo,
    box_hi,
    r: int,
    h_t: int = 1,
    config: ReparamConfig | None = None,
) -> CutElementReparam:
    """Tile the kept part of one cut element with degree-r curved tiles."""
    if config is None:
        config = ReparamConfig()
    if r < 1:
        raise ValueError("re-parameterization degree must be at least 1")
    d = len(box_lo)
    tiles: list[Tile] = []
    faces: list[GammaFace] = []
    if d == 2:
        _build_2d(lev, box_lo, box_hi, r, max(1, int(h_t)), config, 0, tiles, faces)
    elif d == 3:
        _build_3d(lev, box_lo, box_hi, r, h_t, config, 0, tiles, faces)
    else:
        raise ValueError("only 2D and 3D patches are supported")
    for f in faces:
        f.element = element
    return CutElementReparam(
        element, np.asarray(box_lo, float), np.asarray(box_hi, float), tiles, faces
    )


def reparam_all(space, geo_map, boundary, classification, r, h_t=1, config=None):
    """Re-parameterize every cut element; interior elements need no tiles."""
    lev = ParamLevelSet(geo_map, boundary)
    out: dict[int, CutElementReparam] = {}
    for e in classification.cut:
        lo, hi = space.element_box(int(e))
        out[int(e)] = reparam_cut_element(lev, int(e), lo, hi, r, h_t, config)
    return out


def validate(rep: CutElementReparam, lev: ParamLevelSet, n: int | None = None) -> ValidationReport:
    """Audit one cut-element re-parameterization.

    Checks tile Jacobians at the quadrature points used downstream, the
    residual of the trimming function at boundary-face nodes, and
    containment of the mapped quadrature points in the element box.
    """
    min_det = np.inf
    max_phi = 0.0
    viol = 0.0
    for tile in rep.tiles:
        nq = n if n is not None else tile.degree + 2
        rule = tile_reference_rule(tile, nq)
        pts, jac = tile_map(tile, rule.points)
        det = np.linalg.det(jac)
        min_det = min(min_det, float(det.min()))
        viol = max(viol, float(np.max(rep.box_lo - pts)), float(np.max(pts - rep.box_hi)))
    for f in rep.gamma_faces:
        vals = np.abs(lev.value(f.nodes))
        max_phi = max(max_phi, float(vals.max()))
    if not rep.tiles:
        min_det = 0.0
    return ValidationReport(min_det, max_phi, viol)


def boundary_faces(reps: dict[int, CutElementReparam]) -> list[GammaFace]:
    out: list[GammaFace] = []
    for e in sorted(reps):
        out.extend(reps[e].gamma_faces)
    return out


def tiles_measure(rep: CutElementReparam, n: int) -> float:
    """Parametric measure covered by the tiles (sum of mapped weights)."""
    total = 0.0
    for tile in rep.tiles:
        rule = tile_reference_rule(tile, n)
        _, jac = tile_map(tile, rule.points)
        total += float(np.sum(rule.weights * np.linalg.det(jac)))
    return total

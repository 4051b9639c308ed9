"""Galerkin assembly on trimmed spline patches.

Volume terms run over interior elements with tensor Gauss rules and over cut
elements with per-tile rules from the re-parameterization; exterior elements
are skipped.  Every boundary term (curved trimmed boundary and box facets
alike) goes through :func:`trimmed_iga.quadrature.boundary_rule`, interior
facet pieces as straight degree-1 faces and cut facet pieces as the tile faces
lying on the facet, so the integrated boundary is exactly the boundary of the
tiled region.

The mean-value constraint row and strong Dirichlet data are attached here;
the solver only ever sees plain matrices and one optional constraint row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .quadrature import boundary_rule, gauss_legendre, map_through_tile, tile_reference_rule
from .reparam import GammaFace
from .splines import GeometryMap, TensorBSplineSpace, basis_values_derivs
from .trimming import CUT, EXTERIOR, INTERIOR, ElementClassification


class AssemblyError(RuntimeError):
    pass


@dataclass(frozen=True)
class Material:
    """Isotropic linear elastic material."""

    E: float
    nu: float

    def __post_init__(self):
        if not (0.0 <= self.nu < 0.5):
            raise ValueError(f"Poisson ratio {self.nu} outside [0, 0.5)")

    def lame(self) -> tuple[float, float]:
        lam = self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))
        mu = self.E / (2.0 * (1.0 + self.nu))
        return lam, mu


@dataclass(frozen=True)
class DirichletBC:
    """Prescribed trace of one solution component on a box facet.

    ``face`` is (direction, side) with side 0 for the low facet and 1 for the
    high one; ``trace`` maps physical points to the prescribed values.
    """

    face: tuple[int, int]
    component: int
    trace: object


PDES = ("poisson", "elasticity-plane-strain", "elasticity-3d")


@dataclass
class ProblemDefinition:
    """Weak form data: a(u, v) = ∫ f·v + boundary terms.

    ``source`` maps physical points to (m,) or (m, k) values, ``neumann`` maps
    (physical points, outward unit normals) to the boundary flux/traction.
    ``neumann_faces`` lists the (direction, side) box facets carrying Neumann
    data; the trimmed boundary always receives it when ``neumann`` is set.
    ``mean_constraint`` is either the target real for ∫ u or a field whose
    integral over the discrete domain becomes the target.
    """

    pde: str = "poisson"
    source: object = None
    neumann: object = None
    neumann_faces: tuple = ()
    dirichlet: tuple = ()
    material: Material | None = None
    mean_constraint: object = None

    def __post_init__(self):
        if self.pde not in PDES:
            raise ValueError(f"unknown pde {self.pde!r}")
        if self.pde != "poisson" and self.material is None:
            raise ValueError("elasticity requires a material")
        if self.mean_constraint is not None and self.dirichlet:
            raise ValueError("mean constraint is redundant with Dirichlet data")

    def num_components(self, dim: int) -> int:
        return 1 if self.pde == "poisson" else dim


@dataclass
class LinearSystem:
    """Assembled system over the active scalar unknowns.

    ``active`` holds the global basis-function indices behind the blocks of
    ``k`` consecutive scalar unknowns (function-major layout).  On systems
    reduced by Dirichlet elimination, ``free`` lists the surviving scalar
    indices of the unreduced numbering and ``dirichlet_map`` the eliminated
    ones with their values.
    """

    A: sp.csr_matrix
    b: np.ndarray
    active: np.ndarray
    k: int
    constraint: tuple[np.ndarray, float] | None = None
    dirichlet_map: dict[int, float] | None = None
    free: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def expand(self, x: np.ndarray) -> np.ndarray:
        """Full (n_active, k) coefficient table from a solution vector."""
        full = np.zeros(len(self.active) * self.k)
        if self.free is None:
            full[:] = x
        else:
            full[self.free] = x
            for i, v in self.dirichlet_map.items():
                full[i] = v
        return full.reshape(len(self.active), self.k)


def active_functions(space: TensorBSplineSpace, classification: ElementClassification) -> np.ndarray:
    """Sorted global indices of basis functions supported on kept elements."""
    mask = np.zeros(space.n_per_dir[::-1], dtype=bool)
    for e in np.concatenate([classification.interior, classification.cut]):
        mi = space.element_multi_index(int(e))
        sl = []
        for kdir, ei in enumerate(mi):
            kv = space.kvs[kdir]
            first = kv.span_of_element(ei) - kv.degree
            sl.append(slice(first, first + kv.degree + 1))
        mask[tuple(reversed(sl))] = True
    return np.nonzero(mask.reshape(-1, order="F"))[0].astype(np.int64)


# ---------------------------------------------------------------------------
# Element kernels
# ---------------------------------------------------------------------------


def _physical_gradients(geo_map, pts, dB):
    J = geo_map.jacobian(pts)
    det = np.linalg.det(J)
    if np.any(det <= 0.0):
        raise AssemblyError(
            f"geometry map has nonpositive Jacobian determinant (min {det.min():.3e})"
        )
    Jinv = np.linalg.inv(J)
    # grad_x B = J^{-T} grad_u B
    G = np.einsum("mng,mgi->mni", dB, Jinv)
    return G, det


def _element_matrix(pde, lam_mu, w, G):
    if pde == "poisson":
        return np.einsum("m,mid,mjd->ij", w, G, G, optimize=True)
    lam, mu = lam_mu
    nb, d = G.shape[1], G.shape[2]
    K = np.einsum("m,mia,mjb->iajb", w * lam, G, G, optimize=True)
    K += np.einsum("m,mib,mja->iajb", w * mu, G, G, optimize=True)
    diag = np.einsum("m,mid,mjd->ij", w * mu, G, G, optimize=True)
    for a in range(d):
        K[:, a, :, a] += diag
    return K.reshape(nb * d, nb * d)


class _Accumulator:
    def __init__(self, n):
        self.rows, self.cols, self.vals = [], [], []
        self.b = np.zeros(n)

    def add_matrix(self, sidx, K):
        self.rows.append(np.repeat(sidx, len(sidx)))
        self.cols.append(np.tile(sidx, len(sidx)))
        self.vals.append(K.reshape(-1))

    def matrix(self, n):
        if not self.rows:
            return sp.csr_matrix((n, n))
        i = np.concatenate(self.rows)
        j = np.concatenate(self.cols)
        v = np.concatenate(self.vals)
        return sp.coo_matrix((v, (i, j)), shape=(n, n)).tocsr()


# ---------------------------------------------------------------------------
# Facet faces
# ---------------------------------------------------------------------------


def _oriented(face: GammaFace, fdir: int, side: int, geo_map) -> GammaFace:
    """Fix the orient sign so boundary_rule normals point out of the box."""
    probe = boundary_rule(face, geo_map, 2)
    d = face.nodes.shape[1]
    eout = np.zeros(d)
    eout[fdir] = -1.0 if side == 0 else 1.0
    J = geo_map.jacobian(probe.param_points[:1])[0]
    # Physical direction of the outward parametric facet normal.
    w = np.linalg.solve(J.T, eout)
    s = float(np.sign(probe.normals[0] @ w))
    if s == 0.0:
        raise AssemblyError("degenerate facet face")
    return GammaFace(face.degree, face.nodes, face.orient * s, face.element)


def _straight_facet_face(lo, hi, fdir, side, element) -> GammaFace:
    d = len(lo)
    c = lo[fdir] if side == 0 else hi[fdir]
    rd = [k for k in range(d) if k != fdir]
    if d == 2:
        nodes = np.zeros((2, 2))
        nodes[:, fdir] = c
        nodes[:, rd[0]] = (lo[rd[0]], hi[rd[0]])
    else:
        nodes = np.zeros((4, 3))
        nodes[:, fdir] = c
        corners = [(lo[rd[0]], lo[rd[1]]), (hi[rd[0]], lo[rd[1]]),
                   (lo[rd[0]], hi[rd[1]]), (hi[rd[0]], hi[rd[1]])]
        for i, (a, b) in enumerate(corners):
            nodes[i, rd[0]] = a
            nodes[i, rd[1]] = b
    return GammaFace(1, nodes, 1.0, element)


def _triangle_edge_ids(r: int):
    start = [j * (r + 1) - j * (j - 1) // 2 for j in range(r + 1)]
    return (
        list(range(r + 1)),                       # j = 0 edge
        [start[j] for j in range(r + 1)],         # i = 0 edge
        [start[j] + r - j for j in range(r + 1)], # hypotenuse
    )


def tile_boundary_faces(tile) -> list[np.ndarray]:
    """Node arrays of every boundary face of a tile, in evaluable order."""
    r = tile.degree
    n1 = r + 1
    out = []
    if tile.kind == "quad":
        L = tile.nodes.reshape(n1, n1, 2)
        out += [L[:, 0], L[:, r], L[0, :], L[r, :]]
    elif tile.kind == "triangle":
        for ids in _triangle_edge_ids(r):
            out.append(tile.nodes[ids])
    elif tile.kind == "hex":
        L = tile.nodes.reshape(n1, n1, n1, 3)
        out += [
            L[:, :, 0].reshape(-1, 3), L[:, :, r].reshape(-1, 3),
            L[:, 0, :].reshape(-1, 3), L[:, r, :].reshape(-1, 3),
            L[0].reshape(-1, 3), L[r].reshape(-1, 3),
        ]
    elif tile.kind == "prism":
        ns = (r + 1) * (r + 2) // 2
        out.append(tile.nodes[:ns])
        out.append(tile.nodes[r * ns:])
        for ids in _triangle_edge_ids(r):
            face = [tile.nodes[l * ns + t] for l in range(n1) for t in ids]
            out.append(np.asarray(face))
    else:
        raise AssemblyError(f"unknown tile kind {tile.kind!r}")
    return [np.ascontiguousarray(f) for f in out]


def _facet_tile_faces(rep, fdir, side, lo, hi, element):
    """Tile faces of a cut element lying on one of its box facets.

    The tolerance absorbs geo-precision node snapping (absolute, parametric);
    genuinely interior nodes sit at least a strip width away.
    """
    c = lo[fdir] if side == 0 else hi[fdir]
    tol = 1e-6
    faces = []
    for tile in rep.tiles:
        deg = tile.degree
        for nodes in tile_boundary_faces(tile):
            if np.max(np.abs(nodes[:, fdir] - c)) > tol:
                continue
            span = np.ptp(nodes, axis=0)
            span[fdir] = 0.0
            if np.max(span) < 1e-11:
                continue  # collapsed face (apex touching the facet)
            faces.append(GammaFace(deg, nodes, 1.0, element))
    return faces


# ---------------------------------------------------------------------------
# Assembly driver
# ---------------------------------------------------------------------------


def _as_components(vals, m, k):
    vals = np.asarray(vals, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    if vals.shape != (m, k):
        raise AssemblyError(f"field returned shape {vals.shape}, expected {(m, k)}")
    return vals


def assemble(
    space: TensorBSplineSpace,
    geo_map: GeometryMap,
    classification: ElementClassification,
    reparams: dict,
    problem: ProblemDefinition,
    quad_boost: int = 0,
) -> LinearSystem:
    """Assemble stiffness, load, Neumann terms and the constraint row."""
    d = space.dim
    k = problem.num_components(d)
    p = max(space.degrees)
    n1 = p + 1 + quad_boost
    lam_mu = problem.material.lame() if problem.material is not None else None

    active = active_functions(space, classification)
    pos = np.full(space.num_basis, -1, dtype=np.int64)
    pos[active] = np.arange(len(active))
    nsc = len(active) * k

    acc = _Accumulator(nsc)
    want_c = problem.mean_constraint is not None
    if want_c and k != 1:
        raise AssemblyError("mean constraint only applies to scalar problems")
    cvec = np.zeros(len(active)) if want_c else None
    ctarget = 0.0
    target_field = problem.mean_constraint if callable(problem.mean_constraint) else None

    def add_volume(e, pts, wts, idx, B, dB):
        nonlocal ctarget
        G, det = _physical_gradients(geo_map, pts, dB)
        w = wts * det
        K = _element_matrix(problem.pde, lam_mu, w, G)
        pidx = pos[idx]
        if np.any(pidx < 0):
            raise AssemblyError(f"element {e} uses a non-active function")
        sidx = (pidx[:, None] * k + np.arange(k)).reshape(-1)
        acc.add_matrix(sidx, K)
        if problem.source is not None:
            phys = geo_map.map_point(pts)
            fv = _as_components(problem.source(phys), len(w), k)
            acc.b[sidx] += np.einsum("m,ma,mi->ia", w, fv, B).reshape(-1)
        if want_c:
            cvec[pidx] += B.T @ w
            if target_field is not None:
                phys = geo_map.map_point(pts)
                ctarget += float(w @ np.asarray(target_field(phys), dtype=float))

    # Interior elements: one shared tensor Gauss rule scaled per element.
    ref = gauss_legendre(n1, d)
    for e in classification.interior:
        e = int(e)
        lo, hi = space.element_box(e)
        pts = lo + ref.points * (hi - lo)
        w = ref.weights * float(np.prod(hi - lo))
        idx, B, dB = space.eval_basis(e, pts)
        add_volume(e, pts, w, idx, B, dB)

    # Cut elements: tile rules.
    for e in classification.cut:
        e = int(e)
        rep = reparams.get(e)
        if rep is None:
            raise AssemblyError(f"cut element {e} has no reparameterization")
        for tile in rep.tiles:
            rule = map_through_tile(tile, tile_reference_rule(tile, n1))
            idx, B, dB = space.eval_basis(e, rule.points)
            add_volume(e, rule.points, rule.weights, idx, B, dB)

    # Neumann terms.
    if problem.neumann is not None:
        def add_face(e, face):
            bq = boundary_rule(face, geo_map, n1)
            if not np.all(np.isfinite(bq.normals)):
                return
            idx, B, _ = space.eval_basis(e, bq.param_points)
            g = _as_components(problem.neumann(bq.phys_points, bq.normals), len(bq.weights), k)
            sidx = (pos[idx][:, None] * k + np.arange(k)).reshape(-1)
            acc.b[sidx] += np.einsum("m,ma,mi->ia", bq.weights, g, B).reshape(-1)

        for e, rep in sorted(reparams.items()):
            if classification.labels[e] != CUT:
                continue
            for face in rep.gamma_faces:
                add_face(int(e), face)

        labels = classification.labels
        for fdir, side in problem.neumann_faces:
            nel_f = space.nel_per_dir[fdir]
            ei_face = 0 if side == 0 else nel_f - 1
            for e in range(space.num_elements):
                if space.element_multi_index(e)[fdir] != ei_face:
                    continue
                lab = int(labels[e])
                if lab == EXTERIOR:
                    continue
                lo, hi = space.element_box(e)
                if lab == INTERIOR:
                    faces = [_straight_facet_face(lo, hi, fdir, side, e)]
                else:
                    faces = _facet_tile_faces(reparams[e], fdir, side, lo, hi, e)
                for face in faces:
                    add_face(e, _oriented(face, fdir, side, geo_map))

    A = acc.matrix(nsc)
    constraint = None
    if want_c:
        if target_field is None:
            ctarget = float(problem.mean_constraint)
        constraint = (cvec, ctarget)
    return LinearSystem(A, acc.b, active, k, constraint=constraint)


# ---------------------------------------------------------------------------
# Constraint and Dirichlet handling
# ---------------------------------------------------------------------------


def apply_mean_constraint(system: LinearSystem) -> LinearSystem:
    """Augmented saddle form [[A, c], [cᵀ, 0]] of a constrained system."""
    if system.constraint is None:
        raise AssemblyError("system carries no constraint row")
    if system.dirichlet_map:
        raise AssemblyError("mean constraint is redundant with Dirichlet data")
    c, target = system.constraint
    A2 = sp.bmat([[system.A, c[:, None]], [c[None, :], None]], format="csr")
    b2 = np.concatenate([system.b, [target]])
    return LinearSystem(A2, b2, system.active, system.k, constraint=None)


def _basis_row(kv, x: float) -> tuple[int, np.ndarray]:
    """First index and the p+1 nonzero basis values at a single coordinate."""
    bp = kv.breakpoints
    e = int(np.clip(np.searchsorted(bp, x, side="right") - 1, 0, kv.num_elements - 1))
    span = kv.span_of_element(e)
    v, _ = basis_values_derivs(kv, span, np.array([x]))
    return span - kv.degree, v[0]


def dirichlet_values(
    system: LinearSystem,
    problem: ProblemDefinition,
    space: TensorBSplineSpace,
    geo_map: GeometryMap,
) -> dict[int, float]:
    """Collocated boundary values per eliminated scalar unknown.

    Each Dirichlet facet interpolates its trace at the Greville points of the
    active face functions (the trimmed-away ones are excluded, so the trace is
    never evaluated deep inside the trimmed region).
    """
    d = space.dim
    k = system.k
    mis = np.array([space.function_multi_index(int(f)) for f in system.active])
    values: dict[int, float] = {}
    for bc in problem.dirichlet:
        fdir, side = bc.face
        if not (0 <= fdir < d and side in (0, 1)):
            raise AssemblyError(f"bad face selector {bc.face}")
        target_i = 0 if side == 0 else space.n_per_dir[fdir] - 1
        sel = np.nonzero(mis[:, fdir] == target_i)[0]
        if len(sel) == 0:
            raise AssemblyError(
                f"Dirichlet face {bc.face} has no active functions (fully trimmed away)"
            )
        rd = [kd for kd in range(d) if kd != fdir]
        grevs = [space.kvs[kd].greville() for kd in rd]
        pts = np.empty((len(sel), d))
        pts[:, fdir] = 0.0 if side == 0 else 1.0
        for j, kd in enumerate(rd):
            pts[:, kd] = grevs[j][mis[sel, kd]]
        C = np.ones((len(sel), len(sel)))
        for j, kd in enumerate(rd):
            n_k = space.n_per_dir[kd]
            V = np.zeros((len(sel), n_k))
            for a in range(len(sel)):
                f0, vals = _basis_row(space.kvs[kd], pts[a, kd])
                V[a, f0:f0 + len(vals)] = vals
            C *= V[:, mis[sel, kd]]
        t = np.asarray(bc.trace(geo_map.map_point(pts)), dtype=float).reshape(-1)
        if t.shape[0] != len(sel):
            raise AssemblyError("trace returned wrong number of values")
        coef = np.linalg.solve(C, t)
        for a, s in enumerate(sel):
            values[int(s) * k + bc.component] = float(coef[a])
    return values


def apply_dirichlet(
    system: LinearSystem,
    problem: ProblemDefinition,
    space: TensorBSplineSpace,
    geo_map: GeometryMap,
) -> LinearSystem:
    """Eliminate Dirichlet unknowns symmetrically, correcting the load."""
    if not problem.dirichlet:
        return system
    if system.constraint is not None:
        raise AssemblyError("mean constraint is redundant with Dirichlet data")
    values = dirichlet_values(system, problem, space, geo_map)
    nsc = system.A.shape[0]
    elim = np.array(sorted(values), dtype=np.int64)
    keep = np.setdiff1d(np.arange(nsc), elim)
    g = np.array([values[int(i)] for i in elim])
    A = system.A.tocsc()
    b = system.b[keep] - A[:, elim][keep] @ g
    Ared = A[:, keep][keep].tocsr()
    return LinearSystem(
        Ared, b, system.active, system.k,
        constraint=None, dirichlet_map=values, free=keep,
    )

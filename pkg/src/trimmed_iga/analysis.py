"""Manufactured benchmarks, error norms, geometric measures, rate fitting.

The three cases (2D Poisson on a disk, plate with a circular hole, 3D Poisson
on a sphere octant) carry exact solution, gradient, and the weak-form data;
the source field is the right-hand side of a(u, v) = ∫ f v + ∫ g v, i.e. the
negative Laplacian of the exact solution.  All spherical/polar expressions
are evaluated in Cartesian form so coordinate-axis singularities never hit a
quadrature point.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .assembly import (
    DirichletBC,
    Material,
    ProblemDefinition,
    apply_dirichlet,
    assemble,
)
from .quadrature import boundary_rule, gauss_legendre, map_through_tile, tile_reference_rule
from .reparam import ReparamConfig, boundary_faces, reparam_all
from .solver import solve_system
from .splines import (
    BezierMesh,
    GeometryMap,
    IdentityBoxMap,
    PolynomialDistortionMap,
    TensorBSplineSpace,
)
from .trimming import TrimmingBoundary, classify


@dataclass
class ManufacturedCase:
    """A benchmark with exact fields and the full weak-form data.

    ``exact_u`` maps physical points to (m,) scalars or (m, k) vectors;
    ``exact_grad`` to (m, d) or (m, k, d).  ``exact_measure`` and
    ``exact_gamma`` are the closed-form measure of the kept region and of the
    trimmed boundary, used for the geometric error columns.
    """

    name: str
    dim: int
    geo_map: GeometryMap
    boundary: TrimmingBoundary
    problem: ProblemDefinition
    exact_u: object
    exact_grad: object
    exact_measure: float
    exact_gamma: float
    geo_precision: float = 0.0
    length: float = 1.0


# ---------------------------------------------------------------------------
# 2D Poisson on a disk
# ---------------------------------------------------------------------------


def case_poisson_2d(distorted: bool = False, geo_precision: float = 0.0) -> ManufacturedCase:
    """sin(2πx/L)·sin(2πy/L) on the disk of radius R centered at the origin.

    The background square [-L/2, L/2]^2 with L = 2R/0.7 fully contains the
    disk, so the whole boundary is the trimming circle: pure Neumann data
    with the zero-mean constraint (the exact mean vanishes by oddness).
    """
    R = 1.0
    L = 2.0 * R / 0.7
    w = 2.0 * np.pi / L

    def u(x):
        return np.sin(w * x[:, 0]) * np.sin(w * x[:, 1])

    def grad_u(x):
        return np.stack(
            [
                w * np.cos(w * x[:, 0]) * np.sin(w * x[:, 1]),
                w * np.sin(w * x[:, 0]) * np.cos(w * x[:, 1]),
            ],
            axis=1,
        )

    lo, hi = (-L / 2.0, -L / 2.0), (L / 2.0, L / 2.0)
    geo = PolynomialDistortionMap(lo, hi) if distorted else IdentityBoxMap(lo, hi)
    problem = ProblemDefinition(
        pde="poisson",
        source=lambda x: 2.0 * w * w * u(x),
        neumann=lambda x, n: np.einsum("mi,mi->m", grad_u(x), n),
        mean_constraint=0.0,
    )
    return ManufacturedCase(
        name="poisson2d-distorted" if distorted else "poisson2d",
        dim=2,
        geo_map=geo,
        boundary=TrimmingBoundary.circle((0.0, 0.0), R, keep_side="negative"),
        problem=problem,
        exact_u=u,
        exact_grad=grad_u,
        exact_measure=np.pi * R * R,
        exact_gamma=2.0 * np.pi * R,
        geo_precision=geo_precision,
        length=L,
    )


# ---------------------------------------------------------------------------
# Plate with a circular hole (Kirsch)
# ---------------------------------------------------------------------------

PLATE_L = 4.0
PLATE_R = 1.0
PLATE_TX = 1.0
PLATE_E = 1.0e5
PLATE_NU = 0.3


def kirsch_stress(x, T=PLATE_TX, R=PLATE_R):
    """Cartesian Kirsch stress tensor (m, 2, 2) around a traction-free hole."""
    x = np.atleast_2d(x)
    r = np.hypot(x[:, 0], x[:, 1])
    th = np.arctan2(x[:, 1], x[:, 0])
    a2 = (R / r) ** 2
    a4 = a2 * a2
    c2, s2 = np.cos(2 * th), np.sin(2 * th)
    srr = 0.5 * T * (1 - a2) + 0.5 * T * (1 - 4 * a2 + 3 * a4) * c2
    stt = 0.5 * T * (1 + a2) - 0.5 * T * (1 + 3 * a4) * c2
    srt = -0.5 * T * (1 + 2 * a2 - 3 * a4) * s2
    ct, st = np.cos(th), np.sin(th)
    # Rotate the polar tensor into Cartesian axes.
    sxx = ct * ct * srr - 2 * ct * st * srt + st * st * stt
    syy = st * st * srr + 2 * ct * st * srt + ct * ct * stt
    sxy = ct * st * (srr - stt) + (ct * ct - st * st) * srt
    S = np.empty((len(r), 2, 2))
    S[:, 0, 0], S[:, 1, 1] = sxx, syy
    S[:, 0, 1] = S[:, 1, 0] = sxy
    return S


def _plate_disp_and_grad():
    T, R, E, nu = PLATE_TX, PLATE_R, PLATE_E, PLATE_NU
    mu = E / (2.0 * (1.0 + nu))
    kap = 3.0 - 4.0 * nu  # plane strain
    c = T * R / (8.0 * mu)

    def parts(x):
        x = np.atleast_2d(x)
        r = np.hypot(x[:, 0], x[:, 1])
        th = np.arctan2(x[:, 1], x[:, 0])
        return r, th

    def u(x):
        r, th = parts(x)
        ct, st = np.cos(th), np.sin(th)
        c3, s3 = np.cos(3 * th), np.sin(3 * th)
        ux = c * (r / R * (kap + 1) * ct + 2 * R / r * ((1 + kap) * ct + c3) - 2 * R**3 / r**3 * c3)
        uy = c * (r / R * (kap - 3) * st + 2 * R / r * ((1 - kap) * st + s3) - 2 * R**3 / r**3 * s3)
        return np.stack([ux, uy], axis=1)

    def grad(x):
        r, th = parts(x)
        ct, st = np.cos(th), np.sin(th)
        c3, s3 = np.cos(3 * th), np.sin(3 * th)
        dux_dr = c * ((kap + 1) * ct / R - 2 * R / r**2 * ((1 + kap) * ct + c3) + 6 * R**3 / r**4 * c3)
        dux_dth = c * (-r / R * (kap + 1) * st - 2 * R / r * ((1 + kap) * st + 3 * s3) + 6 * R**3 / r**3 * s3)
        duy_dr = c * ((kap - 3) * st / R - 2 * R / r**2 * ((1 - kap) * st + s3) + 6 * R**3 / r**4 * s3)
        duy_dth = c * (r / R * (kap - 3) * ct + 2 * R / r * ((1 - kap) * ct + 3 * c3) - 6 * R**3 / r**3 * c3)
        G = np.empty((len(r), 2, 2))
        G[:, 0, 0] = dux_dr * ct - dux_dth * st / r
        G[:, 0, 1] = dux_dr * st + dux_dth * ct / r
        G[:, 1, 0] = duy_dr * ct - duy_dth * st / r
        G[:, 1, 1] = duy_dr * st + duy_dth * ct / r
        return G

    return u, grad


def plane_strain_stress(grad, E=PLATE_E, nu=PLATE_NU):
    """σ(∇u) under the plane-strain law; grad has shape (m, 2, 2)."""
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    eps = 0.5 * (grad + np.swapaxes(grad, 1, 2))
    tr = eps[:, 0, 0] + eps[:, 1, 1]
    S = 2.0 * mu * eps
    S[:, 0, 0] += lam * tr
    S[:, 1, 1] += lam * tr
    return S


def case_plate_with_hole() -> ManufacturedCase:
    """Quarter plate [0, L]^2 minus the quarter hole of radius R at the origin.

    Symmetry faces x = 0 and y = 0 clamp the normal displacement component
    (their shear traction vanishes identically, so the free component keeps
    its natural condition); the outer faces carry the exact tractions and the
    hole is traction free.
    """
    u, grad_u = _plate_disp_and_grad()

    def traction(x, n):
        return np.einsum("mij,mj->mi", plane_strain_stress(grad_u(x)), n)

    problem = ProblemDefinition(
        pde="elasticity-plane-strain",
        source=None,
        neumann=traction,
        neumann_faces=((0, 1), (1, 1)),
        dirichlet=(
            DirichletBC((0, 0), 0, lambda x: u(x)[:, 0]),
            DirichletBC((1, 0), 1, lambda x: u(x)[:, 1]),
        ),
        material=Material(PLATE_E, PLATE_NU),
    )
    return ManufacturedCase(
        name="plate-hole",
        dim=2,
        geo_map=IdentityBoxMap((0.0, 0.0), (PLATE_L, PLATE_L)),
        boundary=TrimmingBoundary.circle((0.0, 0.0), PLATE_R, keep_side="positive"),
        problem=problem,
        exact_u=u,
        exact_grad=grad_u,
        exact_measure=PLATE_L**2 - 0.25 * np.pi * PLATE_R**2,
        exact_gamma=0.5 * np.pi * PLATE_R,
        length=PLATE_L,
    )


# ---------------------------------------------------------------------------
# 3D Poisson on a sphere octant
# ---------------------------------------------------------------------------


def case_poisson_3d() -> ManufacturedCase:
    """u = x·ρ·sin²(πr/R) on the unit-cube/sphere intersection, R = 1.

    ρ = sqrt(x² + y²); the spherical closed form r²sin²(πr/R)cosθ sin²φ
    reduces to this Cartesian expression, which is what gets evaluated (the
    spherical Laplacian has removable singularities on the polar axis).
    The flux vanishes identically on the sphere; the cube faces x=0, y=0,
    z=0 carry the exact flux and the mean constraint targets the quadrature
    integral of the exact field (its octant mean is not zero).
    """
    R = 1.0
    beta = np.pi / R
    tiny = 1e-300

    def rho_r(x):
        rho = np.hypot(x[:, 0], x[:, 1])
        r = np.sqrt(rho * rho + x[:, 2] ** 2)
        return rho, r

    def u(x):
        x = np.atleast_2d(x)
        rho, r = rho_r(x)
        s = np.sin(beta * r)
        return x[:, 0] * rho * s * s

    def grad_u(x):
        x = np.atleast_2d(x)
        rho, r = rho_r(x)
        s = np.sin(beta * r)
        s2r = np.sin(2.0 * beta * r)
        rs = np.maximum(rho, tiny)
        rr = np.maximum(r, tiny)
        gx = rho * s * s + x[:, 0] ** 2 / rs * s * s + beta * x[:, 0] ** 2 * rho / rr * s2r
        gy = x[:, 0] * x[:, 1] / rs * s * s + beta * x[:, 0] * x[:, 1] * rho / rr * s2r
        gz = beta * x[:, 0] * x[:, 2] * rho / rr * s2r
        return np.stack([gx, gy, gz], axis=1)

    def source(x):
        # -Δu in Cartesian form; x/ρ is the bounded cosθ factor.
        x = np.atleast_2d(x)
        rho, r = rho_r(x)
        s = np.sin(beta * r)
        s2r = np.sin(2.0 * beta * r)
        c2r = np.cos(2.0 * beta * r)
        rs = np.maximum(rho, tiny)
        rr = np.maximum(r, tiny)
        lap = (
            3.0 * s * s * x[:, 0] / rs
            + 6.0 * beta * x[:, 0] * rho / rr * s2r
            + 2.0 * beta * beta * x[:, 0] * rho * c2r
        )
        return -lap

    problem = ProblemDefinition(
        pde="poisson",
        source=source,
        neumann=lambda x, n: np.einsum("mi,mi->m", grad_u(x), n),
        neumann_faces=((0, 0), (1, 0), (2, 0)),
        mean_constraint=u,
    )
    return ManufacturedCase(
        name="poisson3d",
        dim=3,
        geo_map=IdentityBoxMap((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),
        boundary=TrimmingBoundary.sphere((0.0, 0.0, 0.0), R, keep_side="negative"),
        problem=problem,
        exact_u=u,
        exact_grad=grad_u,
        exact_measure=np.pi / 6.0,
        exact_gamma=np.pi / 2.0,
        length=1.0,
    )


CASES = {
    "poisson2d": lambda: case_poisson_2d(),
    "poisson2d-distorted": lambda: case_poisson_2d(distorted=True),
    "plate-hole": case_plate_with_hole,
    "poisson3d": case_poisson_3d,
}


# ---------------------------------------------------------------------------
# Norms and measures
# ---------------------------------------------------------------------------


def _as_table(vals, m, k):
    vals = np.asarray(vals, dtype=float)
    if k == 1 and vals.ndim == 1:
        vals = vals[:, None]
    return vals


def _as_grad_table(vals, m, k):
    vals = np.asarray(vals, dtype=float)
    if k == 1 and vals.ndim == 2:
        vals = vals[:, None, :]
    return vals


def error_norms(system, x, case, space, classification, reparams, quad_boost=0):
    """L2 and H1 errors of a solve, split by element family.

    Uses the same (boosted) rules as the assembly.  The H1 numbers are full
    norms; squares add up across the interior/cut split.
    """
    k = system.k
    coef = system.expand(x)
    pos = np.full(space.num_basis, -1, dtype=np.int64)
    pos[system.active] = np.arange(len(system.active))
    geo = case.geo_map
    n1 = max(space.degrees) + 1 + quad_boost
    acc = {"int": [0.0, 0.0], "cut": [0.0, 0.0]}

    def tally(e, pts, wts, fam):
        idx, B, dB = space.eval_basis(e, pts)
        c = coef[pos[idx]]
        J = geo.jacobian(pts)
        det = np.linalg.det(J)
        Jinv = np.linalg.inv(J)
        G = np.einsum("mng,mgi->mni", dB, Jinv)
        phys = geo.map_point(pts)
        w = wts * det
        m = len(w)
        du = _as_table(case.exact_u(phys), m, k) - B @ c
        dg = _as_grad_table(case.exact_grad(phys), m, k) - np.einsum("mnd,nk->mkd", G, c)
        acc[fam][0] += float(w @ np.einsum("ma,ma->m", du, du))
        acc[fam][1] += float(w @ np.einsum("mad,mad->m", dg, dg))

    ref = gauss_legendre(n1, space.dim)
    for e in classification.interior:
        e = int(e)
        lo, hi = space.element_box(e)
        tally(e, lo + ref.points * (hi - lo), ref.weights * float(np.prod(hi - lo)), "int")
    for e in classification.cut:
        e = int(e)
        for tile in reparams[e].tiles:
            rule = map_through_tile(tile, tile_reference_rule(tile, n1))
            tally(e, rule.points, rule.weights, "cut")

    l2i, h1i = acc["int"]
    l2c, h1c = acc["cut"]
    return {
        "l2": np.sqrt(l2i + l2c),
        "h1": np.sqrt(l2i + l2c + h1i + h1c),
        "h1_cut": np.sqrt(l2c + h1c),
        "h1_int": np.sqrt(l2i + h1i),
    }


def geometric_measures(reparams, classification, geo_map, space, n=None):
    """Measure of the discrete kept region and of its trimmed boundary."""
    if n is None:
        n = max(space.degrees) + 2
    ref = gauss_legendre(n, space.dim)
    measure = 0.0
    for e in classification.interior:
        lo, hi = space.element_box(int(e))
        pts = lo + ref.points * (hi - lo)
        det = np.abs(np.linalg.det(geo_map.jacobian(pts)))
        measure += float(np.prod(hi - lo)) * float(ref.weights @ det)
    for e in classification.cut:
        for tile in reparams[int(e)].tiles:
            rule = map_through_tile(tile, tile_reference_rule(tile, n))
            det = np.abs(np.linalg.det(geo_map.jacobian(rule.points)))
            measure += float(rule.weights @ det)
    gamma = 0.0
    for face in boundary_faces(reparams):
        gamma += float(np.sum(boundary_rule(face, geo_map, n).weights))
    return {"measure": measure, "gamma": gamma}


def oracle_measure(boundary, geo_map, box=None, samples=100_000, seed=0):
    """Stratified Monte-Carlo measure of the kept region, with standard error.

    Two points per stratum give an unbiased within-stratum variance estimate.
    Deterministic for a fixed seed.
    """
    d = geo_map.dim
    if box is None:
        lo, hi = np.zeros(d), np.ones(d)
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in box)
    g = max(1, int(round((samples / 2.0) ** (1.0 / d))))
    rng = np.random.default_rng(seed)
    edges = [np.linspace(lo[k], hi[k], g + 1)[:-1] for k in range(d)]
    mesh = np.meshgrid(*edges, indexing="ij")
    base = np.stack([m.reshape(-1) for m in mesh], axis=1)
    cell = (hi - lo) / g
    vol = float(np.prod(cell))
    vals = np.empty((2, len(base)))
    for trial in range(2):
        pts = base + rng.random(base.shape) * cell
        inside = boundary.signed(geo_map.map_point(pts)) < 0.0
        det = np.abs(np.linalg.det(geo_map.jacobian(pts)))
        vals[trial] = det * inside
    mean = vals.mean(axis=0)
    # Var of a 2-sample mean: (x1-x2)^2 / 4, summed over strata.
    var = float(np.sum((vals[0] - vals[1]) ** 2) / 4.0) * vol * vol
    return float(mean.sum() * vol), np.sqrt(var)


def fit_rate(hs, errors, min_points=3, floor=None):
    """Least-squares slope of log(error) vs log(h) over the finest points.

    With a positive ``floor``, points within 10x of it are treated as
    saturated and dropped before fitting.
    """
    hs = np.asarray(hs, dtype=float)
    errors = np.asarray(errors, dtype=float)
    ok = np.isfinite(errors) & (errors > 0.0)
    if floor:
        ok &= errors > 10.0 * floor
    hs, errors = hs[ok], errors[ok]
    order = np.argsort(hs)
    hs, errors = hs[order], errors[order]
    npts = min(max(min_points, 3), len(hs))
    if len(hs) < 2:
        return np.nan
    hs, errors = hs[:npts], errors[:npts]
    A = np.vstack([np.log(hs), np.ones(len(hs))]).T
    slope, _ = np.linalg.lstsq(A, np.log(errors), rcond=None)[0]
    return float(slope)


# ---------------------------------------------------------------------------
# Single runs and sweeps
# ---------------------------------------------------------------------------


@dataclass
class ConvergenceRecord:
    rows: list = field(default_factory=list)
    slopes: dict = field(default_factory=dict)


def run_single(
    case: ManufacturedCase,
    p: int,
    r: int,
    nel: int,
    h_t: int = 1,
    quad_boost: int = 0,
    conditions: bool = False,
    tol: float = 1e-12,
    seed: int = 0,
) -> dict:
    """One full discretize-solve-measure cycle; returns a result row."""
    t0 = time.time()
    d = case.dim
    space = TensorBSplineSpace.uniform(degrees=(p,) * d, num_elements=(nel,) * d)
    mesh = BezierMesh(space, case.geo_map)
    cls = classify(mesh, case.boundary)
    cfg = ReparamConfig(geo_precision=case.geo_precision)
    reps = reparam_all(space, case.geo_map, case.boundary, cls, r=r, h_t=h_t, config=cfg)
    system = assemble(space, case.geo_map, cls, reps, case.problem, quad_boost=quad_boost)
    if case.problem.dirichlet:
        system = apply_dirichlet(system, case.problem, space, case.geo_map)
    rep = solve_system(system, tol=tol, conditions=conditions, seed=seed)
    errs = error_norms(system, rep.x, case, space, cls, reps, quad_boost=quad_boost)
    geom = geometric_measures(reps, cls, case.geo_map, space)
    return {
        "case": case.name,
        "p": p,
        "r": r,
        "ht": h_t,
        "h": case.length / nel,
        "l2": errs["l2"],
        "h1": errs["h1"],
        "h1_cut": errs["h1_cut"],
        "h1_int": errs["h1_int"],
        "area_err": abs(geom["measure"] - case.exact_measure),
        "bnd_err": abs(geom["gamma"] - case.exact_gamma),
        "cond_raw": rep.cond_raw if rep.cond_raw is not None else np.nan,
        "cond_scaled": rep.cond_scaled if rep.cond_scaled is not None else np.nan,
        "iters": rep.iterations,
        "secs": time.time() - t0,
    }


RATE_COLUMNS = ("l2", "h1", "h1_cut", "h1_int", "area_err", "bnd_err", "cond_scaled")


def convergence_study(
    case: ManufacturedCase,
    degrees,
    r_choices=None,
    h_t_choices=(1,),
    mesh_levels=(8, 16, 32),
    quad_boost: int = 0,
    conditions: bool = False,
    seed: int = 0,
) -> ConvergenceRecord:
    """Sweep (p, r, h_t, h); failures land in the row, the sweep continues."""
    record = ConvergenceRecord()
    for p in np.atleast_1d(degrees):
        p = int(p)
        rs = [p] if r_choices is None else list(np.atleast_1d(r_choices))
        for r in rs:
            for h_t in h_t_choices:
                rows = []
                for nel in mesh_levels:
                    try:
                        row = run_single(
                            case, p, int(r), int(nel), h_t=int(h_t),
                            quad_boost=quad_boost, conditions=conditions, seed=seed,
                        )
                    except Exception as exc:  # noqa: BLE001 - sweep must continue
                        row = {"case": case.name, "p": p, "r": int(r), "ht": int(h_t),
                               "h": case.length / nel, "error": repr(exc)}
                    rows.append(row)
                    record.rows.append(row)
                good = [row for row in rows if "error" not in row]
                if len(good) >= 2:
                    hs = [row["h"] for row in good]
                    floor = case.geo_precision or None
                    for col in RATE_COLUMNS:
                        vals = [row[col] for row in good]
                        record.slopes[(case.name, p, int(r), int(h_t), col)] = fit_rate(
                            hs, vals, floor=floor if col in ("l2", "area_err", "bnd_err") else None
                        )
    return record

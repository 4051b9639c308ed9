"""Diagonal scaling, preconditioned conjugate gradients, condition numbers.

Small trimmed elements make raw stiffness matrices arbitrarily ill
conditioned; symmetric diagonal scaling D = diag(1/sqrt(A_ii)) restores the
expected h^-2 behavior.  Mean-constrained (pure Neumann) systems are solved
by projecting right-hand side and search directions onto the constraint
plane, which keeps plain CG applicable; condition numbers of constrained
systems refer to the operator restricted to the constraint's null space,
since that is what governs the iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    pass


@dataclass
class SolveReport:
    x: np.ndarray
    iterations: int
    relres: float
    converged: bool
    cond_raw: float | None = None
    cond_scaled: float | None = None


def diagonal_scaling(A, names=None) -> np.ndarray:
    """The vector d with d_i = 1/sqrt(A_ii); D A D then has unit diagonal."""
    diag = np.asarray(A.diagonal(), dtype=float)
    bad = np.nonzero(diag <= 0.0)[0]
    if len(bad):
        i = int(bad[0])
        what = f"active function {names[i]}" if names is not None else f"scalar unknown {i}"
        raise SolverError(
            f"nonpositive stiffness diagonal {diag[i]:.3e} at {what}; "
            "usually a sliver cut whose quadrature collapsed"
        )
    return 1.0 / np.sqrt(diag)


def constraint_projector(c: np.ndarray):
    c = np.asarray(c, dtype=float)
    cc = float(c @ c)
    if cc == 0.0:
        raise SolverError("zero constraint row")

    def project(v):
        return v - c * ((c @ v) / cc)

    return project


def pcg(A, b, D=None, tol=1e-12, maxit=None, project=None, x0=None) -> SolveReport:
    """Conjugate gradients with Jacobi-squared preconditioning.

    Applying M = D^2 inside plain CG is algebraically identical to running CG
    on the symmetrically scaled system D A D y = D b with x = D y.  ``project``
    restricts the iteration to a linear subspace (constraint handling); the
    caller supplies a particular solution through ``x0`` in that case.
    """
    b = np.asarray(b, dtype=float)
    n = len(b)
    if maxit is None:
        maxit = 10 * n
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        bnorm = 1.0
    r = b - A @ x
    if project is not None:
        r = project(r)
    M = (lambda v: v) if D is None else (lambda v: D * D * v)

    z = M(r)
    if project is not None:
        z = project(z)
    p = z.copy()
    rz = float(r @ z)
    it = 0
    relres = float(np.linalg.norm(r)) / bnorm
    while relres > tol and it < maxit:
        Ap = A @ p
        if project is not None:
            Ap = project(Ap)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise SolverError(f"matrix not positive definite on the search space (pAp = {pAp:.3e})")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        it += 1
        relres = float(np.linalg.norm(r)) / bnorm
        if relres <= tol:
            break
        z = M(r)
        if project is not None:
            z = project(z)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return SolveReport(x, it, relres, relres <= tol)


# ---------------------------------------------------------------------------
# Condition numbers
# ---------------------------------------------------------------------------

_DENSE_LIMIT = 2000


def _dense_extremes(B, constraint):
    Bd = B.toarray() if sp.issparse(B) else np.asarray(B)
    if constraint is not None:
        Q = la.null_space(np.asarray(constraint, dtype=float)[None, :])
        Bd = Q.T @ Bd @ Q
    ev = la.eigvalsh(Bd)
    return float(ev[0]), float(ev[-1])


def _lanczos_max(apply_op, n, m=200, seed=0):
    """Largest eigenvalue by Lanczos with full reorthogonalization."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    V = [v]
    alphas, betas = [], []
    for j in range(min(m, n)):
        w = apply_op(V[-1])
        a = float(V[-1] @ w)
        alphas.append(a)
        w -= a * V[-1]
        if len(V) > 1:
            w -= betas[-1] * V[-2]
        # Full reorthogonalization keeps the Ritz values honest.
        Vm = np.array(V)
        w -= Vm.T @ (Vm @ w)
        b = float(np.linalg.norm(w))
        if b < 1e-13:
            break
        betas.append(b)
        V.append(w / b)
    if len(alphas) == 1:
        return alphas[0]
    ev = la.eigh_tridiagonal(np.array(alphas), np.array(betas[: len(alphas) - 1]), eigvals_only=True)
    return float(ev[-1])


def _inverse_iteration_min(B, constraint, n, seed=0, maxit=100, rtol=1e-8):
    """Smallest eigenvalue through factorized inverse iteration.

    Constrained operators invert through the augmented saddle matrix
    [[B, c], [c^T, 0]], which applies (P B P)^-1 on the constraint plane.
    """
    if constraint is None:
        lu = spla.splu(sp.csc_matrix(B))
        solve = lu.solve
        project = None
    else:
        c = np.asarray(constraint, dtype=float)
        aug = sp.bmat([[sp.csc_matrix(B), c[:, None]], [c[None, :], None]], format="csc")
        lu = spla.splu(aug)
        project = constraint_projector(c)

        def solve(v):
            return lu.solve(np.concatenate([v, [0.0]]))[:-1]

    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    if project is not None:
        v = project(v)
    v /= np.linalg.norm(v)
    lam = np.inf
    for _ in range(maxit):
        w = solve(v)
        if project is not None:
            w = project(w)
        nw = np.linalg.norm(w)
        if not np.isfinite(nw) or nw == 0.0:
            return 0.0
        w /= nw
        Bw = B @ w
        if project is not None:
            Bw = project(Bw)
        lam_new = float(w @ Bw)
        if abs(lam_new - lam) <= rtol * abs(lam_new):
            return lam_new
        lam, v = lam_new, w
    return lam


def condition_number(A, mode: str = "scaled", constraint=None, seed: int = 0) -> float:
    """Spectral condition number of A or of the scaled D A D.

    With a constraint row the spectrum is taken on the constraint's null
    space.  Dense symmetric eigensolve up to 2000 unknowns, Lanczos plus
    inverse iteration beyond.
    """
    if mode not in ("raw", "scaled"):
        raise ValueError(f"unknown mode {mode!r}")
    A = sp.csr_matrix(A)
    n = A.shape[0]
    if mode == "scaled":
        d = diagonal_scaling(A)
        Dm = sp.diags(d)
        B = (Dm @ A @ Dm).tocsr()
        cons = None if constraint is None else np.asarray(constraint) / d
    else:
        B = A
        cons = None if constraint is None else np.asarray(constraint, dtype=float)
    if n <= _DENSE_LIMIT:
        lo, hi = _dense_extremes(B, cons)
    else:
        project = None if cons is None else constraint_projector(cons)

        def apply_op(v):
            w = B @ (v if project is None else project(v))
            return w if project is None else project(w)

        hi = _lanczos_max(apply_op, n, seed=seed)
        lo = _inverse_iteration_min(B, cons, n, seed=seed)
    if lo <= 0.0:
        if lo > -1e-10 * max(hi, 1.0):
            return np.inf  # singular to working precision
        raise SolverError(f"matrix has negative eigenvalue {lo:.3e}")
    return hi / lo


def solve_system(system, tol=1e-12, maxit=None, conditions=False, seed=0) -> SolveReport:
    """Drive pcg on an assembled LinearSystem, handling its constraint row."""
    A, b = system.A, system.b
    d = diagonal_scaling(A)
    if system.constraint is not None:
        c, target = system.constraint
        x0 = c * (target / float(c @ c))
        project = constraint_projector(c)
        rep = pcg(A, b, D=d, tol=tol, maxit=maxit, project=project, x0=x0)
    else:
        c = None
        rep = pcg(A, b, D=d, tol=tol, maxit=maxit)
    if conditions:
        rep.cond_raw = condition_number(A, "raw", constraint=c, seed=seed)
        rep.cond_scaled = condition_number(A, "scaled", constraint=c, seed=seed)
    return rep

"""Linear and eigenvalue solvers.

``cg_solve`` backs every boundary value solve.  ``smallest_eigpairs`` is a
block inverse iteration with Rayleigh-Ritz extraction built on it, used for
the single full-space solve of the multilevel scheme and for the direct
baseline.  ``esolve_augmented`` solves the small dense problem on the coarse
space enriched by the current iterate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.linalg import lapack

from .fespace import AssembledForms, FeSpace, prolongation_matrix

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """A solver failed to converge or received an unusable operator."""


@dataclass
class SolveReport:
    iterations: int
    final_residual: float
    converged: bool


# -- preconditioners ---------------------------------------------------------

def make_preconditioner(A, kind="sgs"):
    """Return ``z = apply(r)`` approximating A^{-1} r.

    ``kind`` is ``"sgs"`` (one symmetric Gauss-Seidel sweep), ``"amg"``
    (smoothed aggregation V-cycle), ``"jacobi"`` or ``None``.
    """
    if kind is None or kind == "none":
        return lambda r: r.copy()
    if callable(kind):
        return kind
    A = sp.csr_matrix(A)
    if kind == "jacobi":
        dinv = 1.0 / A.diagonal()
        return lambda r: dinv * r
    if kind == "sgs":
        from pyamg.relaxation.relaxation import gauss_seidel

        def apply(r):
            z = np.zeros_like(r)
            gauss_seidel(A, z, r, iterations=1, sweep="symmetric")
            return z
        return apply
    if kind == "amg":
        import pyamg

        ml = pyamg.smoothed_aggregation_solver(A, symmetry="symmetric")
        m = ml.aspreconditioner(cycle="V")
        return lambda r: m @ r
    raise ValueError(f"unknown preconditioner {kind!r}")


def cg_solve(A, b, tol=1e-10, precond="sgs", x0=None, maxiter=None):
    """Preconditioned conjugate gradients for SPD ``A``.

    Stops when ||b - A x|| <= tol ||b||.  A non-converged report is returned
    (not raised) when ``maxiter`` is reached.
    """
    b = np.asarray(b, dtype=float)
    n = len(b)
    if n == 0:
        return np.zeros(0), SolveReport(0, 0.0, True)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), SolveReport(0, 0.0, True)
    if not 0 < tol < 1:
        raise ValueError("tol must lie in (0, 1)")
    apply_m = precond if callable(precond) else make_preconditioner(A, precond)
    maxiter = maxiter or max(10 * n, 1000)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x if x0 is not None else b.copy()
    res = np.linalg.norm(r) / bnorm
    if res <= tol:
        return x, SolveReport(0, res, True)
    z = apply_m(r)
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        ap = A @ p
        pap = p @ ap
        if pap <= 0:
            raise SolverError("operator is not positive definite")
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        res = np.linalg.norm(r) / bnorm
        if res <= tol:
            return x, SolveReport(it, res, True)
        z = apply_m(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, SolveReport(maxiter, res, False)


class LinearSolver:
    """Reusable PCG solve for one operator (preconditioner built once)."""

    def __init__(self, A, tol=1e-10, precond="sgs"):
        self.A = A
        self.tol = tol
        self.apply_m = make_preconditioner(A, precond) if A.shape[0] else None
        self.iterations = 0

    def solve(self, b, x0=None, tol=None):
        x, rep = cg_solve(self.A, b, tol or self.tol, self.apply_m, x0=x0)
        self.iterations += rep.iterations
        if not rep.converged:
            raise SolverError(f"PCG did not converge: residual {rep.final_residual:.2e}")
        return x


# -- dense generalized eigenproblem -------------------------------------------

def dense_gev(A_hat, M_hat):
    """All eigenpairs of the symmetric pencil, ascending, M-orthonormal vectors."""
    A_hat = np.asarray(A_hat, dtype=float)
    M_hat = np.asarray(M_hat, dtype=float)
    A_hat = 0.5 * (A_hat + A_hat.T)
    M_hat = 0.5 * (M_hat + M_hat.T)
    try:
        w, v = sla.eigh(A_hat, M_hat)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"mass matrix is not positive definite: {exc}") from exc
    return w, v


def independent_columns(M_hat, rtol=1e-12):
    """Indices of columns kept by pivoted Cholesky of the Gram matrix.

    Elimination stops at the first Schur-complement pivot below
    ``rtol * max(diag)``; the surviving pivots are returned sorted.
    """
    M_hat = np.asarray(M_hat, dtype=float)
    n = len(M_hat)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    dmax = float(np.max(np.diag(M_hat)))
    if dmax <= 0:
        return np.zeros(0, dtype=np.int64)
    _, piv, rank, info = lapack.dpstrf(np.array(M_hat, order="F"), lower=1, tol=rtol * dmax)
    if info < 0:
        raise SolverError("pivoted Cholesky failed")
    return np.sort(piv[:rank] - 1)


# -- sparse smallest eigenpairs ------------------------------------------------

def _sign_fix(v):
    """Flip columns so that their largest-magnitude entry is positive."""
    v = np.atleast_2d(v.T).T
    idx = np.argmax(np.abs(v), axis=0)
    s = np.sign(v[idx, np.arange(v.shape[1])])
    s[s == 0] = 1.0
    return v * s


def smallest_eigpairs(A, M, nev=1, tol=1e-10, precond="sgs", x0=None, maxiter=300,
                      guard=None, stats=None, return_block=False):
    """Smallest ``nev`` eigenpairs of ``A x = lam M x`` (both SPD, sparse).

    Block inverse iteration: every sweep applies A^{-1} M to a block of
    ``nev + guard`` vectors by PCG, then replaces the block by its Ritz
    vectors.  Vectors are returned scaled to unit energy norm and sign-fixed.
    ``x0`` (n, p) warm-starts the block.

    Returns ``(lams, vecs)`` with ``vecs`` of shape (n, nev), plus the
    final M-orthonormal Ritz block when ``return_block`` is set (useful as
    the next warm start).
    """
    n = A.shape[0]
    if nev < 1 or nev > n:
        raise ValueError(f"cannot compute {nev} eigenpairs of a problem of size {n}")
    guard = max(4, nev) if guard is None else guard
    p = min(n, nev + guard)
    if n <= max(2 * p, 50):
        w, v = dense_gev(A.toarray(), M.toarray())
        block = v[:, :p]
        v = v[:, :nev] / np.sqrt(w[:nev])
        if stats is not None:
            stats["outer"] = 0
        if return_block:
            return w[:nev], _sign_fix(v), block
        return w[:nev], _sign_fix(v)

    lin = LinearSolver(A, tol=min(1e-2 * tol, 1e-11), precond=precond)
    rng = np.random.default_rng(12345)
    X = np.empty((n, p))
    k0 = 0
    if x0 is not None:
        x0 = np.atleast_2d(np.asarray(x0, dtype=float).T).T
        k0 = min(p, x0.shape[1])
        X[:, :k0] = x0[:, :k0]
    if k0 < p:
        X[:, k0:] = rng.standard_normal((n, p - k0))
    # Ritz step on the starting block
    w, X = _ritz(A, M, X)
    for it in range(1, maxiter + 1):
        MX = M @ X
        AX = A @ X
        R = AX[:, :nev] - MX[:, :nev] * w[:nev]
        res = np.linalg.norm(R, axis=0) / np.linalg.norm(AX[:, :nev], axis=0)
        if np.all(res <= tol):
            break
        guess = X / np.where(np.isfinite(w), w, np.inf)
        Y = np.column_stack([lin.solve(MX[:, i], x0=guess[:, i]) for i in range(p)])
        w, X = _ritz(A, M, Y)
    else:
        raise SolverError(f"eigensolver did not converge in {maxiter} sweeps "
                          f"(residuals {res})")
    if stats is not None:
        stats["outer"] = it
        stats["inner"] = lin.iterations
    V = X[:, :nev] / np.sqrt(np.maximum(w[:nev], 1e-300))
    if return_block:
        return w[:nev], _sign_fix(V), X
    return w[:nev], _sign_fix(V)


def _ritz(A, M, Y):
    """Ritz values/vectors of the pencil on span(Y), M-orthonormal."""
    A_hat = Y.T @ (A @ Y)
    M_hat = Y.T @ (M @ Y)
    keep = independent_columns(M_hat)
    w, c = dense_gev(A_hat[np.ix_(keep, keep)], M_hat[np.ix_(keep, keep)])
    X = Y[:, keep] @ c
    if len(keep) < Y.shape[1]:
        # refill dropped directions so the block size stays fixed
        rng = np.random.default_rng(len(keep))
        extra = rng.standard_normal((Y.shape[0], Y.shape[1] - len(keep)))
        X = np.column_stack([X, extra])
        w = np.concatenate([w, np.full(Y.shape[1] - len(keep), np.inf)])
    return w, X


# -- augmented coarse-space eigenproblem --------------------------------------

@dataclass
class AugmentedSpace:
    """Prolonged interior coarse basis plus current iterate(s) as last columns."""

    coarse_part: sp.csr_matrix   # (n_int_fine, n_int_coarse)
    iterates: np.ndarray         # (n_int_fine, m)
    kept_columns: np.ndarray = field(default=None)

    @property
    def dim(self):
        return self.coarse_part.shape[1] + self.iterates.shape[1]


def coarse_basis(coarse: FeSpace, fine: FeSpace, prolongation=None):
    """Interior coarse hat functions as columns on interior fine DoFs."""
    P = prolongation_matrix(coarse, fine) if prolongation is None else prolongation
    return P[fine.interior][:, coarse.interior].tocsc()


def esolve_augmented(coarse: FeSpace, fine: FeSpace, u_k, forms: AssembledForms,
                     nev=1, basis=None, lineage=None):
    """Smallest eigenpair(s) on V_H + span{u_k}.

    ``u_k`` is a full fine-space vector or an (n_dofs, m) block.  Returns
    ``(lams, U, space)`` with ``U`` full-length, unit energy norm and signed
    so a(u~, u_k) >= 0 column by column.
    """
    if lineage is not None:
        from .fespace import check_lineage
        check_lineage(coarse, fine, lineage)
    U = np.atleast_2d(np.asarray(u_k, dtype=float).T).T
    if not np.any(U):
        raise SolverError("augmenting iterate is zero")
    Pc = coarse_basis(coarse, fine) if basis is None else basis
    Ui = U[fine.interior]
    A, M = forms.A_c, forms.M_c
    APc, MPc = (A @ Pc).tocsc(), (M @ Pc).tocsc()
    AU, MU = A @ Ui, M @ Ui
    A_hat = np.block([[(Pc.T @ APc).toarray(), Pc.T @ AU],
                      [AU.T @ Pc, Ui.T @ AU]])
    M_hat = np.block([[(Pc.T @ MPc).toarray(), Pc.T @ MU],
                      [MU.T @ Pc, Ui.T @ MU]])
    keep = independent_columns(M_hat)
    if len(keep) == 0:
        raise SolverError("augmented space is degenerate: all columns filtered")
    w, c = dense_gev(A_hat[np.ix_(keep, keep)], M_hat[np.ix_(keep, keep)])
    nev = min(nev, len(w))
    coef = np.zeros((A_hat.shape[0], nev))
    coef[keep] = c[:, :nev]
    nc = Pc.shape[1]
    vecs = Pc @ coef[:nc] + Ui @ coef[nc:]
    vecs /= np.sqrt(np.maximum(w[:nev], 1e-300))
    # a(u~, u_k) >= 0 for the matching iterate column
    for i in range(nev):
        ref = AU[:, min(i, AU.shape[1] - 1)]
        if vecs[:, i] @ ref < 0:
            vecs[:, i] *= -1
    space = AugmentedSpace(Pc, Ui, keep)
    return w[:nev], fine.extend(vecs), space

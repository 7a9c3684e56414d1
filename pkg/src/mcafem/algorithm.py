"""Adaptive eigenvalue drivers.

``run_algorithm_c`` is the multilevel-correction loop: on every refined mesh
it solves boundary value problems only, and eigenproblems are solved on the
fixed coarse space V_H enriched by the current iterate.  ``run_direct_afem``
and ``run_uniform`` are the baselines that solve the full discrete
eigenproblem on every mesh.

Iterates are stored as blocks with ``nev`` columns; ``nev = 1`` is the
single-eigenpair scheme.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .estimator import IndicatorField, estimate_block
from .fespace import FeSpace, a_norm, assemble, prolongation_matrix
from .marking import dorfler_mark
from .mesh import refine, uniform_refine
from .solvers import LinearSolver, coarse_basis, esolve_augmented, smallest_eigpairs

log = logging.getLogger(__name__)

MODES = {"algc": "algc", "algorithm-c": "algc", "direct": "direct",
         "direct-afem": "direct", "uniform": "uniform"}


def default_theta2(degree: int) -> float:
    return 0.6 if degree == 1 else 0.4


@dataclass
class AlgoConfig:
    theta1: float = 0.4
    theta2: Optional[float] = None
    degree: int = 1
    max_elements: int = 40000
    max_iterations: Optional[int] = None
    nev: int = 1
    lin_tol: float = 1e-10
    eig_tol: float = 1e-10
    precond: str = "sgs"
    mode: str = "algc"
    # T_H = T_1; False makes T_1 one uniform bisection round of T_H
    coarse_is_initial: bool = True
    timing: bool = True

    def __post_init__(self):
        if self.theta2 is None:
            self.theta2 = default_theta2(self.degree)
        for name in ("theta1", "theta2"):
            val = getattr(self, name)
            if not 0 < val < 1:
                raise ValueError(f"{name} must satisfy 0 < {name} < 1, got {val}")
        if self.degree not in (1, 2):
            raise ValueError(f"degree must be 1 or 2, got {self.degree}")
        if self.nev < 1:
            raise ValueError("nev must be at least 1")
        if self.max_elements < 1:
            raise ValueError("max_elements must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        self.mode = MODES[self.mode]


@dataclass
class AlgoCState:
    """Bookkeeping of the multilevel-correction loop."""

    k: int = 1
    ell: int = 1
    j: int = 0
    n_ell: int = 1
    eta_ref: float = 0.0
    fbar: Optional[np.ndarray] = None
    ubar: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    lam: Optional[np.ndarray] = None
    coarse_space: Optional[FeSpace] = None


@dataclass
class LogRecord:
    k: int
    n_elems: int
    n_dofs: int
    lam: float
    lam_err: Optional[float]
    eta: float
    j_k: int
    esolve: bool
    wall_ms: float
    lambdas: tuple = ()
    full_eig_dims: list = field(default_factory=list)
    aug_dims: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    norm_dev: float = 0.0


@dataclass
class ConvergenceLog:
    mode: str
    problem: str
    degree: int
    reference: Optional[float] = None
    coarse_dim: int = 0
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def full_eigensolves(self) -> list:
        return [d for r in self.records for d in r.full_eig_dims]

    @property
    def augmented_solves(self) -> list:
        return [d for r in self.records for d in r.aug_dims]

    @property
    def esolve_meshes(self) -> list:
        return [r.k for r in self.records if r.esolve]


def rayleigh(forms, u) -> float:
    """a(u, u) / (u, u) for a full-length coefficient vector."""
    u = np.asarray(u, dtype=float)
    A, M = (forms.A, forms.M) if len(u) == forms.A.shape[0] else (forms.A_c, forms.M_c)
    den = float(u @ (M @ u))
    if den <= 0:
        raise ValueError("Rayleigh quotient of the zero vector")
    return float(u @ (A @ u)) / den


def evaluate_decision(eta_k: float, theta2: float, j: int, eta_ref: float) -> str:
    """``"correct"`` iff eta_k <= theta2^(j+1) eta_ref, else ``"advance"``."""
    return "correct" if eta_k <= theta2 ** (j + 1) * eta_ref else "advance"


def _normalize(forms, ubar):
    """Energy-normalized copies of the columns of ``ubar``, sign-fixed."""
    U = ubar.copy()
    for i in range(U.shape[1]):
        U[:, i] /= a_norm(forms, U[:, i])
        if U[np.argmax(np.abs(U[:, i])), i] < 0:
            U[:, i] *= -1
    return U


class _Clock:
    def __init__(self, enabled):
        self.enabled = enabled
        self.start = time.perf_counter()

    def lap(self):
        if not self.enabled:
            return 0.0
        now = time.perf_counter()
        ms, self.start = 1e3 * (now - self.start), now
        return ms


def _initial_meshes(problem, config):
    mesh_h = problem.initial_mesh()
    if config.coarse_is_initial:
        return mesh_h, mesh_h
    mesh1, _ = uniform_refine(mesh_h, 1)
    return mesh_h, mesh1


def _check_size(space, nev):
    if space.n_interior < nev:
        raise ValueError(f"initial mesh has {space.n_interior} interior DoFs, fewer than "
                         f"nev = {nev}; refine the mesh or raise the degree")


def _keep_going(log_, mesh, config):
    if config.max_iterations is not None and len(log_) >= config.max_iterations:
        return False
    return mesh.n_cells <= config.max_elements


def _err(problem, lam):
    return None if problem.reference is None else abs(lam - problem.reference)


def run_algorithm_c(problem, config: AlgoConfig,
                    on_mesh: Optional[Callable] = None) -> ConvergenceLog:
    """Adaptive multilevel-correction eigensolver.

    ``on_mesh(k, space, indicators, u)`` is called after every iteration with
    the normalized iterate block ``u`` (full-length columns).
    """
    clock = _Clock(config.timing)
    nev = config.nev
    mesh_h, mesh = _initial_meshes(problem, config)
    coarse = FeSpace(mesh_h, config.degree)
    space = FeSpace(mesh, config.degree)
    _check_size(coarse, nev)
    forms = assemble(space, problem)
    out = ConvergenceLog("algc", problem.name, config.degree, problem.reference,
                         coarse_dim=coarse.n_interior)

    lam, ui = smallest_eigpairs(forms.A_c, forms.M_c, nev, config.eig_tol, config.precond)
    st = AlgoCState(coarse_space=coarse)
    st.u = space.extend(ui)
    st.lam = np.asarray(lam)
    st.fbar = st.u.copy()
    st.ubar = st.u / st.lam
    ind = estimate_block(space, problem, st.fbar, st.ubar)
    st.eta_ref = ind.total
    # the full solve on T_1 is reported as the single correction on mesh 1
    out.records.append(LogRecord(
        k=1, n_elems=mesh.n_cells, n_dofs=space.n_dofs, lam=float(st.lam[0]),
        lam_err=_err(problem, st.lam[0]), eta=st.eta_ref, j_k=1, esolve=True,
        wall_ms=clock.lap(), lambdas=tuple(map(float, st.lam)),
        full_eig_dims=[space.n_interior]))
    if on_mesh:
        on_mesh(1, space, ind, st.u)
    st.k = 2

    while _keep_going(out, mesh, config):
        marked = dorfler_mark(ind, config.theta1)
        mesh, _ = refine(mesh, marked)
        fine = FeSpace(mesh, config.degree)
        P = prolongation_matrix(space, fine)
        st.fbar = P @ st.fbar
        guess = (P @ st.ubar)[fine.interior]
        space = fine
        forms = assemble(space, problem)
        lin = LinearSolver(forms.A_c, config.lin_tol, config.precond)
        basis = None
        aug_dims, decisions = [], []
        st.j = 0
        while True:
            # LSOLVE, normalization and Rayleigh quotient
            rhs = forms.M_c @ st.fbar[space.interior]
            ubar_i = np.column_stack([lin.solve(rhs[:, i], x0=guess[:, i]) for i in range(nev)])
            st.ubar = space.extend(ubar_i)
            st.u = _normalize(forms, st.ubar)
            st.lam = np.array([rayleigh(forms, st.u[:, i]) for i in range(nev)])
            ind = estimate_block(space, problem, st.fbar, st.ubar)
            eta = ind.total
            branch = evaluate_decision(eta, config.theta2, st.j, st.eta_ref)
            decisions.append(branch)
            if branch == "advance":
                break
            if basis is None:
                basis = coarse_basis(coarse, space)
            _, st.fbar, aug = esolve_augmented(coarse, space, st.u, forms, nev, basis)
            aug_dims.append(aug.dim)
            guess = ubar_i
            st.j += 1
        j_k = st.j
        if st.j > 0:
            _, next_f, aug = esolve_augmented(coarse, space, st.u, forms, nev, basis)
            aug_dims.append(aug.dim)
            st.eta_ref = eta
            st.n_ell = st.k
            st.ell += 1
            st.j = 0
        else:
            next_f = st.u.copy()
        norm_dev = max(abs(a_norm(forms, st.u[:, i]) - 1.0) for i in range(nev))
        out.records.append(LogRecord(
            k=st.k, n_elems=mesh.n_cells, n_dofs=space.n_dofs, lam=float(st.lam[0]),
            lam_err=_err(problem, st.lam[0]), eta=eta, j_k=j_k, esolve=j_k > 0,
            wall_ms=clock.lap(), lambdas=tuple(map(float, st.lam)),
            aug_dims=aug_dims, decisions=decisions, norm_dev=norm_dev))
        log.info("algc k=%d cells=%d dofs=%d lambda=%.12g eta=%.3e j=%d",
                 st.k, mesh.n_cells, space.n_dofs, st.lam[0], eta, j_k)
        if on_mesh:
            on_mesh(st.k, space, ind, st.u)
        # f^(0)_{k+1}; the next marking uses ind = eta_k(fbar_k, ubar_k)
        st.fbar = next_f
        st.k += 1
    return out


def _run_full_space(problem, config, uniform, on_mesh=None):
    clock = _Clock(config.timing)
    nev = config.nev
    _, mesh = _initial_meshes(problem, config)
    out = ConvergenceLog("uniform" if uniform else "direct", problem.name,
                         config.degree, problem.reference)
    space, block = None, None
    k = 1
    while True:
        fine = FeSpace(mesh, config.degree)
        if space is None:
            _check_size(fine, nev)
        x0 = None
        if space is not None:
            x0 = (prolongation_matrix(space, fine) @ space.extend(block))[fine.interior]
        space = fine
        forms = assemble(space, problem)
        lam, ui, block = smallest_eigpairs(forms.A_c, forms.M_c, nev, config.eig_tol,
                                           config.precond, x0=x0, return_block=True)
        U = space.extend(ui)
        ind = estimate_block(space, problem, U * lam, U)
        norm_dev = max(abs(a_norm(forms, U[:, i]) - 1.0) for i in range(nev))
        out.records.append(LogRecord(
            k=k, n_elems=mesh.n_cells, n_dofs=space.n_dofs, lam=float(lam[0]),
            lam_err=_err(problem, lam[0]), eta=ind.total, j_k=0, esolve=True,
            wall_ms=clock.lap(), lambdas=tuple(map(float, lam)),
            full_eig_dims=[space.n_interior], norm_dev=norm_dev))
        log.info("%s k=%d cells=%d dofs=%d lambda=%.12g eta=%.3e", out.mode, k,
                 mesh.n_cells, space.n_dofs, lam[0], ind.total)
        if on_mesh:
            on_mesh(k, space, ind, U)
        if not _keep_going(out, mesh, config):
            break
        marked = mesh.cell_ids if uniform else dorfler_mark(ind, config.theta1)
        mesh, _ = refine(mesh, marked)
        k += 1
    return out


def run_direct_afem(problem, config: AlgoConfig, on_mesh=None) -> ConvergenceLog:
    """Solve-estimate-mark-refine with a full eigensolve on every mesh.

    The estimator load is lambda_k u_k, i.e. the eigenproblem residual.
    """
    return _run_full_space(problem, config, uniform=False, on_mesh=on_mesh)


def run_uniform(problem, config: AlgoConfig, on_mesh=None) -> ConvergenceLog:
    """Like :func:`run_direct_afem` but bisecting every element each pass."""
    return _run_full_space(problem, config, uniform=True, on_mesh=on_mesh)


def run(problem, config: AlgoConfig, on_mesh=None) -> ConvergenceLog:
    driver = {"algc": run_algorithm_c, "direct": run_direct_afem,
              "uniform": run_uniform}[config.mode]
    return driver(problem, config, on_mesh=on_mesh)


def compute_slope(log_: ConvergenceLog, field: str = "lam_err", window: Optional[int] = None) -> float:
    """Least-squares slope of log(field) against log(#DoF) over the last records."""
    recs = log_.records if window is None else log_.records[-window:]
    pts = [(r.n_dofs, getattr(r, field)) for r in recs]
    pts = [(n, v) for n, v in pts if v is not None and np.isfinite(v) and v > 0]
    if len(pts) < 3:
        raise ValueError(f"need at least 3 positive {field!r} values, have {len(pts)}")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    if np.ptp(x) == 0:
        raise ValueError("all records have the same number of DoFs")
    return float(np.polyfit(x, y, 1)[0])

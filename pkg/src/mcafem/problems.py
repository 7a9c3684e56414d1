"""Model problems -div(A grad u) + phi u = lambda u with u = 0 on the boundary."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import Callable, Optional

import numpy as np

from .mesh import Mesh, load_mesh


@dataclass(frozen=True)
class ProblemDefinition:
    """Coefficients, initial mesh and reference eigenvalue of one problem.

    ``coefficient`` maps points (n, 2) to symmetric matrices (n, 2, 2) and
    ``potential`` maps points to nonnegative values (n,).  ``None`` means
    identity and zero respectively.  ``coefficient_div`` returns the row-wise
    divergence sum_i d_i A_ij, needed by the estimator for variable A.
    """

    name: str
    mesh_text: str
    coefficient: Optional[Callable] = None
    potential: Optional[Callable] = None
    coefficient_div: Optional[Callable] = None
    constant_coefficient: bool = True
    reference: Optional[float] = None
    reference_note: str = ""

    def eval_coefficient(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, 2)
        if self.coefficient is None:
            return np.broadcast_to(np.eye(2), (len(x), 2, 2))
        return np.asarray(self.coefficient(x), dtype=float).reshape(len(x), 2, 2)

    def eval_potential(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, 2)
        if self.potential is None:
            return np.zeros(len(x))
        return np.asarray(self.potential(x), dtype=float).reshape(len(x))

    def eval_coefficient_div(self, x, h=None):
        """Row divergence of A at ``x``; central differences when not provided.

        ``h`` is the per-point finite-difference step.
        """
        x = np.asarray(x, dtype=float).reshape(-1, 2)
        if self.constant_coefficient:
            return np.zeros((len(x), 2))
        if self.coefficient_div is not None:
            return np.asarray(self.coefficient_div(x), dtype=float).reshape(len(x), 2)
        if h is None:
            h = np.full(len(x), 1e-6)
        h = np.asarray(h, dtype=float).reshape(-1, 1)
        out = np.zeros((len(x), 2))
        for i in range(2):
            e = np.zeros(2)
            e[i] = 1.0
            dA = (self.eval_coefficient(x + h * e) - self.eval_coefficient(x - h * e)) / (2 * h[:, :, None])
            out += dA[:, i, :]
        return out

    def initial_mesh(self) -> Mesh:
        return load_mesh(self.mesh_text)


def _mesh_text(name):
    return resources.files("mcafem").joinpath("meshes").joinpath(name).read_text()


def _harmonic_coefficient(x):
    return np.broadcast_to(0.5 * np.eye(2), (len(x), 2, 2))


def _harmonic_potential(x):
    return 0.5 * np.sum(x * x, axis=1)


def _ex3_coefficient(x):
    s, t = x[:, 0] - 0.5, x[:, 1] - 0.5
    out = np.empty((len(x), 2, 2))
    out[:, 0, 0] = 1 + s * s
    out[:, 0, 1] = out[:, 1, 0] = s * t
    out[:, 1, 1] = 1 + t * t
    return out


def _ex3_coefficient_div(x):
    return 3.0 * (x - 0.5)


def _ex3_potential(x):
    return np.exp((x[:, 0] - 0.5) * (x[:, 1] - 0.5))


def ex1() -> ProblemDefinition:
    """Harmonic oscillator -1/2 Lap u + 1/2 |x|^2 u on (-5, 5)^2."""
    return ProblemDefinition(
        name="ex1", mesh_text=_mesh_text("square_5.mesh"),
        coefficient=_harmonic_coefficient, potential=_harmonic_potential,
        constant_coefficient=True, reference=1.0,
        reference_note="exact: u = exp(-|x|^2/2) on R^2 (boundary truncation below 1e-5)")


def ex2() -> ProblemDefinition:
    """Laplacian on the L-shaped domain (-1,1)^2 minus [0,1) x (-1,0]."""
    return ProblemDefinition(
        name="ex2", mesh_text=_mesh_text("lshape.mesh"),
        reference=9.6397238440219,
        reference_note="published high-accuracy approximation")


def ex3() -> ProblemDefinition:
    """Variable coefficient operator on the L-shaped domain."""
    return ProblemDefinition(
        name="ex3", mesh_text=_mesh_text("lshape.mesh"),
        coefficient=_ex3_coefficient, potential=_ex3_potential,
        coefficient_div=_ex3_coefficient_div, constant_coefficient=False,
        reference=15.134144021256400,
        reference_note="published high-accuracy approximation")


def custom(mesh_text: str, name: str = "custom", reference=None) -> ProblemDefinition:
    """Dirichlet Laplacian on a user-supplied mesh."""
    return ProblemDefinition(name=name, mesh_text=mesh_text, reference=reference,
                             reference_note="" if reference is None else "user supplied")


REGISTRY = {"ex1": ex1, "ex2": ex2, "ex3": ex3}


def get_problem(key: str, mesh_path=None) -> ProblemDefinition:
    if key == "custom":
        if mesh_path is None:
            raise ValueError("problem 'custom' requires a mesh file")
        with open(mesh_path) as fh:
            return custom(fh.read())
    try:
        return REGISTRY[key]()
    except KeyError:
        raise ValueError(f"unknown problem {key!r}; choose from "
                         f"{sorted(REGISTRY) + ['custom']}") from None

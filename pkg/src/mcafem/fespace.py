"""P1/P2 Lagrange spaces on :class:`~mcafem.mesh.Mesh`.

DoFs are numbered vertices first (mesh vertex order), then edges in the
mesh's sorted edge order.  Local P2 DoFs are the three vertices followed by
the midpoints of local edges 0, 1, 2 (edge i is opposite vertex i).
All vectors handled here are full-length coefficient vectors; Dirichlet
entries are zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, MeshError
from .quadrature import TRI_BARY, TRI_WEIGHTS

_NEXT = np.array([1, 2, 0])
_PREV = np.array([2, 0, 1])


def barycentric_gradients(mesh: Mesh):
    """Physical gradients of the barycentric coordinates, shape (C, 3, 2)."""
    p = mesh.vertices[mesh.cells]
    area2 = 2.0 * mesh.areas
    g = np.empty((len(p), 3, 2))
    for i in range(3):
        a, b = p[:, _NEXT[i]], p[:, _PREV[i]]
        g[:, i, 0] = (a[:, 1] - b[:, 1]) / area2
        g[:, i, 1] = (b[:, 0] - a[:, 0]) / area2
    return g


def barycentric_coords(tri, points):
    """Barycentric coordinates of ``points`` (C, n, 2) in triangles (C, 3, 2)."""
    x0 = tri[:, 0]
    d1, d2 = tri[:, 1] - x0, tri[:, 2] - x0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    r = points - x0[:, None, :]
    l1 = (r[..., 0] * d2[:, None, 1] - r[..., 1] * d2[:, None, 0]) / det[:, None]
    l2 = (d1[:, None, 0] * r[..., 1] - d1[:, None, 1] * r[..., 0]) / det[:, None]
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def n_local(degree):
    return 3 if degree == 1 else 6


def basis_values(degree, bary):
    """Shape functions at barycentric points, shape (..., nloc)."""
    if degree == 1:
        return np.array(bary, dtype=float, copy=True)
    lam = bary
    vals = [lam[..., i] * (2 * lam[..., i] - 1) for i in range(3)]
    vals += [4 * lam[..., _NEXT[i]] * lam[..., _PREV[i]] for i in range(3)]
    return np.stack(vals, axis=-1)


def basis_gradients(degree, bary, grad_lam):
    """Physical gradients, shape (C, nq, nloc, 2).

    ``bary`` is (nq, 3) shared by every cell or (C, nq, 3) per cell;
    ``grad_lam`` is (C, 3, 2).
    """
    if bary.ndim == 2:
        bary = np.broadcast_to(bary, (len(grad_lam),) + bary.shape)
    nq = bary.shape[1]
    if degree == 1:
        return np.broadcast_to(grad_lam[:, None, :, :], (len(grad_lam), nq, 3, 2))
    gl = grad_lam[:, None, :, :]
    lam = bary[..., None]
    out = np.empty((len(grad_lam), nq, 6, 2))
    for i in range(3):
        j, k = _NEXT[i], _PREV[i]
        out[:, :, i] = (4 * lam[:, :, i] - 1) * gl[:, :, i]
        out[:, :, 3 + i] = 4 * (lam[:, :, k] * gl[:, :, j] + lam[:, :, j] * gl[:, :, k])
    return out


def basis_hessians(degree, grad_lam):
    """Second derivatives, shape (C, nloc, 2, 2); constant per cell."""
    c = len(grad_lam)
    if degree == 1:
        return np.zeros((c, 3, 2, 2))
    out = np.empty((c, 6, 2, 2))
    outer = np.einsum("cai,cbj->cabij", grad_lam, grad_lam)
    for i in range(3):
        j, k = _NEXT[i], _PREV[i]
        out[:, i] = 4 * outer[:, i, i]
        out[:, 3 + i] = 4 * (outer[:, j, k] + outer[:, k, j])
    return out


class FeSpace:
    """Continuous Lagrange space of degree 1 or 2 with homogeneous Dirichlet data."""

    def __init__(self, mesh: Mesh, degree: int):
        if degree not in (1, 2):
            raise ValueError(f"degree must be 1 or 2, got {degree}")
        self.mesh = mesh
        self.degree = degree
        nv = mesh.n_vertices
        if degree == 1:
            self.cell_dofs = mesh.cells.copy()
            self.n_dofs = nv
            self.dof_coords = mesh.vertices.copy()
            self.dirichlet_mask = mesh.boundary_vertices.copy()
        else:
            self.cell_dofs = np.hstack([mesh.cells, nv + mesh.cell_edges])
            self.n_dofs = nv + len(mesh.edges)
            e = mesh.edges
            mids = 0.5 * (mesh.vertices[e[:, 0]] + mesh.vertices[e[:, 1]])
            self.dof_coords = np.vstack([mesh.vertices, mids])
            self.dirichlet_mask = np.concatenate([mesh.boundary_vertices,
                                                  mesh.boundary_edge_flags])
        self.interior = np.flatnonzero(~self.dirichlet_mask)

    @property
    def n_interior(self) -> int:
        return len(self.interior)

    @cached_property
    def grad_lam(self):
        return barycentric_gradients(self.mesh)

    def local_node_coords(self):
        """Coordinates of each cell's local DoF nodes, shape (C, nloc, 2)."""
        p = self.mesh.vertices[self.mesh.cells]
        if self.degree == 1:
            return p
        mids = 0.5 * (p[:, _NEXT] + p[:, _PREV])
        return np.concatenate([p, mids], axis=1)

    def quad_points(self, bary=TRI_BARY):
        p = self.mesh.vertices[self.mesh.cells]
        return np.einsum("qk,ckd->cqd", bary, p)

    def values_at_quad(self, coeffs, bary=TRI_BARY):
        """Function values at the volume quadrature points, (C, nq)."""
        n = basis_values(self.degree, bary)
        return np.einsum("qa,ca->cq", n, np.asarray(coeffs)[self.cell_dofs])

    def extend(self, interior_values):
        """Full vector from values on interior DoFs."""
        interior_values = np.asarray(interior_values)
        out = np.zeros((self.n_dofs,) + interior_values.shape[1:])
        out[self.interior] = interior_values
        return out

    def interpolate(self, func):
        """Nodal interpolant of ``func(points) -> values``; Dirichlet DoFs kept."""
        return np.asarray(func(self.dof_coords), dtype=float)

    def __repr__(self):
        return f"FeSpace(P{self.degree}, n_dofs={self.n_dofs}, n_interior={self.n_interior})"


def build_space(mesh: Mesh, degree: int) -> FeSpace:
    return FeSpace(mesh, degree)


@dataclass
class AssembledForms:
    """Stiffness ``A`` of a(.,.) and mass ``M`` of (.,.), plus interior blocks."""

    A: sp.csr_matrix
    M: sp.csr_matrix
    interior: np.ndarray
    A_c: sp.csr_matrix | None = None
    M_c: sp.csr_matrix | None = None

    @property
    def n_interior(self):
        return len(self.interior)


def _scatter(space: FeSpace, local):
    cd = space.cell_dofs
    nloc = cd.shape[1]
    rows = np.repeat(cd, nloc, axis=1).ravel()
    cols = np.tile(cd, (1, nloc)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(space.n_dofs, space.n_dofs))
    return mat.tocsr()


def local_matrices(space: FeSpace, problem):
    """Element stiffness and mass matrices, each (C, nloc, nloc)."""
    area = space.mesh.areas
    x = space.quad_points().reshape(-1, 2)
    nc, nq = len(area), len(TRI_WEIGHTS)
    coef = problem.eval_coefficient(x).reshape(nc, nq, 2, 2)
    pot = problem.eval_potential(x).reshape(nc, nq)
    if not (np.all(np.isfinite(coef)) and np.all(np.isfinite(pot))):
        raise ValueError("coefficient evaluation produced non-finite values")
    n = basis_values(space.degree, TRI_BARY)
    g = basis_gradients(space.degree, TRI_BARY, space.grad_lam)
    wa = TRI_WEIGHTS[None, :] * area[:, None]
    ag = np.einsum("cqij,cqbj->cqbi", coef, g)
    stiff = np.einsum("cq,cqai,cqbi->cab", wa, g, ag)
    stiff += np.einsum("cq,cq,qa,qb->cab", wa, pot, n, n)
    mass = np.einsum("c,q,qa,qb->cab", area, TRI_WEIGHTS, n, n)
    return stiff, mass


def apply_dirichlet(forms: AssembledForms, space: FeSpace) -> AssembledForms:
    """Restrict both operators to the interior DoFs (elimination)."""
    idx = space.interior
    forms.interior = idx
    forms.A_c = forms.A[idx][:, idx].tocsr()
    forms.M_c = forms.M[idx][:, idx].tocsr()
    return forms


def assemble(space: FeSpace, problem) -> AssembledForms:
    stiff, mass = local_matrices(space, problem)
    forms = AssembledForms(_scatter(space, stiff), _scatter(space, mass), space.interior)
    return apply_dirichlet(forms, space)


def _quadratic_form(mat, coeffs, name):
    c = np.asarray(coeffs, dtype=float)
    if c.shape[0] != mat.shape[0]:
        raise ValueError(f"vector of length {c.shape[0]} does not match "
                         f"operator of size {mat.shape[0]}")
    q = float(c @ (mat @ c))
    scale = float(np.abs(c) @ (abs(mat) @ np.abs(c)))
    if q < -1e-12 * max(scale, 1.0):
        raise ArithmeticError(f"negative {name} quadratic form {q:.3e}: broken assembly")
    return max(q, 0.0)


def a_norm(forms: AssembledForms, coeffs) -> float:
    """Energy norm sqrt(c^T A c); accepts full or interior-length vectors."""
    mat = forms.A if len(coeffs) == forms.A.shape[0] else forms.A_c
    return float(np.sqrt(_quadratic_form(mat, coeffs, "energy")))


def l2_norm(forms: AssembledForms, coeffs) -> float:
    mat = forms.M if len(coeffs) == forms.M.shape[0] else forms.M_c
    return float(np.sqrt(_quadratic_form(mat, coeffs, "mass")))


def locate(space: FeSpace, points, tol=1e-12):
    """Cell position and barycentric coordinates of each point."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    tri = space.mesh.vertices[space.mesh.cells]
    cell = np.empty(len(points), dtype=np.int64)
    bary = np.empty((len(points), 3))
    for i, pt in enumerate(points):
        b = barycentric_coords(tri, np.broadcast_to(pt, (len(tri), 1, 2)))[:, 0, :]
        score = b.min(axis=1)
        best = int(np.argmax(score))
        if score[best] < -tol:
            raise ValueError(f"point {tuple(pt)} lies outside the mesh")
        cell[i], bary[i] = best, b[best]
    return cell, bary


def evaluate(space: FeSpace, coeffs, points):
    """Point values of the finite element function with coefficients ``coeffs``."""
    scalar = np.ndim(points) == 1
    cell, bary = locate(space, points)
    vals = basis_values(space.degree, bary)
    out = np.einsum("pa,pa->p", vals, np.asarray(coeffs)[space.cell_dofs[cell]])
    return float(out[0]) if scalar else out


def prolongation_matrix(coarse: FeSpace, fine: FeSpace) -> sp.csr_matrix:
    """Sparse map of coarse coefficients to fine coefficients (nodal interpolation).

    Exact because every fine cell lies inside one coarse leaf, found by
    walking the refinement forest.
    """
    if coarse.degree != fine.degree:
        raise ValueError("prolongation requires equal degrees")
    anc = fine.mesh.ancestor_in(coarse.mesh)
    anc_pos = coarse.mesh.cell_position[anc]
    tri = coarse.mesh.vertices[coarse.mesh.cells[anc_pos]]
    bary = barycentric_coords(tri, fine.local_node_coords())
    bary[np.abs(bary) < 1e-13] = 0.0
    vals = basis_values(coarse.degree, bary)  # (C, nloc_f, nloc_c)
    rows = fine.cell_dofs.ravel()
    _, first = np.unique(rows, return_index=True)
    nlc = vals.shape[2]
    cols = coarse.cell_dofs[anc_pos]  # (C, nloc_c)
    cols = np.repeat(cols[:, None, :], vals.shape[1], axis=1).reshape(-1, nlc)[first]
    vals = vals.reshape(-1, nlc)[first]
    r = np.repeat(rows[first], nlc)
    mat = sp.coo_matrix((vals.ravel(), (r, cols.ravel())),
                        shape=(fine.n_dofs, coarse.n_dofs)).tocsr()
    mat.eliminate_zeros()
    return mat


def check_lineage(coarse: FeSpace, fine: FeSpace, lineage):
    """Raise if ``lineage`` does not connect the coarse mesh to the fine mesh."""
    retired = set(coarse.mesh.cell_ids.tolist()) - set(fine.mesh.cell_ids.tolist())
    bisected = set()
    for rec in lineage:
        bisected.update(rec.children)
    missing = retired - bisected
    if missing:
        raise MeshError(f"lineage does not account for refined cells {sorted(missing)[:5]}")


def prolong(coarse: FeSpace, fine: FeSpace, coeffs, lineage=None):
    """Coefficients on ``fine`` representing the same function as ``coeffs``."""
    if lineage is not None:
        check_lineage(coarse, fine, lineage)
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[0] != coarse.n_dofs:
        raise ValueError("coefficient vector does not match the coarse space")
    if fine.mesh is coarse.mesh:
        return coeffs.copy()
    return prolongation_matrix(coarse, fine) @ coeffs

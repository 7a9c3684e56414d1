"""Residual error indicators for -div(A grad w) + phi w = f with FE data f.

eta_T^2 = h_T^2 ||f + div(A grad v) - phi v||_T^2 + sum_{E in dT, interior} h_E ||[[A grad v]].n||_E^2
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fespace import (FeSpace, barycentric_coords, basis_gradients, basis_hessians,
                      basis_values, prolong)
from .quadrature import EDGE_POINTS, EDGE_WEIGHTS, TRI_BARY, TRI_WEIGHTS


@dataclass
class IndicatorField:
    """Per-element indicators ``values`` aligned with forest ids ``ids``."""

    ids: np.ndarray
    values: np.ndarray

    @property
    def per_element(self) -> dict:
        return dict(zip(self.ids.tolist(), self.values.tolist()))

    @property
    def total(self) -> float:
        return float(np.sqrt(np.sum(self.values ** 2)))

    def squared(self) -> np.ndarray:
        return self.values ** 2

    def __add__(self, other):
        """Combine two fields on the same mesh by summing squares."""
        if not np.array_equal(self.ids, other.ids):
            raise ValueError("indicator fields live on different meshes")
        return IndicatorField(self.ids, np.sqrt(self.values ** 2 + other.values ** 2))


def total(ind: IndicatorField, subset=None) -> float:
    """l2 aggregate over ``subset`` (forest ids); all elements by default."""
    if subset is None:
        return ind.total
    subset = list(subset)
    if not subset:
        return 0.0
    pos = np.searchsorted(ind.ids, subset)
    pos = np.clip(pos, 0, len(ind.ids) - 1)
    if np.any(ind.ids[pos] != np.asarray(subset)):
        raise KeyError("subset contains ids that are not in the indicator field")
    return float(np.sqrt(np.sum(ind.values[pos] ** 2)))


def _as_space_vector(space, vec, vec_space, name):
    vec = np.asarray(vec, dtype=float)
    if vec_space is not None and vec_space is not space:
        vec = prolong(vec_space, space, vec)
    if vec.shape[0] != space.n_dofs:
        raise ValueError(f"{name} has length {vec.shape[0]}, space has {space.n_dofs} DoFs")
    return vec


def element_residual(space: FeSpace, problem, f, v):
    """f + div(A grad v) - phi v at the volume quadrature points, (C, nq)."""
    mesh = space.mesh
    x = space.quad_points()
    nc, nq = x.shape[:2]
    xf = x.reshape(-1, 2)
    coef = problem.eval_coefficient(xf).reshape(nc, nq, 2, 2)
    pot = problem.eval_potential(xf).reshape(nc, nq)
    vl = v[space.cell_dofs]
    g = basis_gradients(space.degree, TRI_BARY, space.grad_lam)
    grad_v = np.einsum("cqai,ca->cqi", g, vl)
    res = space.values_at_quad(f) - pot * space.values_at_quad(v)
    if not problem.constant_coefficient:
        h = np.repeat(1e-6 * mesh.diameters, nq)
        div = problem.eval_coefficient_div(xf, h).reshape(nc, nq, 2)
        res += np.einsum("cqj,cqj->cq", div, grad_v)
    if space.degree == 2:
        hv = np.einsum("cajk,ca->cjk", basis_hessians(2, space.grad_lam), vl)
        res += np.einsum("cqjk,cjk->cq", coef, hv)
    return res


def _jump_terms(space: FeSpace, problem, v):
    """h_E ||J_E||^2 for every interior edge, with the two adjacent cells."""
    mesh = space.mesh
    ec = mesh.edge_cells
    interior = np.flatnonzero(ec[:, 1] >= 0)
    if len(interior) == 0:
        return interior, np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    cm, cp = ec[interior, 0], ec[interior, 1]
    e = mesh.edges[interior]
    a, b = mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]]
    pts = a[:, None, :] + EDGE_POINTS[None, :, None] * (b - a)[:, None, :]  # (E, 3, 2)
    hE = mesh.edge_lengths[interior]
    coef = problem.eval_coefficient(pts.reshape(-1, 2)).reshape(len(e), len(EDGE_POINTS), 2, 2)

    def flux(cells):
        tri = mesh.vertices[mesh.cells[cells]]
        bary = barycentric_coords(tri, pts)
        g = basis_gradients(space.degree, bary, space.grad_lam[cells])
        gv = np.einsum("cqai,ca->cqi", g, v[space.cell_dofs[cells]])
        return np.einsum("cqij,cqj->cqi", coef, gv)

    # outward normal of the lower-id cell
    t = b - a
    nrm = np.stack([t[:, 1], -t[:, 0]], axis=1) / hE[:, None]
    opp = mesh.vertices[mesh.cells[cm, mesh.edge_local[interior, 0]]]
    flip = np.einsum("ei,ei->e", opp - a, nrm) > 0
    nrm[flip] *= -1
    jump = np.einsum("eqi,ei->eq", flux(cp) - flux(cm), nrm)
    term = hE * hE * np.einsum("q,eq->e", EDGE_WEIGHTS, jump ** 2)
    return interior, np.stack([cm, cp], axis=1), term


def estimate(space: FeSpace, problem, f, v, f_space=None, v_space=None) -> IndicatorField:
    """Residual indicators of ``v`` as a discrete solution with load ``f``.

    ``f`` (and ``v``) may live on a coarser ancestor space given by
    ``f_space``; it is prolonged first.
    """
    f = _as_space_vector(space, f, f_space, "f")
    v = _as_space_vector(space, v, v_space, "v")
    mesh = space.mesh
    res = element_residual(space, problem, f, v)
    h = mesh.diameters
    eta2 = h * h * mesh.areas * np.einsum("q,cq->c", TRI_WEIGHTS, res ** 2)
    _, cells, term = _jump_terms(space, problem, v)
    if len(term):
        eta2 += np.bincount(cells[:, 0], term, minlength=len(eta2))
        eta2 += np.bincount(cells[:, 1], term, minlength=len(eta2))
    return IndicatorField(mesh.cell_ids.copy(), np.sqrt(eta2))


def estimate_block(space, problem, F, V) -> IndicatorField:
    """Indicators of several (f, v) pairs, squares summed per element."""
    F = np.atleast_2d(np.asarray(F).T).T
    V = np.atleast_2d(np.asarray(V).T).T
    fields = [estimate(space, problem, F[:, i], V[:, i]) for i in range(F.shape[1])]
    out = fields[0]
    for fld in fields[1:]:
        out = out + fld
    return out


def oscillation(space: FeSpace, problem, f, v, f_space=None) -> float:
    """(sum_T ||h_T (r - P_T r)||_T^2)^{1/2} with r = f - L v.

    P_T is the elementwise L2 projection onto polynomials of the space degree.
    """
    f = _as_space_vector(space, f, f_space, "f")
    v = _as_space_vector(space, np.asarray(v, dtype=float), None, "v")
    mesh = space.mesh
    res = element_residual(space, problem, f, v)
    n = basis_values(space.degree, TRI_BARY)
    # reference-element projection: areas cancel in M^{-1} b
    mref = np.einsum("q,qa,qb->ab", TRI_WEIGHTS, n, n)
    bref = np.einsum("q,qa,cq->ca", TRI_WEIGHTS, n, res)
    coef = np.linalg.solve(mref, bref.T).T
    proj = coef @ n.T
    h = mesh.diameters
    osc2 = h * h * mesh.areas * np.einsum("q,cq->c", TRI_WEIGHTS, (res - proj) ** 2)
    return float(np.sqrt(np.sum(osc2)))

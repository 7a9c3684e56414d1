"""Conforming triangulations refined by newest-vertex bisection.

A :class:`Mesh` stores the whole refinement forest: every triangle ever
created keeps its id, bisected parents are retired (inactive) and their
children get fresh ids appended at the end.  Finite element code works on
the active leaves only, exposed as ``mesh.cells`` (connectivity) and
``mesh.cell_ids`` (forest ids, ascending).

Local edge ``i`` of a triangle is the edge opposite its local vertex ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

MAX_CLOSURE_DEPTH = 64


class MeshError(ValueError):
    """Raised for malformed or non-conforming meshes."""


class ClosureError(RuntimeError):
    """Raised when the conformity closure exceeds its recursion guard."""


@dataclass
class RefinementRecord:
    """What one call to :func:`refine` did."""

    new_vertices: list = field(default_factory=list)
    children: dict = field(default_factory=dict)
    refined_set: set = field(default_factory=set)


class Mesh:
    """Immutable triangulation with refinement lineage.

    Parameters
    ----------
    vertices : (NV, 2) array
    triangles : (NT, 3) int array
        Counterclockwise connectivity of every triangle in the forest.
    refinement_edge : (NT,) int array
        Local index of the refinement edge (opposite the newest vertex).
    vertex_flags : (NV,) int array, optional
        1 for vertices on the domain boundary, as read from file.
    generation, parent : (NT,) int arrays, optional
        Bisection depth and parent id (-1 for roots).
    active : (NT,) bool array, optional
        Leaf mask; defaults to all triangles.
    """

    def __init__(self, vertices, triangles, refinement_edge, vertex_flags=None,
                 generation=None, parent=None, active=None):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
        self.triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        nt = len(self.triangles)
        self.refinement_edge = np.asarray(refinement_edge, dtype=np.int64)
        if vertex_flags is None:
            vertex_flags = np.zeros(len(self.vertices), dtype=np.int64)
        self.vertex_flags = np.asarray(vertex_flags, dtype=np.int64)
        self.generation = (np.zeros(nt, dtype=np.int64) if generation is None
                           else np.asarray(generation, dtype=np.int64))
        self.parent = (np.full(nt, -1, dtype=np.int64) if parent is None
                       else np.asarray(parent, dtype=np.int64))
        self.active = (np.ones(nt, dtype=bool) if active is None
                       else np.asarray(active, dtype=bool))
        for arr in (self.vertices, self.triangles, self.refinement_edge,
                    self.vertex_flags, self.generation, self.parent, self.active):
            arr.setflags(write=False)

    # -- active leaves -----------------------------------------------------
    @cached_property
    def cell_ids(self) -> np.ndarray:
        return np.flatnonzero(self.active)

    @cached_property
    def cells(self) -> np.ndarray:
        return self.triangles[self.cell_ids]

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @cached_property
    def cell_position(self) -> np.ndarray:
        """Map forest id -> position in ``cells`` (-1 if retired)."""
        pos = np.full(len(self.triangles), -1, dtype=np.int64)
        pos[self.cell_ids] = np.arange(self.n_cells)
        return pos

    # -- topology ----------------------------------------------------------
    @cached_property
    def _topology(self):
        c = self.cells
        # local edge i joins local vertices i+1, i+2
        pairs = np.stack([c[:, [1, 2]], c[:, [2, 0]], c[:, [0, 1]]], axis=1)
        keys = np.sort(pairs.reshape(-1, 2), axis=1)
        edges, inverse, counts = np.unique(keys, axis=0, return_inverse=True,
                                           return_counts=True)
        inverse = inverse.reshape(-1)
        cell_edges = inverse.reshape(-1, 3)
        edge_cells = np.full((len(edges), 2), -1, dtype=np.int64)
        edge_local = np.full((len(edges), 2), -1, dtype=np.int64)
        owner = np.repeat(np.arange(len(c)), 3)
        local = np.tile(np.arange(3), len(c))
        # occurrences are visited in ascending cell order, so slot 0 gets
        # the lower cell position
        order = np.argsort(inverse, kind="stable")
        inv_sorted = inverse[order]
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        # edges shared by >2 cells keep only two slots; check_conformity flags them
        slot = np.minimum(np.arange(len(order)) - np.repeat(starts, counts), 1)
        edge_cells[inv_sorted, slot] = owner[order]
        edge_local[inv_sorted, slot] = local[order]
        return edges, cell_edges, edge_cells, edge_local, counts

    @property
    def edges(self) -> np.ndarray:
        """(E, 2) sorted vertex pairs, lexicographic order."""
        return self._topology[0]

    @property
    def cell_edges(self) -> np.ndarray:
        """(n_cells, 3) edge index of local edge i."""
        return self._topology[1]

    @property
    def edge_cells(self) -> np.ndarray:
        """(E, 2) adjacent cell positions, lower first; -1 on the boundary."""
        return self._topology[2]

    @property
    def edge_local(self) -> np.ndarray:
        return self._topology[3]

    @property
    def boundary_edge_flags(self) -> np.ndarray:
        return self._topology[4] == 1

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        be = self.edges[self.boundary_edge_flags]
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[be.ravel()] = True
        return mask

    # -- geometry ----------------------------------------------------------
    @cached_property
    def areas(self) -> np.ndarray:
        return signed_areas(self.vertices, self.cells)

    @cached_property
    def diameters(self) -> np.ndarray:
        """Triangle diameters h_T (longest edge)."""
        return _edge_lengths(self.vertices, self.cells).max(axis=1)

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1)

    def ancestor_in(self, coarse: "Mesh") -> np.ndarray:
        """Forest id of the coarse leaf containing each active cell."""
        if not is_descendant(self, coarse):
            raise MeshError("mesh is not a refinement of the given coarse mesh")
        anc = self.cell_ids.copy()
        in_coarse = np.zeros(len(self.triangles), dtype=bool)
        in_coarse[coarse.cell_ids] = True
        todo = ~in_coarse[anc]
        while np.any(todo):
            anc[todo] = self.parent[anc[todo]]
            if np.any(anc < 0):
                raise MeshError("lineage does not reach the coarse mesh")
            todo = ~in_coarse[anc]
        return anc

    def __repr__(self):
        return f"Mesh(n_vertices={self.n_vertices}, n_cells={self.n_cells})"


def signed_areas(vertices, cells):
    p0, p1, p2 = (vertices[cells[:, i]] for i in range(3))
    d1, d2 = p1 - p0, p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _edge_lengths(vertices, cells):
    p = vertices[cells]
    return np.stack([
        np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
        np.linalg.norm(p[:, 0] - p[:, 2], axis=1),
        np.linalg.norm(p[:, 1] - p[:, 0], axis=1),
    ], axis=1)


def longest_edge_labels(vertices, cells):
    """Local index of the longest edge, ties resolved to the lowest index."""
    lengths = _edge_lengths(vertices, cells)
    longest = lengths.max(axis=1, keepdims=True)
    return np.argmax(lengths >= longest * (1.0 - 1e-12), axis=1)


def is_descendant(fine: Mesh, coarse: Mesh) -> bool:
    nc = len(coarse.triangles)
    return (len(fine.triangles) >= nc
            and len(fine.vertices) >= len(coarse.vertices)
            and np.array_equal(fine.triangles[:nc], coarse.triangles)
            and np.array_equal(fine.vertices[:len(coarse.vertices)], coarse.vertices))


def from_arrays(vertices, triangles, vertex_flags=None, check=True) -> Mesh:
    """Build a root mesh with longest-edge refinement labels."""
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    mesh = Mesh(vertices, triangles, longest_edge_labels(vertices, triangles),
                vertex_flags=vertex_flags)
    if check:
        problems = check_conformity(mesh)
        if problems:
            raise MeshError("; ".join(problems))
    return mesh


def load_mesh(text: str) -> Mesh:
    """Parse the line-oriented mesh format.

    ``NV NT`` header, ``NV`` lines ``x y flag`` and ``NT`` lines ``v0 v1 v2``.
    An optional trailing column on triangle lines (indicator dumps) is
    ignored.
    """
    lines = [ln.split("#", 1)[0].split() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    try:
        nv, nt = int(lines[0][0]), int(lines[0][1])
        vrows = lines[1:1 + nv]
        trows = lines[1 + nv:1 + nv + nt]
        if len(vrows) != nv or len(trows) != nt:
            raise MeshError(f"expected {nv} vertices and {nt} triangles")
        vertices = np.array([[float(r[0]), float(r[1])] for r in vrows]).reshape(-1, 2)
        flags = np.array([int(r[2]) if len(r) > 2 else 0 for r in vrows], dtype=np.int64)
        triangles = np.array([[int(r[0]), int(r[1]), int(r[2])] for r in trows],
                             dtype=np.int64).reshape(-1, 3)
    except (IndexError, ValueError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"cannot parse mesh file: {exc}") from exc
    if triangles.size and (triangles.min() < 0 or triangles.max() >= nv):
        raise MeshError("triangle references an unknown vertex")
    return from_arrays(vertices, triangles, flags)


def read_mesh(path) -> Mesh:
    with open(path) as fh:
        return load_mesh(fh.read())


def dump_mesh(mesh: Mesh, indicators=None) -> str:
    """Serialize the active mesh; ``indicators`` adds a per-triangle column.

    Vertex flags are written from the topological boundary.
    """
    out = [f"{mesh.n_vertices} {mesh.n_cells}"]
    flags = mesh.boundary_vertices.astype(int)
    for (x, y), f in zip(mesh.vertices, flags):
        out.append(f"{float(x)!r} {float(y)!r} {f}")
    cells = mesh.cells
    if indicators is None:
        out.extend(f"{a} {b} {c}" for a, b, c in cells)
    else:
        vals = np.asarray(indicators, dtype=float)
        out.extend(f"{a} {b} {c} {float(v)!r}" for (a, b, c), v in zip(cells, vals))
    return "\n".join(out) + "\n"


def write_mesh(mesh: Mesh, path, indicators=None):
    with open(path, "w") as fh:
        fh.write(dump_mesh(mesh, indicators))


def check_conformity(mesh: Mesh) -> list:
    """List every violated mesh invariant; empty when the mesh is valid."""
    problems = []
    cells = mesh.cells
    if len(cells) == 0:
        return ["mesh has no triangles"]
    areas = mesh.areas
    for pos in np.flatnonzero(areas <= 0):
        problems.append(f"triangle {mesh.cell_ids[pos]} has non-positive "
                        f"signed area {areas[pos]:.3e} (clockwise or degenerate)")
    degenerate_ids = np.flatnonzero((cells[:, 0] == cells[:, 1]) | (cells[:, 1] == cells[:, 2])
                                    | (cells[:, 0] == cells[:, 2]))
    for pos in degenerate_ids:
        problems.append(f"triangle {mesh.cell_ids[pos]} repeats a vertex")
    edges, counts = mesh.edges, mesh._topology[4]
    for e in np.flatnonzero(counts > 2):
        a, b = edges[e]
        problems.append(f"edge ({a}, {b}) is shared by {counts[e]} triangles")

    # hanging nodes: a vertex strictly inside a one-sided edge
    single = np.flatnonzero(counts == 1)
    if len(single):
        v = mesh.vertices
        a, b = v[edges[single, 0]], v[edges[single, 1]]
        mid = 0.5 * (a + b)
        half = 0.5 * np.linalg.norm(b - a, axis=1)
        tree = cKDTree(v)
        for i, cand in enumerate(tree.query_ball_point(mid, half * (1 + 1e-9))):
            ea, eb = edges[single[i]]
            for w in cand:
                if w == ea or w == eb:
                    continue
                d = b[i] - a[i]
                t = np.dot(v[w] - a[i], d) / np.dot(d, d)
                dist = abs(d[0] * (v[w][1] - a[i][1]) - d[1] * (v[w][0] - a[i][0]))
                if 1e-12 < t < 1 - 1e-12 and dist <= 1e-12 * np.dot(d, d):
                    problems.append(f"hanging node {w} on edge ({ea}, {eb})")

    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[cells.ravel()] = True
    for w in np.flatnonzero(~used):
        problems.append(f"vertex {w} belongs to no triangle")

    gen, par = mesh.generation, mesh.parent
    has_parent = par >= 0
    if np.any(gen[has_parent] != gen[par[has_parent]] + 1):
        problems.append("generation of a child differs from parent generation + 1")
    return problems


def quality(mesh: Mesh):
    """Return ``(h_max, min_angle, count)``."""
    p = mesh.vertices[mesh.cells]
    angles = []
    for i in range(3):
        u = p[:, (i + 1) % 3] - p[:, i]
        w = p[:, (i + 2) % 3] - p[:, i]
        cos = np.einsum("ij,ij->i", u, w) / (np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1))
        angles.append(np.arccos(np.clip(cos, -1.0, 1.0)))
    return float(mesh.diameters.max()), float(np.min(angles)), mesh.n_cells


class _Bisector:
    """Mutable workspace for one refinement call."""

    def __init__(self, mesh: Mesh):
        self.vertices = mesh.vertices.tolist()
        self.flags = mesh.vertex_flags.tolist()
        self.tri = mesh.triangles.tolist()
        self.ref = mesh.refinement_edge.tolist()
        self.gen = mesh.generation.tolist()
        self.parent = mesh.parent.tolist()
        self.active = mesh.active.tolist()
        self.edge_map = {}
        for tid, (a, b, c) in zip(mesh.cell_ids.tolist(), mesh.cells.tolist()):
            for e in ((b, c), (c, a), (a, b)):
                key = (e[0], e[1]) if e[0] < e[1] else (e[1], e[0])
                self.edge_map.setdefault(key, []).append(tid)
        self.record = RefinementRecord()
        self.initial = set(mesh.cell_ids.tolist())

    def _ref_key(self, tid):
        t, r = self.tri[tid], self.ref[tid]
        a, b = t[(r + 1) % 3], t[(r + 2) % 3]
        return (a, b) if a < b else (b, a)

    def _neighbor(self, tid, key):
        for other in self.edge_map[key]:
            if other != tid:
                return other
        return None

    def bisect(self, tid, depth=0):
        if depth > MAX_CLOSURE_DEPTH:
            raise ClosureError("conformity closure exceeded depth guard; "
                               "incompatible refinement-edge labeling")
        key = self._ref_key(tid)
        nb = self._neighbor(tid, key)
        while nb is not None and self._ref_key(nb) != key:
            self.bisect(nb, depth + 1)
            nb = self._neighbor(tid, key)
        a, b = key
        m = len(self.vertices)
        va, vb = self.vertices[a], self.vertices[b]
        self.vertices.append([(va[0] + vb[0]) / 2.0, (va[1] + vb[1]) / 2.0])
        self.flags.append(1 if nb is None else 0)
        self.record.new_vertices.append((m, (a, b)))
        del self.edge_map[key]
        self._split(tid, m)
        if nb is not None:
            self._split(nb, m)

    def _split(self, tid, m):
        t, r = self.tri[tid], self.ref[tid]
        p, q1, q2 = t[r], t[(r + 1) % 3], t[(r + 2) % 3]
        em = self.edge_map
        c1, c2 = len(self.tri), len(self.tri) + 1
        # newest vertex m at local 0, refinement edge opposite it
        self.tri.append([m, p, q1])
        self.tri.append([m, q2, p])
        g = self.gen[tid] + 1
        self.ref.extend((0, 0))
        self.gen.extend((g, g))
        self.parent.extend((tid, tid))
        self.active[tid] = False
        self.active.extend((True, True))
        for key, old, new in (((p, q1), tid, c1), ((q2, p), tid, c2)):
            k = key if key[0] < key[1] else (key[1], key[0])
            lst = em[k]
            lst[lst.index(old)] = new
        em.setdefault((m, p) if m < p else (p, m), []).extend((c1, c2))
        for e in ((m, q1), (m, q2)):
            k = e if e[0] < e[1] else (e[1], e[0])
            em.setdefault(k, []).append(c1 if e[1] == q1 else c2)
        self.record.children[tid] = (c1, c2)
        if tid in self.initial:
            self.record.refined_set.add(tid)

    def result(self) -> Mesh:
        return Mesh(self.vertices, self.tri, self.ref, self.flags,
                    self.gen, self.parent, self.active)


def refine(mesh: Mesh, marked) -> tuple:
    """Bisect every marked triangle and close the mesh conformingly.

    Returns ``(new_mesh, record)``.  Marked ids are processed in ascending
    order, so the result is deterministic.
    """
    marked = sorted(set(int(t) for t in marked))
    if not marked:
        return mesh, RefinementRecord()
    bad = [t for t in marked if t < 0 or t >= len(mesh.triangles) or not mesh.active[t]]
    if bad:
        raise MeshError(f"marked ids are not active triangles: {bad[:5]}")
    work = _Bisector(mesh)
    for tid in marked:
        if work.active[tid]:
            work.bisect(tid)
    return work.result(), work.record


def uniform_refine(mesh: Mesh, rounds: int = 1):
    """Bisect every active triangle ``rounds`` times."""
    records = []
    for _ in range(rounds):
        mesh, rec = refine(mesh, mesh.cell_ids)
        records.append(rec)
    return mesh, records

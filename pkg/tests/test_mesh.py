import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcafem import problems
from mcafem.mesh import (Mesh, MeshError, check_conformity, dump_mesh, from_arrays,
                         is_descendant, load_mesh, quality, refine, uniform_refine)

from conftest import data_path


def random_refinements(mesh, rng, rounds, max_cells=3000):
    """Yield (mesh, marked, refined mesh, record) for random small marked sets."""
    for _ in range(rounds):
        if mesh.n_cells > max_cells:
            break
        k = int(rng.integers(1, max(2, mesh.n_cells // 8)))
        marked = set(rng.choice(mesh.cell_ids, size=min(k, mesh.n_cells), replace=False).tolist())
        fine, rec = refine(mesh, marked)
        yield mesh, marked, fine, rec
        mesh = fine


def test_load_unit_square(square):
    assert square.n_vertices == 4
    assert square.n_cells == 2
    assert int(np.sum(square.edge_cells[:, 1] >= 0)) == 1
    assert check_conformity(square) == []


def test_duplicated_triangle_rejected():
    text = "4 3\n0 0 1\n1 0 1\n1 1 1\n0 1 1\n0 1 2\n0 2 3\n0 2 3\n"
    with pytest.raises(MeshError, match="shared by 3"):
        load_mesh(text)


def test_clockwise_triangle_rejected():
    with pytest.raises(MeshError, match="non-positive"):
        load_mesh("3 1\n0 0 1\n1 0 1\n0 1 1\n0 2 1\n")
    m = from_arrays([[0, 0], [1, 0], [0, 1]], [[0, 2, 1]], check=False)
    diag = check_conformity(m)
    assert len(diag) == 1 and "clockwise" in diag[0]


def test_hanging_node_reported():
    # left square split by its diagonal, right square split in two with a midpoint on x = 1
    v = [[0, 0], [1, 0], [1, 1], [0, 1], [2, 0], [2, 1], [1, 0.5]]
    t = [[0, 1, 2], [0, 2, 3], [1, 4, 6], [4, 5, 6], [6, 5, 2]]
    m = from_arrays(v, t, check=False)
    diag = check_conformity(m)
    assert len(diag) == 1
    assert "hanging node 6" in diag[0] and "(1, 2)" in diag[0]


def test_lshape_fixture(lshape):
    assert lshape.n_cells == 6
    assert check_conformity(lshape) == []
    corner = np.flatnonzero(np.all(lshape.vertices == 0.0, axis=1))[0]
    touching = np.flatnonzero(np.any(lshape.edges == corner, axis=1))
    # the two edges along the reentrant sides are boundary, the rest interior
    interior = lshape.edge_cells[touching, 1] >= 0
    assert interior.sum() == len(touching) - 2
    assert lshape.boundary_vertices[corner]


def test_parse_errors():
    with pytest.raises(MeshError):
        load_mesh("3 1\n0 0 1\n1 0 1\n")
    with pytest.raises(MeshError):
        load_mesh("3 1\n0 0 1\n1 0 1\n0 1 1\n0 1 7\n")
    with pytest.raises(MeshError):
        load_mesh("x y\n")


def test_longest_edge_labels(square):
    # both triangles carry the diagonal (0, 2) as refinement edge
    for pos, tri in enumerate(square.cells):
        r = square.refinement_edge[square.cell_ids[pos]]
        edge = {tri[(r + 1) % 3], tri[(r + 2) % 3]}
        assert edge == {0, 2}


def test_refine_both(square):
    fine, rec = refine(square, {0, 1})
    assert fine.n_cells == 4 and fine.n_vertices == 5
    np.testing.assert_array_equal(fine.vertices[4], [0.5, 0.5])
    assert rec.refined_set == {0, 1}
    assert check_conformity(fine) == []


def test_refine_one_forces_neighbour(square):
    fine, rec = refine(square, {0})
    assert fine.n_cells == 4 and fine.n_vertices == 5
    assert rec.refined_set == {0, 1}
    assert check_conformity(fine) == []


def test_refine_empty(square):
    fine, rec = refine(square, set())
    assert fine is square
    assert rec.new_vertices == [] and rec.children == {} and rec.refined_set == set()


def test_refine_rejects_unknown_ids(square):
    with pytest.raises(MeshError):
        refine(square, {7})
    fine, _ = refine(square, {0})
    with pytest.raises(MeshError):
        refine(fine, {0})  # retired parent


def test_ids_stable(square):
    fine, _ = refine(square, {0})
    fine2, _ = refine(fine, {int(fine.cell_ids[0])})
    np.testing.assert_array_equal(fine2.vertices[:fine.n_vertices], fine.vertices)
    np.testing.assert_array_equal(fine2.triangles[:len(fine.triangles)], fine.triangles)
    untouched = set(fine.cell_ids.tolist()) & set(fine2.cell_ids.tolist())
    assert untouched
    assert is_descendant(fine2, fine)


def test_quality_square(square):
    h, ang, n = quality(square)
    assert h == pytest.approx(np.sqrt(2))
    assert ang == pytest.approx(np.pi / 4)
    assert n == 2
    fine, _ = uniform_refine(square, 1)
    assert quality(fine)[0] == pytest.approx(1.0)


def test_generation_parent(square):
    fine, rec = uniform_refine(square, 2)
    gen, par = fine.generation, fine.parent
    kids = par >= 0
    assert np.all(gen[kids] == gen[par[kids]] + 1)
    assert set(fine.generation[fine.cell_ids].tolist()) == {2}


@pytest.mark.parametrize("name", ["unit_square.mesh", "lshape_coarse.mesh"])
def test_conformity_fuzz(name):
    """1000 random refinement rounds in fixed-size chunks, all checked."""
    base = load_mesh(open(data_path(name)).read())
    bound = min(quality(uniform_refine(base, r)[0])[1] for r in (0, 1, 2))
    rng = np.random.default_rng(1234)
    rounds = 0
    while rounds < 500:
        for coarse, marked, fine, rec in random_refinements(base, rng, 50):
            rounds += 1
            assert check_conformity(fine) == []
            assert marked <= rec.refined_set
            assert fine.n_cells > coarse.n_cells
            for m, (a, b) in rec.new_vertices:
                np.testing.assert_array_equal(fine.vertices[m], 0.5 * (fine.vertices[a] + fine.vertices[b]))
            assert quality(fine)[1] >= bound - 1e-12
            assert np.isclose(fine.areas.sum(), base.areas.sum(), rtol=1e-12)


@pytest.mark.parametrize("key", ["ex1", "ex2"])
def test_shipped_meshes(key):
    mesh = problems.get_problem(key).initial_mesh()
    assert check_conformity(mesh) == []
    bound = min(quality(uniform_refine(mesh, r)[0])[1] for r in (0, 1, 2))
    rng = np.random.default_rng(7)
    for _, _, fine, _ in random_refinements(mesh, rng, 15, max_cells=5000):
        assert quality(fine)[1] >= bound - 1e-12


def _contains(tri, pts, tol=1e-12):
    a, b, c = tri
    det = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    out = []
    for p in pts:
        l1 = ((b[0] - p[0]) * (c[1] - p[1]) - (b[1] - p[1]) * (c[0] - p[0])) / det
        l2 = ((c[0] - p[0]) * (a[1] - p[1]) - (c[1] - p[1]) * (a[0] - p[0])) / det
        out.append(min(l1, l2, 1 - l1 - l2) >= -tol)
    return all(out)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rounds=st.integers(1, 12))
def test_nested_and_deterministic(seed, rounds):
    base = load_mesh(open(data_path("lshape_coarse.mesh")).read())
    rng1, rng2 = np.random.default_rng(seed), np.random.default_rng(seed)
    runs1 = list(random_refinements(base, rng1, rounds))
    runs2 = list(random_refinements(base, rng2, rounds))
    for (_, _, f1, r1), (_, _, f2, r2) in zip(runs1, runs2):
        np.testing.assert_array_equal(f1.vertices, f2.vertices)
        np.testing.assert_array_equal(f1.triangles, f2.triangles)
        assert r1.children == r2.children
    fine = runs1[-1][2]
    for cid in fine.cell_ids:
        p = fine.parent[cid]
        if p >= 0:
            assert _contains(fine.vertices[fine.triangles[p]], fine.vertices[fine.triangles[cid]])


def test_dump_roundtrip(lshape):
    fine, _ = uniform_refine(lshape, 2)
    again = load_mesh(dump_mesh(fine))
    np.testing.assert_array_equal(again.vertices, fine.vertices)
    np.testing.assert_array_equal(again.cells, fine.cells)
    with_ind = dump_mesh(fine, np.arange(fine.n_cells, dtype=float))
    assert len(with_ind.splitlines()[-1].split()) == 4
    assert load_mesh(with_ind).n_cells == fine.n_cells


def test_mesh_arrays_readonly(square):
    with pytest.raises(ValueError):
        square.vertices[0, 0] = 3.0
    assert isinstance(square, Mesh)

import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eikls.mesh import (MeshParseError, MeshTopologyError, build_hex_mesh, build_mesh,
                        cell_center, characteristic_lengths, dump_poly_mesh, face_center,
                        load_poly_mesh)

DOMAIN = ((-1.25, 1.25),) * 3

CUBE = """polymesh 1
vertices 8
0 0 0
1 0 0
1 1 0
0 1 0
0 0 1
1 0 1
1 1 1
0 1 1
faces 6
4 0 3 2 1
4 4 5 6 7
4 0 1 5 4
4 2 3 7 6
4 1 2 6 5
4 0 4 7 3
cells 1
6 0 1 2 3 4 5
"""


def two_cubes_text():
    verts = [(x, y, z) for z in (0, 1) for y in (0, 1) for x in (0, 1, 2)]
    vid = {v: i for i, v in enumerate(verts)}

    def quad(*pts):
        return [vid[p] for p in pts]

    faces = [
        quad((0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)),   # bottom A
        quad((0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)),   # top A
        quad((0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)),   # front A
        quad((0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)),   # back A
        quad((0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)),   # left A
        quad((1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)),   # shared, out of A
        quad((1, 0, 0), (1, 1, 0), (2, 1, 0), (2, 0, 0)),
        quad((1, 0, 1), (2, 0, 1), (2, 1, 1), (1, 1, 1)),
        quad((1, 0, 0), (2, 0, 0), (2, 0, 1), (1, 0, 1)),
        quad((1, 1, 0), (1, 1, 1), (2, 1, 1), (2, 1, 0)),
        quad((2, 0, 0), (2, 1, 0), (2, 1, 1), (2, 0, 1)),
    ]
    lines = ["polymesh 1", f"vertices {len(verts)}"]
    lines += [f"{x} {y} {z}" for x, y, z in verts]
    lines.append(f"faces {len(faces)}")
    lines += [" ".join(map(str, [len(f)] + f)) for f in faces]
    lines += ["cells 2", "6 0 1 2 3 4 5", "6 5 6 7 8 9 10"]
    return "\n".join(lines) + "\n"


# -- oracles -------------------------------------------------------------------

def tet_volume(a, b, c, d):
    return np.dot(b - a, np.cross(c - a, d - a)) / 6.0


def fan_decomposition(face_pts, apex=None):
    """Area and area-centroid of a polygon via a fan around ``apex`` (vertex mean)."""
    m = face_pts.mean(axis=0) if apex is None else apex
    area, acc = 0.0, np.zeros(3)
    for i in range(len(face_pts)):
        a, b = face_pts[i], face_pts[(i + 1) % len(face_pts)]
        ar = 0.5 * np.linalg.norm(np.cross(a - m, b - m))
        area += ar
        acc += ar * (a + b + m) / 3.0
    return area, acc / area


def cell_tet_oracle(mesh, p):
    """Volume and centroid by signed tets from a point inside the cell."""
    o = mesh.vertices[mesh.cell_vertices(p)].mean(axis=0)
    vol, acc = 0.0, np.zeros(3)
    for f in mesh.cell_face_ids(p):
        pts = mesh.vertices[mesh.face_vertices(f)]
        g = mesh.face_centers[f]
        sign = 1.0 if mesh.face_owner[f] == p else -1.0
        for i in range(len(pts)):
            a, b = pts[i], pts[(i + 1) % len(pts)]
            v = sign * tet_volume(o, a, b, g)
            vol += v
            acc += v * (o + a + b + g) / 4.0
    return vol, acc / vol


# -- construction ----------------------------------------------------------------

def test_hex_counts_n2():
    m = build_hex_mesh(DOMAIN, 2)
    assert m.n_cells == 8
    assert m.n_faces == 36
    assert np.all(np.diff(m.face_tri_ptr) == 4)
    assert m.n_triangles == 144


def test_hex_uniform_volumes():
    m = build_hex_mesh(DOMAIN, 16)
    np.testing.assert_allclose(m.cell_volumes, (2.5 / 16) ** 3, rtol=1e-12)
    assert m.cell_volumes.sum() == pytest.approx(15.625, rel=1e-12)


def test_perturbed_volume_sum_matches_tet_oracle():
    m = build_hex_mesh(DOMAIN, 4, perturbation=0.2, seed=7)
    oracle = sum(cell_tet_oracle(m, p)[0] for p in range(m.n_cells))
    assert oracle == pytest.approx(15.625, abs=1e-10)
    assert m.cell_volumes.sum() == pytest.approx(15.625, abs=1e-10)
    for p in range(m.n_cells):
        assert m.cell_volumes[p] == pytest.approx(cell_tet_oracle(m, p)[0], rel=1e-12)


def test_perturbation_is_seeded_and_keeps_boundary():
    a = build_hex_mesh(DOMAIN, 4, perturbation=0.2, seed=7)
    b = build_hex_mesh(DOMAIN, 4, perturbation=0.2, seed=7)
    c = build_hex_mesh(DOMAIN, 4, perturbation=0.2, seed=8)
    u = build_hex_mesh(DOMAIN, 4)
    assert np.array_equal(a.vertices, b.vertices)
    assert not np.array_equal(a.vertices, c.vertices)
    on_bdr = np.any(np.isclose(np.abs(u.vertices), 1.25), axis=1)
    assert np.array_equal(a.vertices[on_bdr], u.vertices[on_bdr])
    assert not np.allclose(a.vertices[~on_bdr], u.vertices[~on_bdr])


@pytest.mark.parametrize("box", [((0, 1), (0, 0), (0, 1)), ((0, -1), (0, 1), (0, 1))])
def test_hex_rejects_bad_box(box):
    with pytest.raises(ValueError):
        build_hex_mesh(box, 4)


def test_hex_rejects_bad_args():
    with pytest.raises(ValueError):
        build_hex_mesh(DOMAIN, 1)
    with pytest.raises(ValueError):
        build_hex_mesh(DOMAIN, 4, perturbation=0.3)


# -- loading -----------------------------------------------------------------------

def test_single_cube_file():
    m = load_poly_mesh(CUBE)
    assert m.n_cells == 1
    assert m.is_boundary_cell.tolist() == [True]
    assert m.cell_boundary_triangles(0).size == 24
    assert m.cell_internal_triangles(0).size == 0
    assert m.cell_volumes[0] == pytest.approx(1.0, rel=1e-14)
    np.testing.assert_allclose(m.cell_centers[0], 0.5, atol=1e-15)


def test_two_cubes_file():
    m = load_poly_mesh(two_cubes_text())
    assert m.n_cells == 2
    assert m.face_neighbor[5] == 1 and m.face_owner[5] == 0
    assert (m.face_neighbor >= 0).sum() == 1
    for p in range(2):
        assert m.cell_internal_triangles(p).size == 4
        assert m.cell_volumes[p] == pytest.approx(1.0, rel=1e-14)
    assert m.neighbors(0).tolist() == [1]


def test_dump_load_roundtrip():
    m = build_hex_mesh(DOMAIN, 3, perturbation=0.1, seed=2)
    buf = io.StringIO()
    dump_poly_mesh(m, buf)
    m2 = load_poly_mesh(buf.getvalue())
    assert np.array_equal(m.vertices, m2.vertices)
    np.testing.assert_allclose(m.cell_volumes, m2.cell_volumes, rtol=1e-14)
    assert np.array_equal(m.face_owner, m2.face_owner)
    assert np.array_equal(m.face_neighbor, m2.face_neighbor)


def test_undefined_vertex_names_face():
    bad = CUBE.replace("4 0 4 7 3", "4 0 4 7 9")
    with pytest.raises(MeshTopologyError, match="face 5"):
        load_poly_mesh(bad)


def test_parse_error_has_line_number():
    bad = CUBE.replace("1 1 0\n", "1 one 0\n", 1)
    with pytest.raises(MeshParseError) as exc:
        load_poly_mesh(bad)
    assert exc.value.lineno == 5


def test_missing_face_and_nonmanifold():
    with pytest.raises(MeshTopologyError):
        load_poly_mesh(CUBE.replace("6 0 1 2 3 4 5", "6 0 1 2 3 4 6"))
    text = two_cubes_text().replace("cells 2", "cells 3") + "6 5 6 7 8 9 10\n"
    with pytest.raises(MeshTopologyError):
        load_poly_mesh(text)


def test_header_required():
    with pytest.raises(MeshParseError):
        load_poly_mesh(CUBE.replace("polymesh 1", "polymesh 2"))


# -- centers -------------------------------------------------------------------------

def test_face_center_square_and_triangle():
    sq = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    np.testing.assert_allclose(face_center(np.arange(4), sq), [0.5, 0.5, 0.0], atol=1e-15)
    tri = np.array([[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]])
    np.testing.assert_allclose(face_center(np.arange(3), tri), tri.mean(axis=0), atol=1e-15)


def test_face_center_nonplanar_matches_fan_oracle():
    q = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0.2], [0, 1, 0]], float)
    _, oracle = fan_decomposition(q)
    np.testing.assert_allclose(face_center(np.arange(4), q), oracle, atol=1e-14)


def test_face_center_degenerate():
    line = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float)
    with pytest.raises(ValueError):
        face_center(np.arange(3), line)


def test_cell_center_unit_and_scaled_cube():
    m = load_poly_mesh(CUBE)
    np.testing.assert_allclose(cell_center(m, 0), [0.5, 0.5, 0.5], atol=1e-15)
    faces = [m.face_vertices(f).tolist() for f in range(m.n_faces)]
    m2 = build_mesh(2.0 * m.vertices, faces, [list(range(6))])
    np.testing.assert_allclose(cell_center(m2, 0), [1.0, 1.0, 1.0], atol=1e-15)


def test_cell_center_perturbed_matches_tet_oracle():
    m = build_hex_mesh(DOMAIN, 3, perturbation=0.25, seed=11)
    for p in range(m.n_cells):
        _, c = cell_tet_oracle(m, p)
        np.testing.assert_allclose(cell_center(m, p), c, atol=1e-10)
        np.testing.assert_allclose(m.cell_centers[p], c, atol=1e-10)


# -- characteristic lengths --------------------------------------------------------------

def test_characteristic_lengths_uniform():
    h = characteristic_lengths(build_hex_mesh(DOMAIN, 16))
    np.testing.assert_allclose(h, 0.15625, rtol=1e-14)


def test_characteristic_lengths_perturbed_bbox_scan():
    m = build_hex_mesh(DOMAIN, 8, perturbation=0.2, seed=3)
    hs = []
    for p in range(m.n_cells):
        pts = m.vertices[m.cell_vertices(p)]
        hs.append(np.cbrt(np.prod(pts.max(axis=0) - pts.min(axis=0))))
    h_min, h_ave, h_max = characteristic_lengths(m)
    assert h_min == pytest.approx(min(hs), rel=1e-14)
    assert h_ave == pytest.approx(np.mean(hs), rel=1e-14)
    assert h_max == pytest.approx(max(hs), rel=1e-14)
    assert h_min <= h_ave <= h_max


def test_refinement_halves_h_ave():
    h = [characteristic_lengths(build_hex_mesh(DOMAIN, n))[1] for n in (4, 8, 16)]
    assert h[0] / h[1] == 2.0 and h[1] / h[2] == 2.0


# -- invariants ----------------------------------------------------------------------------

@settings(max_examples=10, deadline=None)
@given(n=st.integers(2, 4), pert=st.floats(0.0, 0.29), seed=st.integers(0, 1000))
def test_mesh_invariants(n, pert, seed):
    m = build_hex_mesh(DOMAIN, n, perturbation=pert, seed=seed)
    # unit normals
    np.testing.assert_allclose(np.linalg.norm(m.tri_normals, axis=1), 1.0, atol=1e-12)
    assert np.all(m.tri_areas > 0)
    # internal triangles: two incident cells with opposite outward normals
    for a in m.internal_triangles[:50]:
        p, q = m.tri_owner[a], m.tri_neighbor[a]
        assert np.array_equal(m.outward_normal(p, a), -m.outward_normal(q, a))
    # closed-surface identity
    s = m.ht_sign[:, None] * m.tri_normals[m.ht_tri] * m.tri_areas[m.ht_tri][:, None]
    closure = np.zeros((m.n_cells, 3))
    np.add.at(closure, m.ht_cell, s)
    surf = np.bincount(m.ht_cell, weights=m.tri_areas[m.ht_tri])
    assert np.all(np.linalg.norm(closure, axis=1) <= 1e-9 * surf)
    # triangle areas sum to the fan area of each face
    for f in range(0, m.n_faces, 7):
        area, _ = fan_decomposition(m.vertices[m.face_vertices(f)], m.face_centers[f])
        tris = slice(m.face_tri_ptr[f], m.face_tri_ptr[f + 1])
        assert m.tri_areas[tris].sum() == pytest.approx(area, rel=1e-12)
    # tiling and vertex incidence
    assert m.cell_volumes.sum() == pytest.approx(15.625, rel=1e-8)
    for v in range(0, m.n_vertices, 5):
        for p in m.vertex_cells(v):
            assert v in m.cell_vertices(p)
    # boundary cells are exactly those with boundary triangles
    has_b = np.zeros(m.n_cells, bool)
    has_b[m.tri_owner[m.boundary_triangles]] = True
    assert np.array_equal(has_b, m.is_boundary_cell)


def test_build_mesh_from_lists():
    m = load_poly_mesh(CUBE)
    faces = [m.face_vertices(f).tolist() for f in range(m.n_faces)]
    m2 = build_mesh(m.vertices, faces, [list(range(6))])
    assert m2.cell_volumes[0] == pytest.approx(1.0)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twoscale.mesh import (Mesh, cross_mesh, discrete_laplacian, face_jump,
                           generate_structured_mesh, laplacian_stiffness_form,
                           read_mesh, two_triangle_mesh, weak_acuteness_report,
                           write_mesh)

from corpus import random_weakly_acute_mesh
from oracles import cotangent_stiffness, scan_locate

UNIT = ((0.0, 1.0), (0.0, 1.0))


# -- construction ------------------------------------------------------------

def test_unit_square_half():
    m = generate_structured_mesh(UNIT, 0.5)
    assert m.n_elements == 8
    assert list(m.interior_nodes) == [4]
    assert m.star_volumes[4] == pytest.approx(0.5, abs=1e-15)
    assert len(m.star(4)) == 4
    assert weak_acuteness_report(m).is_weakly_acute


def test_interval_mesh():
    m = generate_structured_mesh(((-1.0, 1.0),), 1.0)
    assert m.n_elements == 2
    assert list(m.interior_nodes) == [1]
    assert m.vertices[1, 0] == 0.0


def test_cross_mesh_topology():
    m = cross_mesh()
    assert m.n_elements == 4
    assert list(m.interior_nodes) == [0]
    assert len(m.interior_faces) == 4 and len(m.boundary_faces) == 4


@pytest.mark.parametrize("pattern", ["crisscross", "right"])
def test_face_and_star_invariants(pattern):
    m = generate_structured_mesh(((0.0, 1.0), (0.0, 2.0)), 0.25, pattern)
    fe = m.face_elements
    assert np.all(fe[m.interior_faces, 1] >= 0)
    assert np.all(fe[m.boundary_faces, 1] < 0)
    assert np.all(m.volumes > 0)
    for i in range(m.n_vertices):
        assert m.star_volumes[i] == pytest.approx(m.volumes[m.star(i)].sum(), rel=1e-14)
    assert m.quasi_uniformity == pytest.approx(1.0)
    # unit normals point out of K+
    for f in m.interior_faces[:20]:
        kp = fe[f, 0]
        c = m.vertices[m.elements[kp]].mean(0)
        mid = m.vertices[m.faces[f]].mean(0)
        assert m.face_normals[f] @ (mid - c) > 0


def test_rejects_three_dimensions():
    with pytest.raises(ValueError):
        generate_structured_mesh(((0, 1), (0, 1), (0, 1)), 0.5)
    with pytest.raises(ValueError):
        Mesh(np.zeros((4, 3)), [[0, 1, 2, 3]])


def test_hat_integrals():
    m = generate_structured_mesh(UNIT, 0.25)
    # int phi_i by the defining quadrature: mean of phi_i over K is 1/(d+1)
    i = 12
    direct = sum(m.volumes[k] / 3 for k in m.star(i))
    assert m.hat_integral(i) == pytest.approx(direct, rel=1e-15)
    # int_F phi_i = |F| / d: face measures in the structured mesh are h or h sqrt 2
    assert set(np.round(m.face_measures / 0.25, 12)) <= {1.0, round(math.sqrt(2), 12)}


# -- weak acuteness ------------------------------------------------------------

def test_structured_mesh_is_weakly_acute():
    for h in (0.5, 0.25, 1 / 16):
        for pattern in ("crisscross", "right"):
            assert weak_acuteness_report(generate_structured_mesh(UNIT, h, pattern)).is_weakly_acute


def test_one_dimensional_mesh_is_weakly_acute():
    m = generate_structured_mesh(((0.0, 1.0),), 0.1)
    rep = weak_acuteness_report(m)
    assert rep.is_weakly_acute
    assert rep.max_offdiag == pytest.approx(-10.0)


def test_obtuse_pair_is_flagged():
    # long shared edge from (-1, 0) to (1, 0), opposite angles 100 degrees each
    t = 1 / math.tan(math.radians(50))
    m = Mesh([[-1, 0], [1, 0], [0, t], [0, -t]], [[0, 1, 2], [0, 3, 1]])
    rep = weak_acuteness_report(m)
    assert not rep.is_weakly_acute
    K = cotangent_stiffness(m.vertices, m.elements)
    assert m.stiffness.toarray() == pytest.approx(K, abs=1e-14)
    (i, j, k), = rep.violating_pairs
    assert {i, j} == {0, 1}
    # -cot(100 deg) = tan(10 deg)
    assert k == pytest.approx(0.17632698070846498, rel=1e-12)
    assert k == pytest.approx(K[0, 1], rel=1e-12)


def test_acuteness_report_consistency():
    m = Mesh([[-1, 0], [1, 0], [0, 0.3], [0, -0.3]], [[0, 1, 2], [0, 3, 1]])
    rep = weak_acuteness_report(m)
    assert rep.is_weakly_acute == (len(rep.violating_pairs) == 0)


def test_stiffness_matches_cotangent_formula():
    rng = np.random.default_rng(3)
    m = random_weakly_acute_mesh(rng)
    K = cotangent_stiffness(m.vertices, m.elements)
    assert np.abs(m.stiffness.toarray() - K).max() < 1e-12 * np.abs(K).max()
    # partition of unity: rows sum to zero
    assert np.abs(np.asarray(m.stiffness.sum(axis=1))).max() < 1e-12 * np.abs(K).max()


# -- location --------------------------------------------------------------------

def test_locate_centroid():
    m = generate_structured_mesh(UNIT, 0.25)
    for k in (0, 7, 31):
        e, b = m.locate(m.vertices[m.elements[k]].mean(0))
        assert e == k
        assert b == pytest.approx(np.full(3, 1 / 3), abs=1e-12)


def test_locate_vertex_lowest_index():
    m = generate_structured_mesh(UNIT, 0.25)
    i = 12
    e, b = m.locate(m.vertices[i])
    assert e == m.star(i).min()
    assert b.max() == pytest.approx(1.0, abs=1e-12)
    assert m.elements[e][np.argmax(b)] == i


def test_locate_outside():
    m = generate_structured_mesh(UNIT, 0.25)
    assert m.locate([1.5, 0.5]) is None
    assert m.locate([0.5, -1e-6]) is None
    assert m.locate([0.5, -1e-15]) is not None


def test_locate_against_exhaustive_scan():
    rng = np.random.default_rng(7)
    m = generate_structured_mesh(((0.0, 1.0), (0.0, 0.75)), 0.125)
    pts = rng.random((1000, 2)) * [1.0, 0.75]
    elem, bary = m.locate_many(pts)
    for p, e, b in zip(pts, elem, bary):
        k, lam = scan_locate(m.vertices, m.elements, p)
        assert e == k
        assert b == pytest.approx(lam, abs=1e-12)
        assert abs(b.sum() - 1) <= 1e-12


def test_interpolate_reproduces_affine():
    m = generate_structured_mesh(UNIT, 0.2)
    v = 1 + 2 * m.vertices[:, 0] - 3 * m.vertices[:, 1]
    p = np.random.default_rng(1).random((50, 2))
    assert m.interpolate(v, p) == pytest.approx(1 + 2 * p[:, 0] - 3 * p[:, 1], abs=1e-13)


# -- clipping -----------------------------------------------------------------------

def test_clip_no_clipping_deep_inside():
    m = generate_structured_mesh(UNIT, 0.25)
    assert m.boundary_clip([0.5, 0.5], [0.1, 0.2]) == (1.0, 1.0)


def test_clip_center_of_unit_square():
    m = generate_structured_mesh(UNIT, 0.25)
    assert m.boundary_clip([0.5, 0.5], [1.0, 0.0]) == pytest.approx((0.5, 0.5), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99),
       st.floats(-2, 2), st.floats(-2, 2))
def test_clip_swap_and_boundary(x1, x2, y1, y2):
    m = generate_structured_mesh(UNIT, 0.25)
    x, y = np.array([x1, x2]), np.array([y1, y2])
    t1, t2 = m.boundary_clip(x, y)
    s1, s2 = m.boundary_clip(x, -y)
    assert (t1, t2) == (s2, s1)
    assert 0 < t1 <= 1 and 0 < t2 <= 1
    for t, s in ((t1, 1), (t2, -1)):
        p = x + s * t * y
        assert m.locate(p) is not None
        if t < 1:
            assert m.boundary_distance(p[None])[0] < 1e-12


def test_clip_one_dimension():
    m = generate_structured_mesh(((-1.0, 1.0),), 0.25)
    assert m.boundary_clip([0.5], [1.0]) == pytest.approx((0.5, 1.0))


# -- jumps and the discrete Laplacian ----------------------------------------------

def test_affine_has_zero_jumps_and_laplacian():
    m = generate_structured_mesh(UNIT, 0.125)
    v = 2 - m.vertices[:, 0] + 4 * m.vertices[:, 1]
    assert max(abs(face_jump(m, v, f)) for f in m.interior_faces) < 1e-12
    assert np.abs(m.laplacian_matrix @ v).max() < 1e-11


def test_hat_jump_one_dimension():
    h = 0.1
    m = generate_structured_mesh(((0.0, 1.0),), h)
    i = 5
    v = np.zeros(m.n_vertices)
    v[i] = 1.0
    (f,) = m.vertex_faces(i)
    assert face_jump(m, v, f) == pytest.approx(-2 / h, rel=1e-12)


def test_boundary_face_rejected():
    m = generate_structured_mesh(UNIT, 0.5)
    with pytest.raises(ValueError):
        face_jump(m, np.zeros(m.n_vertices), m.boundary_faces[0])


def test_convex_function_has_nonnegative_jumps():
    # kinks along grid lines and along the diagonals of the "right" pattern
    m = generate_structured_mesh(UNIT, 0.125, "right")
    x = m.vertices
    v = np.abs(x[:, 0] - 0.5) + 2 * np.abs(x[:, 1] - 0.25) + np.maximum(x[:, 0] - x[:, 1], 0)
    jumps = np.array([face_jump(m, v, f) for f in m.interior_faces])
    assert jumps.min() >= -1e-12
    assert jumps.max() > 1


def test_jump_orientation_independent():
    m = cross_mesh()
    v = np.array([0.0, 1.0, 2.0, 0.5, -1.0])
    f = m.interior_faces[0]
    kp, km = m.face_elements[f]
    n = m.face_normals[f]
    gp = v[m.elements[kp]] @ m.grads[kp]
    gm = v[m.elements[km]] @ m.grads[km]
    # -n+ . grad v|K+ - n- . grad v|K- with n- = -n+
    assert face_jump(m, v, f) == pytest.approx(-n @ gp + n @ gm)


@pytest.mark.parametrize("h", [1.0, 0.5, 0.25])
def test_cross_mesh_inconsistency(h):
    m = cross_mesh(h)
    v = (m.vertices ** 2).sum(1)
    assert discrete_laplacian(m, v, 0) == pytest.approx(6.0, abs=1e-12)


def test_jump_and_stiffness_forms_agree_on_random_meshes():
    rng = np.random.default_rng(11)
    for _ in range(5):
        m = random_weakly_acute_mesh(rng)
        for _ in range(5):
            v = rng.normal(size=m.n_vertices)
            for i in m.interior_nodes:
                a = discrete_laplacian(m, v, i)
                b = laplacian_stiffness_form(m, v, i)
                assert abs(a - b) <= 1e-10 * max(1.0, abs(b))


def test_laplacian_monotone_on_weakly_acute_mesh():
    rng = np.random.default_rng(5)
    m = generate_structured_mesh(UNIT, 0.125)
    for _ in range(50):
        w = rng.normal(size=m.n_vertices)
        i = int(rng.choice(m.interior_nodes))
        v = w - rng.random(m.n_vertices)
        v[i] = w[i]
        assert discrete_laplacian(m, v, i) <= discrete_laplacian(m, w, i) + 1e-12


def test_one_dimensional_laplacian_is_second_difference():
    h = 0.125
    m = generate_structured_mesh(((0.0, 1.0),), h)
    v = np.sin(m.vertices[:, 0])
    i = 3
    expect = (v[i + 1] - 2 * v[i] + v[i - 1]) / h ** 2
    assert discrete_laplacian(m, v, i) == pytest.approx(expect, rel=1e-12)


# -- file format -----------------------------------------------------------------------

def test_mesh_file_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    m = random_weakly_acute_mesh(rng)
    path = tmp_path / "m.txt"
    write_mesh(m, path)
    r = read_mesh(path)
    assert np.array_equal(r.vertices, m.vertices)
    assert np.array_equal(r.elements, m.elements)
    assert np.array_equal(r.boundary, m.boundary)
    assert path.read_text().splitlines()[0] == f"2 {m.n_vertices} {m.n_elements}"


def test_malformed_mesh_file(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("2 3 1\n0 0 1\n1 0 1\n")
    with pytest.raises(ValueError):
        read_mesh(p)


def test_two_triangle_mesh_all_boundary():
    m = two_triangle_mesh()
    assert m.boundary.all()
    assert len(m.interior_faces) == 1

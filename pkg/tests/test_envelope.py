import json
import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twoscale.envelope import (ILLUSTRATION, SubdifferentialPolytope, abp_report,
                               contact_tolerance, jump_bound_check, local_envelope,
                               mesh_constant_G, nodal_convex_envelope, polygon_area,
                               polygon_perimeter, subdifferential, upper_abp_report)
from twoscale.mesh import (Mesh, cross_mesh, discrete_laplacian, face_jump,
                           generate_structured_mesh, two_triangle_mesh,
                           weak_acuteness_report)
from twoscale.presets import manufactured_problem
from twoscale.study import epsilon_rule
from twoscale.system import assemble, solve

from corpus import (UNIT, origin_strictly_inside, random_convex_local_envelope, random_nodal,
                    random_star, small_meshes)
from oracles import abp_brute_force, brute_force_envelope


# -- nodal envelopes ----------------------------------------------------------------------

@pytest.mark.parametrize("name, mesh", small_meshes(), ids=lambda x: x if isinstance(x, str) else "")
def test_contact_set_matches_brute_force(name, mesh):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for kind in ("dense", "sparse", "smooth", "ties"):
        v = random_nodal(mesh, rng, kind)
        env = nodal_convex_envelope(mesh, v)
        gamma, contact = abp_brute_force(mesh, v, env.center, env.ball_radius)
        assert env.values == pytest.approx(gamma, abs=1e-10)
        assert np.array_equal(env.contact, contact), (name, kind)


@pytest.mark.parametrize("name, mesh", small_meshes()[:6], ids=lambda x: x if isinstance(x, str) else "")
def test_illustration_mode_matches_brute_force(name, mesh):
    rng = np.random.default_rng(7)
    v = rng.normal(size=mesh.n_vertices)
    env = nodal_convex_envelope(mesh, v, mode=ILLUSTRATION)
    assert env.values == pytest.approx(brute_force_envelope(mesh.vertices, v, mesh.vertices),
                                       abs=1e-10)


def test_nonnegative_data_has_zero_envelope():
    m = generate_structured_mesh(UNIT, 1 / 4)
    v = np.abs(np.random.default_rng(0).normal(size=m.n_vertices))
    v[m.boundary] = 0
    v[12] = 0
    env = nodal_convex_envelope(m, v)
    assert np.all(env.values == 0)
    assert np.array_equal(np.flatnonzero(env.contact), np.flatnonzero(v == 0))


def test_two_triangle_illustration():
    m = two_triangle_mesh()
    env = nodal_convex_envelope(m, [1.0, 0.0, 1.0, 0.0], mode=ILLUSTRATION)
    assert env.values == pytest.approx(np.abs(m.vertices[:, 0]), abs=1e-14)
    assert env.contact.all()


def test_cross_mesh_single_well():
    m = cross_mesh(1.0)
    env = nodal_convex_envelope(m, [-1.0, 0, 0, 0, 0])
    assert env.values[0] == pytest.approx(-1.0, abs=1e-13)
    assert np.flatnonzero(env.contact).tolist() == [0]
    # the supporting plane passes through (z0, -1) and stays below 0 on B_R
    w, b = env.planes[0, :2], env.planes[0, 2]
    assert b == pytest.approx(-1.0, abs=1e-13)
    assert b + env.ball_radius * np.linalg.norm(w) <= 1e-12


def test_envelope_below_data_and_supported():
    m = generate_structured_mesh(UNIT, 1 / 4)
    rng = np.random.default_rng(2)
    for _ in range(10):
        v = random_nodal(m, rng, "dense")
        env = nodal_convex_envelope(m, v)
        tol = contact_tolerance(v)
        assert np.all(env.values <= np.minimum(v, 0) + tol)
        # each supporting plane lies below -v^- at every vertex
        w, b = env.planes[:, :2], env.planes[:, 2]
        L = m.vertices @ w.T + b
        assert np.all(L <= np.minimum(v, 0)[:, None] + 1e-10)
        # sup v^- = sup Gamma^-
        assert env.values.min() == pytest.approx(min(v.min(), 0.0), abs=1e-12)


def test_ball_must_contain_domain():
    with pytest.raises(ValueError):
        nodal_convex_envelope(cross_mesh(), np.zeros(5), R=0.5)


# -- local envelopes --------------------------------------------------------------------

def valence_eight_node(mesh):
    return next(i for i in mesh.interior_nodes if len(mesh.neighbors(i)) == 8)


def test_local_envelope_of_convex_data_is_identity():
    m = generate_structured_mesh(UNIT, 1 / 4)
    v = (m.vertices ** 2).sum(1) + m.vertices[:, 0]
    for i in m.interior_nodes:
        env = local_envelope(m, v, i)
        assert env.values == pytest.approx(v[env.vertices], abs=1e-12)


def test_local_envelope_cone():
    # centre -1, axis neighbours -1/4, diagonal neighbours -1/2: every
    # neighbour value is limited by the diagonal constraints to -1/2
    h = 1 / 4
    m = generate_structured_mesh(UNIT, h)
    i = valence_eight_node(m)
    v = np.zeros(m.n_vertices)
    v[i] = -1
    for j in m.neighbors(i):
        e = m.vertices[j] - m.vertices[i]
        v[j] = -0.25 if np.count_nonzero(np.abs(e) > 1e-12) == 1 else -0.5
    env = local_envelope(m, v, i)
    assert env.values[0] == -1
    assert env.values[1:] == pytest.approx(-0.5, abs=1e-13)
    poly = subdifferential(m, env)
    # gradients +-(2, 0), +-(0, 2): a diamond
    assert sorted(map(tuple, np.round(poly.vertices, 12))) == [(-2, 0), (0, -2), (0, 2), (2, 0)]
    assert poly.measure == pytest.approx(8.0, rel=1e-12)
    assert poly.perimeter == pytest.approx(8 * math.sqrt(2), rel=1e-12)


def test_local_envelope_dominates_global():
    m = generate_structured_mesh(UNIT, 1 / 4)
    rng = np.random.default_rng(9)
    checked = 0
    for _ in range(20):
        v = random_nodal(m, rng, "dense")
        env = nodal_convex_envelope(m, v)
        for i in np.flatnonzero(env.contact & ~m.boundary):
            loc = local_envelope(m, v, i, slack=env.tolerance)
            assert loc.values[0] == v[i]
            assert np.all(env.values[loc.vertices] <= loc.values + 1e-9)
            assert np.all(loc.values <= v[loc.vertices] + 2 * env.tolerance)
            checked += 1
    assert checked > 20


def test_local_envelope_needs_support():
    m = cross_mesh()
    with pytest.raises(RuntimeError, match="supporting"):
        local_envelope(m, [1.0, 0, 0, 0, 0], 0)
    with pytest.raises(ValueError):
        local_envelope(m, np.zeros(5), 1)


# -- sub-differentials ---------------------------------------------------------------------

def test_abs_x1_on_cross_mesh():
    m = cross_mesh(1.0)
    v = np.abs(m.vertices[:, 0])
    poly = subdifferential(m, local_envelope(m, v, 0))
    assert sorted(map(tuple, poly.vertices)) == [(-1.0, 0.0), (1.0, 0.0)]
    assert poly.measure == 0
    assert poly.perimeter == pytest.approx(4.0) and poly.hull_perimeter == pytest.approx(4.0)
    assert jump_bound_check(poly)


def test_cone_on_cross_mesh():
    m = cross_mesh(1.0)
    v = np.linalg.norm(m.vertices, axis=1)
    poly = subdifferential(m, local_envelope(m, v, 0))
    assert sorted(map(tuple, poly.vertices)) == [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    assert poly.measure == pytest.approx(4.0, rel=1e-14)
    assert poly.perimeter == pytest.approx(8.0, rel=1e-14)


def test_one_dimensional_subdifferential():
    m = generate_structured_mesh(((0.0, 1.0),), 1 / 4)
    v = (m.vertices[:, 0] - 0.5) ** 2
    poly = subdifferential(m, local_envelope(m, v, 2))
    assert poly.vertices[:, 0] == pytest.approx([-0.25, 0.25])
    assert poly.measure == pytest.approx(0.5) and poly.perimeter == pytest.approx(0.5)


@pytest.mark.parametrize("k", [3, 4, 5, 6, 8, 12, 50])
def test_regular_polygon_isoperimetric_ratio(k):
    t = 2 * math.pi * np.arange(k) / k
    P = np.column_stack([np.cos(t), np.sin(t)])
    area, per = polygon_area(P), polygon_perimeter(P)
    assert area / per ** 2 == pytest.approx(1 / (4 * k * math.tan(math.pi / k)), rel=1e-13)
    assert area / per ** 2 < 1 / (4 * math.pi)
    assert jump_bound_check(SubdifferentialPolytope(0, P, area, per, per))


def test_degenerate_polytope_passes_bound():
    P = np.array([[0.0, 0.0], [1.0, 0.0]])
    assert jump_bound_check(SubdifferentialPolytope(0, P, 0.0, 2.0, 2.0))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_random_local_envelopes(seed):
    rng = np.random.default_rng(seed)
    m, v, env = random_convex_local_envelope(rng)
    gam = env.nodal(m.n_vertices)
    jumps = [face_jump(m, gam, F) for F in m.vertex_faces(0)]
    assert min(jumps) >= -1e-10                         # convex across every face
    poly = subdifferential(m, env)
    assert poly.hull_perimeter == pytest.approx(poly.perimeter, abs=1e-10)
    assert jump_bound_check(poly)
    # 0 is an interior subgradient exactly when gamma rises towards every neighbour
    rise = env.values[1:] - env.values[0]
    if poly.measure > 1e-12 and np.abs(rise).min() > 1e-9:
        P = poly.vertices
        assert origin_strictly_inside(P) == bool(np.all(rise > 0))
    # gamma <= v on the star with equality at the node
    assert np.all(env.values <= v[env.vertices] + 1e-12)
    if weak_acuteness_report(m).is_weakly_acute:
        assert discrete_laplacian(m, gam, 0) <= discrete_laplacian(m, v, 0) + 1e-10


@settings(max_examples=100, deadline=None)
@given(st.integers(4, 8), st.integers(0, 2 ** 32 - 1))
def test_envelope_lowers_the_discrete_laplacian(k, seed):
    rng = np.random.default_rng(seed)
    ang = 2 * math.pi * np.arange(k) / k + rng.random()
    ring = (1 + 0.05 * rng.uniform(-1, 1, k))[:, None] * np.column_stack([np.cos(ang), np.sin(ang)])
    m = Mesh(np.vstack([[0, 0], ring]), [[0, 1 + j, 1 + (j + 1) % k] for j in range(k)],
             [False] + [True] * k)
    assert weak_acuteness_report(m).is_weakly_acute
    v = np.concatenate([[0.0], ring @ rng.normal(size=2) + rng.exponential(size=k)])
    gam = local_envelope(m, v, 0).nodal(m.n_vertices)
    assert discrete_laplacian(m, gam, 0) <= discrete_laplacian(m, v, 0) + 1e-10


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_random_local_envelopes_around_a_minimum(seed):
    rng = np.random.default_rng(seed)
    m = random_star(rng)
    v = np.zeros(m.n_vertices)
    v[1:] = rng.exponential(size=m.n_vertices - 1) + 0.05
    env = local_envelope(m, v, 0)
    poly = subdifferential(m, env)
    P = poly.vertices
    assert poly.measure > 0
    assert origin_strictly_inside(P)


# -- ABP report ----------------------------------------------------------------------------

def test_report_of_nonnegative_solution():
    m = generate_structured_mesh(UNIT, 1 / 8)
    v = np.abs(np.sin(np.pi * m.vertices[:, 0]))
    v[m.boundary] = 0
    rep = abp_report(m, v, np.ones(len(m.interior_nodes)))
    assert rep.sup_negative == 0 and rep.ratio == 0 and rep.consistent


def test_report_contacts_and_json():
    p = manufactured_problem("P3")
    m = generate_structured_mesh(p.box, 1 / 16)
    s = assemble(m, p.coefficients, epsilon_rule(1 / 16, "c3"))
    sol = solve(s)
    rep = upper_abp_report(m, sol, s.rhs)
    assert rep.consistent and 0 < rep.ratio < np.inf
    assert rep.sup_negative == pytest.approx(sol.values.max())
    assert rep.contact_count == len(rep.details) > 0
    for det in rep.details:
        assert det.jump_sum >= 0 and det.measure <= det.jump_sum ** 2 / (4 * math.pi) + 1e-12
    assert rep.G == pytest.approx(mesh_constant_G(m))
    d = json.loads(rep.to_json())
    assert set(d) == {"sup_negative", "abp_sum", "ratio", "contact_count", "G"}
    # the unique maximiser of u_h touches the concave envelope
    assert int(np.argmax(sol.values)) in rep.contact_nodes


def test_report_one_dimensional_ratio_is_stable():
    p = manufactured_problem("P1")
    ratios = []
    for k in range(3, 8):
        h = 2.0 ** -k
        m = generate_structured_mesh(p.box, h)
        s = assemble(m, p.coefficients, epsilon_rule(h, "c3"))
        rep = abp_report(m, solve(s), s.rhs, details=False)
        assert rep.consistent and rep.G == 1.0
        ratios.append(rep.ratio)
    assert np.all(np.isfinite(ratios)) and max(ratios) <= 10 * ratios[0]
    assert min(ratios) > 0

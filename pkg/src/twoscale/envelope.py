"""Convex envelopes of nodal functions, local envelopes on stars, their
sub-differentials and the discrete ABP ratio."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh, discrete_laplacian, face_jump
from .simplex import simplex

ABP, ILLUSTRATION = "abp", "illustration"


def contact_tolerance(v) -> float:
    return 1e-9 * (1.0 + float(np.abs(v).max(initial=0.0)))


def enclosing_ball(mesh: Mesh, factor: float = 2.0):
    """Centre of the bounding box and ``factor`` times the radius of the
    smallest ball around it containing all vertices."""
    lo, hi = mesh.bbox
    c = 0.5 * (lo + hi)
    r = float(np.linalg.norm(mesh.vertices - c, axis=1).max())
    return c, factor * r


def ball_polygon(center, R: float, m: int = 64) -> np.ndarray:
    """Vertices of a polytope containing B_R: the two endpoints in 1D, a
    regular m-gon circumscribing the circle in 2D."""
    center = np.asarray(center, float)
    if len(center) == 1:
        return np.array([[center[0] - R], [center[0] + R]])
    ang = (np.arange(m) + 0.5) * (2 * math.pi / m)
    rad = R / math.cos(math.pi / m)
    return center + rad * np.column_stack([np.cos(ang), np.sin(ang)])


@dataclass
class EnvelopeResult:
    mode: str
    center: np.ndarray
    ball_radius: float
    values: np.ndarray        # Gamma at every vertex (nan where not computed)
    contact: np.ndarray       # bool per vertex
    planes: np.ndarray        # supporting (w, b) per vertex, nan where not computed
    tolerance: float


def envelope_points(mesh: Mesh, v, mode: str = ABP, R=None, center=None, m: int = 64):
    """Point cloud and targets whose lower convex hull is the envelope."""
    v = np.asarray(v, float)
    if mode == ILLUSTRATION:
        return mesh.vertices.copy(), v.copy(), None, None
    if mode != ABP:
        raise ValueError(f"unknown envelope mode {mode!r}")
    c0, R0 = enclosing_ball(mesh)
    center = c0 if center is None else np.asarray(center, float)
    R = R0 if R is None else float(R)
    if np.linalg.norm(mesh.vertices - center, axis=1).max() >= R:
        raise ValueError("the ball B_R must contain the domain with a positive margin")
    target = np.minimum(v, 0.0)
    # vertices with target 0 lie inside the polygon, whose corners carry
    # target 0 as well, so they never support the envelope
    keep = target < 0
    pts = np.vstack([mesh.vertices[keep], ball_polygon(center, R, m)])
    tgt = np.concatenate([target[keep], np.zeros(len(pts) - keep.sum())])
    return pts, tgt, center, R


def nodal_convex_envelope(mesh: Mesh, v, R=None, mode: str = ABP, nodes=None,
                          m: int = 64, center=None) -> EnvelopeResult:
    """Convex envelope at nodes.

    ABP mode envelopes ``-v^-`` over a ball ``B_R`` containing the domain;
    illustration mode envelopes ``v`` over the mesh nodes.  For each node
    the LP  ``min sum mu_k t_k  s.t.  sum mu_k = 1, sum mu_k p_k = x_i,
    mu >= 0`` is solved; its dual is the supporting affine function.
    """
    v = np.asarray(v, float)
    pts, tgt, center, R = envelope_points(mesh, v, mode, R, center, m)
    nodes = np.arange(mesh.n_vertices) if nodes is None else np.asarray(nodes, dtype=np.int64)
    d = mesh.dim
    A = np.vstack([np.ones(len(pts)), pts.T])
    values = np.full(mesh.n_vertices, np.nan)
    planes = np.full((mesh.n_vertices, d + 1), np.nan)
    for i in nodes:
        res = simplex(tgt, A, np.concatenate([[1.0], mesh.vertices[i]]))
        if not res.success:
            raise RuntimeError(f"envelope LP at node {i} ended with status {res.status}")
        values[i] = res.fun
        planes[i] = np.concatenate([res.dual[1:], res.dual[:1]])
    tol = contact_tolerance(v)
    contact = np.zeros(mesh.n_vertices, dtype=bool)
    ok = np.isfinite(values)
    if mode == ABP:
        contact[ok] = (np.abs(values[ok] - v[ok]) <= tol) & (v[ok] <= 0)
    else:
        contact[ok] = np.abs(values[ok] - v[ok]) <= tol
    return EnvelopeResult(mode, center, R if R is not None else np.nan, values,
                          contact, planes, tol)


# -- local envelopes ------------------------------------------------------------------

@dataclass
class LocalEnvelope:
    """Convex piecewise linear ``gamma`` on the star of ``node``."""
    node: int
    vertices: np.ndarray      # star vertex ids (node first)
    values: np.ndarray        # gamma at those vertices
    elements: np.ndarray      # star element ids
    gradients: np.ndarray     # (n_elements, d) gradient of gamma per element

    def nodal(self, n_vertices: int) -> np.ndarray:
        """Nodal vector equal to gamma on the star and 0 elsewhere."""
        out = np.zeros(n_vertices)
        out[self.vertices] = self.values
        return out


def local_envelope(mesh: Mesh, v, i: int, slack: float = 0.0) -> LocalEnvelope:
    """Largest convex function on the star of ``i`` below ``v`` at the star
    nodes that passes through ``(x_i, v_i)``.

    ``gamma(z_j) = v_i + max { <w, z_j - x_i> : <w, z_k - x_i> <= v_k - v_i + slack }``;
    each value is the dual of a small conic LP.
    """
    if mesh.boundary[i]:
        raise ValueError(f"node {i} is on the boundary")
    v = np.asarray(v, float)
    nb = mesh.neighbors(i)
    E = mesh.vertices[nb] - mesh.vertices[i]
    r = v[nb] - v[i] + slack
    vals = np.empty(len(nb))
    for k in range(len(nb)):
        res = simplex(r, E.T, E[k])
        if not res.success:
            raise RuntimeError(f"local envelope at node {i}: LP {res.status} "
                               "(no supporting plane; is the node in the contact set?)")
        vals[k] = v[i] + res.fun
    verts = np.concatenate([[i], nb])
    values = np.concatenate([[v[i]], vals])
    elems = mesh.star(i)
    lookup = dict(zip(verts.tolist(), values.tolist()))
    local = np.array([[lookup[int(a)] for a in mesh.elements[K]] for K in elems])
    grads = np.einsum("ka,kad->kd", local, mesh.grads[elems])
    return LocalEnvelope(int(i), verts, values, elems, grads)


# -- sub-differentials ------------------------------------------------------------------

def _hull(points, tol):
    """Convex hull (counter-clockwise) by the monotone chain."""
    pts = np.unique(np.round(points / tol) * tol if tol > 0 else points, axis=0)
    pts = sorted(map(tuple, pts))
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= tol * tol:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= tol * tol:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def polygon_area(P) -> float:
    if len(P) < 3:
        return 0.0
    x, y = P[:, 0], P[:, 1]
    return 0.5 * abs(float(x @ np.roll(y, -1) - y @ np.roll(x, -1)))


def polygon_perimeter(P) -> float:
    """Perimeter of a hull; a segment is traversed twice."""
    if len(P) < 2:
        return 0.0
    return float(np.linalg.norm(P - np.roll(P, -1, axis=0), axis=1).sum())


@dataclass
class SubdifferentialPolytope:
    node: int
    vertices: np.ndarray    # ordered hull of element gradients (2D) or the two slopes
    measure: float
    perimeter: float        # sum of jumps over faces through the node
    hull_perimeter: float   # measured on the polygon itself


def subdifferential(mesh: Mesh, env: LocalEnvelope) -> SubdifferentialPolytope:
    g = env.gradients
    gam = env.nodal(mesh.n_vertices)
    jumps = float(sum(face_jump(mesh, gam, F) for F in mesh.vertex_faces(env.node)))
    if mesh.dim == 1:
        lo, hi = float(g[:, 0].min()), float(g[:, 0].max())
        return SubdifferentialPolytope(env.node, np.array([[lo], [hi]]), hi - lo, jumps, hi - lo)
    scale = max(1.0, float(np.abs(g).max()))
    P = _hull(g, 1e-13 * scale)
    return SubdifferentialPolytope(env.node, P, polygon_area(P), jumps, polygon_perimeter(P))


def jump_bound_check(poly: SubdifferentialPolytope) -> bool:
    """Isoperimetric bound ``area <= perimeter^2 / (4 pi)`` with the
    perimeter taken as the sum of jumps."""
    return poly.measure <= poly.perimeter ** 2 / (4 * math.pi) + 1e-12


# -- ABP report ---------------------------------------------------------------------------

def mesh_constant_G(mesh: Mesh) -> float:
    """``max |F|^-d |omega_i|^(d-1)`` over interior nodes and the interior
    faces through them (1 in one dimension)."""
    d = mesh.dim
    if d == 1:
        return 1.0
    best = 0.0
    fi = mesh.interior_faces
    fmeas = mesh.face_measures
    for a in range(d):
        node = mesh.faces[fi, a]
        keep = ~mesh.boundary[node]
        vals = fmeas[fi[keep]] ** (-d) * mesh.star_volumes[node[keep]] ** (d - 1)
        if len(vals):
            best = max(best, float(vals.max()))
    return best


@dataclass
class ContactDetail:
    node: int
    measure: float
    jump_sum: float
    laplacian: float


@dataclass
class AbpReport:
    sup_negative: float
    contact_nodes: list
    abp_sum: float
    ratio: float
    G: float
    details: list = field(default_factory=list)
    consistent: bool = True

    @property
    def contact_count(self) -> int:
        return len(self.contact_nodes)

    def to_dict(self) -> dict:
        return {"sup_negative": self.sup_negative, "abp_sum": self.abp_sum,
                "ratio": self.ratio, "contact_count": self.contact_count, "G": self.G}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=False)


def abp_report(mesh: Mesh, values, rhs, R=None, details: bool = True) -> AbpReport:
    """Empirical constant in ``sup v^- <= C (sum_contact |f_i|^d |omega_i|)^(1/d)``.

    ``values`` is the nodal solution on all vertices; ``rhs`` holds f_i on
    the interior nodes (in ``mesh.interior_nodes`` order) or on all vertices.
    """
    v = np.asarray(getattr(values, "values", values), float)
    d = mesh.dim
    f = np.zeros(mesh.n_vertices)
    rhs = np.asarray(rhs, float)
    if len(rhs) == mesh.n_vertices:
        f[:] = rhs
    else:
        f[mesh.interior_nodes] = rhs
    sup_neg = float(max(0.0, -v.min(initial=0.0)))
    tol = contact_tolerance(v)
    cand = mesh.interior_nodes[v[mesh.interior_nodes] <= tol]
    env = nodal_convex_envelope(mesh, v, R=R, mode=ABP, nodes=cand)
    contact = np.flatnonzero(env.contact & ~mesh.boundary)
    abp_sum = float((np.abs(f[contact]) ** d * mesh.star_volumes[contact]).sum() ** (1.0 / d))
    consistent = True
    if sup_neg == 0.0:
        ratio = 0.0
    elif abp_sum > 0:
        ratio = sup_neg / abp_sum
    else:
        ratio, consistent = math.inf, False
    info = []
    if details:
        for i in contact:
            poly = subdifferential(mesh, local_envelope(mesh, v, int(i), slack=tol))
            info.append(ContactDetail(int(i), poly.measure, poly.perimeter,
                                      discrete_laplacian(mesh, v, int(i))))
    return AbpReport(sup_neg, [int(i) for i in contact], abp_sum, ratio,
                     mesh_constant_G(mesh), info, consistent)


def upper_abp_report(mesh: Mesh, values, rhs, R=None, details: bool = True) -> AbpReport:
    """The same report for the concave side, through ``v -> -v``."""
    v = np.asarray(getattr(values, "values", values), float)
    return abp_report(mesh, -v, -np.asarray(rhs, float), R, details)

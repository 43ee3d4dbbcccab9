"""The nonlocal operator I_eps and its realisation on P1 functions.

``I_eps u(x) = eps^-2 * sum_q w_q phi(z_q) * delta u(x, eps M z_q)``
where ``M = (A - lambda/2 I)^(1/2)`` and ``delta`` is the centred second
difference, shortened at the boundary so that it stays exact on quadratics.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, GEOM_TOL
from .quadrature import BallRule, ball_rule, simplex_rule, unit_ball_volume

PD_TOL = 1e-12
PD_CLAMP = 1e-14


# -- coefficients ------------------------------------------------------------

@dataclass
class Coefficients:
    """Coefficient field ``A`` (points (n, d) -> (n, d, d)), ellipticity
    bounds and source ``f`` (points (n, d) -> (n,))."""
    A: Callable[[np.ndarray], np.ndarray]
    lam: float
    Lam: float
    f: Callable[[np.ndarray], np.ndarray]
    name: str = ""

    def __post_init__(self):
        if not (self.lam > 0 and self.lam <= self.Lam):
            raise ValueError(f"need 0 < lambda <= Lambda, got {self.lam}, {self.Lam}")

    def check_ellipticity(self, points, tol: float = 1e-10) -> None:
        A = self.A(np.asarray(points, float))
        ev = np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, 1, 2)))
        if ev.min() < self.lam - tol or ev.max() > self.Lam + tol:
            raise ValueError(
                f"eigenvalues of A in [{ev.min():.6g}, {ev.max():.6g}] "
                f"outside [{self.lam}, {self.Lam}]")

    def scaled(self, s: float) -> "Coefficients":
        """Multiply A, the bounds and f by ``s > 0``."""
        A, f = self.A, self.f
        return Coefficients(lambda x: s * A(x), s * self.lam, s * self.Lam,
                            lambda x: s * f(x), self.name)


def constant_coefficients(A, lam, f=0.0, Lam=None, name="") -> Coefficients:
    A = np.atleast_2d(np.asarray(A, float))
    if Lam is None:
        Lam = float(np.linalg.eigvalsh(A).max())
    if callable(f):
        src = f
    else:
        src = lambda x, c=float(f): np.full(len(x), c)
    return Coefficients(lambda x: np.broadcast_to(A, (len(x),) + A.shape).copy(),
                        float(lam), float(Lam), src, name)


# -- kernel --------------------------------------------------------------------

@dataclass(frozen=True)
class Kernel:
    """Radial kernel with support in the unit ball, normalised so that
    ``int |z|^2 phi(z) dz = d``, together with the ball rule used to
    integrate against it."""
    profile: str
    normalization: float
    rule: BallRule
    values: np.ndarray      # phi at the rule points
    exponent: int = 0

    @property
    def dim(self) -> int:
        return self.rule.dim

    @property
    def degree(self) -> int:
        return self.rule.degree - 2 * self.exponent

    def __call__(self, z) -> np.ndarray:
        z = np.atleast_2d(z)
        r2 = (z ** 2).sum(-1)
        if self.profile == "ball":
            prof = (r2 <= 1.0).astype(float)
        else:
            prof = np.clip(1.0 - r2, 0.0, None) ** self.exponent
        return self.normalization * prof

    @property
    def weights(self) -> np.ndarray:
        """Combined weights ``w_q phi(z_q)``."""
        return self.rule.weights * self.values

    def moments(self) -> tuple[float, np.ndarray]:
        z = self.rule.points
        w = self.weights
        return float(w @ (z ** 2).sum(1)), np.einsum("q,qi,qj->ij", w, z, z)


def make_kernel(dim: int, profile: str = "ball", n_radial: int = 8,
                n_angular: int = 16, exponent: int = 2) -> Kernel:
    """``"ball"``: constant ``(d+2)/|B_1|`` on the unit ball.
    ``"bump"``: ``c (1 - |z|^2)^n`` with ``c`` fixed numerically by the
    second-moment condition."""
    rule = ball_rule(dim, n_radial, n_angular)
    n = len(rule.weights) // 2
    r2 = np.tile((rule.points[:n] ** 2).sum(1), 2)   # exactly even in z
    if profile == "ball":
        c = (dim + 2) / unit_ball_volume(dim)
        return Kernel(profile, c, rule, np.full(len(r2), c), 0)
    if profile == "bump":
        shape = (1.0 - r2) ** exponent
        c = dim / float(rule.weights @ (shape * r2))
        return Kernel(profile, c, rule, c * shape, exponent)
    raise ValueError(f"unknown kernel profile {profile!r}")


# -- star means and the scaling matrix -------------------------------------------

def element_means(mesh: Mesh, field: Callable, rule=None) -> np.ndarray:
    """Mean of ``field`` over every element (degree-4 rule or better)."""
    rule = rule or simplex_rule(mesh.dim)
    pts = rule.points(mesh.vertices[mesh.elements])       # (ne, nq, d)
    vals = field(pts.reshape(-1, mesh.dim))
    vals = vals.reshape(pts.shape[:2] + vals.shape[1:])
    return np.tensordot(rule.weights, vals, axes=(0, 1))


def star_means(mesh: Mesh, coefficients: Coefficients) -> np.ndarray:
    """``|omega_i|^-1 int_{omega_i} A`` for every vertex, symmetrised."""
    d = mesh.dim
    means = element_means(mesh, coefficients.A) * mesh.volumes[:, None, None]
    flat = means.reshape(len(means), -1)
    ids = mesh.elements.ravel()
    out = np.stack([np.bincount(ids, np.repeat(flat[:, c], d + 1),
                                minlength=mesh.n_vertices)
                    for c in range(d * d)], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = out / mesh.star_volumes[:, None]
    out = out.reshape(-1, d, d)
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def star_mean_A(mesh: Mesh, coefficients: Coefficients, i: int) -> np.ndarray:
    """Mean of ``A`` over the star of interior node ``i``.

    Raises ValueError when ``mean - (lambda/2) I`` fails to be positive
    definite by more than the tolerance."""
    if mesh.boundary[i]:
        raise ValueError(f"node {i} is on the boundary")
    Abar = star_means(mesh, coefficients)[i]
    shifted_spd(Abar[None], coefficients.lam, nodes=[i])
    return Abar


def shifted_spd(Abar: np.ndarray, lam: float, nodes=None) -> np.ndarray:
    """``Abar - (lambda/2) I`` with the PD check; eigenvalues in
    (-tol, 0] are clamped to a tiny positive value."""
    d = Abar.shape[-1]
    S = Abar - 0.5 * lam * np.eye(d)
    ev, V = np.linalg.eigh(S)
    scale = np.maximum(1.0, np.abs(Abar).reshape(len(Abar), -1).max(1))
    bad = ev[:, 0] <= -PD_TOL * scale
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        where = nodes[k] if nodes is not None else k
        raise ValueError(
            f"mean(A) - lambda/2 I not positive definite at node {where}: "
            f"eigenvalue {ev[k, 0]:.3e}; lambda is inconsistent with A")
    low = ev[:, 0] <= 0
    if low.any():
        ev = np.maximum(ev, PD_CLAMP)
        S = S.copy()
        S[low] = np.einsum("nij,nj,nkj->nik", V[low], ev[low], V[low])
    return S


def spd_sqrt(S) -> np.ndarray:
    """Symmetric square root of an SPD matrix of size 1 or 2 (closed form).

    Accepts a single matrix or a stack (n, d, d)."""
    S = np.asarray(S, dtype=float)
    single = S.ndim == 2
    S = np.atleast_3d(S) if not single else S[None]
    d = S.shape[-1]
    if np.abs(S - np.swapaxes(S, 1, 2)).max() > 1e-12 * max(np.abs(S).max(), 1.0):
        raise ValueError("matrix is not symmetric")
    if d == 1:
        if S.min() <= 0:
            raise ValueError(f"matrix not positive definite: eigenvalue {S.min():.3e}")
        M = np.sqrt(S)
    elif d == 2:
        a, b, c = S[:, 0, 0], S[:, 0, 1], S[:, 1, 1]
        disc = np.hypot(a - c, 2 * b)
        l1 = 0.5 * (a + c + disc)
        with np.errstate(divide="ignore", invalid="ignore"):
            l2 = np.where(l1 > 0, (a * c - b * b) / l1, -np.inf)
        if np.any(l2 <= 0) or np.any(~np.isfinite(l2)):
            k = int(np.argmin(l2))
            raise ValueError(f"matrix not positive definite: eigenvalue {l2[k]:.3e}")
        s = np.sqrt(l1 * l2)
        t = np.sqrt(l1) + np.sqrt(l2)
        M = (S + s[:, None, None] * np.eye(2)) / t[:, None, None]
    else:
        ev, V = np.linalg.eigh(S)
        if ev.min() <= 0:
            raise ValueError(f"matrix not positive definite: eigenvalue {ev.min():.3e}")
        M = np.einsum("nij,nj,nkj->nik", V, np.sqrt(ev), V)
    return M[0] if single else M


def scaling_matrices(mesh: Mesh, coefficients: Coefficients, nodes=None) -> np.ndarray:
    """``M_i = (Abar_i - lambda/2 I)^(1/2)`` for the given interior nodes."""
    nodes = mesh.interior_nodes if nodes is None else np.asarray(nodes)
    Abar = star_means(mesh, coefficients)[nodes]
    return spd_sqrt(shifted_spd(Abar, coefficients.lam, nodes))


# -- second differences --------------------------------------------------------------

def difference_weights(theta1, theta2):
    """Weights of u(x + theta1 y), u(x - theta2 y), u(x) in the
    non-uniform second difference; (1, 1, -2) when nothing is clipped."""
    s = theta1 + theta2
    return 2.0 / (theta1 * s), 2.0 / (theta2 * s), -2.0 / (theta1 * theta2)


def _locate_on_closure(mesh: Mesh, pts, toward):
    """Locate points that may sit on the boundary up to round-off; failures
    are nudged towards ``toward`` in steps starting at 1e-14 h."""
    elem, bary = mesh.locate_many(pts)
    miss = np.flatnonzero(elem < 0)
    step = 1e-14 * mesh.h
    while len(miss) and step < 1e-6 * mesh.h:
        dirn = toward[miss] - pts[miss]
        nrm = np.linalg.norm(dirn, axis=1, keepdims=True)
        nrm[nrm == 0] = 1.0
        e2, b2 = mesh.locate_many(pts[miss] + step * dirn / nrm)
        ok = e2 >= 0
        elem[miss[ok]], bary[miss[ok]] = e2[ok], b2[ok]
        miss = miss[~ok]
        step *= 100.0
    if len(miss):
        raise RuntimeError(f"{len(miss)} evaluation points could not be located, "
                           f"first at {pts[miss[0]]}")
    return elem, bary


def _evaluate(mesh: Mesh, u, pts, toward):
    if callable(u):
        return np.asarray(u(pts), float)
    elem, bary = _locate_on_closure(mesh, pts, toward)
    return np.einsum("na,na->n", np.asarray(u, float)[mesh.elements[elem]], bary)


def second_difference(mesh: Mesh, u, x, y):
    """``delta u(x, y)``, clipped at the boundary.

    ``u`` is either a callable on points (n, d) or a nodal vector.  ``x``
    and ``y`` may be single points or stacks of shape (n, d).
    """
    x = np.asarray(x, float)
    single = x.ndim == 1
    x = x.reshape(-1, mesh.dim)
    y = np.broadcast_to(np.asarray(y, float).reshape(-1, mesh.dim), x.shape)
    t1 = mesh.clip_many(x, y)
    t2 = mesh.clip_many(x, -y)
    wp, wm, wc = difference_weights(t1, t2)
    pts = np.vstack([x + t1[:, None] * y, x - t2[:, None] * y, x])
    vals = _evaluate(mesh, u, pts, np.vstack([x, x, x]))
    n = len(x)
    out = wp * vals[:n] + wm * vals[n:2 * n] + wc * vals[2 * n:]
    return float(out[0]) if single else out


# -- transform rows ----------------------------------------------------------------------

def spectral_norm(M) -> np.ndarray:
    """2-norm of symmetric matrices (n, d, d)."""
    return np.abs(np.linalg.eigvalsh(M)).max(axis=-1)


def rule_radius(rule: BallRule) -> float:
    return float(np.sqrt((rule.points ** 2).sum(1).max()))


@dataclass
class TransformSamples:
    """Evaluation points and weights realising I_eps at a batch of nodes.

    ``I_eps u(x_n) = sum_q wp[n,q] u(plus[n,q]) + wm[n,q] u(minus[n,q])
    + wc[n] u(x_n)``.
    """
    x: np.ndarray
    plus: np.ndarray
    minus: np.ndarray
    wp: np.ndarray
    wm: np.ndarray
    wc: np.ndarray
    clipped: np.ndarray  # (n,) any evaluation point clipped

    def apply(self, mesh: Mesh, u) -> np.ndarray:
        n, q, d = self.plus.shape
        toward = np.repeat(self.x, q, axis=0)
        vp = _evaluate(mesh, u, self.plus.reshape(-1, d), toward).reshape(n, q)
        vm = _evaluate(mesh, u, self.minus.reshape(-1, d), toward).reshape(n, q)
        vc = _evaluate(mesh, u, self.x, self.x)
        return (self.wp * vp).sum(1) + (self.wm * vm).sum(1) + self.wc * vc


def transform_samples(mesh: Mesh, kernel: Kernel, M, epsilon: float, x) -> TransformSamples:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.asarray(x, float).reshape(-1, mesh.dim)
    M = np.asarray(M, float).reshape(-1, mesh.dim, mesh.dim)
    rule = kernel.rule.half()
    kw = rule.weights * kernel(rule.points) / epsilon ** 2
    Y = epsilon * np.matmul(rule.points[None], np.swapaxes(M, 1, 2))
    n, q, d = Y.shape
    t1 = np.ones((n, q))
    t2 = np.ones((n, q))
    # only stencils reaching the boundary need the exact intersection
    reach = epsilon * spectral_norm(M) * rule_radius(rule)
    near = np.flatnonzero(mesh.boundary_distance(x) <= reach * (1 + 1e-9) + GEOM_TOL * mesh.h)
    if len(near):
        xr = np.repeat(x[near], q, axis=0)
        Yn = Y[near].reshape(-1, d)
        t1[near] = mesh.clip_many(xr, Yn).reshape(len(near), q)
        t2[near] = mesh.clip_many(xr, -Yn).reshape(len(near), q)
    wp, wm, wc = difference_weights(t1, t2)
    return TransformSamples(
        x=x,
        plus=x[:, None] + t1[..., None] * Y,
        minus=x[:, None] - t2[..., None] * Y,
        wp=kw * wp, wm=kw * wm, wc=(kw * wc).sum(1),
        clipped=np.any((t1 < 1) | (t2 < 1), axis=1))


@dataclass
class TransformRow:
    """``I_eps u_h(x_i) = sum_j weight_j u_h(x_j)`` (entries sorted by j)."""
    node: int
    M: np.ndarray
    epsilon: float
    entries: list
    support_radius: float

    @property
    def columns(self) -> np.ndarray:
        return np.array([j for j, _ in self.entries], dtype=np.int64)

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.entries])

    def apply(self, v) -> float:
        return float(self.weights @ np.asarray(v, float)[self.columns])


def transform_matrix(mesh: Mesh, kernel: Kernel, Ms, epsilon: float, nodes,
                     chunk: int = 256) -> sp.csr_matrix:
    """Rows of I_eps for ``nodes`` as a (len(nodes), nv) sparse matrix.

    Each evaluation point contributes its barycentric weights; duplicates
    are merged per node in ascending column order.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    Ms = np.asarray(Ms, float).reshape(len(nodes), mesh.dim, mesh.dim)
    rows, cols, vals = [], [], []
    for s in range(0, len(nodes), chunk):
        nd = nodes[s:s + chunk]
        smp = transform_samples(mesh, kernel, Ms[s:s + chunk], epsilon, mesh.vertices[nd])
        n, q, d = smp.plus.shape
        toward = np.repeat(smp.x, q, axis=0)
        local = np.repeat(np.arange(s, s + len(nd)), q)
        for pts, w in ((smp.plus, smp.wp), (smp.minus, smp.wm)):
            elem, bary = _locate_on_closure(mesh, pts.reshape(-1, d), toward)
            rows.append(np.repeat(local, d + 1))
            cols.append(mesh.elements[elem].ravel())
            vals.append((w.reshape(-1, 1) * bary).ravel())
        rows.append(np.arange(s, s + len(nd)))
        cols.append(nd)
        vals.append(smp.wc)
    T = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(len(nodes), mesh.n_vertices)).tocsr()
    T.sum_duplicates()
    T.sort_indices()
    return T


def build_transform_row(mesh: Mesh, kernel: Kernel, M_i, epsilon: float, i: int) -> TransformRow:
    M_i = np.asarray(M_i, float).reshape(mesh.dim, mesh.dim)
    T = transform_matrix(mesh, kernel, M_i[None], epsilon, [i])
    entries = [(int(j), float(w)) for j, w in zip(T.indices, T.data)]
    return TransformRow(int(i), M_i, float(epsilon), entries,
                        float(epsilon * spectral_norm(M_i[None])[0]))


def apply_transform(mesh: Mesh, kernel: Kernel, Ms, epsilon: float, nodes, u,
                    chunk: int = 2048) -> np.ndarray:
    """I_eps applied to ``u`` (callable or nodal vector) at ``nodes``."""
    nodes = np.asarray(nodes, dtype=np.int64)
    Ms = np.asarray(Ms, float).reshape(len(nodes), mesh.dim, mesh.dim)
    out = np.empty(len(nodes))
    for s in range(0, len(nodes), chunk):
        smp = transform_samples(mesh, kernel, Ms[s:s + chunk], epsilon,
                                mesh.vertices[nodes[s:s + chunk]])
        out[s:s + chunk] = smp.apply(mesh, u)
    return out


# -- approximation rates --------------------------------------------------------------

def loglog_slope(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


@dataclass
class RateProbe:
    epsilons: np.ndarray
    interior_error: np.ndarray
    boundary_error: np.ndarray
    interior_count: np.ndarray
    boundary_count: np.ndarray
    interior_slope: float
    boundary_slope: float


def approximation_rate_probe(mesh: Mesh, coefficients: Coefficients, u, hessian,
                             epsilons, kernel: Kernel | None = None) -> RateProbe:
    """Max error of ``I_eps u - M_i^2 : D^2 u(x_i)`` over interior nodes
    split into those farther than ``eps ||M_i||`` from the boundary and
    the boundary layer, with fitted log-log slopes in eps.

    ``u`` and ``hessian`` are callables on points (n, d)."""
    kernel = kernel or make_kernel(mesh.dim)
    nodes = mesh.interior_nodes
    Ms = scaling_matrices(mesh, coefficients, nodes)
    x = mesh.vertices[nodes]
    target = np.einsum("nij,nji->n", Ms @ Ms, hessian(x))
    radius = spectral_norm(Ms)
    dist = mesh.boundary_distance(x)
    eps = np.asarray(epsilons, float)
    ie, be, ic, bc = [], [], [], []
    for e in eps:
        err = np.abs(apply_transform(mesh, kernel, Ms, e, nodes, u) - target)
        inner = dist > e * radius
        ie.append(err[inner].max() if inner.any() else np.nan)
        be.append(err[~inner].max() if (~inner).any() else np.nan)
        ic.append(int(inner.sum()))
        bc.append(int((~inner).sum()))
    ie, be = np.array(ie), np.array(be)
    return RateProbe(eps, ie, be, np.array(ic), np.array(bc),
                     loglog_slope(eps, ie), loglog_slope(eps, be))

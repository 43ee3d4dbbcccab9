"""Assembly and solution of L_h^eps u = f in normalised nodal form.

Row i of the matrix is ``(lambda/2) Delta_h + I_eps`` evaluated at the
interior node x_i; boundary columns are dropped because u_h vanishes there.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, weak_acuteness_report
from .operator import (Coefficients, Kernel, make_kernel, scaling_matrices, spectral_norm,
                       transform_matrix)
from .quadrature import simplex_rule

RESIDUAL_TOL = 1e-10
KRYLOV_THRESHOLD = 100_000


def lumped_load(mesh: Mesh, f) -> np.ndarray:
    """``f_i = int f phi_i / int phi_i`` for every vertex.

    ``f`` is a callable on points (n, d).  Element integrals use the
    degree-7 (1D) or degree-4 (2D) rule, so the result is exact for
    polynomial ``f`` of degree 6 and 3 respectively.
    """
    rule = simplex_rule(mesh.dim)
    pts = rule.points(mesh.vertices[mesh.elements])
    fq = np.asarray(f(pts.reshape(-1, mesh.dim)), float).reshape(pts.shape[:2])
    # int_K f phi_a = |K| sum_q w_q f(x_q) lambda_a(x_q)
    contrib = mesh.volumes[:, None] * np.einsum("q,kq,qa->ka", rule.weights, fq, rule.barycentric)
    num = np.bincount(mesh.elements.ravel(), contrib.ravel(), minlength=mesh.n_vertices)
    with np.errstate(invalid="ignore", divide="ignore"):
        return num / mesh.hat_integral()


@dataclass
class DiscreteSystem:
    matrix: sp.csr_matrix          # N x N, interior columns only
    rhs: np.ndarray
    node_map: np.ndarray           # row/column k <-> mesh vertex node_map[k]
    epsilon: float
    lam: float
    mesh: Mesh
    laplacian_part: sp.csr_matrix  # (lambda/2) Delta_h rows, N x nv
    transform_part: sp.csr_matrix  # I_eps rows, N x nv
    scaling: np.ndarray            # M_i per row

    @property
    def size(self) -> int:
        return len(self.node_map)

    @property
    def support_radii(self) -> np.ndarray:
        """Per-row stencil reach ``eps ||M_i||_2`` used by the assembly."""
        return self.epsilon * spectral_norm(self.scaling)

    @property
    def nominal_radius(self) -> float:
        """The cruder a-priori reach ``eps / sqrt(lambda)``, for comparison."""
        return self.epsilon / np.sqrt(self.lam)

    @property
    def full_rows(self) -> sp.csr_matrix:
        """Rows including the boundary columns (N x nv)."""
        return (self.laplacian_part + self.transform_part).tocsr()

    def with_rhs(self, rhs) -> "DiscreteSystem":
        rhs = np.asarray(rhs, float)
        if rhs.shape != (self.size,):
            raise ValueError(f"rhs must have length {self.size}")
        return DiscreteSystem(self.matrix, rhs, self.node_map, self.epsilon, self.lam,
                              self.mesh, self.laplacian_part, self.transform_part,
                              self.scaling)


def assemble(mesh: Mesh, coefficients: Coefficients, epsilon: float,
             kernel: Kernel | None = None) -> DiscreteSystem:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    kernel = kernel or make_kernel(mesh.dim)
    rep = weak_acuteness_report(mesh)
    if not rep.is_weakly_acute:
        warnings.warn(f"mesh is not weakly acute ({len(rep.violating_pairs)} positive "
                      f"off-diagonal stiffness entries, max {rep.max_offdiag:.3e}); "
                      "the discrete maximum principle may fail", RuntimeWarning)
    nodes = mesh.interior_nodes
    Ms = scaling_matrices(mesh, coefficients, nodes)
    lap = (0.5 * coefficients.lam) * mesh.laplacian_matrix[nodes]
    T = transform_matrix(mesh, kernel, Ms, epsilon, nodes)
    full = (lap + T).tocsr()
    L = full[:, nodes].tocsr()
    L.sum_duplicates()
    L.sort_indices()
    rhs = lumped_load(mesh, coefficients.f)[nodes]
    return DiscreteSystem(L, rhs, nodes, float(epsilon), float(coefficients.lam),
                          mesh, lap.tocsr(), T, Ms)


# -- solving ---------------------------------------------------------------

class SingularSystemError(RuntimeError):
    def __init__(self, message, pivot=None, vertex=None):
        super().__init__(message)
        self.pivot = pivot
        self.vertex = vertex


@dataclass
class Solution:
    values: np.ndarray           # on all vertices, zero on the boundary
    residual_norm: float
    solver_info: dict = field(default_factory=dict)


def _singular_pivot(A: sp.spmatrix):
    """Index of the first vanishing pivot of a dense partially pivoted LU."""
    if A.shape[0] > 4000:
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lu, piv = sla.lu_factor(A.toarray(), check_finite=False)
    d = np.abs(np.diag(lu))
    tol = 1e-14 * max(d.max(), 1.0)
    bad = np.flatnonzero(d <= tol)
    return int(bad[0]) if len(bad) else None


class Factorization:
    """Factorised system matrix, reusable for many right-hand sides."""

    def __init__(self, system: DiscreteSystem, method: str = "auto"):
        self.system = system
        A = system.matrix.tocsc()
        n = A.shape[0]
        if method == "auto":
            method = "gmres" if n > KRYLOV_THRESHOLD else "direct"
        self.method = method
        self.norm_inf = float(abs(A).sum(axis=1).max()) if n else 0.0
        if method == "direct":
            try:
                self._lu = spla.splu(A)
            except RuntimeError as err:
                k = _singular_pivot(A)
                v = int(system.node_map[k]) if k is not None else None
                raise SingularSystemError(
                    f"singular system matrix ({err}); zero pivot at row {k}, vertex {v}; "
                    "check weak acuteness and assembly", k, v) from None
            self.info = {"method": "splu", "fill": int(self._lu.L.nnz + self._lu.U.nnz)}
        elif method == "gmres":
            self._A = A.tocsr()
            diag = self._A.diagonal()
            if np.any(diag == 0):
                k = int(np.flatnonzero(diag == 0)[0])
                raise SingularSystemError(f"zero diagonal at row {k}", k,
                                          int(system.node_map[k]))
            self._Minv = spla.LinearOperator(A.shape, matvec=lambda r, d=diag: r / d)
            self.info = {"method": "gmres"}
        else:
            raise ValueError(f"unknown solver {method!r}")

    def solve(self, rhs=None) -> Solution:
        sysm = self.system
        b = sysm.rhs if rhs is None else np.asarray(rhs, float)
        info = dict(self.info)
        if self.method == "direct":
            x = self._lu.solve(b)
        else:
            its = [0]

            def count(_):
                its[0] += 1
            x, flag = spla.gmres(self._A, b, M=self._Minv, rtol=1e-13, atol=0.0,
                                 restart=50, maxiter=2000, callback=count,
                                 callback_type="pr_norm")
            info.update(iterations=its[0], converged=flag == 0)
        res = float(np.abs(sysm.matrix @ x - b).max()) if len(b) else 0.0
        scale = float(np.abs(b).max(initial=0.0) + self.norm_inf * np.abs(x).max(initial=0.0))
        if not np.all(np.isfinite(x)) or res > RESIDUAL_TOL * max(scale, 1e-300):
            raise RuntimeError(f"linear solve failed: residual {res:.3e} vs scale {scale:.3e}")
        values = np.zeros(sysm.mesh.n_vertices)
        values[sysm.node_map] = x
        return Solution(values, res, info)


def solve(system: DiscreteSystem, method: str = "auto") -> Solution:
    return Factorization(system, method).solve()


# -- structural checks ---------------------------------------------------------

@dataclass
class MonotonicityReport:
    passed: bool
    offdiag_violations: int
    diag_violations: int
    worst_offdiag: tuple      # (value, row vertex, column vertex)
    worst_diag: tuple         # (value, row vertex)


def monotonicity_check(system: DiscreteSystem, part: str = "full",
                       tol: float = 1e-12) -> MonotonicityReport:
    """Sign pattern of the stored operator: off-diagonal entries
    ``>= -tol * row scale`` and diagonal ``< 0``.

    ``part`` selects the full operator, only ``"transform"`` (I_eps) or only
    ``"laplacian"`` ((lambda/2) Delta_h).  Columns are all mesh vertices.
    """
    src = {"full": system.full_rows, "transform": system.transform_part,
           "laplacian": system.laplacian_part}[part].tocoo()
    rows_v = system.node_map[src.row]
    scale = np.zeros(system.size)
    np.maximum.at(scale, src.row, np.abs(src.data))
    on_diag = src.col == rows_v
    diag = np.zeros(system.size)
    np.add.at(diag, src.row[on_diag], src.data[on_diag])
    off = ~on_diag
    rel = src.data[off] / np.maximum(scale[src.row[off]], 1e-300)
    bad_off = rel < -tol
    bad_diag = ~(diag < 0)
    if off.any():
        k = int(np.argmin(rel))
        worst_off = (float(src.data[off][k]), int(rows_v[off][k]), int(src.col[off][k]))
    else:
        worst_off = (0.0, -1, -1)
    kd = int(np.argmax(diag)) if len(diag) else -1
    worst_diag = (float(diag[kd]), int(system.node_map[kd])) if kd >= 0 else (0.0, -1)
    return MonotonicityReport(not bad_off.any() and not bad_diag.any(),
                              int(bad_off.sum()), int(bad_diag.sum()), worst_off, worst_diag)


def dmp_check(mesh: Mesh, solution: Solution, rhs, tol: float = 1e-10) -> bool:
    """Discrete maximum principle: ``rhs >= 0`` forces ``u_h <= 0``.

    Returns True when the premise fails (nothing to check)."""
    rhs = np.asarray(rhs, float)
    if np.any(rhs < 0):
        return True
    u = np.asarray(solution.values, float)
    return bool(u.max(initial=0.0) <= tol * max(np.abs(u).max(initial=0.0), 1.0))


# -- export -------------------------------------------------------------------------

def solution_csv(mesh: Mesh, solution: Solution) -> str:
    d = mesh.dim
    head = "vertex_id," + ",".join(f"x{k + 1}" for k in range(d)) + ",value\n"
    lines = [f"{i}," + ",".join(f"{c:.17g}" for c in x) + f",{v:.17g}"
             for i, (x, v) in enumerate(zip(mesh.vertices, solution.values))]
    return head + "\n".join(lines) + "\n"


def write_solution_csv(mesh: Mesh, solution: Solution, path) -> None:
    with open(path, "w") as fh:
        fh.write(solution_csv(mesh, solution))


def write_matrix_triplets(system: DiscreteSystem, path) -> None:
    """``row col value`` lines (mesh vertex ids), preceded by ``n n nnz``."""
    A = system.matrix.tocoo()
    nm = system.node_map
    with open(path, "w") as fh:
        fh.write(f"{A.shape[0]} {A.shape[1]} {A.nnz}\n")
        for r, c, v in zip(A.row, A.col, A.data):
            fh.write(f"{nm[r]} {nm[c]} {v:.17g}\n")

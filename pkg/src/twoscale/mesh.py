"""Simplicial meshes in one and two dimensions.

A :class:`Mesh` carries everything the two-scale scheme needs from the
triangulation: element geometry, face adjacency with a fixed normal
convention, vertex stars, point location and clipping of rays against the
boundary.  Meshes are immutable once built.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

GEOM_TOL = 1e-12


class Mesh:
    """Conforming simplicial mesh.

    Parameters
    ----------
    vertices : (nv, d) array
    elements : (ne, d+1) integer array of vertex indices
    boundary : optional (nv,) boolean flags.  When omitted, the vertices of
        faces with a single adjacent element are flagged.

    Faces are stored with their adjacent elements ``(K+, K-)`` (``K- = -1``
    on the boundary) and the unit normal pointing out of ``K+``.
    """

    def __init__(self, vertices, elements, boundary=None):
        vertices = np.array(vertices, dtype=float)
        if vertices.ndim == 1:
            vertices = vertices[:, None]
        elements = np.array(elements, dtype=np.int64)
        d = vertices.shape[1]
        if d not in (1, 2):
            raise ValueError(f"only d = 1, 2 supported, got d = {d}")
        if elements.ndim != 2 or elements.shape[1] != d + 1:
            raise ValueError(f"elements must have shape (ne, {d + 1})")
        if elements.min() < 0 or elements.max() >= len(vertices):
            raise ValueError("element refers to a missing vertex")

        # fix the orientation so that every element has positive volume
        ev = vertices[elements]
        if d == 1:
            det = ev[:, 1, 0] - ev[:, 0, 0]
        else:
            e1 = ev[:, 1] - ev[:, 0]
            e2 = ev[:, 2] - ev[:, 0]
            det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(np.abs(det) <= GEOM_TOL * np.abs(det).max()):
            raise ValueError("degenerate element")
        flip = det < 0
        elements[flip, -2:] = elements[flip][:, [-1, -2]]

        self.vertices = vertices
        self.elements = elements
        self._build_geometry()
        self._build_faces()
        if boundary is None:
            boundary = np.zeros(len(vertices), dtype=bool)
            bf = self.face_elements[:, 1] < 0
            boundary[np.unique(self.faces[bf])] = True
        self.boundary = np.asarray(boundary, dtype=bool)
        self._build_stars()
        for a in (self.vertices, self.elements, self.boundary):
            a.setflags(write=False)

    # -- construction ---------------------------------------------------

    def _build_geometry(self):
        d = self.dim
        ev = self.vertices[self.elements]                 # (ne, d+1, d)
        B = np.transpose(ev[:, 1:] - ev[:, :1], (0, 2, 1))  # columns P_a - P_0
        invB = np.linalg.inv(B)                           # rows = grad lambda_1..d
        grads = np.empty((len(ev), d + 1, d))
        grads[:, 1:] = invB
        grads[:, 0] = -invB.sum(axis=1)
        self.volumes = np.abs(np.linalg.det(B)) / math.factorial(d)
        self.grads = grads
        self._invB = invB
        self._origin = ev[:, 0].copy()

        diffs = ev[:, :, None, :] - ev[:, None, :, :]
        diam = np.sqrt((diffs ** 2).sum(-1)).reshape(len(ev), -1).max(1)
        # face measures |F_a| = d |K| |grad lambda_a|
        fm = d * self.volumes[:, None] * np.linalg.norm(grads, axis=2)
        inradius = d * self.volumes / fm.sum(axis=1)
        self.diameters = diam
        self.h = float(diam.max())
        self.shape_constant = float((diam / inradius).max())
        self.quasi_uniformity = float(diam.min() / self.h)

    def _build_faces(self):
        d = self.dim
        ne = len(self.elements)
        local = [[b for b in range(d + 1) if b != a] for a in range(d + 1)]
        allf = np.sort(self.elements[:, local], axis=2).reshape(-1, d)
        owner = np.repeat(np.arange(ne), d + 1)
        opposite = np.tile(np.arange(d + 1), ne)
        faces, inv, counts = np.unique(allf, axis=0, return_inverse=True,
                                       return_counts=True)
        inv = inv.ravel()
        if counts.max() > 2:
            raise ValueError("non-manifold mesh: face shared by >2 elements")
        order = np.lexsort((owner, inv))
        inv_s, owner_s, opp_s = inv[order], owner[order], opposite[order]
        first = np.ones(len(inv_s), dtype=bool)
        first[1:] = inv_s[1:] != inv_s[:-1]
        fe = -np.ones((len(faces), 2), dtype=np.int64)
        fo = -np.ones((len(faces), 2), dtype=np.int64)
        fe[inv_s[first], 0] = owner_s[first]
        fo[inv_s[first], 0] = opp_s[first]
        fe[inv_s[~first], 1] = owner_s[~first]
        fo[inv_s[~first], 1] = opp_s[~first]

        g = self.grads[fe[:, 0], fo[:, 0]]
        gn = np.linalg.norm(g, axis=1)
        self.faces = faces
        self.face_elements = fe
        self.face_local = fo
        self.face_normals = -g / gn[:, None]
        self.face_measures = d * self.volumes[fe[:, 0]] * gn
        self.interior_faces = np.flatnonzero(fe[:, 1] >= 0)
        self.boundary_faces = np.flatnonzero(fe[:, 1] < 0)

    def _build_stars(self):
        nv = len(self.vertices)
        self.star_ptr, self.star_elems = _csr_groups(
            self.elements.ravel(), np.repeat(np.arange(len(self.elements)), self.dim + 1), nv)
        self.star_volumes = np.bincount(
            self.elements.ravel(), weights=np.repeat(self.volumes, self.dim + 1),
            minlength=nv)
        fi = self.interior_faces
        self.vface_ptr, self.vface_ids = _csr_groups(
            self.faces[fi].ravel(), np.repeat(fi, self.dim), nv)

    # -- basic queries --------------------------------------------------

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary)

    def star(self, i: int) -> np.ndarray:
        """Element indices forming the star of vertex ``i``."""
        return self.star_elems[self.star_ptr[i]:self.star_ptr[i + 1]]

    def vertex_faces(self, i: int) -> np.ndarray:
        """Interior faces having ``i`` as a vertex."""
        return self.vface_ids[self.vface_ptr[i]:self.vface_ptr[i + 1]]

    def neighbors(self, i: int) -> np.ndarray:
        nb = np.unique(self.elements[self.star(i)])
        return nb[nb != i]

    def hat_integral(self, i=None):
        """``int phi_i = |omega_i| / (d + 1)``."""
        vol = self.star_volumes if i is None else self.star_volumes[i]
        return vol / (self.dim + 1)

    @cached_property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    # -- matrices --------------------------------------------------------

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        """``k_ij = (grad phi_i, grad phi_j)``."""
        g = self.grads
        loc = np.einsum("kad,kbd->kab", g, g) * self.volumes[:, None, None]
        rows = np.repeat(self.elements, self.dim + 1, axis=1).ravel()
        cols = np.tile(self.elements, (1, self.dim + 1)).ravel()
        K = sp.coo_matrix((loc.ravel(), (rows, cols)),
                          shape=(self.n_vertices,) * 2).tocsr()
        K.sum_duplicates()
        return K

    @cached_property
    def jump_coefficients(self) -> tuple[np.ndarray, np.ndarray]:
        """Per interior face, vertex ids and weights with J_F(v) = w . v[ids]."""
        fi = self.interior_faces
        kp, km = self.face_elements[fi, 0], self.face_elements[fi, 1]
        n = self.face_normals[fi]
        wp = -np.einsum("fad,fd->fa", self.grads[kp], n)
        wm = np.einsum("fad,fd->fa", self.grads[km], n)
        ids = np.hstack([self.elements[kp], self.elements[km]])
        return ids, np.hstack([wp, wm])

    @cached_property
    def laplacian_matrix(self) -> sp.csr_matrix:
        """Discrete Laplacian in jump form, one row per vertex.

        Row ``i`` gives ``(d+1)/d * sum_{F ni x_i} |F|/|omega_i| J_F(v)``.
        Rows of boundary vertices are zero.
        """
        d = self.dim
        fi = self.interior_faces
        ids, w = self.jump_coefficients
        rows, cols, vals = [], [], []
        for a in range(d):
            node = self.faces[fi, a]
            keep = ~self.boundary[node]
            scale = (d + 1) / d * self.face_measures[fi] / self.star_volumes[node]
            rows.append(np.repeat(node[keep], ids.shape[1]))
            cols.append(ids[keep].ravel())
            vals.append((scale[keep, None] * w[keep]).ravel())
        L = sp.coo_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.n_vertices,) * 2).tocsr()
        L.sum_duplicates()
        return L

    # -- point location ---------------------------------------------------

    @cached_property
    def _bucket_grid(self):
        lo, hi = self.bbox
        cell = self.h
        shape = np.maximum(np.ceil((hi - lo) / cell).astype(int), 1)
        ev = self.vertices[self.elements]
        pad = GEOM_TOL * self.h
        c0 = np.clip(np.floor((ev.min(1) - pad - lo) / cell).astype(int), 0, shape - 1)
        c1 = np.clip(np.floor((ev.max(1) + pad - lo) / cell).astype(int), 0, shape - 1)
        span = (c1 - c0).max(axis=0) + 1
        cells, elems = [], []
        for off in np.ndindex(*span):
            c = c0 + np.array(off)
            ok = np.all(c <= c1, axis=1)
            cells.append(np.ravel_multi_index(c[ok].T, shape))
            elems.append(np.flatnonzero(ok))
        cells = np.concatenate(cells)
        elems = np.concatenate(elems)
        order = np.lexsort((elems, cells))
        cells, elems = cells[order], elems[order]
        ncell = int(np.prod(shape))
        counts = np.bincount(cells, minlength=ncell)
        start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        slot = np.arange(len(cells)) - start[cells]
        table = -np.ones((ncell, max(int(counts.max()), 1)), dtype=np.int64)
        table[cells, slot] = elems
        return lo, cell, shape, table

    def locate_many(self, points, tol: float = GEOM_TOL, chunk: int = 20000):
        """Vectorised point location.

        Returns ``(elem, bary)``; ``elem`` is -1 for points outside the
        closed domain.  Among elements containing a point the lowest index
        wins.  Barycentric coordinates are clamped to [0, 1] and normalised.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        lo, cell, shape, table = self._bucket_grid
        d = self.dim
        elem = -np.ones(len(pts), dtype=np.int64)
        bary = np.zeros((len(pts), d + 1))
        for s in range(0, len(pts), chunk):
            p = pts[s:s + chunk]
            idx = np.floor((p - lo) / cell).astype(int)
            inbox = np.all((idx >= -1) & (idx <= shape), axis=1)
            idx = np.clip(idx, 0, shape - 1)
            cand = table[np.ravel_multi_index(idx.T, shape)]
            cand[~inbox] = -1
            c = np.where(cand >= 0, cand, 0)
            rel = p[:, None, :] - self._origin[c]
            lam = np.einsum("ncij,ncj->nci", self._invB[c], rel)
            lam = np.concatenate([1.0 - lam.sum(-1, keepdims=True), lam], axis=-1)
            inside = (cand >= 0) & np.all(lam >= -tol, axis=-1)
            found = inside.any(axis=1)
            first = np.argmax(inside, axis=1)
            rows = np.flatnonzero(found)
            elem[s + rows] = cand[rows, first[rows]]
            b = np.clip(lam[rows, first[rows]], 0.0, 1.0)
            bary[s + rows] = b / b.sum(axis=1, keepdims=True)
        return elem, bary

    def locate(self, x):
        """Containing element and barycentric coordinates, or None outside."""
        e, b = self.locate_many(np.atleast_1d(np.asarray(x, dtype=float))[None])
        if e[0] < 0:
            return None
        return int(e[0]), b[0]

    def interpolate(self, v, points):
        """Evaluate the piecewise linear function with nodal values ``v``.

        Points outside the domain give NaN.
        """
        e, b = self.locate_many(points)
        out = np.full(len(e), np.nan)
        ok = e >= 0
        out[ok] = np.einsum("na,na->n", np.asarray(v, float)[self.elements[e[ok]]], b[ok])
        return out

    # -- boundary geometry ---------------------------------------------------

    @cached_property
    def boundary_segments(self):
        """Boundary as maximal straight pieces: (a, b, outward normal).

        In 1D the pieces are the boundary points (``a == b``).
        """
        bf = self.boundary_faces
        if self.dim == 1:
            p = self.vertices[self.faces[bf, 0]]
            return p, p.copy(), self.face_normals[bf]
        scale = max(float(np.abs(self.vertices).max()), 1.0)
        groups: dict = {}
        for f in bf:
            n = self.face_normals[f]
            a, b = self.vertices[self.faces[f]]
            key = (round(n[0], 9), round(n[1], 9), round(float(n @ a) / scale, 9))
            groups.setdefault(key, []).append((a, b, n))
        A, B, N = [], [], []
        for items in groups.values():
            n = items[0][2]
            t = np.array([-n[1], n[0]])
            iv = []
            for a, b, _ in items:
                sa, sb = t @ a, t @ b
                iv.append((sa, a, sb, b) if sa <= sb else (sb, b, sa, a))
            iv.sort(key=lambda r: r[0])
            cur = list(iv[0])
            for r in iv[1:]:
                if r[0] <= cur[2] + GEOM_TOL * self.h:
                    if r[2] > cur[2]:
                        cur[2], cur[3] = r[2], r[3]
                else:
                    A.append(cur[1]); B.append(cur[3]); N.append(n)
                    cur = list(r)
            A.append(cur[1]); B.append(cur[3]); N.append(n)
        return np.array(A), np.array(B), np.array(N)

    def clip_many(self, x, y, chunk: int = 20000) -> np.ndarray:
        """First exit parameter along ``x + t y``, ``t`` in (0, 1].

        Returns 1 where the segment stays in the closed domain.  Exits are
        found by exact intersection with the boundary pieces whose outward
        normal makes a positive angle with ``y``.
        """
        x = np.asarray(x, float).reshape(-1, self.dim)
        y = np.asarray(y, float).reshape(-1, self.dim)
        A, B, N = self.boundary_segments
        theta = np.ones(len(x))
        for s in range(0, len(x), chunk):
            xs, ys = x[s:s + chunk], y[s:s + chunk]
            outward = ys @ N.T > 0
            if self.dim == 1:
                with np.errstate(divide="ignore", invalid="ignore"):
                    t = (A[:, 0][None, :] - xs) / ys
                ok = outward & (t > 0)
            else:
                e = B - A
                ax = A[None] - xs[:, None]
                den = ys[:, :1] * e[None, :, 1] - ys[:, 1:] * e[None, :, 0]
                with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                    t = (ax[..., 0] * e[None, :, 1] - ax[..., 1] * e[None, :, 0]) / den
                    u = (ax[..., 0] * ys[:, 1:] - ax[..., 1] * ys[:, :1]) / den
                stol = 1e-12
                ok = outward & (np.abs(den) > 0) & (t > 0) & (u >= -stol) & (u <= 1 + stol)
            t = np.where(ok, t, np.inf)
            theta[s:s + chunk] = np.minimum(t.min(axis=1), 1.0)
        return theta

    def boundary_clip(self, x, y) -> tuple[float, float]:
        """Clipping parameters (theta1, theta2) of the segment x +- y."""
        x = np.asarray(x, float).reshape(1, -1)
        y = np.asarray(y, float).reshape(1, -1)
        t = self.clip_many(np.vstack([x, x]), np.vstack([y, -y]))
        return float(t[0]), float(t[1])

    def boundary_distance(self, points) -> np.ndarray:
        p = np.asarray(points, float).reshape(-1, self.dim)
        A, B, _ = self.boundary_segments
        if self.dim == 1:
            return np.abs(p - A[:, 0][None]).min(axis=1)
        e = B - A
        ee = np.maximum((e ** 2).sum(1), 1e-300)
        rel = p[:, None] - A[None]
        s = np.clip((rel * e[None]).sum(-1) / ee, 0.0, 1.0)
        diff = rel - s[..., None] * e[None]
        return np.sqrt((diff ** 2).sum(-1)).min(axis=1)


def _csr_groups(keys, values, n):
    order = np.lexsort((values, keys))
    counts = np.bincount(keys, minlength=n)
    ptr = np.concatenate([[0], np.cumsum(counts)])
    return ptr, values[order]


# -- generators -------------------------------------------------------------

def generate_structured_mesh(box: Sequence[Sequence[float]], h: float,
                             pattern: str = "crisscross") -> Mesh:
    """Uniform mesh of an axis-aligned box.

    ``box`` is a list of ``(lo, hi)`` pairs, one per dimension.  In 2D each
    grid square is cut along one diagonal; with ``pattern="crisscross"`` the
    diagonal alternates so that every other vertex has a four-triangle
    star, with ``"right"`` all diagonals run the same way.  Both patterns
    consist of right isosceles triangles and are weakly acute.
    """
    box = [tuple(map(float, b)) for b in box]
    d = len(box)
    if d not in (1, 2):
        raise ValueError(f"only d = 1, 2 supported, got d = {d}")
    if h <= 0:
        raise ValueError("h must be positive")
    if any(hi <= lo for lo, hi in box):
        raise ValueError("degenerate box")
    n = [max(int(math.ceil((hi - lo) / h - 1e-9)), 1) for lo, hi in box]
    axes = [np.linspace(lo, hi, k + 1) for (lo, hi), k in zip(box, n)]
    if d == 1:
        x = axes[0]
        elems = np.column_stack([np.arange(n[0]), np.arange(1, n[0] + 1)])
        bnd = np.zeros(len(x), dtype=bool)
        bnd[[0, -1]] = True
        return Mesh(x[:, None], elems, bnd)

    nx, ny = n
    X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    vid = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    I, J = I.ravel(), J.ravel()
    v00, v10 = vid[I, J], vid[I + 1, J]
    v01, v11 = vid[I, J + 1], vid[I + 1, J + 1]
    if pattern == "crisscross":
        anti = (I + J) % 2 == 0
    elif pattern == "right":
        anti = np.zeros(len(I), dtype=bool)
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    t1 = np.where(anti[:, None], np.column_stack([v00, v10, v01]),
                  np.column_stack([v00, v10, v11]))
    t2 = np.where(anti[:, None], np.column_stack([v11, v01, v10]),
                  np.column_stack([v00, v11, v01]))
    elems = np.stack([t1, t2], axis=1).reshape(-1, 3)
    bnd = ((verts[:, 0] == axes[0][0]) | (verts[:, 0] == axes[0][-1])
           | (verts[:, 1] == axes[1][0]) | (verts[:, 1] == axes[1][-1]))
    return Mesh(verts, elems, bnd)


def cross_mesh(h: float = 1.0) -> Mesh:
    """Four right triangles around z0 = (0, 0) with z1..z4 = (h,0), (0,h),
    (-h,0), (0,-h)."""
    v = np.array([[0, 0], [h, 0], [0, h], [-h, 0], [0, -h]], dtype=float)
    e = [[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1]]
    return Mesh(v, e, [False, True, True, True, True])


def two_triangle_mesh() -> Mesh:
    """Triangles (z1, z2, z3) and (z1, -z2, z3) with z1 = (-1, 0),
    z2 = (0, 1), z3 = (1, 0).  Vertex order: z1, z2, z3, -z2."""
    v = np.array([[-1, 0], [0, 1], [1, 0], [0, -1]], dtype=float)
    return Mesh(v, [[0, 1, 2], [0, 3, 2]])


# -- weak acuteness ------------------------------------------------------------

@dataclass
class AcutenessReport:
    is_weakly_acute: bool
    violating_pairs: list = field(default_factory=list)  # (i, j, k_ij)
    max_offdiag: float = 0.0


def weak_acuteness_report(mesh: Mesh) -> AcutenessReport:
    K = mesh.stiffness.tocoo()
    off = K.row != K.col
    scale = np.abs(K.data).max()
    tol = 1e-12 * scale
    r, c, v = K.row[off], K.col[off], K.data[off]
    bad = (v > tol) & (r < c)
    pairs = [(int(i), int(j), float(k)) for i, j, k in zip(r[bad], c[bad], v[bad])]
    return AcutenessReport(not pairs, pairs, float(v.max()) if len(v) else 0.0)


# -- jumps and discrete Laplacian ------------------------------------------------

def face_jump(mesh: Mesh, v, face: int) -> float:
    """Jump ``J_F = -n+ . grad v|K+ - n- . grad v|K-`` across an interior face.

    Signed so that convex functions have nonnegative jumps.
    """
    kp, km = mesh.face_elements[face]
    if km < 0:
        raise ValueError(f"face {face} lies on the boundary")
    v = np.asarray(v, float)
    n = mesh.face_normals[face]
    gp = v[mesh.elements[kp]] @ mesh.grads[kp]
    gm = v[mesh.elements[km]] @ mesh.grads[km]
    return float((gm - gp) @ n)


def discrete_laplacian(mesh: Mesh, v, i: int) -> float:
    """``(d+1)/d * sum_{F ni x_i} |F| / |omega_i| * J_F(v)`` at interior node i."""
    d = mesh.dim
    total = 0.0
    for f in mesh.vertex_faces(i):
        total += mesh.face_measures[f] * face_jump(mesh, v, f)
    return (d + 1) / d * total / mesh.star_volumes[i]


def laplacian_stiffness_form(mesh: Mesh, v, i: int) -> float:
    """``-(int phi_i)^{-1} (grad v, grad phi_i)``, for cross-checking."""
    row = mesh.stiffness.getrow(i)
    return float(-(row @ np.asarray(v, float))[0] / mesh.hat_integral(i))


# -- file format -------------------------------------------------------------------

def write_mesh(mesh: Mesh, path) -> None:
    """ASCII format: ``dim nv ne``, vertex lines ``x1 .. xd flag``, then
    element lines of zero-based vertex indices."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.dim} {mesh.n_vertices} {mesh.n_elements}\n")
        for x, b in zip(mesh.vertices, mesh.boundary):
            fh.write(" ".join(f"{c:.17g}" for c in x) + f" {int(b)}\n")
        for e in mesh.elements:
            fh.write(" ".join(str(int(k)) for k in e) + "\n")


def read_mesh(path) -> Mesh:
    with open(path) as fh:
        tokens = [line.split() for line in fh if line.strip()]
    try:
        d, nv, ne = (int(t) for t in tokens[0])
        vlines = tokens[1:1 + nv]
        elines = tokens[1 + nv:1 + nv + ne]
        if len(vlines) != nv or len(elines) != ne:
            raise ValueError("truncated mesh file")
        verts = np.array([[float(t) for t in row[:d]] for row in vlines])
        flags = np.array([int(row[d]) != 0 for row in vlines])
        elems = np.array([[int(t) for t in row[:d + 1]] for row in elines])
    except (IndexError, ValueError) as exc:
        raise ValueError(f"malformed mesh file {path}: {exc}") from exc
    return Mesh(verts, elems, flags)

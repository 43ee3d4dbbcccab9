"""Quadrature rules: simplex rules for element integrals and symmetric
rules on the unit ball for the nonlocal kernel."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SimplexRule:
    """Rule on the reference simplex, in barycentric form.

    ``weights`` sum to one, so an element integral is
    ``volume * sum(weights * g(points))``.
    """
    barycentric: np.ndarray  # (nq, d+1)
    weights: np.ndarray      # (nq,)
    degree: int

    def points(self, element_vertices: np.ndarray) -> np.ndarray:
        """Map to physical points; ``element_vertices`` is (ne, d+1, d)."""
        return np.einsum("qa,kad->kqd", self.barycentric, element_vertices)


def simplex_rule(dim: int) -> SimplexRule:
    """Degree-7 Gauss rule on an interval, degree-4 rule on a triangle."""
    if dim == 1:
        s, w = np.polynomial.legendre.leggauss(4)
        t = 0.5 * (s + 1.0)
        return SimplexRule(np.column_stack([1.0 - t, t]), 0.5 * w, 7)
    if dim == 2:
        a1, b1 = 0.445948490915965, 0.108103018168070
        a2, b2 = 0.091576213509771, 0.816847572980459
        w1, w2 = 0.223381589678011, 0.109951743655322
        bary = np.array([
            [b1, a1, a1], [a1, b1, a1], [a1, a1, b1],
            [b2, a2, a2], [a2, b2, a2], [a2, a2, b2],
        ])
        w = np.array([w1] * 3 + [w2] * 3)
        return SimplexRule(bary, w / w.sum(), 4)
    raise ValueError(f"no simplex rule for dimension {dim}")


@dataclass(frozen=True)
class BallRule:
    """Rule on the closed unit ball, closed under z -> -z."""
    points: np.ndarray   # (nq, d)
    weights: np.ndarray  # (nq,) ball-measure weights
    degree: int

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def half(self) -> "BallRule":
        """One representative of each antipodal pair, weights doubled."""
        n = len(self.weights) // 2
        return BallRule(self.points[:n], 2.0 * self.weights[:n], self.degree)


def ball_rule(dim: int, n_radial: int = 8, n_angular: int = 16) -> BallRule:
    """Product rule on the unit ball.

    In 1D: Gauss-Legendre with ``n_radial`` points on [0, 1], mirrored, so
    integrands smooth on each half-interval (|z|, hats centred at 0) are
    handled without loss.
    In 2D: Gauss in radius (weight r dr) times ``n_angular`` uniform angles.
    Points are ordered so that ``points[k + n/2] == -points[k]``.
    """
    if dim == 1:
        s, w = np.polynomial.legendre.leggauss(n_radial)
        r, wr = 0.5 * (s + 1.0), 0.5 * w
        return BallRule(np.concatenate([r, -r])[:, None], np.concatenate([wr, wr]),
                        2 * n_radial - 1)
    if dim == 2:
        if n_angular % 2:
            raise ValueError("angular count must be even for central symmetry")
        s, w = np.polynomial.legendre.leggauss(n_radial)
        r = 0.5 * (s + 1.0)
        wr = 0.5 * w * r
        theta = (np.arange(n_angular) + 0.5) * (2.0 * math.pi / n_angular)
        # angle k and k + n/2 are antipodal; group by angle-half first
        half = n_angular // 2
        pts, wts = [], []
        for sign_block in (range(half), range(half, n_angular)):
            for k in sign_block:
                c, sn = math.cos(theta[k]), math.sin(theta[k])
                for rj, wj in zip(r, wr):
                    pts.append((rj * c, rj * sn))
                    wts.append(wj * 2.0 * math.pi / n_angular)
        pts = np.array(pts)
        wts = np.array(wts)
        return BallRule(pts, wts, min(2 * n_radial - 2, n_angular - 1))
    raise ValueError(f"no ball rule for dimension {dim}")


def unit_ball_volume(dim: int) -> float:
    return math.pi ** (dim / 2) / math.gamma(dim / 2 + 1)

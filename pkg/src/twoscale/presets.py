"""Manufactured test problems on boxes with homogeneous Dirichlet data."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .operator import Coefficients


@dataclass
class ProblemPreset:
    id: str
    box: tuple
    coefficients: Coefficients
    exact: Callable | None      # u on points (n, d)
    hessian: Callable | None    # D^2 u on points, (n, d, d)
    alpha: float
    smoothness: str             # "C2a" or "C3a"
    beta: float                 # exponent in the star-mean quality of A
    description: str = ""

    @property
    def dim(self) -> int:
        return len(self.box)

    @property
    def lam(self) -> float:
        return self.coefficients.lam

    @property
    def Lam(self) -> float:
        return self.coefficients.Lam

    def f(self, x):
        return self.coefficients.f(x)

    def A(self, x):
        return self.coefficients.A(x)


def _const_field(A):
    A = np.asarray(A, float)
    return lambda x: np.broadcast_to(A, (len(x),) + A.shape).copy()


def _stack2(a, b, c):
    """Symmetric 2x2 stack from entries (11, 12, 22)."""
    return np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)


def _contract(A_field, hess):
    return lambda x: np.einsum("nij,nij->n", A_field(x), hess(x))


def _p0():
    A = lambda x: np.eye(2) + 0.5 * np.einsum("ni,ij->nij", x, np.eye(2))
    zero = lambda x: np.zeros(len(x))
    return ProblemPreset("P0", ((0.0, 1.0), (0.0, 1.0)),
                         Coefficients(A, 1.0, 1.5, zero, "P0"),
                         zero, lambda x: np.zeros((len(x), 2, 2)), 1.0, "C3a", 2.0,
                         "zero solution with variable coefficients")


def _p1():
    u = lambda x: x[:, 0] ** 4 + x[:, 0] ** 2 - 2.0
    H = lambda x: (12 * x[:, 0] ** 2 + 2.0)[:, None, None]
    f = lambda x: 24 * x[:, 0] ** 2 + 4.0
    return ProblemPreset("P1", ((-1.0, 1.0),),
                         Coefficients(_const_field([[2.0]]), 2.0, 2.0, f, "P1"),
                         u, H, 1.0, "C3a", math.inf,
                         "1D quartic with A = 2 (first order is the best possible)")


def _p2():
    pi = math.pi
    u = lambda x: np.sin(pi * x[:, 0]) * np.sin(pi * x[:, 1])

    def H(x):
        s1, s2 = np.sin(pi * x[:, 0]), np.sin(pi * x[:, 1])
        c1, c2 = np.cos(pi * x[:, 0]), np.cos(pi * x[:, 1])
        return pi ** 2 * _stack2(-s1 * s2, c1 * c2, -s1 * s2)
    f = lambda x: -2 * pi ** 2 * u(x)
    return ProblemPreset("P2", ((0.0, 1.0), (0.0, 1.0)),
                         Coefficients(_const_field(np.eye(2)), 1.0, 1.0, f, "P2"),
                         u, H, 1.0, "C3a", math.inf, "Laplacian, product of sines")


P3_MATRIX = np.array([[2.0, 0.5], [0.5, 1.0]])


def _p3():
    Amat = P3_MATRIX
    lam = (3 - math.sqrt(2)) / 2
    Lam = (3 + math.sqrt(2)) / 2
    u = lambda x: x[:, 0] * (1 - x[:, 0]) * x[:, 1] * (1 - x[:, 1])

    def H(x):
        a, b = x[:, 0], x[:, 1]
        return _stack2(-2 * b * (1 - b), (1 - 2 * a) * (1 - 2 * b), -2 * a * (1 - a))

    def f(x):
        a, b = x[:, 0], x[:, 1]
        return -4 * b * (1 - b) + (1 - 2 * a) * (1 - 2 * b) - 2 * a * (1 - a)
    return ProblemPreset("P3", ((0.0, 1.0), (0.0, 1.0)),
                         Coefficients(_const_field(Amat), lam, Lam, f, "P3"),
                         u, H, 1.0, "C3a", math.inf, "anisotropic constant A, quartic bubble")


def _p4():
    pi = math.pi
    A = lambda x: np.eye(2) + 0.5 * np.einsum("ni,ij->nij", x, np.eye(2))
    u = lambda x: np.sin(pi * x[:, 0]) * x[:, 1] * (1 - x[:, 1])

    def H(x):
        s, c = np.sin(pi * x[:, 0]), np.cos(pi * x[:, 0])
        y = x[:, 1]
        return _stack2(-pi ** 2 * s * y * (1 - y), pi * c * (1 - 2 * y), -2 * s)

    def f(x):
        s = np.sin(pi * x[:, 0])
        y = x[:, 1]
        return (1 + 0.5 * x[:, 0]) * (-pi ** 2 * s * y * (1 - y)) + (1 + 0.5 * y) * (-2 * s)
    return ProblemPreset("P4", ((0.0, 1.0), (0.0, 1.0)), Coefficients(A, 1.0, 1.5, f, "P4"),
                         u, H, 1.0, "C3a", 2.0, "smooth variable diagonal A")


def _p5(alpha=0.5, center=(0.5, 0.5)):
    s = 2.0 + alpha
    x0 = np.asarray(center, float)

    def bubble(x):
        a, b = x[:, 0], x[:, 1]
        return 16 * a * (1 - a) * b * (1 - b)

    def bubble_grad(x):
        a, b = x[:, 0], x[:, 1]
        return 16 * np.column_stack([(1 - 2 * a) * b * (1 - b), a * (1 - a) * (1 - 2 * b)])

    def bubble_hess(x):
        a, b = x[:, 0], x[:, 1]
        return 16 * _stack2(-2 * b * (1 - b), (1 - 2 * a) * (1 - 2 * b), -2 * a * (1 - a))

    def u(x):
        return bubble(x) * np.linalg.norm(x - x0, axis=1) ** s

    def H(x):
        r = x - x0
        rho = np.linalg.norm(r, axis=1)
        g = rho ** s
        with np.errstate(divide="ignore", invalid="ignore"):
            gp = np.where(rho > 0, s * rho ** (s - 2), 0.0)            # grad g = gp * r
            gpp = np.where(rho > 0, s * (s - 2) * rho ** (s - 4), 0.0)
        Dg = gp[:, None] * r
        D2g = gp[:, None, None] * np.eye(2) + gpp[:, None, None] * np.einsum("ni,nj->nij", r, r)
        Db = bubble_grad(x)
        cross = np.einsum("ni,nj->nij", Db, Dg)
        return (g[:, None, None] * bubble_hess(x) + cross + np.swapaxes(cross, 1, 2)
                + bubble(x)[:, None, None] * D2g)
    f = lambda x: np.trace(H(x), axis1=1, axis2=2)
    return ProblemPreset("P5", ((0.0, 1.0), (0.0, 1.0)),
                         Coefficients(_const_field(np.eye(2)), 1.0, 1.0, f, "P5"),
                         u, H, alpha, "C2a", math.inf,
                         f"bubble times |x - x0|^(2 + {alpha}), Hoelder second derivatives")


_BUILDERS = {"P0": _p0, "P1": _p1, "P2": _p2, "P3": _p3, "P4": _p4, "P5": _p5}


def preset_ids() -> list[str]:
    return sorted(_BUILDERS)


def manufactured_problem(preset_id: str, **params) -> ProblemPreset:
    try:
        build = _BUILDERS[preset_id.upper()]
    except KeyError:
        raise ValueError(f"unknown preset {preset_id!r}; known: {', '.join(preset_ids())}") from None
    return build(**params)

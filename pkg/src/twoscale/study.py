"""Convergence sweeps: epsilon(h) coupling rules, rate fitting, CSV output."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .envelope import abp_report, upper_abp_report
from .mesh import generate_structured_mesh
from .operator import make_kernel
from .presets import manufactured_problem
from .system import Factorization, assemble, monotonicity_check

log = logging.getLogger(__name__)

EPS_RULES = ("c2", "c3", "fixed", "lower", "lower-sqrt")
CSV_HEADER = "h,epsilon,N,linf_error,rate_running,dmp_violations,abp_ratio,wall_ms"


def epsilon_rule(h: float, rule: str, constant: float = 1.0, alpha: float = 1.0,
                 epsilon: float | None = None) -> float:
    """Coarse scale for mesh size ``h``.

    c2:         C (h^2 ln(1/h))^(1/(2+alpha))
    c3:         C (h^2 ln(1/h))^(1/(3+alpha))
    fixed:      ``epsilon``
    lower:      C h ln(1/h)
    lower-sqrt: C h ln(1/h)^(1/2)
    """
    if rule == "fixed":
        if epsilon is None or epsilon <= 0:
            raise ValueError("fixed rule needs a positive epsilon")
        return float(epsilon)
    if not 0 < h < 1:
        raise ValueError(f"epsilon rules need 0 < h < 1, got h = {h}")
    L = math.log(1.0 / h)
    if rule == "c2":
        return constant * (h * h * L) ** (1.0 / (2.0 + alpha))
    if rule == "c3":
        return constant * (h * h * L) ** (1.0 / (3.0 + alpha))
    if rule == "lower":
        return constant * h * L
    if rule == "lower-sqrt":
        return constant * h * math.sqrt(L)
    raise ValueError(f"unknown epsilon rule {rule!r}; choose from {EPS_RULES}")


# -- rate fitting ------------------------------------------------------------

@dataclass
class RateFit:
    slope: float
    stderr: float
    used: int
    excluded: list = field(default_factory=list)


def rate_fit(x, errors) -> RateFit:
    """Least-squares slope of log(error) against log(x) with its standard
    error.  Rows with non-positive or non-finite error are dropped."""
    x = np.asarray(x, float)
    e = np.asarray(errors, float)
    ok = np.isfinite(e) & (e > 0) & (x > 0)
    excluded = [int(k) for k in np.flatnonzero(~ok)]
    if excluded:
        log.info("rate fit: excluding rows %s with non-positive error", excluded)
    if ok.sum() < 2:
        return RateFit(math.nan, math.nan, int(ok.sum()), excluded)
    X, Y = np.log(x[ok]), np.log(e[ok])
    n = len(X)
    Xc = X - X.mean()
    sxx = float(Xc @ Xc)
    slope = float(Xc @ (Y - Y.mean()) / sxx)
    if n > 2:
        resid = Y - Y.mean() - slope * Xc
        stderr = math.sqrt(float(resid @ resid) / (n - 2) / sxx)
    else:
        stderr = math.nan
    return RateFit(slope, stderr, n, excluded)


# -- configuration ---------------------------------------------------------------

@dataclass
class RunConfig:
    preset: str = "P2"
    h: list = field(default_factory=lambda: [1 / 8, 1 / 16, 1 / 32, 1 / 64])
    eps_rule: str = "c3"
    constant: float = 1.0
    alpha: float | None = None        # defaults to the preset's alpha
    epsilon: float | None = None      # for the fixed rule
    kernel: str = "ball"
    solver: str = "auto"
    output: str | None = None
    timing: bool = True               # false writes wall_ms = 0 for byte-stable CSV
    abp: bool = True
    abp_side: str = "lower"           # lower: v^-, upper: (-v)^-
    min_slope: float | None = None
    max_slope: float | None = None

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        """Flat ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f for f in fields(cls)}
        kw = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in types:
                raise ValueError(f"line {n}: unknown key {key!r}")
            kw[key] = _parse_value(key, val)
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())


def _parse_fraction(s: str) -> float:
    s = s.strip()
    if "/" in s:
        a, b = s.split("/", 1)
        return float(a) / float(b)
    if s.startswith("2^"):
        return 2.0 ** float(s[2:])
    return float(s)


def _parse_value(key, val):
    if key == "h":
        return [_parse_fraction(s) for s in val.replace(";", ",").split(",") if s.strip()]
    if key in ("constant", "alpha", "epsilon", "min_slope", "max_slope"):
        return None if val.lower() in ("", "none") else _parse_fraction(val)
    if key in ("timing", "abp"):
        if val.lower() in ("1", "true", "yes", "on"):
            return True
        if val.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {val!r}")
    if key == "eps_rule" and val not in EPS_RULES:
        raise ValueError(f"unknown epsilon rule {val!r}")
    return val


# -- the study ---------------------------------------------------------------------------

@dataclass
class StudyRow:
    h: float
    epsilon: float
    N: int
    linf_error: float
    rate_running: float
    dmp_violations: int
    abp_ratio: float
    wall_ms: float
    monotone: bool = True
    status: str = "ok"

    @property
    def eps_over_h(self) -> float:
        return self.epsilon / self.h


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None or not math.isfinite(x):
        return "nan" if x is None or math.isnan(x) else ("inf" if x > 0 else "-inf")
    return f"{x:.10e}"


@dataclass
class ConvergenceTable:
    preset: str
    rule: str
    rows: list

    def _ok(self):
        return [r for r in self.rows if r.status == "ok"]

    def fit(self) -> RateFit:
        rows = self._ok()
        return rate_fit([r.h for r in rows], [r.linf_error for r in rows])

    def fit_log(self) -> RateFit:
        """Slope against h^2 ln(1/h)."""
        rows = self._ok()
        return rate_fit([r.h ** 2 * math.log(1 / r.h) for r in rows],
                        [r.linf_error for r in rows])

    def two_scale_separated(self) -> bool:
        """epsilon > h on every row and eps/h increasing as h decreases."""
        q = [r.eps_over_h for r in self.rows]
        return all(v > 1 for v in q) and all(b > a for a, b in zip(q, q[1:]))

    def to_csv(self) -> str:
        out = [CSV_HEADER]
        for r in self.rows:
            out.append(",".join([_fmt(r.h), _fmt(r.epsilon), _fmt(r.N), _fmt(r.linf_error),
                                 _fmt(r.rate_running), _fmt(r.dmp_violations),
                                 _fmt(r.abp_ratio), _fmt(r.wall_ms)]))
        return "\n".join(out) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def dmp_violations(fact: Factorization, rhs, tol: float = 1e-10) -> int:
    """Nodes where the discrete maximum principle fails: for the
    nonnegative load |f_i| and, if f is sign-definite, for f itself."""
    count = 0
    loads = [np.abs(rhs)]
    if np.all(rhs >= 0) or np.all(rhs <= 0):
        loads.append(rhs)
    for b in loads:
        u = fact.solve(b).values
        sign = 1.0 if np.all(b >= 0) else -1.0
        count += int((sign * u > tol * max(1.0, np.abs(u).max())).sum())
    return count


def run_row(preset, h: float, epsilon: float, config: RunConfig) -> StudyRow:
    t0 = time.perf_counter()
    mesh = generate_structured_mesh(preset.box, h)
    kernel = make_kernel(mesh.dim, config.kernel)
    system = assemble(mesh, preset.coefficients, epsilon, kernel)
    mono = monotonicity_check(system)
    log.info("h=%g eps=%g monotone=%s worst offdiag=%s", h, epsilon, mono.passed, mono.worst_offdiag)
    fact = Factorization(system, config.solver)
    sol = fact.solve()
    err = float(np.abs(sol.values - preset.exact(mesh.vertices)).max())
    dmp = dmp_violations(fact, system.rhs)
    ratio = math.nan
    if config.abp:
        report = (upper_abp_report if config.abp_side == "upper" else abp_report)(
            mesh, sol.values, system.rhs, details=False)
        ratio = report.ratio
    wall = (time.perf_counter() - t0) * 1000.0 if config.timing else 0.0
    return StudyRow(h, epsilon, system.size, err, math.nan, dmp, ratio, wall, mono.passed)


def convergence_study(config: RunConfig) -> ConvergenceTable:
    preset = manufactured_problem(config.preset)
    if preset.exact is None:
        raise ValueError(f"preset {config.preset} has no exact solution")
    alpha = preset.alpha if config.alpha is None else config.alpha
    hs = sorted(config.h, reverse=True)
    eps = [epsilon_rule(h, config.eps_rule, config.constant, alpha, config.epsilon) for h in hs]
    for h, e in zip(hs, eps):
        if e <= h:
            raise ValueError(f"epsilon {e:.4g} <= h {h:.4g}: the two scales are not separated")
    rows = []
    for h, e in zip(hs, eps):
        try:
            row = run_row(preset, h, e, config)
        except Exception as err:  # a failing row must not end the study
            log.warning("row h=%g failed: %s", h, err)
            row = StudyRow(h, e, 0, math.nan, math.nan, 0, math.nan, 0.0, False, f"error: {err}")
        rows.append(row)
    prev = None
    for r in rows:
        if prev is not None and r.status == "ok" and prev.linf_error > 0 and r.linf_error > 0:
            r.rate_running = math.log(r.linf_error / prev.linf_error) / math.log(r.h / prev.h)
        if r.status == "ok":
            prev = r
    table = ConvergenceTable(preset.id, config.eps_rule, rows)
    if config.eps_rule != "fixed" and not table.two_scale_separated():
        log.warning("eps/h does not grow along the sweep")
    if config.output:
        table.write_csv(config.output)
    return table

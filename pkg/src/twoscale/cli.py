"""Command line entry point: ``twoscale <command> ...``."""
from __future__ import annotations

import argparse
import logging
import math
import sys

import numpy as np

from .envelope import abp_report, mesh_constant_G, upper_abp_report
from .mesh import generate_structured_mesh, read_mesh, weak_acuteness_report
from .operator import make_kernel
from .presets import manufactured_problem, preset_ids
from .study import EPS_RULES, RunConfig, convergence_study, epsilon_rule
from .system import assemble, solve, write_solution_csv

EXIT_OK, EXIT_FAIL = 0, 2


def _problem(args):
    preset = manufactured_problem(args.preset)
    mesh = generate_structured_mesh(preset.box, args.h)
    eps = epsilon_rule(args.h, args.eps_rule, args.constant,
                       preset.alpha if args.alpha is None else args.alpha, args.epsilon)
    system = assemble(mesh, preset.coefficients, eps, make_kernel(mesh.dim, args.kernel))
    return preset, mesh, eps, system


def cmd_check_mesh(args) -> int:
    mesh = read_mesh(args.meshfile)
    rep = weak_acuteness_report(mesh)
    print(f"dim={mesh.dim} vertices={mesh.n_vertices} elements={mesh.n_elements}")
    print(f"h={mesh.h:.6g} shape_constant={mesh.shape_constant:.6g} "
          f"quasi_uniformity={mesh.quasi_uniformity:.6g} G={mesh_constant_G(mesh):.6g}")
    print(f"weakly_acute={rep.is_weakly_acute} violating_pairs={len(rep.violating_pairs)} "
          f"max_offdiag={rep.max_offdiag:.3e}")
    for i, j, k in rep.violating_pairs[:20]:
        print(f"  k[{i},{j}] = {k:.6e}")
    return EXIT_OK if rep.is_weakly_acute else EXIT_FAIL


def cmd_solve(args) -> int:
    preset, mesh, eps, system = _problem(args)
    sol = solve(system)
    print(f"preset={preset.id} h={args.h:g} epsilon={eps:.6g} N={system.size} "
          f"residual={sol.residual_norm:.3e} solver={sol.solver_info.get('method')}")
    if preset.exact is not None:
        err = float(np.abs(sol.values - preset.exact(mesh.vertices)).max())
        print(f"linf_error={err:.6e}")
    if args.out:
        write_solution_csv(mesh, sol, args.out)
    return EXIT_OK


def cmd_abp_report(args) -> int:
    _, mesh, _, system = _problem(args)
    sol = solve(system)
    fn = upper_abp_report if args.side == "upper" else abp_report
    rep = fn(mesh, sol.values, system.rhs, details=False)
    print(rep.to_json())
    return EXIT_OK if rep.consistent and math.isfinite(rep.ratio) else EXIT_FAIL


def cmd_convergence(args) -> int:
    cfg = RunConfig.from_file(args.config)
    if args.out:
        cfg.output = args.out
    table = convergence_study(cfg)
    if not cfg.output:
        sys.stdout.write(table.to_csv())
    fit, fit_log = table.fit(), table.fit_log()
    print(f"# slope_vs_h={fit.slope:.4f} stderr={fit.stderr:.4f} "
          f"slope_vs_h2logh={fit_log.slope:.4f} rows={fit.used}", file=sys.stderr)
    ok = all(r.status == "ok" for r in table.rows)
    if cfg.min_slope is not None and not fit.slope >= cfg.min_slope:
        ok = False
    if cfg.max_slope is not None and not fit.slope <= cfg.max_slope:
        ok = False
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twoscale",
                                description="Two-scale monotone finite elements for A:D^2u = f")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("check-mesh", help="geometry and weak acuteness of a mesh file")
    c.add_argument("meshfile")
    c.set_defaults(func=cmd_check_mesh)

    def problem_args(q):
        q.add_argument("--preset", required=True, choices=preset_ids())
        q.add_argument("--h", type=float, required=True)
        q.add_argument("--eps-rule", default="c3", choices=EPS_RULES)
        q.add_argument("--constant", type=float, default=1.0)
        q.add_argument("--alpha", type=float, default=None)
        q.add_argument("--epsilon", type=float, default=None, help="for --eps-rule fixed")
        q.add_argument("--kernel", default="ball", choices=["ball", "bump"])

    s = sub.add_parser("solve", help="solve a preset and write the nodal solution")
    problem_args(s)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_solve)

    a = sub.add_parser("abp-report", help="discrete ABP diagnostics of a solved preset")
    problem_args(a)
    a.add_argument("--side", choices=["lower", "upper"], default="lower")
    a.set_defaults(func=cmd_abp_report)

    v = sub.add_parser("convergence", help="run a convergence sweep from a config file")
    v.add_argument("--config", required=True)
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_convergence)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

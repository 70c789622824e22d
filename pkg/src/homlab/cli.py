"""Command-line entry point ``homlab``.

Exit codes: 0 on success, 1 on invalid input (bad flags, missing files,
inconsistent parameters), 2 on numerical failure (non-convergence,
admissibility), in which case an error JSON is printed to stderr and, when a
run directory is in use, written to ``error.json`` there.
"""

import argparse
import json
import logging
import os
import shlex
import sys

import numpy as np

from . import hgfd
from .corrector import compute_correctors
from .derivative import (
    Perturbation,
    T_LADDER,
    check_derivative,
    functional_derivative_E,
    functional_derivative_J0,
    write_report,
)
from .ensemble import EnsembleConfig, run_sweep, scaling_report, write_run
from .ensemble import write_report as write_scaling
from .errors import HomlabError, NumericalError, ValidationError
from .functionals import (
    Centering,
    homogenized_solution,
    identity_check_I,
    identity_check_J,
    solve_heterogeneous,
    two_scale_error_field,
    two_scale_residual,
)
from .gaussian import CovarianceSpec, Link, sample_coefficient, synthesize_gaussian
from .grid import TorusGrid
from .operators import div, grad, helmholtz_project, leray_project
from .report import render_report
from .testfunctions import tensor_bump, vector_bump

log = logging.getLogger("homlab")


class Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _field_flags(p, n=64, d=2, beta=4.0):
    p.add_argument("--beta", type=float, default=beta, help="covariance decay exponent")
    p.add_argument("--d", type=int, default=d, help="space dimension")
    p.add_argument("--n", type=int, default=n, help="cells per side (power of two)")
    p.add_argument("--extent", type=float, default=None, help="torus side L (default n/2)")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--sample", type=int, default=0, help="sample index within the seed stream")
    p.add_argument("--c0", type=float, default=1.0, help="covariance prefactor")
    p.add_argument("--link", default="scalar-sigmoid",
                   choices=["scalar-sigmoid", "diagonal-sigmoid", "nonsymmetric"])
    p.add_argument("--lambda", dest="lam", type=float, default=0.2, help="ellipticity floor")
    p.add_argument("--kappa", type=float, default=0.0, help="antisymmetric amplitude")
    p.add_argument("--run-dir", default=None, help="directory receiving outputs and the config echo")


def _setup(args):
    grid = TorusGrid(args.d, args.n, args.extent if args.extent is not None else args.n / 2)
    spec = CovarianceSpec(args.beta, args.c0, args.d, Link(args.link, args.lam, args.kappa))
    return grid, spec


def build_parser():
    parser = Parser(prog="homlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen-field", help="synthesize a Gaussian field or coefficient field")
    _field_flags(p, n=256)
    p.add_argument("--out", required=True, help="HGFD output path")
    p.add_argument("--coefficient", action="store_true",
                   help="write the d x d coefficient field instead of the scalar Gaussian channel")

    p = sub.add_parser("corrector", help="solve correctors and write phi, sigma, q as HGFD")
    _field_flags(p)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("homogenize", help="print the homogenized matrix of one realization")
    _field_flags(p)
    p.add_argument("--tol", type=float, default=1e-10)

    p = sub.add_parser("identities", help="residual table of the exact identities")
    _field_flags(p)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--eps", type=float, default=0.25)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=4, help="ensemble size for the centering")

    p = sub.add_parser("derivative-check", help="compare derivative formulas with finite differences")
    _field_flags(p, n=32)
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--radius", type=float, default=1.5)
    p.add_argument("--perturbations", type=int, default=5)
    p.add_argument("--out", default=None, help="report JSON path (default run-dir/derivative.json)")

    p = sub.add_parser("sweep", help="Monte Carlo sweep from a key-value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", default=None, help="default: run-<config name>")

    p = sub.add_parser("report", help="render report.svg and the verdict from a run directory")
    p.add_argument("--run-dir", required=True)
    return parser


# ------------------------------------------------------------------ commands


def cmd_gen_field(args, out):
    grid, spec = _setup(args)
    if args.coefficient:
        a = sample_coefficient(spec, grid, args.seed, args.sample)
        hgfd.write(args.out, a.matrices, grid.dim)
        out({"out": args.out, "shape": list(a.matrices.shape)})
    else:
        g = synthesize_gaussian(spec, grid, args.seed, (args.sample, 0))
        hgfd.write(args.out, g.values, grid.dim)
        out({"out": args.out, "clipped_mass": g.clipped_mass})


def cmd_corrector(args, out):
    grid, spec = _setup(args)
    a = sample_coefficient(spec, grid, args.seed, args.sample)
    c = compute_correctors(a, tol=args.tol)
    os.makedirs(args.out_dir, exist_ok=True)
    hgfd.write(os.path.join(args.out_dir, "phi.hgfd"), c.phi, grid.dim)
    hgfd.write(os.path.join(args.out_dir, "sigma.hgfd"), c.sigma_pairs, grid.dim)
    hgfd.write(os.path.join(args.out_dir, "q.hgfd"), c.q, grid.dim)
    sidecar = {
        "abar": c.abar.tolist(),
        "flux_corrector_residual": c.flux_corrector_residual(),
        "energy": c.energy().tolist(),
        "solver_reports": [r.to_dict() for r in c.reports],
    }
    with open(os.path.join(args.out_dir, "corrector.json"), "w") as fh:
        json.dump(sidecar, fh, indent=1)
    out(sidecar)


def cmd_homogenize(args, out):
    grid, spec = _setup(args)
    a = sample_coefficient(spec, grid, args.seed, args.sample)
    c = compute_correctors(a, tol=args.tol, with_sigma=False)
    out({"abar": c.abar.tolist(), "solver_reports": [r.to_dict() for r in c.reports]})


def identity_table(grid, spec, seed, tol=1e-10, eps=0.25, radius=1.0, samples=4, sample=0):
    """Residuals of every exact identity for one realization, as ``(name, value)`` rows."""
    coefficients = [sample_coefficient(spec, grid, seed, sample + k) for k in range(samples)]
    a = coefficients[0]
    c = compute_correctors(a, tol=tol)
    abar = c.abar
    d = grid.dim
    f = vector_bump(d, radius, 0)
    g = vector_bump(d, radius, d - 1)
    F = tensor_bump(d, radius, np.arange(1, d * d + 1).reshape(d, d) / (d * d))
    solutions = [solve_heterogeneous(b, f, eps, tol)[0] for b in coefficients]
    centering = Centering.from_ensemble(coefficients, solutions)
    j1, j2 = identity_check_J(F, eps, a, c, abar)
    i1, i2 = identity_check_I(g, eps, a, solutions[0], abar, centering)
    vbar = homogenized_solution(abar, f, eps, grid)
    U = grad(vbar, grid)
    w = two_scale_error_field(solutions[0], vbar, c.phi, U)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((d,) + grid.shape)
    ph = helmholtz_project(abar, v, grid)
    php = helmholtz_project(abar, np.einsum("ij,j...->i...", abar, ph), grid)
    return [
        ("flux corrector  div sigma = q - abar e", c.flux_corrector_residual()),
        ("J1 + J0(P_H* F)", j1),
        ("J2 - J0(P_L* F)", j2),
        ("I1 + int (P_H* g).C", i1),
        ("I2 - int (P_L* g).C", i2),
        ("two-scale error equation", two_scale_residual(a, w, c, U, abar)),
        ("P_H abar P_H - P_H", float(np.linalg.norm(php - ph) / np.linalg.norm(ph))),
        ("div abar P_L", float(np.linalg.norm(div(np.einsum("ij,j...->i...", abar, leray_project(abar, v, grid)),
                                                   grid)) / np.linalg.norm(div(v, grid)))),
    ]


def cmd_identities(args, out):
    grid, spec = _setup(args)
    rows = identity_table(grid, spec, args.seed, args.tol, args.eps, args.radius, args.samples, args.sample)
    width = max(len(name) for name, _ in rows)
    text = "\n".join(f"{name:<{width}}  {value:.3e}" for name, value in rows)
    out({name: value for name, value in rows}, text)


def cmd_derivative_check(args, out):
    grid, spec = _setup(args)
    a = sample_coefficient(spec, grid, args.seed, args.sample)
    c = compute_correctors(a, tol=1e-13)
    abar = c.abar
    d = grid.dim
    F = tensor_bump(d, args.radius, np.arange(1, d * d + 1).reshape(d, d) / (d * d))
    f = vector_bump(d, args.radius, 0)
    g = vector_bump(d, args.radius, d - 1)
    v, _ = solve_heterogeneous(a, f, args.eps, 1e-13)
    U = grad(homogenized_solution(abar, f, args.eps, grid), grid)
    DJ = functional_derivative_J0(a, F, args.eps, c, abar)
    DE = functional_derivative_E(a, g, args.eps, v, c, abar, U)
    rng = np.random.default_rng(args.seed)
    checks = []
    for _ in range(args.perturbations):
        p = Perturbation.random_cell(a, spec.link.lam, rng)
        checks.append(check_derivative("J0", DJ, p, a, spec.link.lam, F=F, eps=args.eps, correctors=c, abar=abar))
        checks.append(check_derivative("E", DE, p, a, spec.link.lam, g=g, eps=args.eps, v=v, correctors=c,
                                       abar=abar, U=U))
    path = args.out or (os.path.join(args.run_dir, "derivative.json") if args.run_dir else None)
    if path:
        write_report(checks, path)
    text = "\n".join(f"{k.functional:3s} pairing {k.pairing:+.6e}  rel.err {k.relative_error:.2e}  "
                     f"slope {k.slope:.3f}  {'PASS' if k.passed else 'FAIL'}" for k in checks)
    out({"checks": [k.to_dict() for k in checks], "t_ladder": list(T_LADDER)}, text)
    return 0 if all(k.passed for k in checks) else 2


def cmd_sweep(args, out):
    config = EnsembleConfig.load(args.config).validate()
    run_dir = args.run_dir
    result = run_sweep(config, run_dir)
    write_run(result, run_dir)
    report = scaling_report(result.samples, config)
    write_scaling(report, os.path.join(run_dir, "scaling.json"))
    text = render_report(run_dir)
    out({"run_dir": run_dir, "samples": len(result.samples), "failures": result.failures}, text)


def cmd_report(args, out):
    out(None, render_report(args.run_dir))


COMMANDS = {
    "gen-field": cmd_gen_field,
    "corrector": cmd_corrector,
    "homogenize": cmd_homogenize,
    "identities": cmd_identities,
    "derivative-check": cmd_derivative_check,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def _echo(args, argv, run_dir):
    lines = ["# homlab " + " ".join(shlex.quote(a) for a in argv)]
    if args.command == "sweep":
        lines.append(EnsembleConfig.load(args.config).to_text().rstrip())
    else:
        lines += [f"{k} = {v}" for k, v in sorted(vars(args).items()) if k != "command"]
    with open(os.path.join(run_dir, "config.echo"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "sweep" and args.run_dir is None:
        args.run_dir = "run-" + os.path.splitext(os.path.basename(args.config))[0]
    run_dir = getattr(args, "run_dir", None)
    handler = None

    def out(data, text=None):
        if text is not None:
            print(text.rstrip("\n"))
        elif data is not None:
            print(json.dumps(data, indent=1))

    try:
        if args.command == "sweep" and not os.path.isfile(args.config):
            raise ValidationError(f"config file {args.config!r} does not exist")
        if run_dir is not None and args.command != "report":
            os.makedirs(run_dir, exist_ok=True)
            _echo(args, argv, run_dir)
            handler = logging.FileHandler(os.path.join(run_dir, "log.txt"), mode="w")
            handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
            log.addHandler(handler)
            log.setLevel(logging.INFO)
        status = COMMANDS[args.command](args, out)
        return 0 if status is None else status
    except NumericalError as exc:
        payload = {"error": type(exc).__name__, "message": str(exc)}
        report = getattr(exc, "report", None)
        if report is not None:
            payload["report"] = report.to_dict()
        print(json.dumps(payload), file=sys.stderr)
        if run_dir is not None and os.path.isdir(run_dir):
            with open(os.path.join(run_dir, "error.json"), "w") as fh:
                json.dump(payload, fh, indent=1)
        return 2
    except (ValidationError, OSError) as exc:
        print(f"homlab {args.command}: {exc}", file=sys.stderr)
        return 1
    except HomlabError as exc:  # pragma: no cover - every package error derives from one of the above
        print(f"homlab {args.command}: {exc}", file=sys.stderr)
        return 1
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())

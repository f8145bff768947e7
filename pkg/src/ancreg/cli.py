"""Command-line interface.

Subcommands: sample-instance, anchor, solve, certify, bounds, estimate,
sweep, noise-curve. Exit codes: 0 success, 2 configuration error, 3 sweep
completed but some cell had no converged trial.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from . import analysis
from .anchor import (
    AnchorResult,
    anchor_from_gradient,
    anchor_from_hessian,
    anchor_sparse_threshold,
    oracle_anchor,
)
from .core import ProblemInstance, RngStream
from .harness import ConfigError, ExperimentConfig, noise_curve, run_sweep
from .models import (
    ModelKind,
    NoiseSpec,
    sigma_star_closed_form,
    sample_instance,
)
from .solver import Regularizer, SolveResult, SolverConfig, certify, solve


def _model_from_name(name: str) -> ModelKind:
    name = name.lower()
    if name in ("linear", "square", "relu", "softplus"):
        return ModelKind(name)
    if name == "softplus_e":
        return ModelKind.softplus(base="e")
    raise ConfigError(f"unknown model {name!r} (one_hidden_layer configs go through JSON)")


def _emit(doc: dict, path: str | None) -> None:
    text = json.dumps(doc, indent=2)
    if path is None or path == "-":
        print(text)
    else:
        with open(path, "w") as fh:
            fh.write(text + "\n")


def _cmd_sample_instance(args) -> int:
    model = _model_from_name(args.model)
    stream = RngStream(args.seed)
    gen = stream.derive("xstar").generator()
    x_star = gen.standard_normal(args.n)
    x_star /= np.linalg.norm(x_star)
    noise = NoiseSpec.parse(args.noise)
    instance = sample_instance(model, x_star, args.m, noise, stream.derive("data"))
    instance.save(args.out)
    return 0


def _cmd_anchor(args) -> int:
    instance = ProblemInstance.load(args.instance)
    method = args.method
    if method == "gradient":
        result = anchor_from_gradient(instance)
    elif method == "hessian":
        result = anchor_from_hessian(instance)
    elif method.startswith("sparse:"):
        result = anchor_sparse_threshold(instance, int(method.split(":", 1)[1]))
    elif method.startswith("oracle:"):
        if instance.x_star is None:
            raise ConfigError("oracle anchor needs an instance with x_star")
        result = oracle_anchor(
            instance.x_star, float(method.split(":", 1)[1]), RngStream(args.seed)
        )
    else:
        raise ConfigError(f"unknown anchor method {method!r}")
    result.save(args.out)
    return 0


def _cmd_solve(args) -> int:
    instance = ProblemInstance.load(args.instance)
    anchor_result = AnchorResult.load(args.anchor)
    reg = Regularizer.parse(args.reg)
    config = SolverConfig(
        budget=args.budget,
        schedule=args.schedule,
        max_inner_iters=args.max_inner,
        feasibility_tol=args.feas_tol,
        track_trace=args.trace,
    )
    result = solve(instance, anchor_result.a0, reg, config)
    with open(args.out, "w") as fh:
        json.dump(result.to_json_dict(include_trace=args.trace), fh, indent=2)
    return 0


def _cmd_certify(args) -> int:
    instance = ProblemInstance.load(args.instance)
    anchor_result = AnchorResult.load(args.anchor)
    solve_result = SolveResult.from_json_dict(json.load(open(args.solution)))
    reg = Regularizer.parse(args.reg)
    cert = certify(instance, solve_result.x_hat, anchor_result.a0, reg, tol=args.tol)
    _emit(cert.to_json_dict(), args.out)
    return 0


def _cmd_bounds(args) -> int:
    """Evaluate the sample-size calculators at a canonical unit ground truth."""
    model = _model_from_name(args.model)
    n = args.n
    stream = RngStream(args.seed)
    if args.sparse is not None:
        s = args.sparse
        lam = args.lam if args.lam is not None else 0.3 / math.sqrt(s)
        x_star = np.zeros(n)
        x_star[:s] = 1.0 / math.sqrt(s)
        spec = analysis.AscentConeSpec(args.delta, x_star, lam=lam)
        tau = analysis.tau_cone_lower(model, x_star, spec, stream=stream)
        sigma = sigma_star_closed_form(model, x_star)
        sigma2 = analysis.sigma_cone_norm(spec, sigma, stream=stream)
        moments = analysis.grad_moment_estimates(
            model, x_star, np.arange(s), args.samples, stream.derive("moments")
        )
        c_star = analysis.c_star_sparse(args.delta, lam, x_star)
        report = analysis.bound_cor4(
            moments.head_sq, moments.tail_inf_sq, c_star, tau.value, sigma2, n, args.t
        )
        doc = report.to_json_dict()
        doc["tau_cone"] = {"value": tau.value, "kind": tau.kind}
        doc["lam"] = lam
    else:
        x_star = np.zeros(n)
        x_star[0] = 1.0
        spec = analysis.AscentConeSpec(args.delta, x_star)
        tau = analysis.tau_cone_lower(model, x_star, spec, stream=stream)
        sigma = sigma_star_closed_form(model, x_star)
        report = analysis.bound_cor3(
            sigma.operator_norm, sigma.trace(n), tau.value, args.t
        )
        doc = report.to_json_dict()
        doc["tau_cone"] = {"value": tau.value, "kind": tau.kind}
    if tau.value <= 0:
        doc["warning"] = "cone alignment lower bound is nonpositive at this delta"
    _emit(doc, args.out)
    return 0


def _cmd_estimate(args) -> int:
    model = _model_from_name(args.model)
    stream = RngStream(args.seed)
    n = args.n
    x_star = np.zeros(n)
    x_star[0] = 1.0
    which = args.which
    if which == "rademacher":
        est = analysis.rademacher_full_space(model, x_star, args.m, args.trials, stream)
        doc = {"estimate": est.value, "stderr": est.stderr, "trials": est.samples}
    elif which == "tau":
        gen = stream.derive("h").generator()
        h = gen.standard_normal(n) if args.r is None else None
        if h is None:
            u = x_star
            w = gen.standard_normal(n)
            w -= (w @ u) * u
            w /= np.linalg.norm(w)
            h = args.r * u + math.sqrt(max(0.0, 1.0 - args.r**2)) * w
        est = analysis.tau_estimate(model, x_star, h, args.samples, stream)
        doc = {"estimate": est.value, "stderr": est.stderr, "samples": est.samples}
    elif which == "ptau":
        spec = analysis.AscentConeSpec(args.delta, x_star)
        tau = analysis.tau_cone_lower(model, x_star, spec, stream=stream).value
        if args.tau is not None:
            tau = args.tau
        if tau <= 0:
            raise ConfigError("tau must be positive for a tail probability")
        pt = analysis.p_tau_estimate(
            model, x_star, spec, tau, probes=args.probes, samples=args.samples, stream=stream
        )
        doc = {
            "p_tau_min": pt.value,
            "stderr": pt.stderr,
            "tau": pt.tau,
            "paley_zygmund_floor": pt.pz_floor,
            "paley_zygmund_tau": pt.pz_tau,
        }
    elif which == "sigma":
        spec = analysis.AscentConeSpec(args.delta, x_star)
        sigma = sigma_star_closed_form(model, x_star)
        val = analysis.sigma_cone_norm(spec, sigma, probes=args.probes, stream=stream)
        doc = {"sigma_cone": val, "operator_norm": sigma.operator_norm}
    elif which == "gradmoments":
        s = args.sparse or 1
        xs = np.zeros(n)
        xs[:s] = 1.0 / math.sqrt(s)
        est = analysis.grad_moment_estimates(model, xs, np.arange(s), args.samples, stream)
        doc = {
            "head_sq": est.head_sq,
            "head_stderr": est.head_stderr,
            "tail_inf_sq": est.tail_inf_sq,
            "tail_stderr": est.tail_stderr,
        }
    else:
        raise ConfigError(f"unknown estimate {which!r}")
    _emit(doc, args.out)
    return 0


def _cmd_sweep(args) -> int:
    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config = ExperimentConfig.from_json_dict({**config.to_json_dict(), "base_seed": args.seed})
    result = run_sweep(config, threads=args.threads, out_dir=args.out)
    if args.out is None:
        sys.stdout.write(result.csv_text)
    return 3 if result.systematic_failure else 0


def _cmd_noise_curve(args) -> int:
    config = ExperimentConfig.load(args.config)
    table = noise_curve(config, threads=args.threads, out_dir=args.out)
    if args.out is None:
        _emit(table, None)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ancreg",
        description="Anchored regression for systems of convex nonlinear equations",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample-instance", help="generate a synthetic instance JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--noise", default="none", help="none | uniform:b | gaussian:s")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sample_instance)

    p = sub.add_parser("anchor", help="construct an anchor from an instance")
    p.add_argument("--instance", required=True)
    p.add_argument("--method", default="gradient", help="gradient | hessian | sparse:k | oracle:zeta")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_anchor)

    p = sub.add_parser("solve", help="run the anchored-regression solver")
    p.add_argument("--instance", required=True)
    p.add_argument("--anchor", required=True)
    p.add_argument("--reg", default="none", help="none | l1:lam")
    p.add_argument("--budget", type=float, default=0.0)
    p.add_argument("--schedule", default="polyak_geom", choices=["sqrt", "polyak", "polyak_geom"])
    p.add_argument("--max-inner", type=int, default=20000)
    p.add_argument("--feas-tol", type=float, default=1e-6)
    p.add_argument("--trace", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("certify", help="KKT cone certificate for a solution")
    p.add_argument("--instance", required=True)
    p.add_argument("--anchor", required=True)
    p.add_argument("--solution", required=True)
    p.add_argument("--reg", default="none")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_certify)

    p = sub.add_parser("bounds", help="evaluate sample-complexity calculators")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--sparse", type=int, default=None, help="sparsity s for the l1 bound")
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_bounds)

    p = sub.add_parser("estimate", help="Monte Carlo complexity estimators")
    p.add_argument("--which", required=True,
                   choices=["rademacher", "tau", "ptau", "sigma", "gradmoments"])
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--probes", type=int, default=64)
    p.add_argument("--delta", type=float, default=0.9)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--r", type=float, default=None, help="alignment of the probe direction")
    p.add_argument("--sparse", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("sweep", help="run a phase-transition sweep from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config base seed")
    p.add_argument("--threads", type=int, default=1, help="0 = one per cpu")
    p.add_argument("--out", default=None, help="directory for sweep.csv and summary.json")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("noise-curve", help="median error vs noise level with the bound check")
    p.add_argument("--config", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_noise_curve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

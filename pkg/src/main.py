"""
Multiplex SBM toolkit - command line
====================================

Subcommands:
  simulate    sample a multiplex ER/SBM graph and write layer edge lists + truth
  fit         variational EM for a given Q (optionally with pair covariates)
  select      ICL scan over a range of Q
  er-fit      Erdos-Renyi baseline (closed form or covariate logit)
  oracle      exact enumeration on small instances
  lab         consistency experiments (error-vs-n)
  summarize   block sizes, attribute cross-tabs, degree and connection tables

Exit codes: 0 success, 2 input error, 3 result written but not converged.
"""

import argparse
import logging
import os
import sys
import warnings
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import pandas as pd
import yaml
from dotenv import load_dotenv
from sklearn.metrics import adjusted_rand_score

# make `python src/main.py` work from the project root
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.models.fit_config import DEFAULT_CONFIG_NAME, FitConfig, FitConfigError, get_fit_config
from src.models.lab_config import LabConfigError
from src.modules.block_summary import BlockSummaryModule
from src.modules.consistency_lab import AssumptionError
from src.modules.er import er_log_likelihood, fit_er, fit_er_covariates
from src.modules.graph import GraphFormatError, load_covariates, load_layers, write_covariates, write_edge_list
from src.modules.logit import LogitConvergenceError
from src.modules.model import BlockParameters, planted_parameters
from src.modules.oracle import OracleSizeError, exact_log_likelihood, exact_posterior, kl_decomposition_check
from src.modules.result_store import read_json, write_csv_atomic, write_json_atomic
from src.modules.selection import icl, icl_covariates, select_q
from src.modules.simulate import SimulationSpec
from src.modules.vem import FitError, FitResult, fit, fit_covariates
from src.pipeline.run_lab import run_lab

logger = logging.getLogger("mpsbm")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NOT_CONVERGED = 3

LOG_FORMAT = "[%(name)s] %(levelname)s %(message)s"


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--settings", type=str, default=None,
                        help="Flat YAML of option defaults (keys mirror long flags); flags win")
    common.add_argument("--verbose", action="store_true", default=False, help="DEBUG logging")
    common.add_argument("--jobs", type=int, default=None, help="Parallel restarts / Q scans / replications")
    common.add_argument("--fit-config", type=str, default=DEFAULT_CONFIG_NAME,
                        help="Fitting profile under config/fitting (default: default)")
    common.add_argument("--seed", type=int, default=None, help="Seed for every random choice")
    return common


def _fit_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--restarts", type=int, default=None, help="Number of restarts")
    p.add_argument("--init", dest="init_strategy", choices=["spectral", "random"], default=None,
                   help="Initialisation of restart 0")
    p.add_argument("--damping", type=float, default=None, help="E-step damping in [0, 1)")
    p.add_argument("--max-iter", dest="max_outer_iterations", type=int, default=None,
                   help="Maximum outer iterations")


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(prog="mpsbm", description="Multiplex stochastic block model toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="Sample a graph and write edge lists + truth")
    p.add_argument("--n", type=int, default=None, help="Number of nodes")
    p.add_argument("--K", type=int, default=2, help="Number of layers (planted model)")
    p.add_argument("--Q", type=int, default=2, help="Number of blocks (planted model)")
    p.add_argument("--spec", type=str, default=None, help="Simulation spec (YAML/JSON)")
    p.add_argument("--base", type=int, choices=[0, 1], default=0, help="Node id base in written files")
    p.add_argument("--out", type=str, default=None, help="Output directory")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="Variational EM for one Q")
    p.add_argument("--layers", nargs="+", default=None, help="Layer files (edge list or CSV matrix)")
    p.add_argument("--q", type=int, default=None, help="Number of blocks")
    p.add_argument("--covariates", type=str, default=None, help="Pair covariate table")
    p.add_argument("--base", type=int, choices=[0, 1], default=0, help="Node id base of the covariate table")
    p.add_argument("--score", type=str, default=None, help="truth.json to score the MAP labels against")
    p.add_argument("--out", type=str, default="fit.json", help="Output JSON")
    _fit_options(p)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("select", parents=[common], help="ICL scan over Q")
    p.add_argument("--layers", nargs="+", default=None, help="Layer files")
    p.add_argument("--qmin", type=int, default=1, help="Smallest Q")
    p.add_argument("--qmax", type=int, default=None, help="Largest Q")
    p.add_argument("--out", type=str, default=".", help="Output directory")
    _fit_options(p)
    p.set_defaults(handler=cmd_select)

    p = sub.add_parser("er-fit", parents=[common], help="Erdos-Renyi baseline")
    p.add_argument("--layers", nargs="+", default=None, help="Layer files")
    p.add_argument("--covariates", type=str, default=None, help="Pair covariate table")
    p.add_argument("--base", type=int, choices=[0, 1], default=0, help="Node id base of the covariate table")
    p.add_argument("--out", type=str, default="er_fit.json", help="Output JSON")
    p.set_defaults(handler=cmd_er_fit)

    p = sub.add_parser("oracle", parents=[common], help="Exact enumeration (small n only)")
    p.add_argument("--layers", nargs="+", default=None, help="Layer files")
    p.add_argument("--theta", type=str, default=None, help="truth.json or fit JSON holding alpha and pi")
    p.add_argument("--tau", type=str, default=None, help="fit JSON whose tau is checked against the posterior")
    p.add_argument("--out", type=str, default="oracle.json", help="Output JSON")
    p.set_defaults(handler=cmd_oracle)

    p = sub.add_parser("lab", help="Consistency experiments")
    lab = p.add_subparsers(dest="experiment", required=True)
    q = lab.add_parser("error-vs-n", parents=[common], help="Estimator error versus n")
    q.add_argument("--config", type=str, default=None, help="Lab config YAML")
    q.add_argument("--out", type=str, default="data/lab", help="Output directory")
    q.add_argument("--force", action="store_true", default=False, help="Recompute cached tables")
    q.set_defaults(handler=cmd_lab_error_vs_n)

    p = sub.add_parser("summarize", parents=[common], help="Summary tables for a fit")
    p.add_argument("--fit", type=str, default=None, help="Fit JSON")
    p.add_argument("--layers", nargs="+", default=None, help="Layer files the fit was run on")
    p.add_argument("--attributes", type=str, default=None, help="Node attribute TSV with a 'node' column")
    p.add_argument("--base", type=int, choices=[0, 1], default=0, help="Node id base of the attribute table")
    p.add_argument("--out", type=str, default=".", help="Output directory")
    p.set_defaults(handler=cmd_summarize)

    return parser


def _subparser_for(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.ArgumentParser:
    node = parser
    for dest in ("command", "experiment"):
        name = getattr(args, dest, None)
        if name is None:
            break
        action = next(a for a in node._actions if isinstance(a, argparse._SubParsersAction))
        node = action.choices[name]
    return node


def _load_settings(path: str, sub: argparse.ArgumentParser) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as exc:
        sub.error(f"cannot read settings file {path}: {exc}")
    if not isinstance(raw, dict):
        sub.error(f"settings file {path} must be a flat key-value mapping")
    dests = {a.dest: a for a in sub._actions if a.dest not in ("help", "settings")}
    options = {opt.lstrip("-").replace("-", "_"): a.dest for a in sub._actions for opt in a.option_strings}
    defaults = {}
    for key, value in raw.items():
        name = str(key).replace("-", "_")
        dest = options.get(name, name)
        if dest not in dests:
            sub.error(f"unknown key in settings file: {key}")
        defaults[dest] = value
    return defaults


def parse_args(argv: Optional[List[str]] = None):
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = _subparser_for(parser, args)
    if args.settings:
        sub.set_defaults(**_load_settings(args.settings, sub))
        args = parser.parse_args(argv)
    return args, sub


def _require(sub: argparse.ArgumentParser, args: argparse.Namespace, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        sub.error(f"the following arguments are required: {', '.join(missing)}")


def _fit_config(args: argparse.Namespace) -> FitConfig:
    config = get_fit_config(args.fit_config)
    return config.with_overrides(
        seed=args.seed,
        jobs=args.jobs,
        restarts=getattr(args, "restarts", None),
        init_strategy=getattr(args, "init_strategy", None),
        damping=getattr(args, "damping", None),
        max_outer_iterations=getattr(args, "max_outer_iterations", None),
    )


def _load_graph(args: argparse.Namespace):
    graph = load_layers(args.layers)
    logger.info("loaded n=%d K=%d from %d layer file(s)", graph.n, graph.K, len(args.layers))
    return graph


def _load_theta(path: str) -> BlockParameters:
    payload = read_json(path)
    if "params" in payload:
        payload = payload["params"]
    return BlockParameters.from_dict(payload)


def cmd_simulate(args, sub) -> int:
    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as f:
            payload = yaml.safe_load(f) or {}
        if args.n is not None:
            payload["n"] = args.n
        if args.seed is not None:
            payload["seed"] = args.seed
        spec = SimulationSpec.from_dict(payload)
    else:
        _require(sub, args, "n")
        spec = SimulationSpec(n=args.n, seed=args.seed or 0, params=planted_parameters(args.Q, args.K))
    _require(sub, args, "out")

    sim = spec.run()
    out = Path(args.out)
    for k in range(1, spec.K + 1):
        write_edge_list(sim.graph, k, out / f"layer{k}.tsv", base=args.base)
    truth = spec.to_dict()
    truth["K"] = spec.K
    truth["base"] = args.base
    truth["z"] = None if sim.z is None else sim.z.tolist()
    write_json_atomic(out / "truth.json", truth)
    if sim.covariates is not None and sim.covariates.d > 0:
        write_covariates(sim.covariates, out / "covariates.tsv", base=args.base)
    print(f"wrote {spec.K} layer file(s) and truth.json to {out}")
    return EXIT_OK


def cmd_fit(args, sub) -> int:
    _require(sub, args, "layers", "q")
    config = _fit_config(args)
    g = _load_graph(args)

    if args.covariates:
        cov = load_covariates(args.covariates, g.n, base=args.base)
        result = fit_covariates(g, cov, args.q, config)
        result.icl = icl_covariates(g, cov, result)
    else:
        result = fit(g, args.q, config)
        result.icl = icl(g, result)

    payload = result.to_dict()
    payload["config"] = {"name": config.name, "hash": config.hash}
    if args.score:
        truth = read_json(args.score).get("z")
        if truth is None or len(truth) != g.n:
            raise ValueError(f"{args.score} holds no planted labels for {g.n} nodes")
        payload["ari"] = float(adjusted_rand_score(truth, result.map_assignment))
    write_json_atomic(args.out, payload)
    print(f"Q={result.Q} elbo={result.elbo:.6f} icl={result.icl:.6f} converged={result.converged} -> {args.out}")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_select(args, sub) -> int:
    _require(sub, args, "layers", "qmax")
    if args.qmin > args.qmax:
        sub.error(f"--qmin ({args.qmin}) must not exceed --qmax ({args.qmax})")
    config = _fit_config(args)
    g = _load_graph(args)
    report = select_q(g, range(args.qmin, args.qmax + 1), config)

    out = Path(args.out)
    payload = report.to_dict()
    payload["config"] = {"name": config.name, "hash": config.hash}
    write_json_atomic(out / "icl_report.json", payload)
    write_csv_atomic(report.to_frame(), out / "icl.csv")
    print(report.selected_q if report.selected_q is not None else "none")

    selected = report.fits.get(report.selected_q)
    return EXIT_OK if selected is not None and selected.converged else EXIT_NOT_CONVERGED


def cmd_er_fit(args, sub) -> int:
    _require(sub, args, "layers")
    g = _load_graph(args)
    if not args.covariates:
        params = fit_er(g)
        payload = {"n": g.n, **params.to_dict(), "log_likelihood": er_log_likelihood(g, params)}
        write_json_atomic(args.out, payload)
        print(f"pi={params.pi.tolist()} -> {args.out}")
        return EXIT_OK

    cov = load_covariates(args.covariates, g.n, base=args.base)
    newton = _fit_config(args).newton
    try:
        model = fit_er_covariates(g, cov, newton)
    except LogitConvergenceError as exc:
        logger.error("%s", exc)
        last = exc.fit
        payload = {
            "n": g.n,
            "K": g.K,
            "d": cov.d,
            "mu": last.coef[:, 0].tolist(),
            "beta": last.coef[:, 1:].tolist(),
            "grad_norm": last.grad_norm,
            "iterations": last.iterations,
            "converged": False,
        }
        write_json_atomic(args.out, payload)
        return EXIT_NOT_CONVERGED
    write_json_atomic(args.out, {"n": g.n, **model.to_dict()})
    print(f"mu={model.mu.tolist()} iterations={model.iterations} -> {args.out}")
    return EXIT_OK


def cmd_oracle(args, sub) -> int:
    _require(sub, args, "layers", "theta")
    g = _load_graph(args)
    theta = _load_theta(args.theta)
    payload: Dict[str, Any] = {"n": g.n, "Q": theta.Q, "K": theta.K}
    payload["log_likelihood"] = exact_log_likelihood(g, theta)
    try:
        post = exact_posterior(g, theta)
        payload["posterior_marginals"] = post.marginals.tolist()
        payload["posterior_mode"] = post.mode.tolist()
    except OracleSizeError as exc:
        logger.info("posterior skipped: %s", exc)
    if args.tau:
        tau = read_json(args.tau)["tau"]
        check = kl_decomposition_check(g, tau, theta)
        payload["kl_decomposition"] = {
            "elbo": check.elbo,
            "log_likelihood": check.log_likelihood,
            "kl": check.kl,
            "residual": check.residual,
        }
    write_json_atomic(args.out, payload)
    print(f"log_likelihood={payload['log_likelihood']:.12g} -> {args.out}")
    return EXIT_OK


def cmd_lab_error_vs_n(args, sub) -> int:
    _require(sub, args, "config")
    status = run_lab(args.config, out_dir=args.out, force=args.force, jobs=args.jobs)
    print(f"summary: {status['summary_csv']}")
    return EXIT_OK


def cmd_summarize(args, sub) -> int:
    _require(sub, args, "fit", "layers")
    g = _load_graph(args)
    result = FitResult.from_dict(read_json(args.fit))
    if result.n != g.n:
        raise ValueError(f"fit covers {result.n} nodes but the layers have {g.n}")
    theta = result.theta if isinstance(result.theta, BlockParameters) else None
    tolerances = _fit_config(args).tolerances
    module = BlockSummaryModule(
        g, result.map_assignment, theta, base=args.base, independence_tol=tolerances.independence
    )
    attributes = pd.read_csv(args.attributes, sep="\t") if args.attributes else None

    out = Path(args.out)
    tables = module.report(attributes)
    for name, table in tables.items():
        write_csv_atomic(table, out / f"{name}.csv")
    if module.unknown_nodes:
        print(f"excluded unknown node ids: {module.unknown_nodes}")
    print(f"wrote {len(tables)} table(s) to {out}")
    return EXIT_OK


INPUT_ERRORS = (
    GraphFormatError,
    FitConfigError,
    LabConfigError,
    AssumptionError,
    OracleSizeError,
    FitError,
    ValueError,
    OSError,
    yaml.YAMLError,
)


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args, sub = parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )
    logging.captureWarnings(True)
    warnings.simplefilter("default")

    handler: Callable[..., int] = args.handler
    try:
        return handler(args, sub)
    except INPUT_ERRORS as exc:
        logger.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    raise SystemExit(main())

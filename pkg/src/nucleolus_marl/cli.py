"""Command-line entry point: ``nucleolus-marl <verb> ...``.

Exit codes: 0 success, 1 run failure (including failed verification checks),
2 configuration / input error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


def _fmt_vec(x) -> str:
    return "(" + ", ".join(f"{float(v):.10g}" for v in x) + ")"


# -- verbs -----------------------------------------------------------------------------------------

def cmd_solve_game(args) -> int:
    from .games import core_contains, excess_sequence, members, nucleolus
    from .io import load_game

    game = load_game(args.game)
    sol = nucleolus(game, imputation=args.imputation)
    x = sol.allocation
    theta = excess_sequence(game, x)
    if args.json:
        print(json.dumps({
            "allocation": [float(v) for v in x],
            "excess_sequence": [float(v) for v in theta],
            "in_core": bool(core_contains(game, x)),
            "levels": [{"excess": lv.excess, "coalitions": sorted(lv.coalitions)} for lv in sol.levels],
        }, indent=2))
        return EXIT_OK
    print(f"allocation:      {_fmt_vec(x)}")
    print(f"excess sequence: {_fmt_vec(theta)}")
    print(f"in core:         {'yes' if core_contains(game, x) else 'no'}")
    for k, lv in enumerate(sol.levels, 1):
        tight = " ".join("{" + ",".join(map(str, members(c))) + "}" for c in sorted(lv.coalitions))
        print(f"level {k}: excess {lv.excess:.10g}  tight {tight}")
    return EXIT_OK


def cmd_compare_allocations(args) -> int:
    from .io import load_game
    from .runner import allocations_csv, compare_allocations

    rows = compare_allocations(load_game(args.game))
    width = max(len(r.method) for r in rows)
    for r in rows:
        flags = ("core" if r.in_core else "-") + (" lexmin" if r.lex_min else "")
        print(f"{r.method:<{width}}  {_fmt_vec(r.allocation)}  [{flags}]  theta={_fmt_vec(r.excesses)}")
    if args.csv:
        Path(args.csv).write_text(allocations_csv(rows))
    return EXIT_OK


def cmd_verify_operator(args) -> int:
    from .io import ConfigError, load_model
    from .markov import (
        QEnsemble,
        consistency_check,
        contraction_ratio,
        fixed_point,
        project_weight_table,
        weight_bound_value,
    )

    model, util, weights = load_model(args.model, args.gamma)
    lam = args.lam
    if lam < 0:
        raise ConfigError("--lambda must be nonnegative")
    if weights is None:
        weights = np.ones((model.n_states, model.n_agents))
    weights = project_weight_table(weights, model.gamma, lam)
    bound = (model.gamma + lam) * weight_bound_value(weights)
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.pairs):
        a, b = (QEnsemble([rng.uniform(-10, 10, size=(model.n_states, k)) for k in model.action_sizes],
                          weights, lam) for _ in range(2))
        worst = max(worst, contraction_ratio(a, b, util, model))
    contraction_ok = worst <= bound + 1e-9
    res = fixed_point(model, util, weights, lam, tol=args.tol, max_iter=args.max_iter)
    consistent = [consistency_check(res.ensemble, util, model, s) for s in range(model.n_states)] \
        if res.converged and model.n_agents <= 5 else []
    print(f"contraction: max ratio {worst:.6g} <= bound {bound:.6g} over {args.pairs} pairs: "
          f"{'PASS' if contraction_ok else 'FAIL'}")
    print(f"fixed point: {'converged' if res.converged else 'NOT converged'} in {res.iterations} sweeps "
          f"(tol {args.tol:g}, max observed ratio {res.max_ratio:.6g})")
    if consistent:
        print(f"consistency: {sum(consistent)}/{len(consistent)} states")
    ok = contraction_ok and res.converged and all(consistent)
    return EXIT_OK if ok else EXIT_FAILURE


def _load_train_file(path):
    """Training config: TrainConfig fields at top level plus an ``env``
    section (default: the two-block stage game)."""
    from .io import load_document
    from .runner import make_env, train_config_from

    doc = load_document(path)
    if not isinstance(doc.data, dict):
        raise doc.error("training config must be a mapping")
    data = dict(doc.data)
    env_spec = data.pop("env", {"kind": "two_block"})
    make_env(env_spec, doc, ("env",))
    cfg = train_config_from(data, doc, ())
    return env_spec, cfg


def cmd_train(args) -> int:
    from .runner import RunFailure, export_trace, make_env, run_training

    env_spec, cfg = _load_train_file(args.config)
    out = Path(args.out)
    try:
        records, result = run_training(env_spec, cfg, args.seed, out)
    except RunFailure as exc:
        print(f"error: {exc} (partial results in {out})", file=sys.stderr)
        return EXIT_FAILURE
    if records:
        last = records[-1]
        print(f"step {last['step']}: mean return {last['mean_return']:.4g}, "
              f"episode length {last['episode_length']:.4g}, lambda {last['lambda']:.4g}")
    print(f"wrote {out / 'metrics.jsonl'} and {out / 'final_tables.pkl'}")
    if args.trace is not None:
        trace = Path(args.trace) if args.trace else out / "trace.jsonl"
        env = make_env(env_spec)
        steps = export_trace(env, result.learner, env_spec.get("seed", args.seed), trace, cfg.history)
        print(f"wrote {steps}-step trace to {trace}")
    return EXIT_OK


def cmd_run_experiment(args) -> int:
    from .io import load_document
    from .runner import ExperimentSpec, run_experiment

    spec = ExperimentSpec.from_document(load_document(args.spec), out=args.out)
    if args.workers is not None:
        spec.workers = args.workers
    result = run_experiment(spec)
    print(f"{len(result.runs)} run(s) completed, {len(result.rows)} summary rows -> {spec.out / 'summary.csv'}")
    if result.baseline is not None:
        print(f"random-policy baseline: return {result.baseline['mean_return']:.4g}, "
              f"length {result.baseline['mean_length']:.4g}")
    if result.failures:
        for key, err in result.failures.items():
            print(f"FAILED {key}: {err}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nucleolus-marl",
                                description="Nucleolus credit assignment for cooperative multi-agent learning.")
    p.add_argument("--version", action="version", version=_version())
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    s = sub.add_parser("solve-game", help="nucleolus of a coalitional game file")
    s.add_argument("game", help="game file (YAML/JSON with n and values)")
    s.add_argument("--imputation", choices=("pre", "individual"), default="pre",
                   help="search the pre-imputation set or require individual rationality (default: pre)")
    s.add_argument("--json", action="store_true", help="print a JSON document instead of text")
    s.set_defaults(func=cmd_solve_game)

    s = sub.add_parser("compare-allocations", help="nucleolus vs Shapley vs equal split")
    s.add_argument("game", help="game file")
    s.add_argument("--csv", metavar="PATH", help="also write the table as CSV")
    s.set_defaults(func=cmd_compare_allocations)

    s = sub.add_parser("verify-operator", help="check contraction, convergence and consistency on a model file")
    s.add_argument("model", help="model file")
    s.add_argument("--gamma", type=float, default=None, help="discount override (default: the file's gamma)")
    s.add_argument("--lambda", dest="lam", type=float, default=0.0, help="multiplier value (default: 0)")
    s.add_argument("--pairs", type=int, default=100, help="random Q pairs for the contraction check (default: 100)")
    s.add_argument("--tol", type=float, default=1e-6, help="fixed-point tolerance (default: 1e-6)")
    s.add_argument("--max-iter", type=int, default=2000, help="fixed-point sweep limit (default: 2000)")
    s.add_argument("--seed", type=int, default=0, help="seed for the random Q pairs (default: 0)")
    s.set_defaults(func=cmd_verify_operator)

    s = sub.add_parser("train", help="one training run")
    s.add_argument("--config", required=True, help="training config (TrainConfig fields plus an env section)")
    s.add_argument("--seed", type=int, default=0, help="run seed (default: 0)")
    s.add_argument("--out", required=True, help="output directory for metrics.jsonl and final_tables.pkl")
    s.add_argument("--trace", nargs="?", const="", default=None, metavar="PATH",
                   help="after training, dump a greedy episode as JSON lines (default path: OUT/trace.jsonl)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("run-experiment", help="train every (mode, seed) pair and aggregate to summary.csv")
    s.add_argument("spec", help="experiment spec (env, train, seeds, modes, out, workers, baseline_episodes)")
    s.add_argument("--out", help="output directory (overrides the spec)")
    s.add_argument("--workers", type=int, help="parallel worker processes (overrides the spec)")
    s.set_defaults(func=cmd_run_experiment)
    return p


def _version() -> str:
    from . import __version__

    return __version__


def main(argv=None) -> int:
    from .games import NucleolusError
    from .io import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NucleolusError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

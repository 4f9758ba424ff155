"""Command-line front end: ``mvnash <command> CONFIG [options]``.

Exit codes: 0 success, 1 invalid input, 2 solver failure, 3 Nash verification
failure, 4 I/O error. Reports go to stdout; ``--out`` writes the command's
table artifact to a file.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .closed_form import frontier_variance, lagrange_multiplier
from .config import load_config
from .errors import NashViolation, SolverError, ValidationError
from .market import validate_market
from .nash import ZERO_TOL, classify
from .report import columnar, profile_csv, read_profile, structured
from .simulator import EULER_MC, TREE_EXACT, SimConfig, euler_terminal_paths, simulate_profile, terminal_wealth_paths, verify_nash
from .single_agent import best_response, market_factors
from .tree import TreeProcess

SEED_ENV = "MVNASH_SEED"
EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_NASH, EXIT_IO = range(5)


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="game configuration (YAML)")
    common.add_argument("--steps", type=int, help="override driver.steps")
    common.add_argument("--mode", choices=["recombining", "fullbinary"], help="override driver.mode")
    common.add_argument("--tol", type=float, default=ZERO_TOL, help="relative zero band for classification and verification")
    common.add_argument("--out", help="write the command's table to this file")
    common.add_argument("--format", choices=["structured", "columnar"], help="report format on stdout")
    common.add_argument("--workers", type=int, default=1, help="worker threads (results do not depend on it)")

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--paths", type=int, default=20000)
    sim.add_argument("--seed", type=int, help=f"RNG seed (default: ${SEED_ENV} or 0)")
    sim.add_argument("--scheme", choices=[TREE_EXACT, EULER_MC])

    p = argparse.ArgumentParser(prog="mvnash", description="Competitive mean-variance Nash games on binary lattices.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("classify", parents=[common], help="classify equilibria and build profiles")
    sa = sub.add_parser("solve-agent", parents=[common], help="one agent's best response")
    sa.add_argument("--agent", type=int, required=True, help="1-based agent index")
    sa.add_argument("--profile", help="opponent profile table (default: the equilibrium, else zero)")
    fr = sub.add_parser("frontier", parents=[common], help="mean-variance frontier of one agent")
    fr.add_argument("--agent", type=int, required=True)
    fr.add_argument("--d-grid", required=True, help="a:b:k, k evenly spaced means from a to b")
    fr.add_argument("--profile")
    ve = sub.add_parser("verify", parents=[common, sim], help="deviation test of a profile table")
    ve.add_argument("--profile", required=True)
    si = sub.add_parser("simulate", parents=[common, sim], help="objective estimates under a profile")
    si.add_argument("--profile")
    return p


def _seed(args):
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise ValidationError(f"environment variable {SEED_ENV}={env!r} is not an integer") from None


def _game(args):
    cfg = load_config(args.config)
    driver = cfg.driver(args.steps, args.mode)
    return validate_market(cfg.market, cfg.agents, driver)


def _provenance(args, game, **extra):
    d = game.driver
    out = {"config": os.path.basename(args.config), "steps": d.N, "mode": d.mode.value, "horizon": d.T, "tol": args.tol}
    out.update(extra)
    return out


def _read_profile_file(path, game):
    with open(path, encoding="utf-8") as fh:
        return read_profile(fh.read(), game.driver, game.n)


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _agent_index(args, game):
    if not 1 <= args.agent <= game.n:
        raise ValidationError(f"--agent {args.agent} outside 1..{game.n}")
    return args.agent - 1


def _opponents(args, game, factors):
    if args.profile:
        return _read_profile_file(args.profile, game), "profile file"
    try:
        rep = classify(game, factors, tol=args.tol, workers=args.workers)
    except SolverError:
        rep = None
    if rep is not None and rep.profile is not None:
        return rep.profile, f"equilibrium ({rep.classification})"
    return TreeProcess.zeros(game.driver, (game.n,), steps=game.driver.N), "zero"


def cmd_classify(args, out):
    game = _game(args)
    rep = classify(game, tol=args.tol, workers=args.workers)
    body = {"provenance": _provenance(args, game)}
    body.update(rep.to_dict())
    if rep.profile is not None:
        sp0 = rep.profile[0][0] * game.sigma[0][0]
        body["strategies_t0"] = [
            {"agent": i + 1, "pi": float(rep.profile[0][0][i]), "sigma_pi": float(sp0[i])} for i in range(game.n)
        ]
        if args.out:
            _write(args.out, profile_csv(rep.profile))
            body["profile_file"] = os.path.basename(args.out)
    if (args.format or "structured") == "columnar":
        out.write(profile_csv(rep.profile) if rep.profile is not None else columnar(["classification"], [[rep.classification]]))
        return EXIT_OK
    out.write(structured(body))
    out.write(_summary(rep, game))
    return EXIT_OK


def _summary(rep, game):
    lines = [f"# {rep.classification} ({rep.case} case, Psi = {rep.psi:.6g}, n = {game.n}, N = {game.driver.N})"]
    if rep.witness:
        key = next((k for k in ("xi_norm", "phi_residual", "residual") if k in rep.witness), None)
        lines.append(f"# witness: {rep.witness['reason']}" + (f"; {key} = {rep.witness[key]:.6g}" if key else ""))
    for label, prof in rep.profiles:
        vals = ", ".join(f"{v:.6g}" for v in prof[0][0])
        lines.append(f"# {label}: pi(0) = [{vals}]")
    return "\n".join(lines) + "\n"


def cmd_solve_agent(args, out):
    game = _game(args)
    i = _agent_index(args, game)
    factors = market_factors(game)
    opp, source = _opponents(args, game, factors)
    sol = best_response(game, i, opp, factors)
    ch = sol.chain
    body = {
        "provenance": _provenance(args, game, opponents=source),
        "agent": i + 1,
        "lambda_star": None if ch.pinned else ch.lambda_star,
        "d_star": ch.d_star,
        "variance": ch.variance,
        "value": ch.value,
        "mean_pinned": ch.pinned,
        "p0": float(sol.p.initial),
        "hcheck0": float(sol.hcheck.h0),
        "htilde0": float(sol.htilde.h0),
        "pi0": float(sol.control[0][0]),
    }
    table = profile_csv(TreeProcess(game.driver, [v[:, None] for v in sol.control.values]))
    if args.out:
        _write(args.out, table)
    out.write(table if args.format == "columnar" else structured(body))
    return EXIT_OK


def _grid(spec):
    try:
        a, b, k = spec.split(":")
        a, b, k = float(a), float(b), int(k)
    except ValueError:
        raise ValidationError(f"--d-grid {spec!r}: expected a:b:k") from None
    if k < 1:
        raise ValidationError("--d-grid: k must be >= 1")
    return np.linspace(a, b, k)


def cmd_frontier(args, out):
    game = _game(args)
    i = _agent_index(args, game)
    grid = _grid(args.d_grid)
    factors = market_factors(game)
    opp, source = _opponents(args, game, factors)
    sol = best_response(game, i, opp, factors)
    p0, hc0, ht0, z = float(sol.p.initial), float(sol.hcheck.h0), float(sol.htilde.h0), float(game.z[i])
    var = frontier_variance(p0, hc0, ht0, z, grid)
    lam = lagrange_multiplier(p0, hc0, ht0, z, grid)
    table = columnar(["d", "variance", "lambda"], zip(grid, np.atleast_1d(var), np.atleast_1d(lam)))
    if args.out:
        _write(args.out, table)
    if args.format == "structured":
        body = {"provenance": _provenance(args, game, opponents=source), "agent": i + 1,
                "frontier": [{"d": float(d), "variance": float(v)} for d, v in zip(grid, np.atleast_1d(var))]}
        out.write(structured(body))
    else:
        out.write(table)
    return EXIT_OK


def _sim_config(args, default_scheme):
    return SimConfig(paths=args.paths, seed=_seed(args), scheme=args.scheme or default_scheme, workers=max(1, args.workers))


def cmd_verify(args, out):
    game = _game(args)
    profile = _read_profile_file(args.profile, game)
    cfg = _sim_config(args, TREE_EXACT)
    rep = verify_nash(game, profile, cfg, slack=args.tol)
    body = {"provenance": _provenance(args, game, seed=cfg.seed, scheme=cfg.scheme, profile=os.path.basename(args.profile))}
    body.update(rep.to_dict())
    rows = [[c.agent + 1, c.deviation, c.eps, c.J_profile, c.J_deviation, c.gain] for c in rep.checks]
    table = columnar(["agent", "deviation", "eps", "J_profile", "J_deviation", "gain"], rows)
    if args.out:
        _write(args.out, table)
    out.write(table if args.format == "columnar" else structured(body))
    if not rep.passed:
        if rep.failures:
            f = max(rep.failures, key=lambda c: c.gain)
            raise NashViolation(f.agent + 1, f.deviation, f.eps, f.gain)
        worst = int(np.argmax(rep.best_response_gaps))
        raise NashViolation(worst + 1, "best-response", 0.0, rep.best_response_gaps[worst])
    return EXIT_OK


def cmd_simulate(args, out):
    game = _game(args)
    factors = market_factors(game)
    if args.profile:
        profile, source = _read_profile_file(args.profile, game), "profile file"
    else:
        rep = classify(game, factors, tol=args.tol, workers=args.workers)
        if rep.profile is None:
            raise SolverError(f"no equilibrium profile to simulate ({rep.classification}); pass --profile")
        profile, source = rep.profile, f"equilibrium ({rep.classification})"
    cfg = _sim_config(args, EULER_MC)
    ests = simulate_profile(game, profile, cfg)
    header = ["agent", "mean", "variance", "J_hat", "mean_se", "variance_se", "J_se"]
    rows = [[e.agent + 1, e.mean, e.variance, e.J_hat, e.mean_se, e.variance_se, e.J_se] for e in ests]
    if args.out:
        z = terminal_wealth_paths(game, profile) if cfg.scheme == TREE_EXACT else euler_terminal_paths(game, profile, cfg)
        _write(args.out, columnar(["path"] + [f"z_{i + 1}" for i in range(game.n)], ([p, *row] for p, row in enumerate(z))))
    if args.format == "columnar":
        out.write(columnar(header, rows))
    else:
        extra = {"seed": cfg.seed, "scheme": cfg.scheme, "paths": cfg.paths if cfg.scheme == EULER_MC else None,
                 "antithetic": cfg.antithetic, "profile": source}
        body = {"provenance": _provenance(args, game, **extra),
                "estimates": [dict(zip(header, r)) for r in rows]}
        out.write(structured(body))
    return EXIT_OK


COMMANDS = {
    "classify": cmd_classify,
    "solve-agent": cmd_solve_agent,
    "frontier": cmd_frontier,
    "verify": cmd_verify,
    "simulate": cmd_simulate,
}


def run(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    try:
        return COMMANDS[args.command](args, stdout)
    except ValidationError as exc:
        print(f"error: {exc}", file=stderr)
        return EXIT_INVALID
    except SolverError as exc:
        print(f"solver error: {exc}", file=stderr)
        return EXIT_SOLVER
    except NashViolation as exc:
        print(f"nash verification failed: {exc}", file=stderr)
        return EXIT_NASH
    except OSError as exc:
        print(f"i/o error: {exc}", file=stderr)
        return EXIT_IO


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

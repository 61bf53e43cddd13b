"""Command-line interface. Exit codes: 0 success, 1 configuration error, 2 numerical failure."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Plan, parse_config
from .errors import ConfigError, ContractError, NumericalError
from .experiments import (PLOT_MODES, emit_plot_data, fit_rate, run_sweep,
                          solve_diffusive, solve_jump, stage_seed)
from .model import diffusion_limit
from .policy import extracted_policy
from .simulate import SimConfig, check_assumptions, estimate_rho
from .solvers import ControlGrid


def _epsilons(text):
    try:
        return [float(t) for t in text.replace("[", "").replace("]", "").split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad epsilon list {text!r}") from None


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="experiment configuration (INI)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    p.add_argument("--epsilon", type=_epsilons, help="comma-separated epsilon list")
    p.add_argument("--threads", type=int, help="worker threads for path simulation")
    p.add_argument("--fail-fast", action="store_true", help="abort a sweep at the first failing stage")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _common()
    ap = argparse.ArgumentParser(prog="ergodic-control",
                                 description="Ergodic control of pure-jump processes and their diffusive limit.")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("solve-diffusive", parents=[common], help="relative value iteration per configured h")
    sub.add_parser("solve-jump", parents=[common], help="policy iteration on Monte-Carlo kernels per epsilon")
    sub.add_parser("extract-policy", parents=[common], help="smoothed argmax policy of the finest diffusive solve")
    ev = sub.add_parser("evaluate-policy", parents=[common], help="Monte-Carlo ergodic reward of the extracted policy")
    ev.add_argument("--paths-csv", action="store_true", help="also write per-path records")
    ca = sub.add_parser("check-assumptions", parents=[common], help="coupled contraction and Lyapunov drift checks")
    ca.add_argument("--p", type=int, default=1)
    ca.add_argument("--num-mc", type=int, default=200_000)
    ca.add_argument("--action", type=float)
    ca.add_argument("--c-min", type=float, default=0.5)
    sub.add_parser("sweep", parents=[common], help="full epsilon sweep plus plot data")
    fit = sub.add_parser("fit", parents=[common], help="log-log slope of two CSV columns")
    fit.add_argument("csv", type=Path)
    fit.add_argument("--x", default="epsilon")
    fit.add_argument("--y", default="y")
    fit.add_argument("--series", help="restrict to rows whose 'series' column equals this")
    return ap


def _plan(args) -> Plan:
    plan = parse_config(args.config) if args.config else Plan()
    return plan.with_overrides(seed=args.seed, epsilons=args.epsilon, out_dir=args.out,
                               threads=args.threads, fail_fast=args.fail_fast)


def _out(plan):
    out = Path(plan.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_solve_diffusive(args):
    plan = _plan(args)
    dm = diffusion_limit(plan.model.jump_model(plan.epsilons[0]))
    out = _out(plan)
    for h, sol in sorted(solve_diffusive(plan, dm).items(), reverse=True):
        sol.to_csv(out / f"diffusive_h{h:g}.csv")
        rec = sol.scalar_record()
        (out / f"diffusive_h{h:g}.json").write_text(json.dumps(rec, indent=2) + "\n")
        print(f"h={h:g} rho={sol.rho:.10f} iterations={sol.iterations} residual={sol.residual:.2e}")


def cmd_solve_jump(args):
    plan = _plan(args)
    out = _out(plan)
    for i, eps in enumerate(plan.epsilons):
        sol, ks = solve_jump(plan, plan.model.jump_model(eps), i)
        sol.to_csv(out / f"jump_eps{eps:g}.csv")
        rec = dict(sol.scalar_record(), kernel_time_ms=1000.0 * ks.wall_time, N=ks.N,
                   warning=sol.warning)
        (out / f"jump_eps{eps:g}.json").write_text(json.dumps(rec, indent=2) + "\n")
        print(f"epsilon={eps:g} rho={sol.rho:.10f} states={sol.grid.n} iterations={sol.iterations}")


def _policy(plan):
    dm = diffusion_limit(plan.model.jump_model(plan.epsilons[0]))
    sols = solve_diffusive(plan, dm)
    ref = sols[min(sols)]
    return extracted_policy(ref, dm, ControlGrid(plan.Gamma), plan.policy.n, plan.policy.interpolation), ref


def cmd_extract_policy(args):
    plan = _plan(args)
    pol, ref = _policy(plan)
    path = _out(plan) / "policy.csv"
    pol.to_csv(path)
    print(f"policy from h={ref.grid.h:g} (rho={ref.rho:.10f}) written to {path}")


def cmd_evaluate_policy(args):
    plan = _plan(args)
    pol, ref = _policy(plan)
    out = _out(plan)
    for i, eps in enumerate(plan.epsilons):
        cfg = SimConfig(plan.sim.T, plan.sim.paths, stage_seed(plan.seed, i, 1), plan.sim.burn_in, plan.sim.x0)
        est = estimate_rho(plan.model.jump_model(eps), pol, cfg, threads=plan.threads,
                           path_csv=out / f"paths_eps{eps:g}.csv" if args.paths_csv else None)
        print(f"epsilon={eps:g} rho_policy={est.mean:.6f} se={est.std_error:.2e} "
              f"(diffusive rho={ref.rho:.6f})")


def cmd_check_assumptions(args):
    plan = _plan(args)
    out = _out(plan)
    probes = [(x, xp) for x in (-2.0, -0.5, 0.0, 1.0, 3.0) for xp in (-1.0, 0.5, 2.0)]
    worst = True
    for i, eps in enumerate(plan.epsilons):
        rng = np.random.default_rng(stage_seed(plan.seed, i, 2))
        rep = check_assumptions(plan.model.jump_model(eps), args.p, args.num_mc, probes, rng,
                                action=args.action, c_min=args.c_min)
        path = out / f"assumptions_eps{eps:g}.csv"
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["x", "x_prime", "D_zeta", "D_zeta_se", "rate"])
            for (x, xp), d, se, r in zip(rep.pairs, rep.D_zeta, rep.D_zeta_se, rep.contraction_rate):
                wr.writerow([repr(float(x)), repr(float(xp)), repr(float(d)), repr(float(se)), repr(float(r))])
        print(f"epsilon={eps:g} max contraction rate={np.nanmax(rep.contraction_rate):.4f} "
              f"lyapunov fit D_xi ~ {rep.lyapunov_slope:.4f} xi {rep.lyapunov_intercept:+.4f} "
              f"{'ok' if rep.ok else 'VIOLATED'}")
        worst &= rep.ok
    return 0 if worst else 2


def cmd_sweep(args):
    plan = _plan(args)
    records = run_sweep(plan)
    for which in PLOT_MODES:
        try:
            emit_plot_data(records, which, plan.out_dir)
        except ContractError as exc:
            logging.warning("no %s plot: %s", which, exc)
    for r in records:
        print(f"epsilon={r.epsilon:g} rho_jump={r.rho_jump} rho_diffusive={r.rho_diffusive} "
              f"rho_policy={r.rho_policy_estimate} status={r.status}")
    return 0 if all(r.status == "ok" for r in records) else 2


def cmd_fit(args):
    with open(args.csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if args.series:
        rows = [r for r in rows if r.get("series") == args.series]
    try:
        pairs = [(float(r[args.x]), float(r[args.y])) for r in rows if r[args.y] not in ("", None)]
    except KeyError as exc:
        raise ConfigError(f"column {exc} not in {args.csv}") from None
    fit = fit_rate(pairs)
    print(f"slope={fit.slope:.6f} intercept={fit.intercept:.6f} r_squared={fit.r_squared:.6f} points={fit.points}")


COMMANDS = {
    "solve-diffusive": cmd_solve_diffusive,
    "solve-jump": cmd_solve_jump,
    "extract-policy": cmd_extract_policy,
    "evaluate-policy": cmd_evaluate_policy,
    "check-assumptions": cmd_check_assumptions,
    "sweep": cmd_sweep,
    "fit": cmd_fit,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args) or 0
    except (ConfigError, ContractError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

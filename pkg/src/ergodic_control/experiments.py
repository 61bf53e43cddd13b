"""Epsilon sweeps comparing the jump solver, the diffusive solver and the
diffusive policy run on the jump dynamics; rate fits and plot data."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from .config import Plan, diffusive_grid
from .errors import ContractError, NumericalError
from .grid import jump_schedule, make_grid
from .model import diffusion_limit
from .policy import extracted_policy
from .simulate import SimConfig, estimate_rho
from .solvers import ControlGrid, estimate_empirical_kernels, policy_iterate, rvi_solve

log = logging.getLogger(__name__)


@dataclass
class RunRecord:
    experiment_id: str
    epsilon: float
    h: float
    kappa: int
    N: int
    Gamma: int
    h_diffusive: float
    rho_diffusive: float
    rho_jump: Optional[float] = None
    rho_policy_estimate: Optional[float] = None
    rho_policy_se: Optional[float] = None
    wall_time_diffusive_ms: Optional[float] = None
    wall_time_jump_ms: Optional[float] = None
    wall_time_kernel_ms: Optional[float] = None
    seed: int = 0
    status: str = "ok"

    TIMING = ("wall_time_diffusive_ms", "wall_time_jump_ms", "wall_time_kernel_ms")


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    points: int

    def predict(self, x):
        return math.exp(self.intercept) * np.asarray(x, dtype=float) ** self.slope


def fit_rate(pairs) -> RateFit:
    """Least-squares line through (log x, log y)."""
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 3:
        raise ContractError("fit_rate needs at least 3 (x, y) pairs")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ContractError("fit_rate needs finite positive x and y")
    lx, ly = np.log(arr[:, 0]), np.log(arr[:, 1])
    if np.ptp(lx) == 0:
        raise ContractError("fit_rate needs at least two distinct x values")
    res = stats.linregress(lx, ly)
    return RateFit(float(res.slope), float(res.intercept), float(res.rvalue ** 2), int(arr.shape[0]))


# --------------------------------------------------------------------------
# sweep
# --------------------------------------------------------------------------

def stage_seed(master, eps_index, stage):
    """Deterministic 32-bit seed for (master seed, epsilon index, stage)."""
    return int(np.random.SeedSequence([int(master), int(eps_index), int(stage)]).generate_state(1)[0])


def jump_grid(plan: Plan, epsilon):
    if plan.jump.schedule == "paper":
        h, kappa, N, offset = jump_schedule(epsilon)
    else:
        h, kappa, N, offset = plan.jump.h, plan.jump.kappa, plan.jump.N, plan.jump.offset
    return make_grid(kappa, h, offset), N


def solve_jump(plan: Plan, jump_model, eps_index):
    """(solution, kernel set); the policy-iteration wall time excludes kernel estimation."""
    cg = ControlGrid(plan.Gamma)
    grid, N = jump_grid(plan, jump_model.epsilon)
    Z, A = np.meshgrid(grid.points, cg.points, indexing="ij")
    R = jump_model.reward(Z, A)
    ks = estimate_empirical_kernels(grid, jump_model, cg, N, stage_seed(plan.seed, eps_index, 0),
                                    plan.jump.sampling)
    sol = policy_iterate(ks, R, jump_model.epsilon, plan.jump.tol, plan.jump.max_iter,
                         method=plan.jump.solver)
    return sol, ks


def solve_diffusive(plan: Plan, diffusion_model):
    """One solve per configured h, keyed by h; the first call warms up compiled kernels."""
    cg = ControlGrid(plan.Gamma)
    sigma = diffusion_model.sigma_max(np.zeros(1))
    warm = make_grid(3, 0.01, None, 2.0 * sigma)
    rvi_solve(warm, diffusion_model, ControlGrid(1), tol=1e-6)
    out = {}
    for h in plan.diffusive.h:
        grid = diffusive_grid(plan.diffusive, h, sigma)
        out[h] = rvi_solve(grid, diffusion_model, cg, plan.diffusive.tol, plan.diffusive.max_iter)
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in row])


def run_sweep(plan: Plan, write=True):
    """Run every stage for every epsilon of the plan; returns the list of RunRecord.

    Files in ``plan.out_dir``: records.csv (results, byte-stable), timings.csv
    (wall times), diffusive.csv (one row per diffusive mesh) and metadata.json.
    """
    base = plan.model.jump_model(plan.epsilons[0])
    dm = diffusion_limit(base)
    diff_sols = {}
    diff_error = None
    if plan.diffusive.enabled:
        try:
            diff_sols = solve_diffusive(plan, dm)
        except (NumericalError, ContractError) as exc:
            if plan.fail_fast:
                raise
            diff_error = f"diffusive: {exc}"
            log.error(diff_error)
    ref_h = min(diff_sols) if diff_sols else None
    ref = diff_sols.get(ref_h)
    records = []
    for i, eps in enumerate(plan.epsilons):
        jm = plan.model.jump_model(eps)
        grid, N = jump_grid(plan, eps)
        rec = RunRecord(plan.experiment_id, eps, grid.h, grid.kappa, N, plan.Gamma,
                        ref_h, ref.rho if ref else None, seed=plan.seed,
                        wall_time_diffusive_ms=1000.0 * ref.wall_time if ref else None)
        problems = [diff_error] if diff_error else []
        if plan.jump.enabled:
            try:
                sol, ks = solve_jump(plan, jm, i)
                rec.rho_jump = sol.rho
                rec.wall_time_jump_ms = 1000.0 * sol.wall_time
                rec.wall_time_kernel_ms = 1000.0 * ks.wall_time
                if sol.warning:
                    problems.append(f"jump: {sol.warning}")
            except (NumericalError, ContractError) as exc:
                if plan.fail_fast:
                    raise
                problems.append(f"jump: {exc}")
                log.error("epsilon=%s jump stage failed: %s", eps, exc)
        if plan.policy.enabled and ref is not None:
            try:
                pol = extracted_policy(ref, dm, ControlGrid(plan.Gamma), plan.policy.n,
                                       plan.policy.interpolation)
                cfg = SimConfig(plan.sim.T, plan.sim.paths, stage_seed(plan.seed, i, 1),
                                plan.sim.burn_in, plan.sim.x0)
                est = estimate_rho(jm, pol, cfg, threads=plan.threads)
                rec.rho_policy_estimate, rec.rho_policy_se = est.mean, est.std_error
            except (NumericalError, ContractError) as exc:
                if plan.fail_fast:
                    raise
                problems.append(f"policy: {exc}")
                log.error("epsilon=%s policy stage failed: %s", eps, exc)
        rec.status = "ok" if not problems else "; ".join(problems)
        records.append(rec)
        log.info("epsilon=%s rho_jump=%s rho_policy=%s", eps, rec.rho_jump, rec.rho_policy_estimate)
    if write:
        write_outputs(plan, records, diff_sols)
    return records


def write_outputs(plan: Plan, records, diff_sols):
    out = Path(plan.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [f.name for f in fields(RunRecord)]
    result_cols = [n for n in names if n not in RunRecord.TIMING]
    _write_csv(out / "records.csv", result_cols, [[getattr(r, n) for n in result_cols] for r in records])
    timing_cols = ["experiment_id", "epsilon", *RunRecord.TIMING]
    _write_csv(out / "timings.csv", timing_cols, [[getattr(r, n) for n in timing_cols] for r in records])
    _write_csv(out / "diffusive.csv", ["h", "kappa", "offset", "rho", "iterations", "residual"],
               [[h, s.grid.kappa, s.grid.offset, s.rho, s.iterations, s.residual]
                for h, s in sorted(diff_sols.items(), reverse=True)])
    meta = {"experiment_id": plan.experiment_id, "seed": plan.seed,
            "value_gap_reference": "finest-h diffusive solve",
            "reference_h": min(diff_sols) if diff_sols else None,
            "plan": asdict(plan)}
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")


def read_records(path):
    """RunRecord list from a records.csv (and a sibling timings.csv when present)."""
    path = Path(path)
    types = {f.name: f.type for f in fields(RunRecord)}

    def conv(name, text):
        if text == "":
            return None
        t = types[name]
        if t == "int" or name in ("kappa", "N", "Gamma", "seed"):
            return int(text)
        if name in ("experiment_id", "status"):
            return text
        return float(text)

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    timing = {}
    tpath = path.with_name("timings.csv")
    if tpath.exists():
        with open(tpath, newline="") as fh:
            for row in csv.DictReader(fh):
                timing[(row["experiment_id"], row["epsilon"])] = row
    out = []
    for row in rows:
        extra = timing.get((row["experiment_id"], row["epsilon"]), {})
        kw = {k: conv(k, v) for k, v in row.items()}
        kw.update({k: conv(k, extra[k]) for k in RunRecord.TIMING if k in extra})
        out.append(RunRecord(**kw))
    return out


# --------------------------------------------------------------------------
# plot data
# --------------------------------------------------------------------------

PLOT_MODES = ("cost", "value-gap", "policy-gap")


def plot_series(records, which):
    """{series name: [(epsilon, y), ...]} for one of the plot modes."""
    if not records:
        raise ContractError("no records to plot")
    if which == "cost":
        return {"jump": [(r.epsilon, r.wall_time_jump_ms) for r in records if r.wall_time_jump_ms],
                "diffusive": [(r.epsilon, r.wall_time_diffusive_ms) for r in records
                              if r.wall_time_diffusive_ms]}
    if which == "value-gap":
        with_ref = [r for r in records if r.rho_diffusive is not None and r.h_diffusive is not None]
        if not with_ref:
            return {"value-gap": []}
        ref = min(with_ref, key=lambda r: r.h_diffusive).rho_diffusive
        return {"value-gap": [(r.epsilon, abs(r.rho_jump - ref)) for r in records if r.rho_jump is not None]}
    if which == "policy-gap":
        return {"policy-gap": [(r.epsilon, abs(r.rho_policy_estimate - r.rho_jump)) for r in records
                               if r.rho_jump is not None and r.rho_policy_estimate is not None]}
    raise ContractError(f"unknown plot mode {which!r}; expected one of {PLOT_MODES}")


_COLORS = ("#1f77b4", "#d62728", "#2ca02c")


def _svg(series, title):
    W, H, pad = 480, 360, 56
    pts = [(x, y) for s in series.values() for x, y in s if x > 0 and y > 0]
    if not pts:
        lx0 = lx1 = ly0 = ly1 = 0.0
    else:
        lx = np.log10([p[0] for p in pts])
        ly = np.log10([p[1] for p in pts])
        lx0, lx1, ly0, ly1 = lx.min(), lx.max(), ly.min(), ly.max()
    if lx1 - lx0 < 1e-12:
        lx0, lx1 = lx0 - 0.5, lx1 + 0.5
    if ly1 - ly0 < 1e-12:
        ly0, ly1 = ly0 - 0.5, ly1 + 0.5

    def px(x):
        return pad + (math.log10(x) - lx0) / (lx1 - lx0) * (W - 2 * pad)

    def py(y):
        return H - pad - (math.log10(y) - ly0) / (ly1 - ly0) * (H - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<rect x="{pad}" y="{pad}" width="{W - 2 * pad}" height="{H - 2 * pad}" fill="none" stroke="black"/>',
           f'<text x="{W / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
           f'<text x="{W / 2:.1f}" y="{H - 12}" text-anchor="middle" font-family="sans-serif" font-size="12">epsilon (log scale)</text>']
    for k, (name, s) in enumerate(sorted(series.items())):
        color = _COLORS[k % len(_COLORS)]
        good = [(x, y) for x, y in s if x > 0 and y > 0]
        for x, y in good:
            out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="4" fill="{color}"/>')
        label = name
        if len(good) >= 3:
            fit = fit_rate(good)
            xs = [min(x for x, _ in good), max(x for x, _ in good)]
            ys = fit.predict(xs)
            out.append(f'<line x1="{px(xs[0]):.2f}" y1="{py(ys[0]):.2f}" x2="{px(xs[1]):.2f}" '
                       f'y2="{py(ys[1]):.2f}" stroke="{color}" stroke-dasharray="4 3"/>')
            label = f"{name}: slope {fit.slope:.3f}"
        out.append(f'<text x="{pad + 8}" y="{pad + 16 + 16 * k}" font-family="sans-serif" font-size="12" '
                   f'fill="{color}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot_data(records, which, out_dir, stem=None):
    """Write <stem>.csv (columns epsilon, series, y) and <stem>.svg; returns both paths."""
    series = plot_series(records, which)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or which
    rows = [[eps, name, y] for name, s in sorted(series.items()) for eps, y in sorted(s, reverse=True)]
    csv_path, svg_path = out / f"{stem}.csv", out / f"{stem}.svg"
    _write_csv(csv_path, ["epsilon", "series", "y"], rows)
    svg_path.write_text(_svg(series, which))
    return csv_path, svg_path

"""Monte-Carlo simulation of the controlled pure-jump process.

Jump epochs come from sequential exponential gaps of mean eps; the reward is
collected at the pre-jump state. Also: the second-order Taylor residual of
the jump generator against the limit diffusion generator, and coupled
contraction / Lyapunov drift checks.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numba
import numpy as np

from .errors import ContractError, SimulationError
from .model import AuctionReward, JumpModel, TabulatedReward, check_action
from .policy import ProjectedPolicy


@dataclass(frozen=True)
class SimConfig:
    T: float
    num_paths: int
    seed: int = 0
    burn_in_fraction: float = 0.0
    x0: float = 0.0

    def __post_init__(self):
        if not self.T > 0:
            raise ContractError(f"horizon T must be positive, got {self.T}")
        if int(self.num_paths) != self.num_paths or self.num_paths < 1:
            raise ContractError(f"num_paths must be a positive integer, got {self.num_paths}")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ContractError("burn_in_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class EstimateWithCI:
    mean: float
    std_error: float
    num_paths: int
    values: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    @classmethod
    def from_values(cls, values, keep=True):
        v = np.asarray(values, dtype=float)
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        return cls(float(v.mean()), se, int(v.size), v if keep else None)

    def ci(self, z=1.96):
        return self.mean - z * self.std_error, self.mean + z * self.std_error


@dataclass(frozen=True)
class PathResult:
    reward_average: float
    jump_count: int
    final_state: float


# --------------------------------------------------------------------------
# paths
# --------------------------------------------------------------------------

def _draw_epochs(jump_model: JumpModel, T, stream):
    """Jump times in [0, T] and one noise draw per jump."""
    eps = jump_model.epsilon
    chunk = int(T / eps + 4 * math.sqrt(T / eps) + 16)
    times, noise = [], []
    t_last = 0.0
    while True:
        t = t_last + np.cumsum(stream.exponential(eps, size=chunk))
        e = jump_model.noise.sample(stream, chunk)
        keep = t <= T
        times.append(t[keep])
        noise.append(e[keep])
        if not keep[-1]:
            break
        t_last = t[-1]
    return np.concatenate(times), np.concatenate(noise)


@numba.njit(cache=True, nogil=True)
def _auction_path(x0, e, eps, z0, h, acts, xs, idx):
    """Pre-jump states and policy indices under x <- x + eps e1 (a e2 - x) + sqrt(eps) e1 e3.

    Returns the index of the first non-finite state, or -1.
    """
    n = acts.shape[0]
    se = math.sqrt(eps)
    x = x0
    for k in range(e.shape[0]):
        i = int(math.ceil((x - z0) / h - 0.5))
        i = 0 if i < 0 else (n - 1 if i > n - 1 else i)
        xs[k] = x
        idx[k] = i
        a = acts[i]
        x = x + eps * e[k, 0] * (a * e[k, 1] - x) + se * e[k, 0] * e[k, 2]
        if not math.isfinite(x):
            return k
    xs[e.shape[0]] = x
    return -1


def simulate_path(jump_model: JumpModel, policy: Callable, cfg: SimConfig, stream,
                  reward: Optional[Callable] = None, path_index=None) -> PathResult:
    """One trajectory on [0, T]; returns the eps/T-scaled reward sum over jumps after burn-in."""
    eps, T = jump_model.epsilon, cfg.T
    reward = jump_model.reward if reward is None else reward
    times, e = _draw_epochs(jump_model, T, stream)
    k = times.size
    if isinstance(policy, ProjectedPolicy) and jump_model.is_auction:
        xs = np.empty(k + 1)
        idx = np.empty(k, dtype=np.int64)
        g = policy.grid
        bad = _auction_path(float(cfg.x0), e, eps, g.offset, g.h, np.asarray(policy.actions, float), xs, idx)
        if bad >= 0:
            raise SimulationError(f"state blew up at t={times[bad]:.6g}", time=float(times[bad]),
                                  path_index=path_index)
        acts = policy.actions[idx]
    else:
        xs = np.empty(k + 1)
        acts = np.empty(k)
        x = float(cfg.x0)
        lo, hi = jump_model.control_set
        for j in range(k):
            a = float(policy(x))
            if not lo - 1e-12 <= a <= hi + 1e-12:
                check_action(jump_model.control_set, a)
            xs[j], acts[j] = x, a
            x = x + float(jump_model.increment(x, a, e[j]))
            if not math.isfinite(x):
                raise SimulationError(f"state blew up at t={times[j]:.6g}", time=float(times[j]),
                                      path_index=path_index)
        xs[k] = x
    start = np.searchsorted(times, cfg.burn_in_fraction * T, side="left") if cfg.burn_in_fraction else 0
    r = np.asarray(reward(xs[start:k], acts[start:]), dtype=float) if k > start else np.zeros(0)
    avg = eps / (T * (1.0 - cfg.burn_in_fraction)) * float(np.sum(r))
    return PathResult(avg, int(k), float(xs[k]))


def simulation_reward(jump_model: JumpModel, policy):
    """Reward evaluator for simulation: tabulated per policy action for the auction reward."""
    if isinstance(jump_model.reward, AuctionReward) and isinstance(policy, ProjectedPolicy):
        return TabulatedReward(jump_model.reward, np.unique(policy.actions))
    return jump_model.reward


def estimate_rho(jump_model: JumpModel, policy, cfg: SimConfig, threads=1, reward=None,
                 path_csv=None, keep_values=True) -> EstimateWithCI:
    """Mean and standard error of the per-path ergodic reward over ``cfg.num_paths`` paths.

    Path j uses the j-th child of SeedSequence(cfg.seed); results do not
    depend on ``threads``.
    """
    reward = simulation_reward(jump_model, policy) if reward is None else reward
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.num_paths)

    def run(j):
        return simulate_path(jump_model, policy, cfg, np.random.default_rng(children[j]), reward, j)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, range(cfg.num_paths)))
    else:
        results = [run(j) for j in range(cfg.num_paths)]
    if path_csv is not None:
        with open(path_csv, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["path_id", "reward_average", "jump_count", "final_state"])
            for j, res in enumerate(results):
                wr.writerow([j, repr(res.reward_average), res.jump_count, repr(res.final_state)])
    return EstimateWithCI.from_values([res.reward_average for res in results], keep_values)


# --------------------------------------------------------------------------
# generator residual
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AnalyticValue:
    """A twice-differentiable test function given with its derivatives."""

    f: Callable
    df: Callable
    d2f: Callable

    def derivs(self, x):
        x = np.asarray(x, dtype=float)
        return self.f(x), self.df(x) * np.ones_like(x), self.d2f(x) * np.ones_like(x)

    def __call__(self, x):
        return self.f(np.asarray(x, dtype=float))


def _residual(w_eval, jump_model, diffusion_model, x, a, e):
    eps = jump_model.epsilon
    b = jump_model.increment(x, a, e)
    v0, d1, d2 = w_eval.derivs(np.array([x]))
    diff = np.asarray(w_eval(x + b), dtype=float) - v0[0]
    mu = float(diffusion_model.drift(x, a))
    s2 = float(diffusion_model.sigma_sq(x))
    val = diff.mean() / eps - d1[0] * mu - 0.5 * s2 * d2[0]
    se = diff.std(ddof=1) / (eps * math.sqrt(diff.size)) if diff.size > 1 else 0.0
    return float(val), float(se)


def delta_r_residual(w_eval, jump_model: JumpModel, diffusion_model, x, a, num_mc, stream):
    """(1/eps) E[w(x + b) - w(x)] - w'(x) mu(x,a) - sigma^2 w''(x) / 2 by Monte Carlo.

    Returns (value, standard error).
    """
    check_action(jump_model.control_set, a)
    e = jump_model.noise.sample(stream, int(num_mc))
    return _residual(w_eval, jump_model, diffusion_model, float(x), float(a), e)


def delta_r_table(w_eval, jump_model: JumpModel, diffusion_model, xs, actions, num_mc, stream):
    """Residual at every (x, a) with one shared batch of draws; returns (values, std errors)."""
    check_action(jump_model.control_set, actions)
    e = jump_model.noise.sample(stream, int(num_mc))
    xs = np.asarray(xs, dtype=float)
    actions = np.asarray(actions, dtype=float)
    val = np.empty((xs.size, actions.size))
    se = np.empty_like(val)
    for i, x in enumerate(xs):
        for j, a in enumerate(actions):
            val[i, j], se[i, j] = _residual(w_eval, jump_model, diffusion_model, x, a, e)
    return val, se


# --------------------------------------------------------------------------
# structural assumptions
# --------------------------------------------------------------------------

@dataclass
class AssumptionReport:
    p: int
    action: float
    pairs: np.ndarray            # (k, 2)
    D_zeta: np.ndarray
    D_zeta_se: np.ndarray
    contraction_rate: np.ndarray  # D_zeta / zeta, nan where zeta = 0
    states: np.ndarray
    D_xi: np.ndarray
    D_xi_se: np.ndarray
    lyapunov_slope: float        # least-squares fit D_xi ~ slope * xi + intercept
    lyapunov_intercept: float
    c_min: float
    violations: list

    @property
    def ok(self):
        return not self.violations


def check_assumptions(jump_model: JumpModel, p: int, num_mc: int, probe_pairs, stream,
                      action=None, c_min=0.5) -> AssumptionReport:
    """Coupled drift of zeta = |x - x'|^(2p) and drift of xi = |x|^(2p) under a constant action."""
    if int(p) != p or p < 1:
        raise ContractError(f"p must be an integer >= 1, got {p}")
    lo, hi = jump_model.control_set
    a = 0.5 * (lo + hi) if action is None else float(action)
    check_action(jump_model.control_set, a)
    eta = jump_model.intensity
    e = jump_model.noise.sample(stream, int(num_mc))
    pairs = np.asarray(probe_pairs, dtype=float).reshape(-1, 2)
    q = 2 * p

    def drift(samples):
        m = eta * samples.mean()
        se = eta * samples.std(ddof=1) / math.sqrt(samples.size) if samples.size > 1 else 0.0
        return m, se

    Dz, Dz_se, rate = [], [], []
    for x, xp in pairs:
        y = x + jump_model.increment(x, a, e)
        yp = xp + jump_model.increment(xp, a, e)
        zeta = abs(x - xp) ** q
        m, se = drift(np.abs(y - yp) ** q - zeta)
        Dz.append(m)
        Dz_se.append(se)
        rate.append(m / zeta if zeta > 0 else math.nan)
    states = np.unique(pairs.ravel())
    Dx, Dx_se = [], []
    for x in states:
        m, se = drift(np.abs(x + jump_model.increment(x, a, e)) ** q - abs(x) ** q)
        Dx.append(m)
        Dx_se.append(se)
    xi = np.abs(states) ** q
    if states.size >= 2 and np.ptp(xi) > 0:
        slope, intercept = np.polyfit(xi, np.asarray(Dx), 1)
    else:
        slope, intercept = math.nan, math.nan
    violations = [(float(x), float(xp), r) for (x, xp), r in zip(pairs, rate)
                  if not math.isnan(r) and r > -c_min]
    return AssumptionReport(int(p), a, pairs, np.array(Dz), np.array(Dz_se), np.array(rate), states,
                            np.array(Dx), np.array(Dx_se), float(slope), float(intercept), c_min,
                            violations)

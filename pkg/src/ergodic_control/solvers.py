"""Ergodic fixed-point solvers.

* ``rvi_solve``: relative value iteration for the diffusive Markov chain
  approximation, with span-seminorm stopping.
* ``policy_iterate``: policy iteration for the jump problem on Monte-Carlo
  estimated transition kernels, ``0 = max_a {(P^a - I) W / eps - W(ref) + R(a)}``.
* ``correction_solve``: the first-order correction problem, solved with the
  same relative value iteration.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import CFLError, ContractError, ConvergenceError, LinearSolveError
from .grid import Grid, check_cfl, stencil_tables

log = logging.getLogger(__name__)

DENSE_LIMIT = 2000


@dataclass(frozen=True)
class ControlGrid:
    """Gamma + 1 equally spaced actions on [lo, hi]; Gamma = 0 gives the single action lo."""

    Gamma: int
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if int(self.Gamma) != self.Gamma or self.Gamma < 0:
            raise ContractError(f"Gamma must be a non-negative integer, got {self.Gamma}")

    @property
    def points(self):
        if self.Gamma == 0:
            return np.array([float(self.lo)])
        return self.lo + (self.hi - self.lo) * np.arange(self.Gamma + 1) / self.Gamma

    @property
    def size(self):
        return int(self.Gamma) + 1


@dataclass
class ErgodicSolution:
    rho: float
    w: np.ndarray
    policy: np.ndarray          # indices into ``actions``
    iterations: int
    residual: float
    wall_time: float            # seconds
    grid: Grid
    actions: np.ndarray
    converged: bool = True
    warning: Optional[str] = None
    span_history: Optional[np.ndarray] = None
    kind: str = "diffusive"

    @property
    def policy_actions(self):
        return self.actions[self.policy]

    def to_csv(self, path):
        z = self.grid.points
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["index", "z", "w", "policy_action"])
            for i in range(self.grid.n):
                wr.writerow([i, repr(float(z[i])), repr(float(self.w[i])),
                             repr(float(self.actions[self.policy[i]]))])

    def scalar_record(self):
        return {"rho": self.rho, "iterations": self.iterations, "residual": self.residual,
                "wall_time_ms": 1000.0 * self.wall_time}


# --------------------------------------------------------------------------
# relative value iteration
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _bellman_sweep(w, qm, qs, qp, rdt, out, pol):
    """out_i = max_j [qm_ij w_{i-1} + qs_i w_i + qp_ij w_{i+1} + rdt_ij] on interior rows.

    Boundary rows take the transition part of their mirror row (2 and n-3)
    and the best reward of their own state, maximised separately.
    """
    n, m = rdt.shape
    for i in range(1, n - 1):
        best = -np.inf
        arg = 0
        base = qs[i] * w[i]
        for j in range(m):
            v = qm[i, j] * w[i - 1] + base + qp[i, j] * w[i + 1] + rdt[i, j]
            if v > best:
                best = v
                arg = j
        out[i] = best
        pol[i] = arg
    for i, mirror in ((0, 2), (n - 1, n - 3)):
        best_t = -np.inf
        for j in range(m):
            v = qm[mirror, j] * w[mirror - 1] + qs[mirror] * w[mirror] + qp[mirror, j] * w[mirror + 1]
            if v > best_t:
                best_t = v
        best_r = -np.inf
        arg = 0
        for j in range(m):
            if rdt[i, j] > best_r:
                best_r = rdt[i, j]
                arg = j
        out[i] = best_t + best_r
        pol[i] = arg


@numba.njit(cache=True)
def _rvi_loop(w, qm, qs, qp, rdt, ref, tol, max_iter, spans):
    n = w.shape[0]
    out = np.empty(n)
    pol = np.empty(n, dtype=np.int64)
    span = np.inf
    it = 0
    nrec = spans.shape[0]
    while it < max_iter:
        _bellman_sweep(w, qm, qs, qp, rdt, out, pol)
        it += 1
        lo = np.inf
        hi = -np.inf
        for i in range(n):
            d = out[i] - w[i]
            if d < lo:
                lo = d
            if d > hi:
                hi = d
        span = hi - lo
        if it <= nrec:
            spans[it - 1] = span
        c = out[ref]
        if span <= tol:
            break
        for i in range(n):
            w[i] = out[i] - c
    return out, pol, it, span


def _rvi_tables(grid, model, actions, reward_table):
    qm, qs, qp = stencil_tables(grid, model, actions)
    if reward_table is None:
        Z, A = np.meshgrid(grid.points, actions, indexing="ij")
        reward_table = np.asarray(model.reward(Z, A), dtype=float)
    return qm, qs, qp, np.ascontiguousarray(reward_table * grid.dt)


def rvi_solve(grid: Grid, model, control_grid: ControlGrid, tol=1e-9, max_iter=10 ** 6,
              reward_table=None, w0=None, record_spans=0) -> ErgodicSolution:
    """Relative value iteration for the diffusive scheme.

    ``reward_table`` (n x m) overrides the model reward (used by the
    correction problem). Returns ``w`` normalised so that w(ref) = rho * dt.
    """
    actions = control_grid.points
    report = check_cfl(grid, model, actions)
    if not report.ok:
        raise CFLError(report.message)
    t0 = time.perf_counter()
    qm, qs, qp, rdt = _rvi_tables(grid, model, actions, reward_table)
    w = np.zeros(grid.n) if w0 is None else np.array(w0, dtype=float) - w0[grid.ref_index]
    spans = np.empty(max(int(record_spans), 0))
    out, pol, it, span = _rvi_loop(w, qm, qs, qp, rdt, grid.ref_index, float(tol), int(max_iter), spans)
    if span > tol:
        raise ConvergenceError(f"relative value iteration: {it} sweeps, span {span:.3e} > tol {tol:.1e}",
                               residual=span, iterations=it)
    W = out.copy()
    rho = W[grid.ref_index] / grid.dt
    # verification sweep: fixed-point defect and greedy policy on the returned W
    T = np.empty(grid.n)
    pol = np.empty(grid.n, dtype=np.int64)
    _bellman_sweep(W, qm, qs, qp, rdt, T, pol)
    residual = float(np.max(np.abs(T - W - rho * grid.dt)))
    wall = time.perf_counter() - t0
    return ErgodicSolution(float(rho), W, pol, int(it), residual, wall, grid, actions,
                           span_history=spans[:min(it, spans.size)] if record_spans else None)


def bellman_defect(sol: ErgodicSolution, model, reward_table=None):
    """sup_i |max_a [row_i(a) w + r dt] - w_i - rho dt| for a diffusive solution."""
    qm, qs, qp, rdt = _rvi_tables(sol.grid, model, sol.actions, reward_table)
    T = np.empty(sol.grid.n)
    pol = np.empty(sol.grid.n, dtype=np.int64)
    _bellman_sweep(np.asarray(sol.w, float), qm, qs, qp, rdt, T, pol)
    return float(np.max(np.abs(T - sol.w - sol.rho * sol.grid.dt))), pol


# --------------------------------------------------------------------------
# policy evaluation / iteration for the jump scheme
# --------------------------------------------------------------------------

def _jacobi(A):
    d = A.diagonal()
    d = np.where(d == 0, 1.0, d)
    return spla.LinearOperator(A.shape, matvec=lambda v: v / d, dtype=float)


def policy_evaluate(P, R, epsilon, ref, method="auto", x0=None):
    """Solve (P - I) W / eps - W(ref) e + R = 0; returns (rho, W) with rho = W(ref).

    ``method``: "auto" (dense LU up to 2000 states, BiCGSTAB above with sparse
    LU fallback), "dense", "splu" or "bicgstab".
    """
    R = np.asarray(R, dtype=float)
    n = R.size
    if not 0 <= ref < n:
        raise ContractError(f"reference index {ref} out of range")
    if method == "auto":
        method = "dense" if n <= DENSE_LIMIT else "bicgstab"
    rscale = max(float(np.max(np.abs(R))), 1e-300)
    if method == "dense":
        Pd = P.toarray() if sp.issparse(P) else np.asarray(P, dtype=float)
        A = (Pd - np.eye(n)) / epsilon
        A[:, ref] -= 1.0
        try:
            lu = scipy.linalg.lu_factor(A, check_finite=True)
            W = scipy.linalg.lu_solve(lu, -R)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise LinearSolveError(f"policy evaluation failed: {exc}",
                                   condition_estimate=float(np.linalg.cond(A, 1))) from exc
        res = float(np.max(np.abs(A @ W + R)))
        if not np.isfinite(res) or res > 1e-9 * rscale:
            raise LinearSolveError(f"policy evaluation residual {res:.3e}",
                                   condition_estimate=float(np.linalg.cond(A, 1)))
        return float(W[ref]), W
    Ps = sp.csr_matrix(P)
    A = ((Ps - sp.identity(n, format="csr")) / epsilon).tolil()
    A[:, ref] = A[:, ref].toarray() - 1.0
    A = A.tocsc()
    W = None
    if method == "bicgstab":
        W, info = spla.bicgstab(A, -R, x0=x0, rtol=1e-10, atol=0.0, maxiter=min(20 * n, 5000), M=_jacobi(A))
        if info != 0 or np.max(np.abs(A @ W + R)) > 1e-9 * rscale:
            log.debug("bicgstab did not reach 1e-10 (info=%s); falling back to sparse LU", info)
            W = None
    elif method != "splu":
        raise ContractError(f"unknown linear solver {method!r}")
    if W is None:
        try:
            W = spla.splu(A).solve(-R)
        except RuntimeError as exc:
            raise LinearSolveError(f"sparse LU failed: {exc}") from exc
    res = float(np.max(np.abs(A @ W + R)))
    if not np.isfinite(res) or res > 1e-9 * rscale:
        raise LinearSolveError(f"policy evaluation residual {res:.3e}")
    return float(W[ref]), W


@dataclass
class EmpiricalKernelSet:
    grid: Grid
    control_grid: ControlGrid
    matrices: list              # one csr (n x n) per action
    N: int
    seed: int
    sampling: str = "common"
    wall_time: float = 0.0
    stacked: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        self.stacked = sp.vstack(self.matrices, format="csr")

    def policy_matrix(self, policy):
        """Rows of P^{a_i} for each state i."""
        n, m = self.grid.n, len(self.matrices)
        sel = sp.csr_matrix((np.ones(n), (np.arange(n), np.asarray(policy) * n + np.arange(n))),
                            shape=(n, n * m))
        return (sel @ self.stacked).tocsr()

    def apply_all(self, W):
        """(P^a W)_i for all actions: shape (n, m)."""
        return (self.stacked @ W).reshape(len(self.matrices), self.grid.n).T


def estimate_empirical_kernels(grid: Grid, jump_model, control_grid: ControlGrid, N: int, seed,
                               sampling="common") -> EmpiricalKernelSet:
    """Monte-Carlo transition kernels of the jump chain projected on the grid.

    ``sampling="common"`` reuses one batch of N noise draws for every
    (state, action); ``"independent"`` draws N fresh samples per pair.
    """
    if N < 1:
        raise ContractError("N must be >= 1")
    if sampling not in ("common", "independent"):
        raise ContractError(f"unknown sampling mode {sampling!r}")
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    z = grid.points
    n = grid.n
    law = jump_model.noise
    rows = np.repeat(np.arange(n), N)
    mats = []
    e = law.sample(rng, N) if sampling == "common" else None
    for a in control_grid.points:
        if sampling == "independent":
            e = law.sample(rng, n * N).reshape(n, N, 4)
            target = z[:, None] + jump_model.increment(z[:, None], a, e)
        else:
            target = z[:, None] + jump_model.increment(z[:, None], a, e[None, :, :])
        cols = grid.project(target).ravel()
        counts = np.bincount(rows * n + cols, minlength=n * n) if n * n <= 5_000_000 else None
        if counts is not None:
            nz = np.flatnonzero(counts)
            mat = sp.csr_matrix((counts[nz] / N, (nz // n, nz % n)), shape=(n, n))
        else:
            mat = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)).tocsr()
            mat.sum_duplicates()
            mat.data /= N
        mats.append(mat)
    ks = EmpiricalKernelSet(grid, control_grid, mats, int(N), seed, sampling)
    ks.wall_time = time.perf_counter() - t0
    return ks


def policy_iterate(kernels: EmpiricalKernelSet, reward_table, epsilon, tol=1e-9, max_iter=200,
                   ref=None, method="auto") -> ErgodicSolution:
    """Policy iteration for the jump scheme; returns w with w(ref) = rho."""
    R = np.asarray(reward_table, dtype=float)
    n, m = R.shape
    if n != kernels.grid.n or m != len(kernels.matrices):
        raise ContractError("reward table shape does not match the kernels")
    ref = kernels.grid.ref_index if ref is None else ref
    t0 = time.perf_counter()
    policy = np.argmax(R, axis=1)
    seen = {}
    best = None
    W = None
    warning = None
    for it in range(1, max_iter + 1):
        P = kernels.policy_matrix(policy)
        rho, W = policy_evaluate(P, R[np.arange(n), policy], epsilon, ref, method)
        Q = (kernels.apply_all(W) - W[:, None]) / epsilon + R
        new = np.argmax(Q, axis=1)
        defect = float(np.max(np.max(Q, axis=1) - rho))
        if best is None or rho > best[0]:
            best = (rho, W, policy.copy(), defect)
        if np.array_equal(new, policy) or defect <= tol:
            residual = float(np.max(np.abs(np.max(Q, axis=1) - rho)))
            wall = time.perf_counter() - t0
            return ErgodicSolution(rho, W, policy, it, residual, wall, kernels.grid,
                                   kernels.control_grid.points, kind="jump")
        key = new.tobytes()
        if key in seen:
            warning = f"policy cycle detected at iteration {it}; returning best policy so far"
            log.warning(warning)
            rho, W, policy, defect = best
            wall = time.perf_counter() - t0
            return ErgodicSolution(rho, W, policy, it, defect, wall, kernels.grid,
                                   kernels.control_grid.points, converged=False,
                                   warning=warning, kind="jump")
        seen[policy.tobytes()] = it
        policy = new
    raise ConvergenceError(f"policy iteration did not converge in {max_iter} iterations",
                           residual=defect, iterations=max_iter)


def jump_defect(sol: ErgodicSolution, kernels: EmpiricalKernelSet, reward_table, epsilon):
    Q = (kernels.apply_all(sol.w) - sol.w[:, None]) / epsilon + np.asarray(reward_table, float)
    return float(np.max(np.abs(np.max(Q, axis=1) - sol.rho))), np.argmax(Q, axis=1)


# --------------------------------------------------------------------------
# first-order correction
# --------------------------------------------------------------------------

@dataclass
class CorrectionResult:
    delta_rho: float
    delta_w: np.ndarray
    rho_corrected: float
    gamma0: float
    f_max: float                # max of f over grid x actions (<= 0 up to FD tolerance)
    solution: ErgodicSolution


def generator_gap_table(grid: Grid, model, base: ErgodicSolution, actions):
    """f(z, a) = L^a_h w + r(z, a) - rho at every grid point (boundary rows use the mirror stencil)."""
    qm, qs, qp = stencil_tables(grid, model, actions)
    w = np.asarray(base.w, float)
    n = grid.n
    f = np.empty((n, len(actions)))
    i = np.arange(1, n - 1)
    f[i] = (qm[i] * w[i - 1, None] + (qs[i] * w[i])[:, None] + qp[i] * w[i + 1, None] - w[i, None]) / grid.dt
    for b, mirror in ((0, 2), (n - 1, n - 3)):
        f[b] = (qm[mirror] * w[mirror - 1] + qs[mirror] * w[mirror] + qp[mirror] * w[mirror + 1] - w[b]) / grid.dt
    Z, A = np.meshgrid(grid.points, actions, indexing="ij")
    return f + np.asarray(model.reward(Z, A), float) - base.rho


def correction_solve(grid: Grid, model, base: ErgodicSolution, jump_model, gamma0=1.0, tol=1e-9,
                     delta_r_table=None, mollifier_n=64, num_mc=20_000, seed=0,
                     max_iter=10 ** 6, f_tolerance=None) -> CorrectionResult:
    """First-order correction: solve sup_a [L^a dw + eps^(-gamma0/2) (dr_eps + f)(., a)] = drho.

    ``delta_r_table`` (n x m) may be supplied; otherwise it is estimated by
    Monte Carlo on the mollified base value with ``num_mc`` common draws.
    Returns rho_corrected = rho_bar + eps^(gamma0/2) * drho.
    """
    actions = base.actions
    eps = jump_model.epsilon
    f = generator_gap_table(grid, model, base, actions)
    f_max = float(f.max())
    if f_tolerance is None:
        f_tolerance = max(10 * tol / grid.dt, 1e-8)
    if f_max > f_tolerance:
        raise ConvergenceError(f"base solution is not optimal: max f = {f_max:.3e}", residual=f_max)
    if delta_r_table is None:
        from .policy import MollifiedValue
        from .simulate import delta_r_table as _drt
        mv = MollifiedValue.from_solution(base, mollifier_n)
        delta_r_table, _ = _drt(mv, jump_model, model, grid.points, actions, num_mc,
                                np.random.default_rng(seed))
    running = eps ** (-gamma0 / 2.0) * (np.asarray(delta_r_table, float) + f)
    sol = rvi_solve(grid, model, ControlGrid(len(actions) - 1, actions[0], actions[-1])
                    if len(actions) > 1 else ControlGrid(0, actions[0], actions[0]),
                    tol=tol, max_iter=max_iter, reward_table=running)
    return CorrectionResult(sol.rho, sol.w, base.rho + eps ** (gamma0 / 2.0) * sol.rho,
                            gamma0, f_max, sol)

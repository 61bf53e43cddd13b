"""Uniform 1-d grids, central finite differences and the locally consistent
Markov chain (row-stochastic kernels with reflecting boundary rows)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import CFLError, ContractError, NegativeProbabilityError


@dataclass(frozen=True)
class Grid:
    """Points z_i = offset + i*h, i = 0..2*kappa (zero-based)."""

    kappa: int
    h: float
    offset: float
    L_scheme: float

    @cached_property
    def points(self) -> np.ndarray:
        z = self.offset + np.arange(2 * self.kappa + 1) * self.h
        z.setflags(write=False)
        return z

    @property
    def n(self) -> int:
        return 2 * self.kappa + 1

    @property
    def dt(self) -> float:
        return self.h ** 2 / self.L_scheme ** 2

    @cached_property
    def ref_index(self) -> int:
        # argmin returns the first minimiser: ties go left
        return int(np.argmin(np.abs(self.points)))

    @property
    def lo(self):
        return float(self.points[0])

    @property
    def hi(self):
        return float(self.points[-1])

    def project(self, x):
        """Index of the nearest grid point; clamps outside, midpoint ties go left."""
        pos = (np.asarray(x, dtype=float) - self.offset) / self.h
        idx = np.ceil(pos - 0.5).astype(np.int64)
        return np.clip(idx, 0, self.n - 1)

    def index_of(self, x, interior=False):
        """Index of grid point ``x``; raises if ``x`` is not (close to) a grid point."""
        i = int(round((float(x) - self.offset) / self.h))
        if not 0 <= i < self.n or abs(self.points[i] - x) > 1e-9 * max(1.0, abs(x)):
            raise ContractError(f"{x} is not a grid point")
        if interior and not 0 < i < self.n - 1:
            raise ContractError(f"{x} is a boundary point; interior required")
        return i


def default_L_scheme(sigma):
    return math.sqrt(2.0) * sigma


def kappa_for_extent(R, h):
    """Smallest kappa with kappa*h >= R."""
    return int(math.ceil(R / h - 1e-9))


def kappa_quarter_root(h):
    """kappa_h = ceil(h**(-1/4))."""
    return int(math.ceil(h ** -0.25 - 1e-12))


def jump_schedule(epsilon):
    """(h, kappa, N, offset) of the jump grid: h = eps^1.5, kappa = N = ceil(20 eps^-1.5), left end -10."""
    h = epsilon ** 1.5
    kappa = int(math.ceil(20.0 * epsilon ** -1.5 - 1e-9))
    return h, kappa, kappa, -10.0


def make_grid(kappa, h, offset=None, L_scheme=1.0):
    if int(kappa) != kappa or kappa < 3:
        raise ContractError(f"kappa must be an integer >= 3, got {kappa}")
    if not h > 0:
        raise ContractError(f"mesh h must be positive, got {h}")
    if not L_scheme > 0:
        raise ContractError(f"L_scheme must be positive, got {L_scheme}")
    kappa = int(kappa)
    if offset is None:
        offset = -(kappa * h)
    return Grid(kappa, float(h), float(offset), float(L_scheme))


def grid_for_model(model, h, extent=20.0, kappa=None, offset=None, L_scheme=None):
    """Grid with default half-width ``extent`` and L_scheme = sqrt(2)*max sigma."""
    if kappa is None:
        kappa = kappa_for_extent(extent, h)
    if L_scheme is None:
        off = -(kappa * h) if offset is None else offset
        pts = off + np.arange(2 * kappa + 1) * h
        L_scheme = default_L_scheme(model.sigma_max(pts))
    return make_grid(kappa, h, offset, L_scheme)


# --------------------------------------------------------------------------
# validity
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CFLReport:
    scheme_condition: bool       # L (1 + kappa h) h < sigma^2
    scheme_lhs: float
    nonnegative: bool            # max |mu| h <= sigma^2 pointwise
    drift_ratio: float           # max over grid x actions of |mu| h / sigma^2
    L_exceeds_sigma: bool
    p_min: float                 # smallest off-diagonal entry (may be negative)
    message: str

    @property
    def ok(self):
        return self.nonnegative and self.L_exceeds_sigma


def _action_probe(model, actions):
    if actions is None:
        lo, hi = model.control_set
        actions = np.linspace(lo, hi, 101)
    return np.asarray(actions, dtype=float)


def check_cfl(grid: Grid, model, actions=None) -> CFLReport:
    z = grid.points
    s2 = np.asarray(model.sigma_sq(z), dtype=float) * np.ones_like(z)
    s2min = float(s2.min())
    if not s2min > 0:
        return CFLReport(False, math.inf, False, math.inf, False, -math.inf,
                         "degenerate ellipticity: sigma^2 must be bounded below by a positive constant")
    acts = _action_probe(model, actions)
    Z, A = np.meshgrid(z, acts, indexing="ij")
    mu = np.asarray(model.drift(Z, A), dtype=float)
    ratio = float(np.max(np.abs(mu) * grid.h / s2[:, None]))
    lhs = grid.L_scheme * (1 + grid.kappa * grid.h) * grid.h
    L2 = grid.L_scheme ** 2
    q_pm = (np.minimum(-mu, mu) * grid.h + s2[:, None]) / (2 * L2)
    p_min = float(q_pm[1:-1].min())
    L_ok = grid.L_scheme ** 2 > float(s2.max())
    msgs = []
    if not L_ok:
        msgs.append("L_scheme must exceed sigma")
    if ratio > 1:
        msgs.append(f"negative transition probabilities: max |mu| h / sigma^2 = {ratio:.4g} > 1")
    if not lhs < s2min:
        msgs.append(f"L(1 + kappa h) h = {lhs:.4g} >= sigma^2 = {s2min:.4g}")
    return CFLReport(bool(lhs < s2min), lhs, bool(ratio <= 1), ratio, bool(L_ok), p_min,
                     "; ".join(msgs) or "ok")


# --------------------------------------------------------------------------
# transition rows and kernels
# --------------------------------------------------------------------------

def transition_row(grid: Grid, model, x, a):
    """(q_minus, q_stay, q_plus) at interior grid point x under action a."""
    grid.index_of(x, interior=True)
    mu = float(model.drift(x, a))
    s2 = float(model.sigma_sq(x))
    L2 = grid.L_scheme ** 2
    q_minus = (-mu * grid.h + s2) / (2 * L2)
    q_plus = (mu * grid.h + s2) / (2 * L2)
    q_stay = 1.0 - s2 / L2
    if q_minus < 0 or q_plus < 0 or q_stay < 0:
        raise NegativeProbabilityError(
            f"negative transition probability at x={x}, a={a}: "
            f"({q_minus:.4g}, {q_stay:.4g}, {q_plus:.4g})")
    return q_minus, q_stay, q_plus


def stencil_tables(grid: Grid, model, actions):
    """Vectorised (q_minus, q_stay, q_plus) for every grid point and every action.

    Shapes (n, m), (n,), (n, m) with m = len(actions). Boundary rows hold the
    stencil of their mirror (rows 2 and n-3); the boundary copy is applied by
    the caller.
    """
    z = grid.points
    acts = np.asarray(actions, dtype=float)
    Z, A = np.meshgrid(z, acts, indexing="ij")
    mu = np.asarray(model.drift(Z, A), dtype=float) * np.ones_like(Z)
    s2 = np.asarray(model.sigma_sq(z), dtype=float) * np.ones_like(z)
    L2 = grid.L_scheme ** 2
    q_minus = (-mu * grid.h + s2[:, None]) / (2 * L2)
    q_plus = (mu * grid.h + s2[:, None]) / (2 * L2)
    q_stay = 1.0 - s2 / L2
    return q_minus, q_stay, q_plus


@dataclass(frozen=True)
class TransitionKernel:
    grid: Grid
    matrix: sp.csr_matrix
    actions: np.ndarray

    def row(self, i):
        return self.matrix.getrow(i).toarray().ravel()


def build_kernel(grid: Grid, model, actions) -> TransitionKernel:
    """Kernel of the chain under per-state actions (length n, or a scalar).

    Interior rows are the central-difference stencil; row 0 copies row 2
    (columns 1, 2, 3) and row n-1 copies row n-3 (columns n-4, n-3, n-2).
    """
    n = grid.n
    acts = np.broadcast_to(np.asarray(actions, dtype=float), (n,)).copy()
    lo, hi = model.control_set
    if np.any(acts < lo - 1e-12) or np.any(acts > hi + 1e-12):
        raise ContractError("actions outside the control set")
    report = check_cfl(grid, model, np.unique(acts))
    if not report.L_exceeds_sigma or not report.nonnegative:
        # locate the offending row for the message
        for i in range(1, n - 1):
            transition_row(grid, model, grid.points[i], acts[i])
        raise CFLError(report.message)
    z = grid.points
    mu = np.asarray(model.drift(z, acts), dtype=float) * np.ones(n)
    s2 = np.asarray(model.sigma_sq(z), dtype=float) * np.ones(n)
    L2 = grid.L_scheme ** 2
    qm = (-mu * grid.h + s2) / (2 * L2)
    qp = (mu * grid.h + s2) / (2 * L2)
    qs = 1.0 - s2 / L2
    idx = np.arange(1, n - 1)
    rows = np.concatenate([idx, idx, idx, [0, 0, 0, n - 1, n - 1, n - 1]])
    cols = np.concatenate([idx - 1, idx, idx + 1, [1, 2, 3, n - 4, n - 3, n - 2]])
    vals = np.concatenate([qm[idx], qs[idx], qp[idx],
                           [qm[2], qs[2], qp[2], qm[n - 3], qs[n - 3], qp[n - 3]]])
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return TransitionKernel(grid, mat, acts)


def fd_apply(grid: Grid, model, w, x, a):
    """mu(x,a) * central first difference + sigma^2/2 * second difference at interior x."""
    i = grid.index_of(x, interior=True)
    w = np.asarray(w, dtype=float)
    h = grid.h
    mu = float(model.drift(grid.points[i], a))
    s2 = float(model.sigma_sq(grid.points[i]))
    return mu * (w[i + 1] - w[i - 1]) / (2 * h) + 0.5 * s2 * (w[i + 1] + w[i - 1] - 2 * w[i]) / h ** 2


def fd_table(grid: Grid, model, w, actions):
    """L^a_h w at every interior point for every action: shape (n-2, m)."""
    w = np.asarray(w, dtype=float)
    z = grid.points[1:-1]
    Z, A = np.meshgrid(z, np.asarray(actions, float), indexing="ij")
    mu = np.asarray(model.drift(Z, A), dtype=float)
    s2 = np.asarray(model.sigma_sq(z), dtype=float) * np.ones_like(z)
    d1 = (w[2:] - w[:-2]) / (2 * grid.h)
    d2 = (w[2:] + w[:-2] - 2 * w[1:-1]) / grid.h ** 2
    return mu * d1[:, None] + (0.5 * s2 * d2)[:, None]

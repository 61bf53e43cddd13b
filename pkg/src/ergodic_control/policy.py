"""Control maps built from a grid value function.

A grid value is interpolated (piecewise-linear or nearest-neighbour,
extended by its endpoint values), convolved with the polynomial bump
phi_n(u) = n * phi(n u), phi(u) = 35/32 (1 - u^2)^3, and the control is the
argmax over a finite action set of mu(x, a) * V'(x) + r(x, a).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numba
import numpy as np

from .errors import ContractError
from .grid import Grid
from .model import gauss_legendre

PHI_C = 35.0 / 32.0


@dataclass(frozen=True)
class Mollifier:
    """phi_n(u) = n * phi(n u) with phi(u) = c (1 - u^2)^3 on (-1, 1)."""

    n: float
    c: float = PHI_C

    @property
    def radius(self):
        return 1.0 / self.n

    def phi(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(np.abs(u) < 1, self.c * (1 - u * u) ** 3, 0.0)

    def dphi(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(np.abs(u) < 1, -6 * self.c * u * (1 - u * u) ** 2, 0.0)

    def d2phi(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(np.abs(u) < 1, -6 * self.c * (1 - u * u) * (1 - 5 * u * u), 0.0)

    def __call__(self, u):
        return self.n * self.phi(self.n * np.asarray(u, dtype=float))

    def d1(self, u):
        return self.n ** 2 * self.dphi(self.n * np.asarray(u, dtype=float))

    def d2(self, u):
        return self.n ** 3 * self.d2phi(self.n * np.asarray(u, dtype=float))


def make_mollifier(n) -> Mollifier:
    if not n >= 1:
        raise ContractError(f"smoothing level n must be >= 1, got {n}")
    return Mollifier(float(n))


# antiderivatives of phi and u*phi on [-1, 1]
@numba.njit(cache=True, inline="always")
def _F0(u):
    u2 = u * u
    return PHI_C * u * (1.0 - u2 + 0.6 * u2 * u2 - u2 * u2 * u2 / 7.0) + 0.5


@numba.njit(cache=True, inline="always")
def _F1(u):
    s = 1.0 - u * u
    return -(35.0 / 256.0) * s * s * s * s


@numba.njit(cache=True, inline="always")
def _phi(u):
    if u <= -1.0 or u >= 1.0:
        return 0.0
    s = 1.0 - u * u
    return PHI_C * s * s * s


@numba.njit(cache=True, inline="always")
def _dphi(u):
    if u <= -1.0 or u >= 1.0:
        return 0.0
    s = 1.0 - u * u
    return -6.0 * PHI_C * u * s * s


@numba.njit(cache=True, inline="always")
def _clip1(u):
    return -1.0 if u < -1.0 else (1.0 if u > 1.0 else u)


@numba.njit(cache=True, inline="always")
def _piece(x, n, ylo, yhi, A, beta, acc):
    """Add the contribution of w(y) = A + beta (y - x) on [ylo, yhi]."""
    ulo = _clip1(n * (ylo - x))
    uhi = _clip1(n * (yhi - x))
    if uhi <= ulo:
        return
    d0 = _F0(uhi) - _F0(ulo)
    acc[0] += A * d0 + beta / n * (_F1(uhi) - _F1(ulo))
    acc[1] += beta * d0
    acc[2] += beta * n * (_phi(n * (ylo - x)) - _phi(n * (yhi - x)))


@numba.njit(cache=True, nogil=True)
def _mollify(xq, z0, h, v, n, nearest, slope_l, slope_r, out):
    K = v.shape[0]
    zK = z0 + (K - 1) * h
    r = 1.0 / n
    acc = np.empty(3)
    inf = np.inf
    for q in range(xq.shape[0]):
        x = xq[q]
        acc[0] = 0.0
        acc[1] = 0.0
        acc[2] = 0.0
        if nearest:
            # constant pieces [m_{j-1}, m_j], m_j = z_j + h/2, jumps at the m_j
            jlo = min(K - 1, max(0, int(math.floor((x - r - z0) / h - 0.5))))
            jhi = max(0, min(K - 1, int(math.floor((x + r - z0) / h + 0.5)) + 1))
            for j in range(jlo, jhi + 1):
                a = -inf if j == 0 else z0 + (j - 0.5) * h
                b = inf if j == K - 1 else z0 + (j + 0.5) * h
                _piece(x, n, a, b, v[j], 0.0, acc)
                if j < K - 1:
                    u = n * (b - x)
                    J = v[j + 1] - v[j]
                    acc[1] += J * n * _phi(u)
                    acc[2] -= J * n * n * _dphi(u)
        else:
            # tails: v0 + slope_l (y - z0) on (-inf, z0], vK + slope_r (y - zK) on [zK, inf)
            if x - r < z0:
                _piece(x, n, -inf, z0, v[0] + slope_l * (x - z0), slope_l, acc)
            if x + r > zK:
                _piece(x, n, zK, inf, v[K - 1] + slope_r * (x - zK), slope_r, acc)
            jlo = max(0, int(math.floor((x - r - z0) / h)))
            jhi = min(K - 2, int(math.floor((x + r - z0) / h)))
            for j in range(jlo, jhi + 1):
                zj = z0 + j * h
                beta = (v[j + 1] - v[j]) / h
                _piece(x, n, zj, zj + h, v[j] + beta * (x - zj), beta, acc)
        out[q, 0] = acc[0]
        out[q, 1] = acc[1]
        out[q, 2] = acc[2]


@dataclass(frozen=True)
class MollifiedValue:
    """Mollification of an interpolated grid value (or of an analytic function).

    ``values`` are w - rho*dt on the uniform knots z0 + i*h. ``extension`` is
    "constant" (endpoint value outside the grid) or "linear" (end slopes
    continued; a test device). ``func`` replaces the interpolant by a callable.
    """

    z0: float
    h: float
    values: np.ndarray
    n: float
    interpolation: str = "linear"
    extension: str = "constant"
    func: Optional[Callable] = None

    def __post_init__(self):
        if self.interpolation not in ("linear", "nearest"):
            raise ContractError(f"unknown interpolation {self.interpolation!r}")
        if self.extension not in ("constant", "linear"):
            raise ContractError(f"unknown extension {self.extension!r}")
        if self.interpolation == "nearest" and self.extension == "linear":
            raise ContractError("linear extension requires linear interpolation")
        if not self.n >= 1:
            raise ContractError("smoothing level n must be >= 1")

    @classmethod
    def from_values(cls, grid: Grid, values, n, interpolation="linear", extension="constant"):
        v = np.array(values, dtype=float)
        if v.shape != (grid.n,):
            raise ContractError("values must have one entry per grid point")
        v.setflags(write=False)
        return cls(grid.offset, grid.h, v, float(n), interpolation, extension)

    @classmethod
    def from_solution(cls, sol, n, interpolation="linear"):
        """Mollify w - rho*dt of a diffusive solution."""
        return cls.from_values(sol.grid, sol.w - sol.rho * sol.grid.dt, n, interpolation)

    @classmethod
    def from_function(cls, func, n):
        return cls(0.0, 1.0, np.zeros(1), float(n), func=func)

    @property
    def knots(self):
        return self.z0 + self.h * np.arange(self.values.size)

    @property
    def mollifier(self):
        return Mollifier(self.n)

    def interpolant(self, y):
        """The function being smoothed."""
        y = np.asarray(y, dtype=float)
        if self.func is not None:
            return self.func(y)
        v = self.values
        if self.interpolation == "nearest":
            idx = np.clip(np.ceil((y - self.z0) / self.h - 0.5).astype(np.int64), 0, v.size - 1)
            return v[idx]
        out = np.interp(y, self.knots, v)
        if self.extension == "linear":
            sl, sr = (v[1] - v[0]) / self.h, (v[-1] - v[-2]) / self.h
            zK = self.z0 + (v.size - 1) * self.h
            out = np.where(y < self.z0, v[0] + sl * (y - self.z0), out)
            out = np.where(y > zK, v[-1] + sr * (y - zK), out)
        return out

    def derivs(self, x):
        """(V, V', V'') at x (vectorised, exact piecewise-polynomial convolution)."""
        x = np.asarray(x, dtype=float)
        if self.func is not None:
            res = [mollified_derivs(self, xi) for xi in x.ravel()]
            out = np.array(res).reshape(x.shape + (3,))
            return out[..., 0], out[..., 1], out[..., 2]
        xf = np.ascontiguousarray(x.ravel())
        out = np.empty((xf.size, 3))
        v = np.ascontiguousarray(self.values)
        sl = sr = 0.0
        if self.extension == "linear":
            sl, sr = (v[1] - v[0]) / self.h, (v[-1] - v[-2]) / self.h
        _mollify(xf, self.z0, self.h, v, self.n, self.interpolation == "nearest", sl, sr, out)
        out = out.reshape(x.shape + (3,))
        return out[..., 0], out[..., 1], out[..., 2]

    def __call__(self, x):
        return self.derivs(x)[0]


def mollified_derivs(mv: MollifiedValue, x: float, order: int = 32):
    """(V, V', V'') at x by Gauss-Legendre quadrature with the derivatives on phi_n.

    The window (x - 1/n, x + 1/n) is split at the interpolant's breakpoints so
    that each panel integrates a polynomial exactly.
    """
    x = float(x)
    r = 1.0 / mv.n
    lo, hi = x - r, x + r
    cuts = [lo, hi]
    if mv.func is None:
        k = mv.knots
        if mv.interpolation == "nearest":
            k = k[:-1] + 0.5 * mv.h
        inside = k[(k > lo) & (k < hi)]
        cuts.extend(inside.tolist())
    cuts = np.unique(np.array(cuts))
    nodes, weights = gauss_legendre(order)
    a, b = cuts[:-1], cuts[1:]
    y = (0.5 * (b - a))[:, None] * nodes[None, :] + (0.5 * (a + b))[:, None]
    wq = (0.5 * (b - a))[:, None] * weights[None, :]
    f = mv.interpolant(y) * wq
    m = mv.mollifier
    u = y - x
    return float(np.sum(f * m(u))), float(-np.sum(f * m.d1(u))), float(np.sum(f * m.d2(u)))


# --------------------------------------------------------------------------
# control extraction
# --------------------------------------------------------------------------

def _scores(mv, model, actions, x, reward_table=None):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _, d1, _ = mv.derivs(x)
    X, A = np.meshgrid(x, actions, indexing="ij")
    mu = np.asarray(model.drift(X, A), dtype=float)
    r = np.asarray(model.reward(X, A), dtype=float) if reward_table is None else reward_table
    return mu * d1[:, None] + r


def extract_control_indices(mv: MollifiedValue, model, control_grid, xs, reward_table=None):
    """Index of argmax_a [mu(x,a) V'(x) + r(x,a)] at each x (first maximiser on ties)."""
    return np.argmax(_scores(mv, model, control_grid.points, xs, reward_table), axis=1)


def extract_control_smooth(mv: MollifiedValue, model, control_grid, x):
    """Control at x; the sigma^2 V''/2 term does not depend on a and is omitted."""
    acts = control_grid.points
    idx = extract_control_indices(mv, model, control_grid, x)
    return float(acts[idx[0]]) if np.ndim(x) == 0 else acts[idx]


@dataclass(frozen=True)
class ProjectedPolicy:
    """x -> grid_actions[nearest grid index], clamped at the ends, midpoint ties to the left."""

    grid: Grid
    actions: np.ndarray
    meta: Optional[dict] = None
    kind: str = "projected"

    def __call__(self, x):
        a = self.actions[self.grid.project(x)]
        return float(a) if np.ndim(x) == 0 else a

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            for k, v in sorted((self.meta or {}).items()):
                fh.write(f"# {k}={v}\n")
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["z", "action"])
            for z, a in zip(self.grid.points, self.actions):
                wr.writerow([repr(float(z)), repr(float(a))])


def project_policy(grid_policy, grid: Grid, meta=None) -> ProjectedPolicy:
    acts = np.array(grid_policy, dtype=float)
    if acts.shape != (grid.n,):
        raise ContractError(f"policy needs {grid.n} actions, got shape {acts.shape}")
    acts.setflags(write=False)
    return ProjectedPolicy(grid, acts, meta)


@dataclass(frozen=True)
class MollifiedPolicy:
    """x -> extract_control_smooth(mv, model, control_grid, x)."""

    mv: MollifiedValue
    model: object
    control_grid: object
    kind: str = "mollified"

    def __call__(self, x):
        return extract_control_smooth(self.mv, self.model, self.control_grid, x)

    def on_grid(self, grid: Grid, meta=None) -> ProjectedPolicy:
        """The grid-projected version: smoothed argmax at the grid points, then nearest-point lookup."""
        acts = self.control_grid.points[extract_control_indices(self.mv, self.model, self.control_grid,
                                                                grid.points)]
        info = {"n": self.mv.n, "Gamma": self.control_grid.Gamma, "interpolation": self.mv.interpolation}
        info.update(meta or {})
        return project_policy(acts, grid, info)


def extracted_policy(sol, model, control_grid, n=64, interpolation="linear") -> ProjectedPolicy:
    """Smoothed argmax of a diffusive solution evaluated on its grid and projected."""
    mv = MollifiedValue.from_solution(sol, n, interpolation)
    return MollifiedPolicy(mv, model, control_grid).on_grid(sol.grid)

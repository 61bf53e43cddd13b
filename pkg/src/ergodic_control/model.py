"""Noise law, pure-jump and limit-diffusion dynamics, and the auction reward.

The built-in ``auction-v1`` preset is the repeated second-price auction with a
mean-reverting reserve price::

    b_eps(x, a, e) = eps * e1 * (a * e2 - x) + sqrt(eps) * e1 * e3

with intensity ``1 / eps`` and reward ``E[(e2 - x v e4) 1{a e2 >= x v e4}]``.
User models replace ``b1``, ``b2`` and the reward by callables.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import ndtri

from .errors import ConfigError, ContractError, QuadratureError, UnsupportedMarginalError

ArrayLike = Union[float, np.ndarray]


# --------------------------------------------------------------------------
# marginals
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Uniform:
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ConfigError(f"uniform({self.lo}, {self.hi}): need hi > lo")

    def sample(self, rng, size):
        return rng.uniform(self.lo, self.hi, size)

    def mean(self):
        return 0.5 * (self.lo + self.hi)

    def second_moment(self):
        return (self.hi ** 3 - self.lo ** 3) / (3.0 * (self.hi - self.lo))

    def __str__(self):
        return f"uniform({self.lo:g}, {self.hi:g})"


@dataclass(frozen=True)
class LogNormal:
    """exp(m + s Z) with Z standard normal."""

    m: float = 0.0
    s: float = 0.5

    def __post_init__(self):
        if not self.s > 0:
            raise ConfigError(f"lognormal({self.m}, {self.s}): need s > 0")

    def sample(self, rng, size):
        return rng.lognormal(self.m, self.s, size)

    def mean(self):
        return math.exp(self.m + 0.5 * self.s ** 2)

    def second_moment(self):
        return math.exp(2.0 * self.m + 2.0 * self.s ** 2)

    def __str__(self):
        return f"lognormal({self.m:g}, {self.s:g})"


@dataclass(frozen=True)
class Normal:
    """Normal with mean ``m`` and standard deviation ``s``."""

    m: float = 0.0
    s: float = 1.0

    def __post_init__(self):
        if not self.s >= 0:
            raise ConfigError(f"normal({self.m}, {self.s}): need s >= 0")

    def sample(self, rng, size):
        return rng.normal(self.m, self.s, size)

    def mean(self):
        return self.m

    def second_moment(self):
        return self.m ** 2 + self.s ** 2

    def __str__(self):
        return f"normal({self.m:g}, {self.s:g})"


@dataclass(frozen=True)
class PointMass:
    v: float = 0.0

    def sample(self, rng, size):
        # consume nothing from the stream: a degenerate coordinate is not random
        return np.full(size, float(self.v))

    def mean(self):
        return float(self.v)

    def second_moment(self):
        return float(self.v) ** 2

    def __str__(self):
        return f"point_mass({self.v:g})"


@dataclass(frozen=True)
class TwoPoint:
    """v1 with probability p, v2 otherwise."""

    v1: float
    p: float
    v2: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"two_point: probability {self.p} outside [0, 1]")

    def sample(self, rng, size):
        u = rng.random(size)
        return np.where(u < self.p, float(self.v1), float(self.v2))

    def mean(self):
        return self.p * self.v1 + (1.0 - self.p) * self.v2

    def second_moment(self):
        return self.p * self.v1 ** 2 + (1.0 - self.p) * self.v2 ** 2

    def __str__(self):
        return f"two_point({self.v1:g}, {self.p:g}, {self.v2:g})"


Marginal = Union[Uniform, LogNormal, Normal, PointMass, TwoPoint]

_MARGINALS = {
    "uniform": (Uniform, 2),
    "lognormal": (LogNormal, 2),
    "normal": (Normal, 2),
    "point_mass": (PointMass, 1),
    "two_point": (TwoPoint, 3),
}


def parse_marginal(text: str) -> Marginal:
    """Parse ``"uniform(0, 1)"``-style marginal specifications."""
    m = re.fullmatch(r"\s*([a-z_]+)\s*\(([^()]*)\)\s*", text)
    if not m:
        raise ConfigError(f"cannot parse marginal {text!r}")
    name, args = m.group(1), m.group(2)
    if name not in _MARGINALS:
        raise ConfigError(f"unknown marginal family {name!r}")
    cls, nargs = _MARGINALS[name]
    try:
        values = [float(v) for v in args.split(",")] if args.strip() else []
    except ValueError:
        raise ConfigError(f"non-numeric argument in marginal {text!r}") from None
    if len(values) != nargs:
        raise ConfigError(f"{name} takes {nargs} arguments, got {len(values)}")
    return cls(*values)


# --------------------------------------------------------------------------
# noise law
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseLaw:
    """Product law of e = (e1, e2, e3, e4).

    e1: seller aggressivity in [0, 1]; e2: retail value; e3: seller
    randomisation (mean zero); e4: competing bid.
    """

    e1: Marginal = field(default_factory=lambda: Uniform(0.0, 1.0))
    e2: Marginal = field(default_factory=lambda: LogNormal(0.0, 0.5))
    e3: Marginal = field(default_factory=lambda: Normal(0.0, 0.5))
    e4: Marginal = field(default_factory=lambda: Uniform(0.0, 1.0))

    def __post_init__(self):
        if not self.e1.mean() > 0:
            raise ConfigError("E[e1] must be positive (mean reversion)")
        # independence gives E[e1 e3] = E[e1] E[e3]
        if abs(self.e1.mean() * self.e3.mean()) > 1e-12:
            raise ConfigError("E[e1 e3] must vanish: e3 needs mean zero")

    @property
    def marginals(self):
        return (self.e1, self.e2, self.e3, self.e4)

    def sample(self, rng, size):
        """Draw ``size`` independent 4-vectors, one coordinate stream after another."""
        out = np.empty((size, 4))
        for k, marg in enumerate(self.marginals):
            out[:, k] = marg.sample(rng, size)
        return out


def sample_noise(law: NoiseLaw, stream, size=None):
    """One draw (shape (4,)) or ``size`` draws (shape (size, 4))."""
    if size is None:
        return law.sample(stream, 1)[0]
    return law.sample(stream, size)


def noise_moments(law: NoiseLaw):
    """Closed-form (n1, n2, sigma_bar_sq) = (E e1, E[e1 e2], E[(e1 e3)^2])."""
    for name, marg in zip(("e1", "e2", "e3", "e4"), law.marginals):
        if not isinstance(marg, (Uniform, LogNormal, Normal, PointMass, TwoPoint)):
            raise UnsupportedMarginalError(f"unsupported marginal for {name}: {marg!r}")
    n1 = law.e1.mean()
    n2 = n1 * law.e2.mean()
    sigma_bar_sq = law.e1.second_moment() * law.e3.second_moment()
    return n1, n2, sigma_bar_sq


# --------------------------------------------------------------------------
# auction reward
# --------------------------------------------------------------------------

_GL_CACHE: dict = {}


def gauss_legendre(order: int):
    if order not in _GL_CACHE:
        _GL_CACHE[order] = np.polynomial.legendre.leggauss(order)
    return _GL_CACHE[order]


def _inner_competition(x, y, v, e4):
    """E over e4 of (v - x v e4) 1{y >= x v e4}, with y the bid a*v."""
    if isinstance(e4, Uniform):
        lo, hi = e4.lo, e4.hi
        xc = np.clip(x, lo, hi)
        m = np.clip(y, lo, hi)
        val = (xc - lo) * (v - x) + (m - xc) * (v - 0.5 * (m + xc))
        return np.where(y >= x, val / (hi - lo), 0.0)
    if isinstance(e4, PointMass):
        price = np.maximum(x, e4.v)
        return np.where(y >= price, v - price, 0.0)
    raise UnsupportedMarginalError(f"reward needs uniform or point-mass e4, got {e4}")


def _e4_kinks(e4):
    if isinstance(e4, Uniform):
        return (e4.lo, e4.hi)
    if isinstance(e4, PointMass):
        return (e4.v,)
    raise UnsupportedMarginalError(f"reward needs uniform or point-mass e4, got {e4}")


class AuctionReward:
    """Expected second-price profit r(x, a) for reserve price x and shading a.

    The e4 integral is done in closed form; the e2 integral by Gauss-Legendre
    on pieces split where the bid crosses the reserve and the e4 support
    edges, doubling the order until the relative change is below ``rtol``.
    A lognormal e2 is integrated in its Gaussian coordinate, truncated at the
    ``1 - tail`` quantiles.
    """

    def __init__(self, law: NoiseLaw, rtol=1e-8, atol=1e-14, tail=1e-10,
                 min_order=16, max_order=256, chunk=20000):
        if not isinstance(law.e2, (LogNormal, Uniform, PointMass, TwoPoint)):
            raise UnsupportedMarginalError(f"reward does not support e2 = {law.e2}")
        _e4_kinks(law.e4)
        self.law = law
        self.rtol = rtol
        self.atol = atol
        self.tail = tail
        self.min_order = min_order
        self.max_order = max_order
        self.chunk = chunk
        self._zmax = float(-ndtri(tail))

    def __call__(self, x: ArrayLike, a: ArrayLike) -> ArrayLike:
        x, a = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(a, dtype=float))
        shape = x.shape
        xf, af = x.ravel(), a.ravel()
        out = np.empty(xf.shape)
        for start in range(0, xf.size, self.chunk):
            sl = slice(start, start + self.chunk)
            out[sl] = self._integrate(xf[sl], af[sl])
        return out.reshape(shape) if shape else float(out[0])

    def _integrate(self, x, a):
        e2, e4 = self.law.e2, self.law.e4
        if isinstance(e2, PointMass):
            return _inner_competition(x, a * e2.v, e2.v, e4)
        if isinstance(e2, TwoPoint):
            return (e2.p * _inner_competition(x, a * e2.v1, e2.v1, e4)
                    + (1 - e2.p) * _inner_competition(x, a * e2.v2, e2.v2, e4))

        # breakpoints in the e2 coordinate: bid a*v equals x or an e4 kink
        thresholds = [x] + [np.full_like(x, k) for k in _e4_kinks(e4)]
        with np.errstate(divide="ignore", invalid="ignore"):
            vb = np.stack([np.where((t > 0) & (a > 0), t / np.where(a > 0, a, 1.0), np.nan)
                           for t in thresholds], axis=1)
        if isinstance(e2, LogNormal):
            lo, hi = -self._zmax, self._zmax
            with np.errstate(divide="ignore", invalid="ignore"):
                cut = (np.log(vb) - e2.m) / e2.s
        else:
            lo, hi = e2.lo, e2.hi
            cut = vb
        cut = np.clip(np.where(np.isnan(cut), lo, cut), lo, hi)
        cut.sort(axis=1)
        edges = np.concatenate([np.full((x.size, 1), lo), cut, np.full((x.size, 1), hi)], axis=1)

        def integrate(order, idx):
            t, wts = gauss_legendre(order)
            ed = edges[idx]
            mid = 0.5 * (ed[:, 1:] + ed[:, :-1])
            half = 0.5 * (ed[:, 1:] - ed[:, :-1])
            u = mid[..., None] + half[..., None] * t
            if isinstance(e2, LogNormal):
                v = np.exp(e2.m + e2.s * u)
                dens = np.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)
            else:
                v = u
                dens = 1.0 / (e2.hi - e2.lo)
            xi = x[idx][:, None, None]
            f = _inner_competition(xi, a[idx][:, None, None] * v, v, e4) * dens
            return np.einsum("ipk,k,ip->i", f, wts, half)

        result = np.empty(x.size)
        todo = np.arange(x.size)
        order = self.min_order
        coarse = integrate(order, todo)
        while todo.size:
            if order > self.max_order:
                err = np.max(np.abs(fine - coarse))
                raise QuadratureError("reward quadrature did not converge", err)
            fine = integrate(2 * order, todo)
            err = np.abs(fine - coarse)
            ok = err <= np.maximum(self.rtol * np.abs(fine), self.atol)
            result[todo[ok]] = fine[ok]
            todo = todo[~ok]
            coarse = fine[~ok]
            fine = fine[~ok]
            order *= 2
        return result


def expected_reward(model, x, a, rtol=None):
    """r(x, a) for a jump or diffusion model; checks a in A."""
    check_action(model.control_set, a)
    reward = model.reward
    if rtol is not None and isinstance(reward, AuctionReward):
        reward = AuctionReward(reward.law, rtol=rtol)
    return reward(x, a)


class TabulatedReward:
    """Linear interpolation of a reward on an x-grid, per action of a finite set.

    Queries outside the table, or with an action not in the set, fall back to
    the exact reward.
    """

    def __init__(self, reward, actions, x_lo=-2.0, x_hi=6.0, dx=1e-3):
        self.reward = reward
        self.actions = np.asarray(actions, dtype=float)
        n = int(round((x_hi - x_lo) / dx)) + 1
        self.xs = x_lo + dx * np.arange(n)
        self.x_lo, self.dx = x_lo, dx
        X, A = np.meshgrid(self.xs, self.actions, indexing="ij")
        self.table = reward(X, A)

    def __call__(self, x, a):
        x, a = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(a, dtype=float))
        shape = x.shape
        x, a = x.ravel(), a.ravel()
        j = np.searchsorted(self.actions, a)
        j = np.clip(j, 0, self.actions.size - 1)
        known = self.actions[j] == a
        pos = (x - self.x_lo) / self.dx
        i = np.floor(pos).astype(np.int64)
        inside = known & (i >= 0) & (i < self.xs.size - 1)
        out = np.empty(x.shape)
        ii, jj = i[inside], j[inside]
        frac = pos[inside] - ii
        out[inside] = (1 - frac) * self.table[ii, jj] + frac * self.table[ii + 1, jj]
        if not inside.all():
            out[~inside] = self.reward(x[~inside], a[~inside])
        return out.reshape(shape) if shape else float(out[0])


# --------------------------------------------------------------------------
# dynamics
# --------------------------------------------------------------------------

def check_action(control_set, a):
    lo, hi = control_set
    arr = np.asarray(a, dtype=float)
    if np.any(arr < lo - 1e-12) or np.any(arr > hi + 1e-12) or np.any(np.isnan(arr)):
        raise ContractError(f"action {a} outside control set [{lo}, {hi}]")


def auction_b1(x, a, e):
    e = np.asarray(e)
    return e[..., 0] * (a * e[..., 1] - x)


def auction_b2(x, e):
    e = np.asarray(e)
    return e[..., 0] * e[..., 2]


@dataclass
class JumpModel:
    """Pure-jump dynamics with intensity 1/eps and jumps eps*b1 + sqrt(eps)*b2."""

    noise: NoiseLaw
    epsilon: float
    reward: Callable
    control_set: tuple = (0.0, 1.0)
    b1: Callable = auction_b1
    b2: Callable = auction_b2

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")

    @property
    def intensity(self):
        return 1.0 / self.epsilon

    def increment(self, x, a, e):
        """Vectorised b_eps(x, a, e); no control-set check."""
        eps = self.epsilon
        return eps * self.b1(x, a, e) + math.sqrt(eps) * self.b2(x, e)

    def with_epsilon(self, epsilon):
        return JumpModel(self.noise, epsilon, self.reward, self.control_set, self.b1, self.b2)

    @property
    def is_auction(self):
        return self.b1 is auction_b1 and self.b2 is auction_b2


def jump_increment(model: JumpModel, x, a, e):
    check_action(model.control_set, a)
    return model.increment(x, a, e)


@dataclass
class DiffusionModel:
    """Limit diffusion dX = mu(X, a) dt + sigma dW with the shared reward.

    ``drift`` is a vectorised callable mu(x, a); ``sigma`` is a constant or a
    vectorised callable of x. For the auction family ``C_bar`` and
    ``mean_reversion`` record mu(x, a) = mean_reversion * (a * C_bar - x).
    """

    drift: Callable
    sigma: Union[float, Callable]
    reward: Callable
    control_set: tuple = (0.0, 1.0)
    C_bar: Optional[float] = None
    mean_reversion: Optional[float] = None

    def sigma_sq(self, x):
        if callable(self.sigma):
            return np.asarray(self.sigma(x), dtype=float) ** 2
        return np.full(np.shape(x), float(self.sigma) ** 2) if np.ndim(x) else float(self.sigma) ** 2

    def sigma_max(self, xs):
        return float(np.sqrt(np.max(self.sigma_sq(np.asarray(xs, dtype=float)))))


def drift_and_vol(model: DiffusionModel, x, a):
    check_action(model.control_set, a)
    mu = model.drift(x, a)
    sigma = np.sqrt(model.sigma_sq(x))
    return mu, sigma


class _AuctionDrift:
    def __init__(self, n1, C_bar):
        self.n1, self.C_bar = n1, C_bar

    def __call__(self, x, a):
        return self.n1 * (np.asarray(a) * self.C_bar - np.asarray(x))


def diffusion_limit(jump_model: JumpModel, num_mc=100_000, seed=0) -> DiffusionModel:
    """Limit diffusion of a jump model.

    Closed form for the auction dynamics; otherwise mu and sigma are the
    empirical means of b1 and b2**2 over a fixed sample of ``num_mc`` draws.
    """
    if jump_model.is_auction:
        n1, n2, s2 = noise_moments(jump_model.noise)
        return DiffusionModel(_AuctionDrift(n1, n2 / n1), math.sqrt(s2), jump_model.reward,
                              jump_model.control_set, C_bar=n2 / n1, mean_reversion=n1)
    sample = jump_model.noise.sample(np.random.default_rng(seed), num_mc)
    b1, b2 = jump_model.b1, jump_model.b2

    def drift(x, a):
        x, a = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(a, dtype=float))
        out = np.array([np.mean(b1(xi, ai, sample)) for xi, ai in zip(x.ravel(), a.ravel())])
        return out.reshape(x.shape) if x.shape else float(out[0])

    def sigma(x):
        x = np.asarray(x, dtype=float)
        out = np.array([math.sqrt(np.mean(b2(xi, sample) ** 2)) for xi in x.ravel()])
        return out.reshape(x.shape) if x.shape else float(out[0])

    return DiffusionModel(drift, sigma, jump_model.reward, jump_model.control_set)


def reward_bound(reward, xs, actions):
    """sup |r| over a grid scan of xs x actions."""
    X, A = np.meshgrid(np.asarray(xs, float), np.asarray(actions, float), indexing="ij")
    return float(np.max(np.abs(reward(X, A))))


# --------------------------------------------------------------------------
# presets
# --------------------------------------------------------------------------

def auction_law(sigma0=0.5, mu1=0.0, sigma1=0.5):
    return NoiseLaw(Uniform(0.0, 1.0), LogNormal(mu1, sigma1), Normal(0.0, sigma0), Uniform(0.0, 1.0))


def auction_v1(epsilon=0.5, sigma0=0.5, mu1=0.0, sigma1=0.5, law=None, reward_rtol=1e-8):
    """Jump model of the repeated-auction benchmark."""
    law = law if law is not None else auction_law(sigma0, mu1, sigma1)
    return JumpModel(law, epsilon, AuctionReward(law, rtol=reward_rtol), (0.0, 1.0))


PRESETS = {"auction-v1": auction_v1}


def model_preset(name, **params):
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; known: {sorted(PRESETS)}") from None
    return factory(**params)

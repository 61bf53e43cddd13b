"""INI experiment configuration with strict keys and line-numbered errors.

Example::

    [model]
    preset = auction-v1

    [experiment]
    epsilon = 0.5, 0.25

    [diffusive]
    h = 0.02
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .model import PRESETS, parse_marginal


def _floats(text):
    body = text.strip()
    if body.startswith("[") and body.endswith("]"):
        body = body[1:-1]
    parts = [p for p in re.split(r"[,\s]+", body) if p]
    if not parts:
        raise ValueError("empty list")
    return tuple(float(p) for p in parts)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def conv(text):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {t!r}")
        return t
    return conv


def _int(text):
    v = float(text)
    if v != int(v):
        raise ValueError(f"not an integer: {text!r}")
    return int(v)


def _opt_float(text):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


@dataclass(frozen=True)
class ModelSpec:
    preset: str = "auction-v1"
    params: tuple = ()          # (name, value) pairs forwarded to the preset
    law: tuple = ()             # (coordinate, marginal text) overrides

    def jump_model(self, epsilon):
        from .model import NoiseLaw, auction_law, model_preset
        params = dict(self.params)
        if self.law:
            base = auction_law(params.pop("sigma0", 0.5), params.pop("mu1", 0.0), params.pop("sigma1", 0.5))
            coords = {f"e{i + 1}": m for i, m in enumerate(base.marginals)}
            coords.update({k: parse_marginal(v) for k, v in self.law})
            params["law"] = NoiseLaw(**coords)
        return model_preset(self.preset, epsilon=epsilon, **params)


@dataclass(frozen=True)
class DiffusiveSpec:
    enabled: bool = True
    h: tuple = (0.02,)
    schedule: str = "fixed-extent"     # fixed-extent | fixed-domain | paper
    extent: float = 20.0
    lower: Optional[float] = None
    upper: Optional[float] = None
    L_scheme: Optional[float] = None
    tol: float = 1e-9
    max_iter: int = 10 ** 6


@dataclass(frozen=True)
class JumpSpec:
    enabled: bool = True
    schedule: str = "paper"            # paper | fixed
    h: Optional[float] = None
    kappa: Optional[int] = None
    N: Optional[int] = None
    offset: Optional[float] = None
    sampling: str = "common"
    tol: float = 1e-9
    max_iter: int = 200
    solver: str = "auto"


@dataclass(frozen=True)
class PolicySpec:
    enabled: bool = True
    n: float = 64.0
    interpolation: str = "linear"


@dataclass(frozen=True)
class SimSpec:
    T: float = 1000.0
    paths: int = 1000
    burn_in: float = 0.0
    x0: float = 0.0


@dataclass(frozen=True)
class Plan:
    experiment_id: str = "experiment"
    epsilons: tuple = (0.5,)
    Gamma: int = 100
    seed: int = 0
    model: ModelSpec = field(default_factory=ModelSpec)
    diffusive: DiffusiveSpec = field(default_factory=DiffusiveSpec)
    jump: JumpSpec = field(default_factory=JumpSpec)
    policy: PolicySpec = field(default_factory=PolicySpec)
    sim: SimSpec = field(default_factory=SimSpec)
    threads: int = 1
    fail_fast: bool = False
    out_dir: str = "out"

    def with_overrides(self, seed=None, epsilons=None, out_dir=None, threads=None, fail_fast=None):
        kw = {}
        if seed is not None:
            kw["seed"] = int(seed)
        if epsilons is not None:
            kw["epsilons"] = tuple(epsilons)
            _check_epsilons(kw["epsilons"])
        if out_dir is not None:
            kw["out_dir"] = str(out_dir)
        if threads is not None:
            kw["threads"] = int(threads)
        if fail_fast:
            kw["fail_fast"] = True
        return replace(self, **kw)


def _check_epsilons(eps, lineno=None):
    for e in eps:
        if not 0.0 < e < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {e}", lineno)


def _positive(v):
    if not v > 0:
        raise ValueError(f"must be positive, got {v}")


def _positive_all(vs):
    for v in vs:
        _positive(v)


def _nonneg_lt1(v):
    if not 0.0 <= v < 1.0:
        raise ValueError(f"must lie in [0, 1), got {v}")


def _at_least(lo):
    def check(v):
        if v < lo:
            raise ValueError(f"must be >= {lo}, got {v}")
    return check


# section -> key -> (target attribute, converter, validator)
_SCHEMA = {
    "model": {
        "preset": ("preset", _choice(*sorted(PRESETS)), None),
        "sigma0": ("sigma0", float, _positive),
        "mu1": ("mu1", float, None),
        "sigma1": ("sigma1", float, _positive),
        "reward_rtol": ("reward_rtol", float, _positive),
        "e1": ("e1", str, None), "e2": ("e2", str, None),
        "e3": ("e3", str, None), "e4": ("e4", str, None),
    },
    "experiment": {
        "id": ("experiment_id", str, None),
        "epsilon": ("epsilons", _floats, None),
        "gamma": ("Gamma", _int, _at_least(0)),
        "seed": ("seed", _int, _at_least(0)),
    },
    "diffusive": {
        "enabled": ("enabled", _bool, None),
        "h": ("h", _floats, _positive_all),
        "schedule": ("schedule", _choice("fixed-extent", "fixed-domain", "paper"), None),
        "extent": ("extent", float, _positive),
        "lower": ("lower", float, None),
        "upper": ("upper", float, None),
        "l_scheme": ("L_scheme", _opt_float, None),
        "tol": ("tol", float, _positive),
        "max_iter": ("max_iter", _int, _at_least(1)),
    },
    "jump": {
        "enabled": ("enabled", _bool, None),
        "schedule": ("schedule", _choice("paper", "fixed"), None),
        "h": ("h", float, _positive),
        "kappa": ("kappa", _int, _at_least(3)),
        "n": ("N", _int, _at_least(1)),
        "offset": ("offset", float, None),
        "sampling": ("sampling", _choice("common", "independent"), None),
        "tol": ("tol", float, _positive),
        "max_iter": ("max_iter", _int, _at_least(1)),
        "solver": ("solver", _choice("auto", "dense", "splu", "bicgstab"), None),
    },
    "policy": {
        "enabled": ("enabled", _bool, None),
        "n": ("n", float, _at_least(1)),
        "interpolation": ("interpolation", _choice("linear", "nearest"), None),
    },
    "sim": {
        "t": ("T", float, _positive),
        "paths": ("paths", _int, _at_least(1)),
        "burn_in": ("burn_in", float, _nonneg_lt1),
        "x0": ("x0", float, None),
    },
    "solver": {
        "threads": ("threads", _int, _at_least(1)),
        "fail_fast": ("fail_fast", _bool, None),
    },
    "output": {
        "dir": ("out_dir", str, None),
    },
}

_LINE_RE = re.compile(r"^\s*([^=:\s\[#;][^=:]*?)\s*[=:]")
_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")


def _line_numbers(text):
    where = {}
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip().lower()
            where.setdefault((section, None), no)
            continue
        m = _LINE_RE.match(line)
        if m and section is not None:
            where[(section, m.group(1).strip().lower())] = no
    return where


def parse_config_text(text, source="<string>") -> Plan:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any [section]", exc.lineno) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(str(exc).split(":", 1)[-1].strip(), exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", lineno) from None
    where = _line_numbers(text)
    values = {s: {} for s in _SCHEMA}
    for section in cp.sections():
        sec = section.lower()
        if sec not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]", where.get((sec, None)))
        for key, raw in cp.items(section):
            lineno = where.get((sec, key))
            if key not in _SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
            attr, conv, check = _SCHEMA[sec][key]
            try:
                val = conv(raw)
                if check is not None:
                    check(val)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}", lineno) from None
            values[sec][attr] = (val, lineno)

    def take(sec):
        return {k: v for k, (v, _) in values[sec].items()}

    m = take("model")
    law = tuple((k, m.pop(k)) for k in ("e1", "e2", "e3", "e4") if k in m)
    for k, v in law:
        try:
            parse_marginal(v)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"[model] {k}: {exc}", values["model"][k][1]) from None
    preset = m.pop("preset", "auction-v1")
    model = ModelSpec(preset, tuple(sorted(m.items())), law)

    exp = take("experiment")
    if "epsilons" in exp:
        _check_epsilons(exp["epsilons"], values["experiment"]["epsilons"][1])
    diff = DiffusiveSpec(**take("diffusive"))
    if diff.schedule == "fixed-domain":
        if diff.lower is None or diff.upper is None:
            raise ConfigError("fixed-domain schedule needs both lower and upper",
                              where.get(("diffusive", "schedule")))
        if not diff.lower < 0 < diff.upper:
            raise ConfigError("fixed-domain needs lower < 0 < upper", where.get(("diffusive", "lower")))
    jump = JumpSpec(**take("jump"))
    if jump.schedule == "fixed" and (jump.h is None or jump.kappa is None or jump.N is None):
        raise ConfigError("fixed jump schedule needs h, kappa and n", where.get(("jump", "schedule")))
    solver = take("solver")
    out = take("output")
    return Plan(model=model, diffusive=diff, jump=jump, policy=PolicySpec(**take("policy")),
                sim=SimSpec(**take("sim")), **exp, **solver, **out)


def parse_config(path) -> Plan:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"configuration file not found: {p}")
    return parse_config_text(p.read_text(), str(p))


def benchmark_plan(**overrides) -> Plan:
    """Settings of the published benchmark: four epsilons, Gamma = 100, T = 1000, 1000 paths."""
    plan = Plan(experiment_id="benchmark", epsilons=(0.5, 0.25, 0.125, 0.0625), Gamma=100,
                policy=PolicySpec(n=64.0), sim=SimSpec(T=1000.0, paths=1000))
    return replace(plan, **overrides)


def diffusive_grid(spec: DiffusiveSpec, h, sigma):
    """Grid for one diffusive mesh size under the configured schedule."""
    from .grid import default_L_scheme, kappa_for_extent, kappa_quarter_root, make_grid
    L = spec.L_scheme if spec.L_scheme is not None else default_L_scheme(sigma)
    if spec.schedule == "paper":
        return make_grid(kappa_quarter_root(h), h, None, L)
    if spec.schedule == "fixed-extent":
        return make_grid(kappa_for_extent(spec.extent, h), h, None, L)
    # lattice points k*h inside [lower, upper], trimmed to an odd count
    i_lo = math.ceil(spec.lower / h - 1e-9)
    i_hi = math.floor(spec.upper / h + 1e-9)
    if (i_hi - i_lo) % 2:
        i_hi -= 1
    return make_grid((i_hi - i_lo) // 2, h, i_lo * h, L)

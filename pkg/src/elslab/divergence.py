"""Grid quadrature for the divergence identities of smoothed adversarial
objectives.

Densities live on a uniform 1-D grid and are integrated with the midpoint
rule.  ``0 * log 0`` is taken as 0 and cells whose total density is below
``TINY`` are dropped from every integral.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import xlogy

TINY = 1e-300
MASS_TOL = 1e-8
LOG2 = math.log(2.0)


class GridMismatch(ValueError):
    pass


class SupportWarning(RuntimeWarning):
    """p has mass where q vanishes; the divergence is reported as +inf."""


@dataclass(frozen=True)
class GridDensity:
    lo: float
    hi: float
    n: int
    values: np.ndarray

    def __post_init__(self):
        if self.hi <= self.lo or self.n < 1:
            raise ValueError("grid needs hi > lo and n >= 1")
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.n,):
            raise ValueError(f"expected {self.n} values, got shape {v.shape}")
        if np.any(v < 0):
            raise ValueError("density values must be non-negative")
        object.__setattr__(self, "values", v)

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / self.n

    @property
    def x(self) -> np.ndarray:
        return self.lo + (np.arange(self.n) + 0.5) * self.h

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.h)

    def same_grid(self, other: "GridDensity") -> bool:
        return self.n == other.n and self.lo == other.lo and self.hi == other.hi

    def scaled(self, c: float) -> "GridDensity":
        return GridDensity(self.lo, self.hi, self.n, c * self.values)

    def __add__(self, other: "GridDensity") -> "GridDensity":
        _check_grids(self, other)
        return GridDensity(self.lo, self.hi, self.n, self.values + other.values)

    @classmethod
    def from_pdf(cls, pdf: Callable[[np.ndarray], np.ndarray], lo=-8.0, hi=9.0, n=4096, normalize=False):
        h = (hi - lo) / n
        x = lo + (np.arange(n) + 0.5) * h
        v = np.asarray(pdf(x), dtype=np.float64)
        if normalize:
            v = v / (v.sum() * h)
        return cls(lo, hi, n, v)

    @classmethod
    def gaussian(cls, mu=0.0, sigma=1.0, lo=-8.0, hi=9.0, n=4096):
        return cls.from_pdf(lambda x: np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi)), lo, hi, n)

    @classmethod
    def uniform(cls, a, b, lo=-8.0, hi=9.0, n=4096):
        """Uniform on [a, b], renormalised so the grid mass is exactly one."""
        return cls.from_pdf(lambda x: ((x >= a) & (x <= b)).astype(float), lo, hi, n, normalize=True)

    @classmethod
    def mixture(cls, weights: Sequence[float], mus: Sequence[float], sigmas: Sequence[float], lo=-8.0, hi=9.0, n=4096):
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
        parts = [cls.gaussian(m, s, lo, hi, n).values for m, s in zip(mus, sigmas)]
        return cls(lo, hi, n, np.sum([wi * p for wi, p in zip(w, parts)], axis=0))


def _check_grids(*densities: GridDensity) -> None:
    first = densities[0]
    for d in densities[1:]:
        if not first.same_grid(d):
            raise GridMismatch(f"grids differ: [{first.lo}, {first.hi}]x{first.n} vs [{d.lo}, {d.hi}]x{d.n}")


def _check_mass(d: GridDensity, expected: float = 1.0) -> None:
    if abs(d.mass - expected) > MASS_TOL:
        raise ValueError(f"density mass {d.mass:.12g} differs from {expected}")


@dataclass(frozen=True)
class MixturePair:
    d_s_prime: GridDensity
    d_t_prime: GridDensity
    gamma: float
    mode: str

    @property
    def masses(self) -> tuple[float, float]:
        return self.d_s_prime.mass, self.d_t_prime.mass


def mix_two_sided(p_s: GridDensity, p_t: GridDensity, gamma: float) -> MixturePair:
    _check_grids(p_s, p_t)
    if not 0.5 <= gamma <= 1:
        raise ValueError("two-sided mixing needs 0.5 <= gamma <= 1")
    s = gamma * p_s.values + (1 - gamma) * p_t.values
    t = gamma * p_t.values + (1 - gamma) * p_s.values
    grid = (p_s.lo, p_s.hi, p_s.n)
    return MixturePair(GridDensity(*grid, s), GridDensity(*grid, t), gamma, "two_sided")


def mix_one_sided(p_s: GridDensity, p_t: GridDensity, gamma: float) -> MixturePair:
    """Source keeps mass gamma; the target absorbs the remaining 1 - gamma."""
    _check_grids(p_s, p_t)
    if not 0 < gamma <= 1:
        raise ValueError("one-sided mixing needs 0 < gamma <= 1")
    grid = (p_s.lo, p_s.hi, p_s.n)
    return MixturePair(
        GridDensity(*grid, gamma * p_s.values),
        GridDensity(*grid, p_t.values + (1 - gamma) * p_s.values),
        gamma,
        "one_sided",
    )


def optimal_discriminator_two(p_s: GridDensity, p_t: GridDensity, gamma: float) -> np.ndarray:
    """Pointwise maximiser (p_t + gamma (p_s - p_t)) / (p_s + p_t); NaN where undefined."""
    _check_grids(p_s, p_t)
    s, t = p_s.values, p_t.values
    tot = s + t
    out = np.full_like(tot, np.nan)
    ok = tot > TINY
    out[ok] = (t[ok] + gamma * (s[ok] - t[ok])) / tot[ok]
    return out


def optimal_discriminator_one_sided(p_s: GridDensity, p_t: GridDensity, gamma: float) -> np.ndarray:
    _check_grids(p_s, p_t)
    tot = p_s.values + p_t.values
    out = np.full_like(tot, np.nan)
    ok = tot > TINY
    out[ok] = gamma * p_s.values[ok] / tot[ok]
    return out


def optimal_discriminator_multi(densities: Sequence[GridDensity], gamma: float, i: int) -> np.ndarray:
    """Softmax-head optimum for domain i under smoothing gamma; NaN where all densities vanish."""
    _check_grids(*densities)
    m = len(densities)
    if m < 2:
        raise ValueError("need at least two domains")
    stack = np.stack([d.values for d in densities])
    tot = stack.sum(axis=0)
    others = tot - stack[i]
    out = np.full_like(tot, np.nan)
    ok = tot > TINY
    out[ok] = (gamma * stack[i][ok] + (1 - gamma) / (m - 1) * others[ok]) / tot[ok]
    return out


def generalized_kl(p: GridDensity, q: GridDensity) -> float:
    """Integral of p log(p / q); q may carry any total mass."""
    _check_grids(p, q)
    pv, qv = p.values, q.values
    live = pv > TINY
    if np.any(live & (qv <= 0)):
        warnings.warn("support violation: p > 0 where q = 0", SupportWarning, stacklevel=2)
        return math.inf
    return float(np.sum(xlogy(pv[live], pv[live]) - xlogy(pv[live], qv[live])) * p.h)


def js_divergence(p: GridDensity, q: GridDensity) -> float:
    _check_grids(p, q)
    _check_mass(p)
    _check_mass(q)
    m = GridDensity(p.lo, p.hi, p.n, 0.5 * (p.values + q.values))
    return 0.5 * generalized_kl(p, m) + 0.5 * generalized_kl(q, m)


def generalized_js(p: GridDensity, q: GridDensity) -> float:
    """The JS integrand evaluated literally, without requiring unit masses.

    For measures of total mass 2 (the one-sided mixtures) ``2 * generalized_js
    - 2 log 2`` is the objective's closed form.
    """
    _check_grids(p, q)
    m = GridDensity(p.lo, p.hi, p.n, 0.5 * (p.values + q.values))
    return 0.5 * generalized_kl(p, m) + 0.5 * generalized_kl(q, m)


@dataclass(frozen=True)
class IdentityReport:
    gamma: float
    mode: str
    objective: float
    identity_value: float

    @property
    def residual(self) -> float:
        return abs(self.objective - self.identity_value)


def _weighted_log(w: np.ndarray, h: np.ndarray) -> np.ndarray:
    # w * log(h) with 0 * log 0 = 0; undefined cells (NaN) carry zero weight
    return xlogy(w, np.nan_to_num(h, nan=1.0))


def smoothed_objective_integrand(p_s, p_t, h, gamma: float, mode: str, h_c=None) -> np.ndarray:
    """Pointwise value of the smoothed two-domain discriminator objective for output h.

    ``h_c`` is 1 - h; pass it when it is known more accurately than the
    subtraction (h rounding to 1 would otherwise turn log(1 - h) into -inf).
    """
    h_c = 1 - h if h_c is None else h_c
    if mode == "two_sided":
        return (
            _weighted_log(gamma * p_s, h)
            + _weighted_log((1 - gamma) * p_s, h_c)
            + _weighted_log((1 - gamma) * p_t, h)
            + _weighted_log(gamma * p_t, h_c)
        )
    if mode == "one_sided":
        return _weighted_log(gamma * p_s, h) + _weighted_log((1 - gamma) * p_s + p_t, h_c)
    raise ValueError(f"unknown mode {mode!r}")


def smoothed_objective_at_optimum(p_s: GridDensity, p_t: GridDensity, gamma: float, mode: str = "two_sided") -> IdentityReport:
    """Plug the closed-form optimal discriminator into the smoothed objective and
    compare it with 2 JS(mixtures) - 2 log 2 computed independently."""
    _check_grids(p_s, p_t)
    if mode == "two_sided":
        h = optimal_discriminator_two(p_s, p_t, gamma)
        pair = mix_two_sided(p_s, p_t, gamma)
        identity = 2.0 * js_divergence(pair.d_s_prime, pair.d_t_prime) - 2.0 * LOG2
    elif mode == "one_sided":
        h = optimal_discriminator_one_sided(p_s, p_t, gamma)
        pair = mix_one_sided(p_s, p_t, gamma)
        identity = 2.0 * generalized_js(pair.d_s_prime, pair.d_t_prime) - 2.0 * LOG2
    else:
        raise ValueError(f"unknown mode {mode!r}")
    s, t = p_s.values, p_t.values
    live = (s + t) > TINY
    s, t, h = s[live], t[live], h[live]
    # complement straight from the densities
    h_c = (gamma * t + (1 - gamma) * s if mode == "two_sided" else (1 - gamma) * s + t) / (s + t)
    integrand = smoothed_objective_integrand(s, t, h, gamma, mode, h_c)
    return IdentityReport(float(gamma), mode, float(integrand.sum() * p_s.h), float(identity))


def one_sided_display_value(p_s: GridDensity, p_t: GridDensity, gamma: float) -> float:
    """Integral of p_s' log(p_s'/(p_s'+p_t')) + p_t' log(p_t'/(p_s'+p_t'))."""
    pair = mix_one_sided(p_s, p_t, gamma)
    s, t = pair.d_s_prime.values, pair.d_t_prime.values
    tot = s + t
    live = tot > TINY
    val = xlogy(s[live], s[live] / tot[live]) + xlogy(t[live], t[live] / tot[live])
    return float(val.sum() * p_s.h)


def multi_objective_integrand(stack: np.ndarray, heads: np.ndarray, gamma: float) -> np.ndarray:
    """Sum over domains i of p_i [gamma log h_i + (1-gamma)/(M-1) sum_{j != i} log h_j]."""
    m = stack.shape[0]
    off = (1 - gamma) / (m - 1)
    out = np.zeros(stack.shape[1])
    for i in range(m):
        for j in range(m):
            w = gamma if i == j else off
            out += _weighted_log(w * stack[i], heads[j])
    return out


@dataclass(frozen=True)
class MultiIdentityReport:
    gamma: float
    objective: float
    kl_sum: float

    @property
    def residual(self) -> float:
        return abs(self.objective - self.kl_sum)


def multi_objective_at_optimum(densities: Sequence[GridDensity], gamma: float) -> MultiIdentityReport:
    """Objective at the closed-form multi-domain optimum versus the sum of
    generalized KL(D_i' || sum_j D_j) against the unnormalised mixture."""
    _check_grids(*densities)
    m = len(densities)
    if m < 2:
        raise ValueError("need at least two domains")
    stack = np.stack([d.values for d in densities])
    live = stack.sum(axis=0) > TINY
    heads = np.stack([optimal_discriminator_multi(densities, gamma, i) for i in range(m)])
    objective = float(multi_objective_integrand(stack[:, live], heads[:, live], gamma).sum() * densities[0].h)

    first = densities[0]
    grid = (first.lo, first.hi, first.n)
    total = stack.sum(axis=0)
    mix = GridDensity(*grid, total)
    off = (1 - gamma) / (m - 1)
    kl_sum = 0.0
    for i in range(m):
        prime = GridDensity(*grid, gamma * stack[i] + off * (total - stack[i]))
        kl_sum += generalized_kl(prime, mix)
    return MultiIdentityReport(float(gamma), objective, float(kl_sum))

"""Demand-volume and detour-time laws, quantile inversion, scenario sampling.

Continuous volume draws are rounded half-to-even, so the integer volume
``N = round(X)`` has ``Pr(N <= k) = F_X(k + 1/2)``.  The reliability
inversions below use that law rather than ``F_X`` itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

if TYPE_CHECKING:  # pragma: no cover
    from .detour import DetourMatrix
    from .domain import ServiceInstance, ServiceRequest


class ReliabilityError(ValueError):
    """A reliability level outside ``[0, 1)``."""


def _check_rho(rho: float) -> None:
    if not (0.0 <= rho < 1.0) or math.isnan(rho):
        raise ReliabilityError(f"reliability must lie in [0, 1), got {rho}")


@dataclass(frozen=True)
class TruncatedNormal:
    """``TN(mu, var, lo, hi)``; the second argument is the variance."""

    mu: float
    var: float
    lo: float = 0.0
    hi: float = math.inf
    integer_valued: bool = False

    def __post_init__(self):
        if self.var <= 0:
            raise ValueError("variance must be positive")
        if not self.lo < self.hi:
            raise ValueError("truncation bounds need lo < hi")
        if self.lo < 0:
            raise ValueError("support must be non-negative")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.var)

    def _ab(self):
        return (self.lo - self.mu) / self.sigma, (self.hi - self.mu) / self.sigma

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        a, b = self._ab()
        z = (np.clip(x, self.lo, self.hi) - self.mu) / self.sigma
        if a > 0:  # whole support in the upper tail: work with survival functions
            num = ndtr(-a) - ndtr(-z)
            den = ndtr(-a) - ndtr(-b)
        else:
            num = ndtr(z) - ndtr(a)
            den = ndtr(b) - ndtr(a)
        out = np.where(x < self.lo, 0.0, np.where(x >= self.hi, 1.0, num / den))
        return float(out) if out.ndim == 0 else out

    def ppf(self, q):
        q = np.asarray(q, dtype=float)
        a, b = self._ab()
        if a > 0:
            s = ndtr(-a) - q * (ndtr(-a) - ndtr(-b))
            z = -ndtri(s)
        else:
            z = ndtri(ndtr(a) + q * (ndtr(b) - ndtr(a)))
        out = np.clip(self.mu + self.sigma * z, self.lo, self.hi)
        return float(out) if out.ndim == 0 else out

    def mean(self) -> float:
        a, b = self._ab()
        pa = math.exp(-a * a / 2) / math.sqrt(2 * math.pi)
        pb = 0.0 if math.isinf(b) else math.exp(-b * b / 2) / math.sqrt(2 * math.pi)
        return self.mu + self.sigma * (pa - pb) / float(ndtr(b) - ndtr(a))

    def median(self) -> float:
        return self.ppf(0.5)

    def sample(self, rng: np.random.Generator, size=None):
        return self.ppf(rng.random(size))

    def to_dict(self) -> dict:
        d = {"kind": "tn", "mu": self.mu, "var": self.var, "lo": self.lo}
        if math.isfinite(self.hi):
            d["hi"] = self.hi
        return d


@dataclass(frozen=True)
class LogNormal:
    """Lognormal law with ``log X ~ N(log scale, shape**2)``."""

    shape: float
    scale: float
    integer_valued: bool = False

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            z = np.log(np.maximum(x, 0.0) / self.scale) / self.shape
        out = np.where(x <= 0, 0.0, ndtr(z))
        return float(out) if out.ndim == 0 else out

    def ppf(self, q):
        q = np.asarray(q, dtype=float)
        out = np.where(q <= 0, 0.0, self.scale * np.exp(self.shape * ndtri(q)))
        return float(out) if out.ndim == 0 else out

    def mean(self) -> float:
        return self.scale * math.exp(self.shape ** 2 / 2)

    def median(self) -> float:
        return self.scale

    def sample(self, rng: np.random.Generator, size=None):
        return self.ppf(rng.random(size))

    def to_dict(self) -> dict:
        return {"kind": "lognormal", "shape": self.shape, "scale": self.scale}


@dataclass(frozen=True)
class Empirical:
    """Discrete law on ``values`` with probabilities ``weights``."""

    values: tuple
    weights: tuple
    integer_valued: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if v.shape != w.shape or v.size == 0:
            raise ValueError("values and weights must be non-empty and aligned")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")
        if np.any(v < 0):
            raise ValueError("support must be non-negative")
        order = np.argsort(v, kind="stable")
        object.__setattr__(self, "values", tuple(float(t) for t in v[order]))
        object.__setattr__(self, "weights", tuple(float(t) for t in w[order]))

    @classmethod
    def from_samples(cls, samples: Sequence[float], integer_valued: bool = True) -> "Empirical":
        vals, counts = np.unique(np.asarray(samples, dtype=float), return_counts=True)
        return cls(tuple(vals), tuple(counts / counts.sum()), integer_valued)

    def _cum(self):
        return np.cumsum(self.weights)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(np.asarray(self.values), x, side="right")
        cum = np.concatenate([[0.0], self._cum()])
        out = np.minimum(cum[idx], 1.0)
        return float(out) if out.ndim == 0 else out

    def ppf(self, q):
        q = np.asarray(q, dtype=float)
        cum = self._cum()
        idx = np.minimum(np.searchsorted(cum, q - 1e-12, side="left"), len(cum) - 1)
        out = np.where(q <= 0, min(0.0, self.values[0]) if self.values[0] <= 0 else 0.0,
                       np.asarray(self.values)[idx])
        return float(out) if out.ndim == 0 else out

    def mean(self) -> float:
        return float(np.dot(self.values, self.weights))

    def median(self) -> float:
        return float(self.ppf(0.5))

    def sample(self, rng: np.random.Generator, size=None):
        idx = np.searchsorted(self._cum(), rng.random(size), side="right")
        idx = np.minimum(idx, len(self.values) - 1)
        return np.asarray(self.values)[idx]

    def to_dict(self) -> dict:
        return {"kind": "empirical", "values": list(self.values), "weights": list(self.weights)}


Distribution = TruncatedNormal | LogNormal | Empirical


def distribution_from_dict(d: dict) -> Distribution:
    kind = d["kind"]
    if kind == "tn":
        return TruncatedNormal(float(d["mu"]), float(d["var"]), float(d.get("lo", 0.0)),
                               float(d.get("hi", math.inf)))
    if kind == "lognormal":
        return LogNormal(float(d["shape"]), float(d["scale"]))
    if kind == "empirical":
        values = d["values"]
        weights = d.get("weights") or [1.0 / len(values)] * len(values)
        return Empirical(tuple(values), tuple(weights))
    raise ValueError(f"unknown distribution kind {kind!r}")


def scaled(dist: Distribution, factor: float) -> Distribution:
    """Law of ``factor * X``; a scaled truncated normal stays truncated normal."""
    if not factor > 0:
        raise ValueError("scale factor must be positive")
    if isinstance(dist, TruncatedNormal):
        return TruncatedNormal(dist.mu * factor, dist.var * factor ** 2, dist.lo * factor,
                               dist.hi * factor, dist.integer_valued)
    if isinstance(dist, LogNormal):
        return LogNormal(dist.shape, dist.scale * factor, dist.integer_valued)
    return Empirical(tuple(v * factor for v in dist.values), dist.weights, dist.integer_valued)


# -- reliability inversions ----------------------------------------------------

def volume_cdf(dist: Distribution, k: int) -> float:
    """``Pr(volume <= k)`` for the integer demand volume drawn from ``dist``."""
    if k < 0:
        return 0.0
    if isinstance(dist, Empirical):
        return dist.cdf(k)
    return dist.cdf(k + 0.5)


def demand_quantile(dist: Distribution, rho: float) -> int:
    """Smallest integer volume ``k >= 0`` with ``Pr(volume <= k) >= rho``."""
    _check_rho(rho)
    if rho == 0.0:
        return 0
    guess = dist.ppf(rho)
    k = max(0, int(math.floor(guess)) - 1)
    while k > 0 and volume_cdf(dist, k - 1) >= rho:
        k -= 1
    while volume_cdf(dist, k) < rho:
        k += 1
        if k > 10 ** 7:
            raise ReliabilityError("demand quantile did not converge")
    return k


def detour_quantile(dist: Distribution, rho: float) -> float:
    """Continuous ``rho``-quantile of a detour-time law (never negative)."""
    _check_rho(rho)
    return max(0.0, float(dist.ppf(rho)))


def reliability_for_volume(dist: Distribution, k: int) -> float:
    """Lowest reliability whose demand quantile is ``k`` (or more when ``k`` has no mass)."""
    if k <= 0:
        return 0.0
    return float(np.nextafter(volume_cdf(dist, k - 1), 1.0))


# -- scenarios -----------------------------------------------------------------

@dataclass
class Scenario:
    """One realised request set ``D^k`` with its per-zone detour matrices."""

    id: int
    probability: float
    requests: tuple["ServiceRequest", ...]
    matrices: dict[str, "DetourMatrix"] = field(default_factory=dict)

    def request_index(self) -> dict[str, int]:
        return {r.id: i for i, r in enumerate(self.requests)}


def scenario_rng(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for scenario ``index``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def draw_volume(dist: Distribution, rng: np.random.Generator) -> int:
    x = float(dist.sample(rng))
    return max(0, int(np.round(x)))  # numpy rounds half to even


def sample_scenarios(instance: "ServiceInstance", n: int, seed: int,
                     volume_multiplier: float = 1.0) -> list[Scenario]:
    """Draw ``n`` equiprobable scenarios; scenario ``k`` depends only on ``(seed, k)``."""
    if n < 1:
        raise ValueError("need at least one scenario")
    return [sample_scenario(instance, k, seed, 1.0 / n, volume_multiplier) for k in range(n)]


def sample_scenario(instance: "ServiceInstance", index: int, seed: int, probability: float,
                    volume_multiplier: float = 1.0) -> Scenario:
    from .detour import build_scenario_matrices
    from .domain import ServiceRequest

    rng = scenario_rng(seed, index)
    requests = []
    for cat in instance.categories:
        count = draw_volume(cat.volume_dist, rng)
        if volume_multiplier != 1.0:
            count = int(np.round(count * volume_multiplier))
        pool = cat.request_pool
        if pool is not None and len(pool):
            picks = rng.permutation(len(pool))[:count] if count <= len(pool) else \
                rng.integers(0, len(pool), size=count)
        for j in range(count):
            rid = f"{cat.id}#{j}"
            if pool is not None and len(pool):
                ox, oy, dx, dy = (float(t) for t in pool[picks[j]])
                o_det = instance.zone(cat.origin).detour_from_point(ox, oy)
                d_det = instance.zone(cat.dest).detour_from_point(dx, dy)
                coords = ((ox, oy), (dx, dy))
            else:
                o_det = float(instance.zone(cat.origin).detour_dist.sample(rng))
                d_det = float(instance.zone(cat.dest).detour_dist.sample(rng))
                coords = (None, None)
            requests.append(ServiceRequest(
                id=rid, category=cat.id, origin=cat.origin, dest=cat.dest,
                passengers=cat.passengers, origin_detour=max(0.0, o_det),
                dest_detour=max(0.0, d_det), adhoc_cost=instance.adhoc_cost(cat),
                origin_xy=coords[0], dest_xy=coords[1]))
    requests = tuple(requests)
    matrices = build_scenario_matrices(instance, requests)
    return Scenario(index, probability, requests, matrices)

"""Detour-time machinery.

Realised per-zone detour matrices, the quadratic zonal detour, the planning
approximation ``t(y) = 2 tau~(y) + (y - 1) tau2`` with its tangent-cut
linearisation, and boundary-curve fitting from sampled locations.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np
from scipy.optimize import least_squares

if TYPE_CHECKING:  # pragma: no cover
    from .domain import ServiceInstance, ServiceRequest

DETOUR_MIN_PER_M = 0.003


class InvalidCurveError(ValueError):
    pass


class DetourError(ValueError):
    pass


# -- boundary curves -------------------------------------------------------------

@dataclass(frozen=True)
class BoundaryDetourCurve:
    """Boundary-to-nearest-request detour ``tau~(y)`` as a function of request count.

    ``form`` is ``"linear"`` (``a - b*y``), ``"exponential"``
    (``a*exp(-b*y) + c``) or ``"table"`` (piecewise-linear through
    ``(points[k], values[k])``, flat beyond the last point).
    """

    form: str
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    points: tuple[float, ...] = ()
    values: tuple[float, ...] = ()

    def __post_init__(self):
        if self.form not in ("linear", "exponential", "table"):
            raise InvalidCurveError(f"unknown curve form {self.form!r}")
        if self.form == "table":
            if len(self.points) < 2 or len(self.points) != len(self.values):
                raise InvalidCurveError("table curve needs >= 2 aligned points")
            if any(q <= p for p, q in zip(self.points, self.points[1:])):
                raise InvalidCurveError("table points must increase")

    @classmethod
    def linear(cls, a: float, b: float) -> "BoundaryDetourCurve":
        return cls("linear", a=a, b=b)

    @classmethod
    def exponential(cls, a: float, b: float, c: float = 0.0) -> "BoundaryDetourCurve":
        return cls("exponential", a=a, b=b, c=c)

    @classmethod
    def table(cls, points: Sequence[float], values: Sequence[float]) -> "BoundaryDetourCurve":
        return cls("table", points=tuple(float(p) for p in points),
                   values=tuple(float(v) for v in values))

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        if self.form == "linear":
            out = self.a - self.b * y
        elif self.form == "exponential":
            out = self.a * np.exp(-self.b * y) + self.c
        else:
            p, v = np.asarray(self.points), np.asarray(self.values)
            # linear extension to the left of the first point, flat to the right
            left = v[0] + (v[1] - v[0]) / (p[1] - p[0]) * (y - p[0])
            out = np.where(y < p[0], left, np.interp(y, p, v))
        return float(out) if out.ndim == 0 else out

    def check(self, cap: int, tol: float = 1e-12) -> None:
        """Raise unless convex and non-increasing on the integers ``0..2cap``."""
        vals = self(np.arange(0, 2 * cap + 1))
        d1 = np.diff(vals)
        if np.any(d1 > tol):
            raise InvalidCurveError("boundary curve must be non-increasing")
        if np.any(np.diff(d1) < -tol):
            raise InvalidCurveError("boundary curve must be convex")

    def to_dict(self) -> dict:
        if self.form == "linear":
            return {"form": "linear", "a": self.a, "b": self.b}
        if self.form == "exponential":
            return {"form": "exponential", "a": self.a, "b": self.b, "c": self.c}
        return {"form": "table", "points": list(self.points), "values": list(self.values)}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundaryDetourCurve":
        form = d["form"]
        if form == "linear":
            return cls.linear(float(d["a"]), float(d["b"]))
        if form == "exponential":
            return cls.exponential(float(d["a"]), float(d["b"]), float(d.get("c", 0.0)))
        return cls.table(d["points"], d["values"])


def phase1_detour(y: int, curve: BoundaryDetourCurve, tau2: float) -> float:
    """Planned detour of a vehicle serving ``y`` requests in a zone (0 when ``y == 0``)."""
    if y < 0:
        raise ValueError("request count must be non-negative")
    if y == 0:
        return 0.0
    return raw_phase1_detour(y, curve, tau2)


def raw_phase1_detour(y: float, curve: BoundaryDetourCurve, tau2: float) -> float:
    """``2 tau~(y) + (y - 1) tau2`` with no special case at zero."""
    return 2.0 * curve(y) + (y - 1) * tau2


def tangent_cuts(curve: BoundaryDetourCurve, cap: int) -> list[tuple[float, float]]:
    """Chords between consecutive integers on ``[0, 2cap]`` as ``(slope, intercept)``."""
    curve.check(cap)
    cuts = []
    for i in range(2 * cap):
        lo, hi = curve(i), curve(i + 1)
        slope = hi - lo
        cuts.append((slope, lo - slope * i))
    return cuts


def max_cut(cuts: Sequence[tuple[float, float]], y: float) -> float:
    return max(s * y + b for s, b in cuts)


# -- detour matrices -----------------------------------------------------------------

@dataclass(frozen=True)
class DetourMatrix:
    """Symmetric zone matrix: detours on the diagonal, non-positive reductions elsewhere."""

    zone: str
    request_ids: tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        n = len(self.request_ids)
        if m.shape != (n, n):
            raise DetourError("matrix shape does not match request ids")
        if not np.allclose(m, m.T, atol=1e-12):
            raise DetourError("detour matrix must be symmetric")
        if np.any(np.diag(m) < 0):
            raise DetourError("diagonal detours must be non-negative")
        off = m - np.diag(np.diag(m))
        if np.any(off > 1e-15):
            raise DetourError("reductions must be non-positive")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "request_ids", tuple(self.request_ids))

    @property
    def size(self) -> int:
        return len(self.request_ids)

    def index(self, rid: str) -> int:
        return self.request_ids.index(rid)

    def satisfies_bound(self, cap: int, tol: float = 1e-12) -> bool:
        return eq13_holds(self.matrix, cap, tol)


def reduction_bound(matrix: np.ndarray, cap: int) -> np.ndarray:
    """Per row: ``-2 *`` sum of the ``cap`` most negative off-diagonal entries."""
    m = np.asarray(matrix, dtype=float)
    n = m.shape[0]
    if n <= 1:
        return np.zeros(n)
    off = m.copy()
    np.fill_diagonal(off, 0.0)
    k = min(cap, n - 1)
    srt = np.sort(off, axis=1)  # most negative first; diagonal zero lands last
    return -2.0 * srt[:, :k].sum(axis=1)


def eq13_holds(matrix: np.ndarray, cap: int, tol: float = 1e-12) -> bool:
    return bool(np.all(np.diag(matrix) + tol >= reduction_bound(matrix, cap)))


def zonal_detour(T: DetourMatrix | np.ndarray, w: Sequence[float]) -> float:
    """Quadratic form ``w^T T w``."""
    m = T.matrix if isinstance(T, DetourMatrix) else np.asarray(T, dtype=float)
    w = np.asarray(w, dtype=float)
    if w.shape != (m.shape[0],):
        raise DetourError(f"flag vector of length {w.size} for a {m.shape[0]}-request matrix")
    return float(w @ m @ w)


def build_detour_matrix(detours: Sequence[float], cap: int, rule: str = "A", *,
                        coords: Sequence[tuple[float, float]] | None = None,
                        max_distance: float | None = None, zone: str = "",
                        request_ids: Sequence[str] | None = None) -> DetourMatrix:
    """Detour matrix for requests with the given per-zone detours.

    Rule ``"A"`` sets each reduction to ``-min(tau_d, tau_b) / (2 cap)``.
    Rule ``"B"`` uses ``-min(tau_d, tau_b) * max(0, 1 - dist / max_distance)``
    and then scales every reduction by the largest ``s <= 1`` that keeps each
    row within its diagonal.
    """
    tau = np.asarray(detours, dtype=float)
    if np.any(tau < 0) or not np.all(np.isfinite(tau)):
        raise DetourError("detours must be finite and non-negative")
    n = tau.size
    ids = tuple(request_ids) if request_ids is not None else tuple(str(i) for i in range(n))
    mins = np.minimum.outer(tau, tau)
    if rule == "A":
        red = -mins / (2.0 * cap)
    elif rule == "B":
        if coords is None or max_distance is None:
            raise DetourError("rule B needs coordinates and max_distance")
        xy = np.asarray(coords, dtype=float).reshape(n, 2)
        dist = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(axis=2))
        red = -mins * np.clip(1.0 - dist / max_distance, 0.0, 1.0)
        np.fill_diagonal(red, 0.0)
        need = reduction_bound(red, cap)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            ratios = np.where(need > 0, tau / need, np.inf)
        s = min(1.0, float(ratios.min())) if n else 1.0
        red = red * s
        if not eq13_holds(red + np.diag(tau), cap, tol=0.0):
            red = red * (1.0 - 1e-12)
    else:
        raise DetourError(f"unknown reduction rule {rule!r}")
    np.fill_diagonal(red, 0.0)
    red = np.minimum(red, 0.0)
    return DetourMatrix(zone, ids, red + np.diag(tau))


def build_scenario_matrices(instance: "ServiceInstance", requests: Sequence["ServiceRequest"]
                            ) -> dict[str, DetourMatrix]:
    """One matrix per zone over the requests that start or end there."""
    out = {}
    cap = instance.fleet.capacity
    for z in instance.zones:
        touching = [r for r in requests if z.id in (r.origin, r.dest)]
        detours = [r.detour_in(z.id) for r in touching]
        coords = None
        max_d = None
        if instance.reduction_rule == "B":
            coords = [r.xy_in(z.id) for r in touching]
            if any(c is None for c in coords):
                raise DetourError(f"rule B needs request coordinates in zone {z.id}")
            max_d = instance.max_distance or z.diagonal
        out[z.id] = build_detour_matrix(detours, cap, instance.reduction_rule, coords=coords,
                                        max_distance=max_d, zone=z.id,
                                        request_ids=[r.id for r in touching])
    return out


# -- curve fitting -------------------------------------------------------------------

def boundary_gap(points: np.ndarray, bounds: tuple[float, float, float, float]) -> np.ndarray:
    """Mean distance from the four rectangle sides to the extreme points of each sample.

    ``points`` has shape ``(trials, i, 2)``; the result has shape ``(trials,)``.
    """
    x0, y0, x1, y1 = bounds
    xs, ys = points[..., 0], points[..., 1]
    return ((x1 - xs.max(axis=1)) + (xs.min(axis=1) - x0)
            + (y1 - ys.max(axis=1)) + (ys.min(axis=1) - y0)) / 4.0


def uniform_sampler(bounds):
    x0, y0, x1, y1 = bounds

    def draw(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
        u = rng.random(shape + (2,))
        return np.stack([x0 + u[..., 0] * (x1 - x0), y0 + u[..., 1] * (y1 - y0)], axis=-1)
    return draw


def sample_boundary_detours(bounds, counts: Sequence[int], trials: int = 1000, seed: int = 0,
                            sampler: Callable | None = None,
                            min_per_m: float = DETOUR_MIN_PER_M) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo mean boundary detour (minutes) and its standard error for each count."""
    sampler = sampler or uniform_sampler(bounds)
    means, ses = [], []
    for i in counts:
        if i < 1:
            raise ValueError("counts must be >= 1")
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(i)])))
        d = boundary_gap(sampler(rng, (trials, int(i))), bounds) * min_per_m
        means.append(d.mean())
        ses.append(d.std(ddof=1) / math.sqrt(trials) if trials > 1 else 0.0)
    return np.asarray(means), np.asarray(ses)


@dataclass
class CurveFit:
    curve: BoundaryDetourCurve
    counts: np.ndarray
    means: np.ndarray
    params: tuple[float, float, float] | None
    converged: bool
    message: str = ""
    stderr: np.ndarray = field(default_factory=lambda: np.zeros(0))


def fit_exponential(x: Sequence[float], y: Sequence[float], max_iter: int = 200,
                    xtol: float = 1e-10) -> tuple[tuple[float, float, float], bool, str]:
    """Least-squares fit of ``a*exp(-b*x) + c``; returns ``(params, success, message)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 3:
        return (math.nan, math.nan, math.nan), False, "need at least 3 points"

    def resid(p):
        a, b, c = p
        return a * np.exp(-b * x) + c - y

    def jac(p):
        a, b, _ = p
        e = np.exp(-b * x)
        return np.column_stack([e, -a * x * e, np.ones_like(x)])

    p0 = np.array([y.max() - y.min(), 0.3, y.min()])
    try:
        res = least_squares(resid, p0, jac=jac, method="lm", xtol=xtol, ftol=1e-15, gtol=1e-15,
                            max_nfev=max_iter * 10)
    except (ValueError, FloatingPointError) as exc:
        return (math.nan, math.nan, math.nan), False, str(exc)
    a, b, c = (float(t) for t in res.x)
    ok = bool(res.success) and all(math.isfinite(t) for t in (a, b, c)) and b > 0 and a > 0
    return (a, b, c), ok, res.message


def fit_boundary_curve(bounds, counts: Sequence[int], trials: int = 1000, seed: int = 0,
                       sampler: Callable | None = None) -> CurveFit:
    """Estimate ``tau~`` from sampled locations and fit an exponential to it.

    Falls back to a piecewise-linear table curve through the raw points when
    the fit does not converge.
    """
    x0, y0, x1, y1 = bounds
    if not (x1 > x0 and y1 > y0):
        raise ValueError("degenerate rectangle")
    counts = np.asarray(sorted(set(int(c) for c in counts)))
    means, ses = sample_boundary_detours(bounds, counts, trials, seed, sampler)
    params, ok, msg = fit_exponential(counts, means)
    if ok:
        curve = BoundaryDetourCurve.exponential(*params)
        return CurveFit(curve, counts, means, params, True, msg, ses)
    return CurveFit(BoundaryDetourCurve.table(counts, means), counts, means, None, False, msg, ses)


def write_curve_csv(fit: CurveFit, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["i", "mean_detour", "fitted"])
        for i, m in zip(fit.counts, fit.means):
            wr.writerow([int(i), f"{m:.10g}", f"{fit.curve(i):.10g}"])

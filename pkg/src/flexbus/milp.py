"""Small mixed-integer linear programming toolkit.

A :class:`Model` collects variables, linear constraints and a linear
objective (always minimised).  :func:`solve` runs either the built-in
best-bound branch-and-bound (``backend="bnb"``) or HiGHS through
:func:`scipy.optimize.milp` (``backend="highs"``).  Both return a
:class:`Solution` that has been audited against the original rows.

The two linearisation helpers encode the bilinear terms that show up in
the flexible-bus models: products of two binaries and a binary switching
a block of capacity rows on and off.
"""

from __future__ import annotations

import heapq
import math
import re
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy import sparse
from scipy.optimize import Bounds, LinearConstraint, linprog, milp

BINARY = "binary"
INTEGER = "integer"
CONTINUOUS = "continuous"

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
LIMIT = "limit"

FEAS_TOL = 1e-6
INT_TOL = 1e-6
ROUNDED_TOL = 1e-5


class ModelError(ValueError):
    """Raised for malformed models or misuse of the linearisation helpers."""


@dataclass
class Variable:
    name: str
    kind: str
    lb: float = 0.0
    ub: float | None = None


@dataclass
class Constraint:
    coeffs: dict[int, float]
    sense: str
    rhs: float
    name: str


@dataclass
class Model:
    """A minimisation MILP over non-negative (by default) variables."""

    name: str = "model"
    variables: list[Variable] = field(default_factory=list)
    constraints: list[Constraint] = field(default_factory=list)
    objective: dict[int, float] = field(default_factory=dict)
    objective_constant: float = 0.0
    _names: dict[str, int] = field(default_factory=dict, repr=False)
    _arrays: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def num_vars(self) -> int:
        return len(self.variables)

    def add_var(self, name: str, kind: str = CONTINUOUS, lb: float = 0.0,
                ub: float | None = None) -> int:
        if kind not in (BINARY, INTEGER, CONTINUOUS):
            raise ModelError(f"unknown variable kind {kind!r}")
        if name in self._names:
            raise ModelError(f"duplicate variable name {name!r}")
        if kind == BINARY:
            lb, ub = 0.0, 1.0
        idx = len(self.variables)
        self.variables.append(Variable(name, kind, float(lb), None if ub is None else float(ub)))
        self._names[name] = idx
        return idx

    def var(self, name: str) -> int:
        return self._names[name]

    def add_constr(self, coeffs: Mapping[int, float], sense: str, rhs: float,
                   name: str | None = None) -> int:
        if sense not in ("<=", ">=", "="):
            raise ModelError(f"unknown sense {sense!r}")
        clean = {}
        for j, a in coeffs.items():
            if not 0 <= j < len(self.variables):
                raise ModelError(f"constraint references undeclared variable {j}")
            a = float(a)
            if not math.isfinite(a):
                raise ModelError("non-finite coefficient")
            if a != 0.0:
                clean[j] = clean.get(j, 0.0) + a
        if not math.isfinite(rhs):
            raise ModelError("non-finite right-hand side")
        name = name or f"c{len(self.constraints)}"
        self.constraints.append(Constraint(clean, sense, float(rhs), name))
        return len(self.constraints) - 1

    def set_objective(self, coeffs: Mapping[int, float], constant: float = 0.0) -> None:
        self.objective = {j: float(a) for j, a in coeffs.items() if a != 0.0}
        self.objective_constant = float(constant)

    def add_objective_terms(self, coeffs: Mapping[int, float]) -> None:
        for j, a in coeffs.items():
            self.objective[j] = self.objective.get(j, 0.0) + float(a)

    # -- array views -------------------------------------------------------

    def arrays(self):
        """Return ``(c, A, row_lo, row_hi, lb, ub, integrality)``.

        The result is memoised until a variable, row or objective term is
        added; rows and variables must not be edited in place afterwards.
        """
        key = (self.num_vars, len(self.constraints), tuple(self.objective.items()),
               self.objective_constant)
        if self._arrays is None or self._arrays[0] != key:
            self._arrays = (key, self._build_arrays())
        return self._arrays[1]

    def _build_arrays(self):
        n = self.num_vars
        c = np.zeros(n)
        for j, a in self.objective.items():
            c[j] = a
        rows, cols, vals = [], [], []
        lo = np.empty(len(self.constraints))
        hi = np.empty(len(self.constraints))
        for i, con in enumerate(self.constraints):
            for j, a in con.coeffs.items():
                rows.append(i)
                cols.append(j)
                vals.append(a)
            lo[i] = con.rhs if con.sense in (">=", "=") else -np.inf
            hi[i] = con.rhs if con.sense in ("<=", "=") else np.inf
        A = sparse.csr_matrix((vals, (rows, cols)), shape=(len(self.constraints), n))
        lb = np.array([v.lb for v in self.variables], dtype=float)
        ub = np.array([np.inf if v.ub is None else v.ub for v in self.variables], dtype=float)
        integrality = np.array([0 if v.kind == CONTINUOUS else 1 for v in self.variables])
        return c, A, lo, hi, lb, ub, integrality

    def violations(self, x: np.ndarray, tol: float = FEAS_TOL) -> list[str]:
        """List every bound, row or integrality requirement ``x`` breaks."""
        _, A, lo, hi, lb, ub, integrality = self.arrays()
        out = []
        bad = (x < lb - tol) | (x > ub + tol)
        bad |= (integrality == 1) & (np.abs(x - np.round(x)) > INT_TOL)
        for j in np.flatnonzero(bad):
            out.append(f"variable {self.variables[j].name}={x[j]:g}")
        if A.shape[0]:
            lhs = A @ x
            slack_lo = tol * np.maximum(1.0, np.abs(np.where(np.isfinite(lo), lo, 0.0)))
            slack_hi = tol * np.maximum(1.0, np.abs(np.where(np.isfinite(hi), hi, 0.0)))
            rows = np.flatnonzero((lhs < lo - slack_lo) | (lhs > hi + slack_hi))
            for i in rows:
                con = self.constraints[i]
                out.append(f"row {con.name}: {lhs[i]:g} {con.sense} {con.rhs:g}")
        return out


@dataclass
class Solution:
    status: str
    objective: float | None
    values: np.ndarray | None
    nodes: int = 0
    wall_time: float = 0.0

    def __getitem__(self, j: int) -> float:
        return float(self.values[j])

    @property
    def is_optimal(self) -> bool:
        return self.status == OPTIMAL


# -- linearisations ---------------------------------------------------------

def linearize_product(model: Model, x: int, y: int, name: str | None = None) -> int:
    """Add ``z = x*y`` for binaries ``x`` and ``y``; returns ``z``.

    All three inequalities are kept so that ``z`` is pinned at every
    binary point regardless of the sign it later carries.
    """
    for j in (x, y):
        if model.variables[j].kind != BINARY:
            raise ModelError(f"{model.variables[j].name} is not binary")
    name = name or f"prod_{model.variables[x].name}_{model.variables[y].name}"
    z = model.add_var(name, CONTINUOUS, 0.0, 1.0)
    model.add_constr({z: 1.0, x: -1.0}, "<=", 0.0, f"{name}_lex")
    model.add_constr({z: 1.0, y: -1.0}, "<=", 0.0, f"{name}_ley")
    model.add_constr({z: 1.0, x: -1.0, y: -1.0}, ">=", -1.0, f"{name}_ge")
    return z


def max_activity(model: Model, coeffs: Mapping[int, float]) -> float:
    """Upper bound of a linear expression from the variable bounds."""
    total = 0.0
    for j, a in coeffs.items():
        v = model.variables[j]
        hi = v.ub if a > 0 else v.lb
        if hi is None:
            return math.inf
        total += a * hi
    return total


def linearize_bilinear_indicator(model: Model, x: int, rows: Iterable[Mapping[int, float]],
                                 cap: float, bound: float, name: str = "ind") -> list[int]:
    """Encode ``x * (row <= cap)`` for each row.

    Each row becomes ``row <= bound*cap + (1 - bound)*cap*x``: with ``x = 1``
    the capacity row is enforced, with ``x = 0`` the right-hand side grows
    to ``bound*cap``.  ``bound`` must dominate every attainable row value.
    """
    if model.variables[x].kind != BINARY:
        raise ModelError(f"{model.variables[x].name} is not binary")
    out = []
    for k, row in enumerate(rows):
        top = max_activity(model, row)
        if top > bound * cap + FEAS_TOL:
            raise ModelError(f"big-M {bound} too small for row {name}[{k}] (max {top})")
        coeffs = dict(row)
        coeffs[x] = coeffs.get(x, 0.0) + (bound - 1.0) * cap
        out.append(model.add_constr(coeffs, "<=", bound * cap, f"{name}_{k}"))
    return out


# -- solving ------------------------------------------------------------------

def solve(model: Model, backend: str = "bnb", node_limit: int | None = None,
          time_limit: float | None = None) -> Solution:
    """Solve ``model`` to proven optimality (or until a limit is hit)."""
    start = time.perf_counter()
    if backend == "bnb":
        sol = _branch_and_bound(model, node_limit, time_limit)
    elif backend == "highs":
        sol = _highs(model, node_limit, time_limit)
    else:
        raise ModelError(f"unknown backend {backend!r}")
    sol.wall_time = time.perf_counter() - start
    if sol.values is not None:
        x = sol.values
        ints = np.array([v.kind != CONTINUOUS for v in model.variables], dtype=bool)
        x[ints] = np.round(x[ints])
        # rounding integers within the solver's integrality tolerance moves rows slightly
        bad = model.violations(x, tol=ROUNDED_TOL)
        if bad and sol.status == OPTIMAL:
            raise RuntimeError(f"solver returned an infeasible point: {bad[:3]}")
        sol.objective = float(sum(a * x[j] for j, a in model.objective.items())
                              + model.objective_constant)
    return sol


def _highs(model: Model, node_limit, time_limit) -> Solution:
    c, A, lo, hi, lb, ub, integrality = model.arrays()
    options = {"mip_rel_gap": 0.0, "presolve": True}
    if node_limit is not None:
        options["node_limit"] = int(node_limit)
    if time_limit is not None:
        options["time_limit"] = float(time_limit)
    cons = [LinearConstraint(A, lo, hi)] if A.shape[0] else []
    res = milp(c, integrality=integrality, bounds=Bounds(lb, ub), constraints=cons,
               options=options)
    if res.status == 0:
        return Solution(OPTIMAL, res.fun, np.array(res.x, dtype=float),
                        int(getattr(res, "mip_node_count", 0) or 0))
    if res.status == 2:
        return Solution(INFEASIBLE, None, None)
    if res.status == 3:
        return Solution(UNBOUNDED, None, None)
    x = None if res.x is None else np.array(res.x, dtype=float)
    return Solution(LIMIT, res.fun if x is not None else None, x)


def _lp_arrays(model: Model):
    c, A, lo, hi, lb, ub, integrality = model.arrays()
    A = A.tocsr()
    ub_rows = np.isfinite(hi) & ~np.isfinite(lo) | (np.isfinite(hi) & np.isfinite(lo) & (lo != hi))
    ge_rows = np.isfinite(lo) & ~np.isfinite(hi) | (np.isfinite(hi) & np.isfinite(lo) & (lo != hi))
    eq_rows = np.isfinite(lo) & np.isfinite(hi) & (lo == hi)
    A_ub = sparse.vstack([A[ub_rows], -A[ge_rows]]).tocsr()
    b_ub = np.concatenate([hi[ub_rows], -lo[ge_rows]])
    A_eq = A[eq_rows]
    b_eq = lo[eq_rows]
    return c, A_ub, b_ub, A_eq, b_eq, lb, ub, integrality.astype(bool)


def _branch_and_bound(model: Model, node_limit, time_limit) -> Solution:
    c, A_ub, b_ub, A_eq, b_eq, lb0, ub0, is_int = _lp_arrays(model)
    n = len(c)
    start = time.perf_counter()

    def relax(lb, ub):
        if n == 0:
            return 0, 0.0, np.zeros(0)
        res = linprog(c, A_ub=A_ub if A_ub.shape[0] else None, b_ub=b_ub if A_ub.shape[0] else None,
                      A_eq=A_eq if A_eq.shape[0] else None, b_eq=b_eq if A_eq.shape[0] else None,
                      bounds=np.column_stack([lb, ub]), method="highs-ds")
        return res.status, res.fun, res.x

    # integer bounds can be tightened before anything else
    lb0 = np.where(is_int, np.ceil(lb0 - INT_TOL), lb0)
    ub0 = np.where(is_int & np.isfinite(ub0), np.floor(ub0 + INT_TOL), ub0)
    if np.any(lb0 > ub0):
        return Solution(INFEASIBLE, None, None, 0)

    status, fun, x = relax(lb0, ub0)
    if status == 2:
        return Solution(INFEASIBLE, None, None, 1)
    if status == 3:
        return Solution(UNBOUNDED, None, None, 1)
    if status != 0:
        raise RuntimeError(f"LP relaxation failed with status {status}")

    incumbent, best = None, math.inf
    counter = 0
    heap = [(fun, counter, lb0, ub0, x)]
    nodes = 1
    limited = False
    while heap:
        bound, _, lb, ub, x = heapq.heappop(heap)
        if bound >= best - 1e-9:
            continue
        frac = np.abs(x - np.round(x))
        frac[~is_int] = 0.0
        if frac.max(initial=0.0) <= INT_TOL:
            incumbent, best = x.copy(), bound
            continue
        if (node_limit is not None and nodes >= node_limit) or (
                time_limit is not None and time.perf_counter() - start > time_limit):
            limited = True
            break
        # most fractional, lowest index on ties
        j = int(np.argmax(np.where(is_int, 0.5 - np.abs(frac - 0.5), -1.0)))
        for side in (0, 1):
            lb2, ub2 = lb.copy(), ub.copy()
            if side == 0:
                ub2[j] = math.floor(x[j])
            else:
                lb2[j] = math.ceil(x[j])
            st, f2, x2 = relax(lb2, ub2)
            nodes += 1
            if st == 0 and f2 < best - 1e-9:
                counter += 1
                heapq.heappush(heap, (f2, counter, lb2, ub2, x2))
            elif st == 3:
                return Solution(UNBOUNDED, None, None, nodes)
    if incumbent is None:
        return Solution(LIMIT if limited else INFEASIBLE, None, None, nodes)
    return Solution(LIMIT if limited else OPTIMAL, best, incumbent, nodes)


# -- LP file format -----------------------------------------------------------

_LP_BAD = re.compile(r"[^A-Za-z0-9_.\[\]{}()!\"#$%&/,;?@`'|~]")


def sanitize_name(name: str) -> str:
    s = _LP_BAD.sub("_", name)
    if not s or s[0].isdigit() or s[0] in ".eE":
        s = "_" + s
    return s


def _unique_names(names: list[str]) -> list[str]:
    seen: dict[str, int] = {}
    out = []
    for raw in names:
        s = sanitize_name(raw)
        base = s
        while s in seen:
            seen[base] += 1
            s = f"{base}~{seen[base]}"
        seen.setdefault(s, 0)
        out.append(s)
    return out


def _fmt_terms(coeffs: Mapping[int, float], names: list[str]) -> str:
    parts = []
    for j in sorted(coeffs):
        a = coeffs[j]
        sign = "-" if a < 0 else "+"
        parts.append(f"{sign} {abs(a):.17g} {names[j]}")
    if not parts:
        return "0"
    s = " ".join(parts)
    return s[2:] if s.startswith("+ ") else s


def export_lp(model: Model, path) -> None:
    """Write ``model`` in CPLEX LP format; names are sanitised deterministically."""
    vnames = _unique_names([v.name for v in model.variables])
    cnames = _unique_names([c.name for c in model.constraints])
    lines = [f"\\ {model.name}", "Minimize"]
    obj = _fmt_terms(model.objective, vnames)
    if model.objective_constant:
        obj += f" + {model.objective_constant:.17g}"
    lines.append(f" obj: {obj}")
    lines.append("Subject To")
    for con, cname in zip(model.constraints, cnames):
        lines.append(f" {cname}: {_fmt_terms(con.coeffs, vnames)} {con.sense} {con.rhs:.17g}")
    lines.append("Bounds")
    # every variable is listed here so that readers recover declaration order
    for v, vn in zip(model.variables, vnames):
        hi = "+inf" if v.ub is None else f"{v.ub:.17g}"
        lines.append(f" {v.lb:.17g} <= {vn} <= {hi}")
    gen = [vn for v, vn in zip(model.variables, vnames) if v.kind == INTEGER]
    binv = [vn for v, vn in zip(model.variables, vnames) if v.kind == BINARY]
    if gen:
        lines.append("General")
        lines.append(" " + " ".join(gen))
    if binv:
        lines.append("Binary")
        lines.append(" " + " ".join(binv))
    lines.append("End")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_terms(text: str, index: dict[str, int], model: Model):
    tokens = text.split()
    coeffs: dict[int, float] = {}
    constant = 0.0
    sign, coef = 1.0, None
    for tok in tokens:
        if tok in "+-":
            sign = 1.0 if tok == "+" else -1.0
            continue
        try:
            coef = float(tok)
            continue
        except ValueError:
            pass
        if tok not in index:
            index[tok] = model.add_var(tok, CONTINUOUS)
        j = index[tok]
        coeffs[j] = coeffs.get(j, 0.0) + sign * (1.0 if coef is None else coef)
        sign, coef = 1.0, None
    if coef is not None:
        constant += sign * coef
    return coeffs, constant


def read_lp(path) -> Model:
    """Parse the subset of CPLEX LP format written by :func:`export_lp`."""
    with open(path) as fh:
        raw = [ln.strip() for ln in fh]
    model = Model(name="lp")
    sections: dict[str, list[str]] = {}
    section = None
    for ln in raw:
        if not ln:
            continue
        if ln.startswith("\\"):
            if section is None and ln.startswith("\\ "):
                model.name = ln[2:]
            continue
        low = ln.lower()
        if low in ("minimize", "subject to", "bounds", "general", "binary", "end"):
            section = low
            continue
        sections.setdefault(section, []).append(ln)

    index: dict[str, int] = {}
    for ln in sections.get("bounds", []):
        m = re.match(r"(\S+)\s*<=\s*(\S+)\s*<=\s*(\S+)", ln)
        if not m:
            raise ModelError(f"cannot parse bound line {ln!r}")
        lo, name, hi = m.groups()
        if name not in index:
            index[name] = model.add_var(name, CONTINUOUS)
        v = model.variables[index[name]]
        v.lb = float(lo)
        v.ub = None if hi in ("+inf", "inf", "+infinity") else float(hi)
    for kind, sec in ((INTEGER, "general"), (BINARY, "binary")):
        for ln in sections.get(sec, []):
            for name in ln.split():
                if name not in index:
                    index[name] = model.add_var(name, CONTINUOUS)
                v = model.variables[index[name]]
                v.kind = kind
                if kind == BINARY:
                    v.lb, v.ub = 0.0, 1.0

    obj_text = " ".join(ln.split(":", 1)[-1] for ln in sections.get("minimize", []))
    obj, const = _parse_terms(obj_text, index, model)
    for ln in sections.get("subject to", []):
        cname, body = ln.split(":", 1)
        m = re.match(r"(.*)\s(<=|>=|=)\s(\S+)$", body.strip())
        if not m:
            raise ModelError(f"cannot parse row {ln!r}")
        lhs, sense, rhs = m.groups()
        coeffs, _ = _parse_terms(lhs, index, model)
        model.add_constr(coeffs, sense, float(rhs), cname.strip())
    model.set_objective(obj, const)
    return model

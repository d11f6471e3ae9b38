"""Command-line entry point.

Every command reads one JSON run configuration and writes its reports to
``--out``.  Configuration keys (all optional unless a command needs them)::

    instance           path (relative to the config file) or an embedded document
    scenarios          training scenarios for the optimizer (150)
    eval_scenarios     scenarios for evaluate and sweep (200)
    rho0               starting reliability, scalar or full vector (0.5)
    optimizer          max_iter, tol, stall_limit, backoff, max_bumps,
                       lam, gamma, alpha, beta1, beta2, eps
    detour_limit_mode  "zone", "trip", "od" or a list; overrides the instance
    node_limit         phase-2 search node budget per block (2000, null = none)
    backend            MILP backend ("highs")
    record_timing      write real wall times (false writes 0 so reruns are byte-identical)
    rho | deployment   evaluate: reliability vector/scalar or {route id: vehicles}
    grid               {"step", "mode": "full"|"shared", "fill"}
    sweep              {"axis", "values", "cost_factors"}
    fit                {"bounds", "counts", "trials"}
    ingest             {"requests", "grid": {x0,y0,x1,y1,nx,ny}, ingest options...}
    check              {"suites", "micro_seeds", "plans"}

Training scenarios use ``--seed``; evaluation scenarios use ``--seed + 1``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import checks
from .config import instance_from_dict, load_config
from .detour import fit_boundary_curve, write_curve_csv
from .domain import Fleet, InstanceError, ServiceInstance
from .ingest import GridSpec, IngestError, IngestOptions, ingest_file
from .optimizer import Hyperparameters, OptimizerConfig, run
from .oracle import Deployment, GridEvaluator, rho_grid
from .phase1 import DEFAULT_BACKEND, P1Infeasible, ReliabilityVector, solve_p1
from .phase2 import NODE_LIMIT, CostReport, evaluate
from .stochastic import ReliabilityError, sample_scenarios, scaled

log = logging.getLogger("flexbus")

SEED_MAX = 2 ** 64 - 1
SWEEP_AXES = ("capacity", "detour_limit", "demand_multiplier")
SWEEP_HEADER = ("value", "cost_factor", "C_total", "C_f", "Q_bar", "rho_I_mean", "rho_II_mean",
                "vehicles", "occupancy", "total_detour", "detour_per_zone_visit", "wall_s",
                "iterations")
CHECK_SUITES = ("appendix_fixture", "micro_equivalence", "micro_invariance", "tangent_cuts",
                "assumptions", "instance_equivalence", "instance_invariance")
_HYPER_KEYS = {f.name for f in fields(Hyperparameters)}
_OPT_KEYS = {"max_iter", "tol", "stall_limit", "backoff", "max_bumps"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int
    out: Path
    doc: dict
    base: Path
    instance: ServiceInstance | None = None
    scenarios: int = 150
    eval_scenarios: int = 200
    node_limit: int | None = NODE_LIMIT
    backend: str = DEFAULT_BACKEND
    record_timing: bool = False
    optimizer: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path, seed: int, out, need_instance: bool = True) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config {path} does not exist")
        doc = load_config(path)
        cfg = cls(seed=seed, out=Path(out), doc=doc, base=path.parent,
                  scenarios=int(doc.get("scenarios", 150)),
                  eval_scenarios=int(doc.get("eval_scenarios", 200)),
                  node_limit=doc.get("node_limit", NODE_LIMIT),
                  backend=doc.get("backend", DEFAULT_BACKEND),
                  record_timing=bool(doc.get("record_timing", False)),
                  optimizer=dict(doc.get("optimizer", {})))
        unknown = set(cfg.optimizer) - _HYPER_KEYS - _OPT_KEYS
        if unknown:
            raise ConfigError(f"unknown optimizer keys {sorted(unknown)}")
        if cfg.scenarios < 1 or cfg.eval_scenarios < 1:
            raise ConfigError("scenario counts must be >= 1")
        if "instance" in doc:
            cfg.instance = cfg._load_instance(doc["instance"])
        elif need_instance:
            raise ConfigError("config has no 'instance'")
        return cfg

    def resolve(self, rel) -> Path:
        p = Path(rel)
        p = p if p.is_absolute() else self.base / p
        if not p.exists():
            raise ConfigError(f"referenced file {p} does not exist")
        return p

    def _load_instance(self, spec) -> ServiceInstance:
        doc = spec if isinstance(spec, dict) else load_config(self.resolve(spec))
        mode = self.doc.get("detour_limit_mode")
        if mode is not None:
            doc = dict(doc, detour_modes=[mode] if isinstance(mode, str) else list(mode))
        return instance_from_dict(doc)

    def optimizer_config(self, seed: int | None = None) -> OptimizerConfig:
        hyper = Hyperparameters(**{k: v for k, v in self.optimizer.items() if k in _HYPER_KEYS})
        opts = {k: v for k, v in self.optimizer.items() if k in _OPT_KEYS}
        return OptimizerConfig(scenarios=self.scenarios, seed=self.seed if seed is None else seed,
                               node_limit=self.node_limit, backend=self.backend, hyper=hyper,
                               **opts)

    def rho_vector(self, instance: ServiceInstance, value) -> np.ndarray:
        dim = len(instance.categories) + len(instance.zones)
        arr = np.full(dim, float(value)) if np.isscalar(value) else np.asarray(value, float)
        if arr.shape != (dim,):
            raise ConfigError(f"reliability vector needs {dim} entries, got {arr.size}")
        return arr

    @property
    def eval_seed(self) -> int:
        return (self.seed + 1) % (SEED_MAX + 1)

    def wall(self, seconds: float) -> float:
        return round(seconds, 3) if self.record_timing else 0.0


# -- output helpers ---------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (Deployment, Path)):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _report_dict(rep: CostReport) -> dict:
    d = rep.to_dict()
    d["scenarios"] = len(rep.scenario_costs)
    return d


def _rho_dict(instance: ServiceInstance, rho) -> dict:
    rho = [float(r) for r in rho]
    ne = len(instance.categories)
    return {"volume": dict(zip((c.id for c in instance.categories), rho[:ne])),
            "detour": dict(zip(instance.zone_ids, rho[ne:]))}


# -- commands ---------------------------------------------------------------------------

def _optimise(cfg: RunConfig, instance: ServiceInstance):
    rho0 = cfg.rho_vector(instance, cfg.doc.get("rho0", 0.5))
    t = time.perf_counter()
    res = run(instance, rho0, cfg.optimizer_config())
    return res, time.perf_counter() - t


def cmd_plan(cfg: RunConfig) -> int:
    inst = cfg.instance
    res, wall = _optimise(cfg, inst)
    plan_doc = res.plan.to_dict()
    plan_doc.update(rho=_rho_dict(inst, res.rho.as_array()), deployment=str(
        Deployment.from_plan(res.plan)), reason=res.reason, iterations=res.iterations,
        wall_s=cfg.wall(wall))
    _write_json(cfg.out / "plan.json", plan_doc)
    _write_json(cfg.out / "report.json", _report_dict(res.report))
    if not cfg.record_timing:
        for row in res.trace:
            row.wall = 0.0
    res.write_trace(cfg.out / "trace.csv")
    print(f"{Deployment.from_plan(res.plan)}  C_total={res.report.total:.4f}  "
          f"({res.reason}, {res.iterations} iterations)")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    inst = cfg.instance
    if "deployment" in cfg.doc:
        plan = Deployment(tuple(cfg.doc["deployment"].items())).to_plan(inst)
        rho = None
    elif "rho" in cfg.doc:
        rho = cfg.rho_vector(inst, cfg.doc["rho"])
        plan = solve_p1(inst, ReliabilityVector.from_array(inst, rho), cfg.backend)
    else:
        raise ConfigError("evaluate needs 'rho' or 'deployment'")
    scs = sample_scenarios(inst, cfg.eval_scenarios, cfg.eval_seed)
    rep = evaluate(inst, plan, scs, cfg.backend, cache={}, node_limit=cfg.node_limit)
    out = _report_dict(rep)
    out["deployment"] = str(Deployment.from_plan(plan))
    if rho is not None:
        out["rho"] = _rho_dict(inst, rho)
    _write_json(cfg.out / "report.json", out)
    print(f"{out['deployment']}  C_total={rep.total:.4f}")
    return 0


def cmd_grid(cfg: RunConfig) -> int:
    inst = cfg.instance
    g = cfg.doc.get("grid", {})
    scs = sample_scenarios(inst, cfg.scenarios, cfg.seed)
    ev = GridEvaluator(inst, scs, cfg.backend, cfg.node_limit)
    res = rho_grid(inst, float(g.get("step", 0.05)), scs, mode=g.get("mode", "full"),
                   fill=float(g.get("fill", 0.0)), max_dim=int(g.get("max_dim", 3)), evaluator=ev)
    res.write_csv(cfg.out / "grid.csv")
    best = res.argmin()
    summary = {
        "components": res.components,
        "argmin": [{"rho": list(r.rho), "deployment": str(r.deployment), "C_total": r.total}
                   for r in best],
        "tiers": [{"deployment": str(d), "C_total": c} for d, c in res.tiers()],
        "cells": len(res.rows),
    }
    _write_json(cfg.out / "grid.json", summary)
    if best and best[0].feasible:
        print(f"argmin {best[0].deployment}  C_total={best[0].total:.4f}  ({len(best)} cells)")
    else:
        print("no feasible cell")
    return 0


def sweep_instance(instance: ServiceInstance, axis: str, value: float,
                   cost_factor: float | None = None) -> ServiceInstance:
    """The instance with one sensitivity parameter replaced."""
    if axis == "capacity":
        f = instance.fleet
        return instance.with_changes(fleet=Fleet(f.size, int(value), f.cost_factor
                                                 if cost_factor is None else float(cost_factor)))
    if axis == "detour_limit":
        return instance.with_changes(
            zones=tuple(replace(z, max_detour=float(value)) for z in instance.zones))
    if axis == "demand_multiplier":
        return instance.with_changes(
            categories=tuple(replace(c, volume_dist=scaled(c.volume_dist, float(value)))
                             for c in instance.categories))
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def cmd_sweep(cfg: RunConfig) -> int:
    s = cfg.doc.get("sweep")
    if not s or not s.get("values"):
        raise ConfigError("sweep needs 'sweep': {'axis', 'values'}")
    axis = s.get("axis")
    values = list(s["values"])
    factors = s.get("cost_factors")
    if factors is not None and len(factors) != len(values):
        raise ConfigError("cost_factors must align with values")
    if factors is not None and axis != "capacity":
        raise ConfigError("cost_factors only apply to the capacity axis")
    rows = []
    for i, v in enumerate(values):
        inst = sweep_instance(cfg.instance, axis, v, factors[i] if factors else None)
        res, wall = _optimise(cfg, inst)
        scs = sample_scenarios(inst, cfg.eval_scenarios, cfg.eval_seed)
        rep = evaluate(inst, res.plan, scs, cfg.backend, cache={}, node_limit=cfg.node_limit)
        rho = res.rho
        rows.append([v, inst.fleet.cost_factor, f"{rep.total:.6f}", f"{rep.fixed_cost:.6f}",
                     f"{rep.expected_adhoc:.6f}", f"{np.mean(rho.volume):.6f}",
                     f"{np.mean(rho.detour):.6f}", rep.vehicles_used, f"{rep.occupancy:.6f}",
                     f"{rep.total_detour:.6f}", f"{rep.detour_per_zone_visit:.6f}",
                     f"{cfg.wall(wall):.3f}", res.iterations])
        print(f"{axis}={v}: C_total={rep.total:.4f} vehicles={rep.vehicles_used}")
    _write_csv(cfg.out / "sweep.csv", SWEEP_HEADER, rows)
    return 0


def cmd_fit_detour(cfg: RunConfig) -> int:
    f = cfg.doc.get("fit")
    if not f or "bounds" not in f:
        raise ConfigError("fit-detour needs 'fit': {'bounds', 'counts'}")
    counts = f.get("counts", list(range(1, 25)))
    fit = fit_boundary_curve(tuple(f["bounds"]), counts, int(f.get("trials", 1000)),
                             cfg.seed % 2 ** 32)
    write_curve_csv(fit, cfg.out / "curves.csv")
    _write_json(cfg.out / "fit.json", {
        "converged": fit.converged, "message": str(fit.message),
        "params": None if fit.params is None else dict(zip("abc", fit.params)),
        "curve": fit.curve.to_dict()})
    print("fit", "converged" if fit.converged else "fell back to a table curve",
          fit.params if fit.params else "")
    return 0


def cmd_ingest(cfg: RunConfig) -> int:
    spec = dict(cfg.doc.get("ingest") or {})
    if "requests" not in spec or "grid" not in spec:
        raise ConfigError("ingest needs 'ingest': {'requests', 'grid'}")
    path = cfg.resolve(spec.pop("requests"))
    grid = GridSpec(**spec.pop("grid"))
    allowed = {f.name for f in fields(IngestOptions)} - {"seed"}
    unknown = set(spec) - allowed
    if unknown:
        raise ConfigError(f"unknown ingest options {sorted(unknown)}")
    if "days" in spec and spec["days"] is not None:
        spec["days"] = tuple(spec["days"])
    opts = IngestOptions(**spec, seed=cfg.seed % 2 ** 32)
    res = ingest_file(path, grid, opts)
    _write_json(cfg.out / "instance.json", res.instance)
    _write_json(cfg.out / "ingest_report.json", {
        "counts": res.counts, "windows": len(res.windows),
        "categories": len(res.instance["categories"]),
        "zone_samples": {z: len(v) for z, v in sorted(res.detours.items())}})
    print(f"kept {res.counts['kept']} of {res.counts['read']} records; "
          f"{len(res.instance['categories'])} categories over {len(res.windows)} windows")
    return 0


def cmd_check(cfg: RunConfig) -> int:
    c = cfg.doc.get("check", {})
    wanted = list(c.get("suites", CHECK_SUITES))
    unknown = set(wanted) - set(CHECK_SUITES)
    if unknown:
        raise ConfigError(f"unknown check suites {sorted(unknown)}")
    seeds = int(c.get("micro_seeds", 20))
    plans = int(c.get("plans", 20))
    inst = cfg.instance
    results = []
    for name in wanted:
        if name.startswith(("instance_", "tangent", "assumptions")) and inst is None:
            results.append(checks.SuiteResult(name, True, skipped="no instance configured"))
            continue
        if name == "appendix_fixture":
            r = checks.appendix_fixture()
        elif name == "micro_equivalence":
            r = checks.micro_equivalence(seeds, cfg.seed)
        elif name == "micro_invariance":
            r = checks.increment_invariance(None, plans, cfg.seed)
            r.name = name
        elif name == "tangent_cuts":
            r = checks.tangent_cut_suite(inst)
        elif name == "assumptions":
            r = checks.assumption_suite(inst)
        elif name == "instance_equivalence":
            scs = sample_scenarios(inst, min(cfg.scenarios, 3), cfg.seed)
            r = checks.instance_equivalence(inst, scs, cfg.seed)
        else:
            r = checks.increment_invariance(inst, plans, cfg.seed)
            r.name = name
        r.wall = cfg.wall(r.wall)
        results.append(r)
        status = "skip" if r.skipped else ("pass" if r.passed else "FAIL")
        print(f"{status:4s} {r.name}" + (f"  ({r.skipped})" if r.skipped else ""))
        for m in r.failures[:5]:
            print(f"     {m}")
    ok = all(r.passed for r in results)
    _write_json(cfg.out / "check.json", {"passed": ok, "suites": [r.to_dict() for r in results]})
    return 0 if ok else 1


COMMANDS = {
    "plan": (cmd_plan, "optimise reliabilities and write the plan", True),
    "evaluate": (cmd_evaluate, "simulate a plan given by reliabilities or a deployment", True),
    "grid": (cmd_grid, "evaluate a reliability grid", True),
    "sweep": (cmd_sweep, "sensitivity runs over capacity, detour limit or demand", True),
    "fit-detour": (cmd_fit_detour, "fit a boundary detour curve for a rectangle", False),
    "ingest": (cmd_ingest, "build an instance from a ride-request CSV", False),
    "check": (cmd_check, "run the self-check suites", False),
}


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v <= SEED_MAX:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexbus", description="Zonal flexible bus planning.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text, _) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="run configuration JSON")
        sp.add_argument("--seed", required=True, type=_seed, help="unsigned 64-bit seed")
        sp.add_argument("--out", required=True, help="output directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    fn, _, need = COMMANDS[args.command]
    try:
        cfg = RunConfig.load(args.config, args.seed, args.out, need_instance=need)
        cfg.out.mkdir(parents=True, exist_ok=True)
        return fn(cfg)
    except (ConfigError, InstanceError, IngestError, P1Infeasible, ReliabilityError, OSError,
            json.JSONDecodeError) as exc:
        print(f"flexbus {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

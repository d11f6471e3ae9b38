"""Instance JSON (``schema_version`` 1) loading and dumping.

Top-level keys::

    schema_version  1
    name            free text
    zones           [{id, max_detour, curve, detour_dist, bounds?}]
    links           [{from, to, cost}]            (undirected unless "directed": true)
    routes          "auto" | [{id?, zones, cost?}]  (cost defaults to the link sum)
    categories      [{id?, origin, dest, passengers?, volume, adhoc_cost?, pool?}]
    od_set          [[R, S], ...]                 (optional; defaults to category ODs)
    fleet           {size, capacity, cost_factor?}
    adhoc_ratio     float
    detour_modes    ["zone" | "trip" | "od", ...]
    trip_detour_limit, od_detour_limits [{od: [R, S], limit}]
    reduction_rule  "A" | "B";  max_distance
    scenarios       optional fixed scenario list (explicit requests and matrices)
    algorithm       optional optimiser settings (passed through untouched)
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .detour import BoundaryDetourCurve, DetourMatrix, build_scenario_matrices
from .domain import (DemandCategory, Fleet, InstanceError, Route, ServiceInstance,
                     ServiceRequest, Zone, route_id_for, shortest_direct_routes, undirected)
from .stochastic import Scenario, distribution_from_dict

SCHEMA_VERSION = 1


def _links(doc: dict) -> tuple[tuple[str, str, float], ...]:
    raw = tuple((l["from"], l["to"], float(l["cost"])) for l in doc.get("links", []))
    return raw if doc.get("directed", False) else undirected(raw)


def instance_from_dict(doc: dict) -> ServiceInstance:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise InstanceError(f"unsupported schema_version {doc.get('schema_version')!r}")
    zones = tuple(
        Zone(z["id"], float(z["max_detour"]), BoundaryDetourCurve.from_dict(z["curve"]),
             distribution_from_dict(z["detour_dist"]),
             tuple(float(b) for b in z["bounds"]) if z.get("bounds") else None)
        for z in doc["zones"])
    cats = []
    for k, c in enumerate(doc["categories"]):
        n = int(c.get("passengers", 1))
        cid = c.get("id") or f"{c['origin']}{c['dest']}-{n}"
        pool = tuple(tuple(float(t) for t in p) for p in c["pool"]) if c.get("pool") else None
        cats.append(DemandCategory(cid, c["origin"], c["dest"], n,
                                   distribution_from_dict(c["volume"]),
                                   c.get("adhoc_cost"), pool))
    links = _links(doc)
    od_set = tuple(tuple(o) for o in doc.get("od_set", ()))
    if not od_set:
        seen = []
        for c in cats:
            if c.od not in seen:
                seen.append(c.od)
        od_set = tuple(seen)
    routes_doc = doc.get("routes", "auto")
    if routes_doc == "auto":
        routes = []
        for r in shortest_direct_routes(links, od_set):
            if r.id not in {q.id for q in routes}:
                routes.append(r)
        mode = "auto"
    else:
        routes = []
        for r in routes_doc:
            seq = tuple(r["zones"])
            cost = r.get("cost")
            if cost is None:
                cost = _path_cost(links, seq)
            routes.append(Route(r.get("id") or route_id_for(seq), seq, float(cost)))
        mode = "explicit"
    fleet = doc["fleet"]
    odl = {tuple(e["od"]): float(e["limit"]) for e in doc.get("od_detour_limits", [])}
    return ServiceInstance(
        zones=zones, routes=tuple(routes), categories=tuple(cats),
        fleet=Fleet(int(fleet["size"]), int(fleet["capacity"]), float(fleet.get("cost_factor", 1.0))),
        od_set=od_set, links=links, adhoc_ratio=float(doc.get("adhoc_ratio", 0.9)),
        detour_modes=frozenset(doc.get("detour_modes", ["zone"])),
        trip_detour_limit=doc.get("trip_detour_limit"), od_detour_limits=odl,
        reduction_rule=doc.get("reduction_rule", "A"), max_distance=doc.get("max_distance"),
        route_mode=mode, name=doc.get("name", ""))


def _path_cost(links, seq) -> float:
    costs = {(a, b): c for a, b, c in links}
    try:
        return sum(costs[(a, b)] for a, b in zip(seq, seq[1:]))
    except KeyError as exc:
        raise InstanceError(f"route {seq} uses a missing link {exc}") from None


def instance_to_dict(inst: ServiceInstance) -> dict:
    doc: dict[str, Any] = {"schema_version": SCHEMA_VERSION, "name": inst.name}
    doc["zones"] = []
    for z in inst.zones:
        d = {"id": z.id, "max_detour": z.max_detour, "curve": z.curve.to_dict(),
             "detour_dist": z.detour_dist.to_dict()}
        if z.bounds is not None:
            d["bounds"] = list(z.bounds)
        doc["zones"].append(d)
    doc["links"] = [{"from": a, "to": b, "cost": c} for a, b, c in inst.links]
    doc["directed"] = True
    if inst.route_mode == "auto":
        doc["routes"] = "auto"
    else:
        doc["routes"] = [{"id": r.id, "zones": list(r.zone_sequence), "cost": r.operating_cost}
                         for r in inst.routes]
    doc["categories"] = []
    for c in inst.categories:
        d = {"id": c.id, "origin": c.origin, "dest": c.dest, "passengers": c.passengers,
             "volume": c.volume_dist.to_dict()}
        if c.adhoc_cost is not None:
            d["adhoc_cost"] = c.adhoc_cost
        if c.request_pool is not None:
            d["pool"] = [list(p) for p in c.request_pool]
        doc["categories"].append(d)
    doc["od_set"] = [list(o) for o in inst.od_set]
    doc["fleet"] = {"size": inst.fleet.size, "capacity": inst.fleet.capacity,
                    "cost_factor": inst.fleet.cost_factor}
    doc["adhoc_ratio"] = inst.adhoc_ratio
    doc["detour_modes"] = sorted(inst.detour_modes)
    if inst.trip_detour_limit is not None:
        doc["trip_detour_limit"] = inst.trip_detour_limit
    if inst.od_detour_limits:
        doc["od_detour_limits"] = [{"od": list(k), "limit": v}
                                   for k, v in inst.od_detour_limits.items()]
    doc["reduction_rule"] = inst.reduction_rule
    if inst.max_distance is not None:
        doc["max_distance"] = inst.max_distance
    return doc


def scenarios_from_dict(inst: ServiceInstance, docs: list[dict]) -> list[Scenario]:
    """Fixed scenarios: explicit requests, and explicit matrices or ones built by the instance rule."""
    out = []
    for k, s in enumerate(docs):
        reqs = []
        for j, r in enumerate(s["requests"]):
            cat = inst.category(r["category"])
            reqs.append(ServiceRequest(
                str(r.get("id", j + 1)), cat.id, cat.origin, cat.dest, cat.passengers,
                float(r["origin_detour"]), float(r["dest_detour"]),
                float(r["adhoc_cost"]) if "adhoc_cost" in r else inst.adhoc_cost(cat),
                tuple(r["origin_xy"]) if r.get("origin_xy") else None,
                tuple(r["dest_xy"]) if r.get("dest_xy") else None))
        reqs = tuple(reqs)
        if s.get("matrices"):
            ids = tuple(q.id for q in reqs)
            mats = {z: DetourMatrix(z, ids, np.asarray(m, dtype=float))
                    for z, m in s["matrices"].items()}
        else:
            mats = build_scenario_matrices(inst, reqs)
        out.append(Scenario(int(s.get("id", k)), float(s.get("probability", 1.0 / len(docs))),
                            reqs, mats))
    return out


def load_config(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def load_instance(path) -> ServiceInstance:
    return instance_from_dict(load_config(path))


def dump_instance(inst: ServiceInstance, path) -> None:
    Path(path).write_text(json.dumps(instance_to_dict(inst), indent=2, sort_keys=True) + "\n")


def bundled(name: str) -> Path:
    """Path of a bundled fixture in the package ``data`` directory."""
    p = Path(__file__).with_name("data") / f"{name}.json"
    if not p.exists():
        raise FileNotFoundError(f"no bundled fixture {name!r}")
    return p

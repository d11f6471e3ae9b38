"""Walk through the four-request, one-route fixture by hand.

Shows the zone detour sums, the vehicle load and the two-stage outcome when
zone A's detour budget and the vehicle capacity are tight or generous.
"""

import json

from flexbus.config import bundled, instance_from_dict, scenarios_from_dict
from flexbus.detour import zonal_detour
from flexbus.domain import build_converting_matrix, od_load, od_vector
from flexbus.phase1 import plan_from_deployment
from flexbus.phase2 import solve_p2


def variant(budget_a: float, cap: int):
    doc = json.loads(bundled("appendix_a").read_text())
    for z in doc["zones"]:
        if z["id"] == "A":
            z["max_detour"] = budget_a
    doc["fleet"]["capacity"] = cap
    inst = instance_from_dict(doc)
    return inst, scenarios_from_dict(inst, doc["scenarios"])[0]


def main() -> None:
    inst, sc = variant(8.0, 7)
    for w in ([1, 1, 1, 1], [1, 1, 1, 0], [1, 1, 0, 1]):
        sums = {z: round(zonal_detour(sc.matrices[z], w), 3) for z in inst.zone_ids}
        load = build_converting_matrix(inst.route("ABC"), inst.od_set).load(
            od_vector(od_load(w, sc.requests), inst.od_set))
        print(f"w={w}: zone detours {sums}, onboard load per segment {load.tolist()}")
    for budget, cap in ((8.0, 7), (4.0, 6)):
        inst, sc = variant(budget, cap)
        plan = plan_from_deployment(inst, {"ABC": 1})
        a = solve_p2(inst, plan, sc)
        served = [int(v is not None) for v in a.vehicle]
        print(f"budget A={budget}, cap={cap}: served {served}, "
              f"total cost {plan.cost + a.cost:g}")


if __name__ == "__main__":
    main()

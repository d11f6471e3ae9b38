"""Write a synthetic ride-request CSV for the ingest demo.

Requests cluster around three hubs on a 3 km square and spread over five
weekday mornings, so the ingest step sees several zone pairs and windows.
"""

import csv
import sys
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

HUBS = np.array([[500.0, 2500.0], [1500.0, 1500.0], [2500.0, 500.0]])


def main(path: str = "sample_requests.csv", n: int = 600, seed: int = 4) -> None:
    rng = np.random.default_rng(seed)
    start = datetime(2026, 1, 5, 7, 30)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["origin_x", "origin_y", "dest_x", "dest_y", "timestamp", "passengers"])
        for _ in range(n):
            o, d = rng.choice(3, size=2, replace=False)
            po = np.clip(HUBS[o] + rng.normal(0, 350, 2), 0, 3000)
            pd = np.clip(HUBS[d] + rng.normal(0, 350, 2), 0, 3000)
            ts = start + timedelta(days=int(rng.integers(0, 5)), minutes=float(rng.uniform(0, 60)))
            w.writerow([f"{po[0]:.1f}", f"{po[1]:.1f}", f"{pd[0]:.1f}", f"{pd[1]:.1f}",
                        ts.isoformat(timespec="seconds"), int(rng.choice([1, 1, 1, 2]))])
    print(f"wrote {n} requests to {Path(path).resolve()}")


if __name__ == "__main__":
    main(*sys.argv[1:2])

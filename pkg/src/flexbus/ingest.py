"""Turn raw ride-request records into an instance document.

Records carry projected coordinates in metres.  Zones are the cells of a
rectangular grid, named row by row from the top-left cell (``A``, ``B``,
...).  Demand volumes are counted per time window and per (origin, destination,
party size); segment detours are distances from the zone centroid.
"""

from __future__ import annotations

import csv
import logging
import math
import string
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, time as dtime, timedelta, timezone
from pathlib import Path

import numpy as np

from .config import SCHEMA_VERSION
from .detour import DETOUR_MIN_PER_M, fit_boundary_curve
from .stochastic import Empirical

log = logging.getLogger(__name__)

HEADER = ("origin_x", "origin_y", "dest_x", "dest_y", "timestamp", "passengers")
WEEKDAYS = ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday")


class IngestError(ValueError):
    """A malformed request file; the message names the offending line."""


@dataclass(frozen=True)
class RequestRecord:
    origin: tuple[float, float]
    dest: tuple[float, float]
    timestamp: datetime
    passengers: int


def _parse_time(text: str) -> datetime:
    text = text.strip()
    try:
        return datetime.fromtimestamp(float(text), tz=timezone.utc).replace(tzinfo=None)
    except ValueError:
        pass
    return datetime.fromisoformat(text)


def read_requests(path) -> list[RequestRecord]:
    """Parse a request CSV; raises :class:`IngestError` with the line number on bad rows."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head is None or tuple(h.strip() for h in head) != HEADER:
            raise IngestError(f"{path}: line 1: expected header {','.join(HEADER)}")
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(HEADER):
                raise IngestError(f"{path}: line {line}: expected {len(HEADER)} fields, "
                                  f"got {len(row)}")
            try:
                ox, oy, dx, dy = (float(c) for c in row[:4])
                ts = _parse_time(row[4])
                pax = int(row[5])
            except ValueError as exc:
                raise IngestError(f"{path}: line {line}: {exc}") from None
            if not all(math.isfinite(v) for v in (ox, oy, dx, dy)):
                raise IngestError(f"{path}: line {line}: non-finite coordinate")
            if pax < 1:
                raise IngestError(f"{path}: line {line}: passengers must be >= 1")
            out.append(RequestRecord((ox, oy), (dx, dy), ts, pax))
    return out


def _zone_name(k: int) -> str:
    letters = string.ascii_uppercase
    name = ""
    k += 1
    while k:
        k, r = divmod(k - 1, 26)
        name = letters[r] + name
    return name


@dataclass(frozen=True)
class GridSpec:
    """``nx`` by ``ny`` equal cells covering ``[x0, x1] x [y0, y1]``."""

    x0: float
    y0: float
    x1: float
    y1: float
    nx: int
    ny: int

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0 and self.nx >= 1 and self.ny >= 1):
            raise ValueError("degenerate grid")

    @property
    def cell(self) -> tuple[float, float]:
        return (self.x1 - self.x0) / self.nx, (self.y1 - self.y0) / self.ny

    def cells(self) -> list[tuple[str, int, int, tuple[float, float, float, float]]]:
        """``(name, column, row-from-top, bounds)`` for every cell."""
        w, h = self.cell
        out = []
        for r in range(self.ny):
            for c in range(self.nx):
                ytop = self.y1 - r * h
                out.append((_zone_name(r * self.nx + c), c, r,
                            (self.x0 + c * w, ytop - h, self.x0 + (c + 1) * w, ytop)))
        return out

    def locate(self, x: float, y: float) -> str | None:
        if not (self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1):
            return None
        w, h = self.cell
        c = min(int((x - self.x0) / w), self.nx - 1)
        r = min(int((self.y1 - y) / h), self.ny - 1)
        return _zone_name(r * self.nx + c)


@dataclass
class IngestOptions:
    window_minutes: float = 15.0
    start: str | None = None           # "HH:MM"; None counts every window in the data
    days: tuple[str, ...] | None = None
    scale: float = 1.0
    max_detour: float = 8.0
    capacity: int = 10
    fleet_size: int = 50
    adhoc_ratio: float = 0.9
    edge_cost: float = 5.0
    corner_cost: float = 7.0
    fit_curves: bool = True
    curve_trials: int = 1000
    seed: int = 0


@dataclass
class IngestResult:
    instance: dict
    counts: dict[str, int]
    windows: list[tuple]
    volumes: dict[tuple[str, str, int], list[int]] = field(default_factory=dict)
    detours: dict[str, list[float]] = field(default_factory=dict)


def _weekday(name: str) -> str:
    """Full lower-case weekday from a name or a prefix of at least three letters."""
    key = name.strip().lower()
    hits = [d for d in WEEKDAYS if len(key) >= 3 and d.startswith(key)]
    if len(hits) != 1:
        raise IngestError(f"unknown weekday {name!r}")
    return hits[0]


def _window_key(ts: datetime, opts: IngestOptions):
    """Window identifier of a timestamp, or None when the filters drop it."""
    if opts.days is not None and WEEKDAYS[ts.weekday()] not in opts.days:
        return None
    width = timedelta(minutes=opts.window_minutes)
    if opts.start is not None:
        h, m = (int(t) for t in opts.start.split(":"))
        begin = datetime.combine(ts.date(), dtime(h, m))
        return (ts.date().isoformat(),) if begin <= ts < begin + width else None
    minutes = ts.hour * 60 + ts.minute + ts.second / 60.0
    return ts.date().isoformat(), int(minutes // opts.window_minutes)


def _links(grid: GridSpec, opts: IngestOptions) -> list[dict]:
    names = {(c, r): n for n, c, r, _ in grid.cells()}
    links = []
    for (c, r), a in names.items():
        for dc, dr, cost in ((1, 0, opts.edge_cost), (0, 1, opts.edge_cost),
                             (1, 1, opts.corner_cost), (1, -1, opts.corner_cost)):
            b = names.get((c + dc, r + dr))
            if b is not None:
                links.append({"from": a, "to": b, "cost": cost})
    return links


def ingest(records: list[RequestRecord], grid: GridSpec, opts: IngestOptions | None = None
           ) -> IngestResult:
    """Empirical demand and detour laws per zone pair and zone, as an instance document."""
    opts = opts or IngestOptions()
    if opts.days is not None:
        opts.days = tuple(_weekday(d) for d in opts.days)
    cells = {n: b for n, _, _, b in grid.cells()}
    centroid = {n: ((b[0] + b[2]) / 2, (b[1] + b[3]) / 2) for n, b in cells.items()}
    counts = Counter(read=len(records))
    windows: set = set()
    per_window: dict = defaultdict(Counter)
    pools: dict = defaultdict(list)
    detours: dict[str, list[float]] = defaultdict(list)
    for rec in records:
        key = _window_key(rec.timestamp, opts)
        if key is None:
            counts["time_filtered"] += 1
            continue
        counts["parsed"] += 1
        windows.add(key)
        o = grid.locate(*rec.origin)
        d = grid.locate(*rec.dest)
        if o is None or d is None:
            counts["out_of_bounds"] += 1
            continue
        if o == d:
            counts["intra_zone"] += 1
            continue
        counts["kept"] += 1
        cat = (o, d, rec.passengers)
        per_window[key][cat] += 1
        pools[cat].append((*rec.origin, *rec.dest))
        for z, (x, y) in ((o, rec.origin), (d, rec.dest)):
            cx, cy = centroid[z]
            detours[z].append(math.hypot(x - cx, y - cy) * DETOUR_MIN_PER_M)
    if counts["out_of_bounds"]:
        log.warning("%d records outside the grid were dropped", counts["out_of_bounds"])
    if not counts["kept"]:
        log.warning("no inter-zone records remain; the instance has no demand")

    order = sorted(windows)
    volumes = {}
    for cat in sorted(pools):
        raw = np.array([per_window[w][cat] for w in order], dtype=float)
        volumes[cat] = [int(v) for v in np.floor(raw * opts.scale + 0.5)]

    zones = []
    diag = math.hypot(*grid.cell)
    for name, bounds in cells.items():
        samples = detours.get(name) or [0.0]
        dist = Empirical.from_samples(samples, integer_valued=False)
        if opts.fit_curves:
            fit = fit_boundary_curve(bounds, range(1, 2 * opts.capacity + 1), opts.curve_trials,
                                     opts.seed)
            curve = fit.curve.to_dict()
        else:
            curve = {"form": "linear", "a": 0.0, "b": 0.0}
        zones.append({"id": name, "max_detour": opts.max_detour, "curve": curve,
                      "detour_dist": dist.to_dict(), "bounds": list(bounds)})
    cats = []
    for (o, d, n), vol in volumes.items():
        if not any(vol):
            continue
        cats.append({"id": f"{o}{d}-{n}", "origin": o, "dest": d, "passengers": n,
                     "volume": Empirical.from_samples(vol).to_dict(),
                     "pool": [list(p) for p in pools[(o, d, n)]]})
    doc = {"schema_version": SCHEMA_VERSION, "name": "ingested", "zones": zones,
           "links": _links(grid, opts), "routes": "auto", "categories": cats,
           "fleet": {"size": opts.fleet_size, "capacity": opts.capacity},
           "adhoc_ratio": opts.adhoc_ratio, "detour_modes": ["zone"], "reduction_rule": "A",
           "max_distance": diag}
    full = {k: counts.get(k, 0) for k in ("read", "time_filtered", "parsed", "kept",
                                          "intra_zone", "out_of_bounds")}
    return IngestResult(doc, full, order, volumes, dict(detours))


def ingest_file(path, grid: GridSpec, opts: IngestOptions | None = None) -> IngestResult:
    return ingest(read_requests(Path(path)), grid, opts)

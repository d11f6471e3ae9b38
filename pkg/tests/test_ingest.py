import logging
from datetime import datetime

import pytest
from hypothesis import given, settings, strategies as st

from flexbus.config import instance_from_dict
from flexbus.ingest import (GridSpec, IngestError, IngestOptions, RequestRecord, ingest,
                            read_requests)

GRID = GridSpec(0, 0, 300, 300, 3, 3)
FAST = IngestOptions(fit_curves=False, capacity=4, fleet_size=5)


def rec(o, d, minute, n=1, day=5):
    return RequestRecord(o, d, datetime(2026, 1, day, 8, minute), n)


def test_zone_naming_is_row_major_from_top_left():
    assert GRID.locate(50, 250) == "A" and GRID.locate(250, 250) == "C"
    assert GRID.locate(50, 50) == "G" and GRID.locate(250, 50) == "I"
    assert GRID.locate(300, 0) == "I" and GRID.locate(301, 0) is None
    assert [c[0] for c in GRID.cells()] == list("ABCDEFGHI")


def test_hand_tally_on_three_by_three_grid():
    rows = [rec((50, 250), (250, 50), 1), rec((60, 240), (240, 60), 3),
            rec((50, 250), (250, 50), 20),
            rec((150, 150), (50, 250), 4, n=2),
            rec((10, 10), (20, 20), 5),            # intra-zone G
            rec((-5, 10), (20, 20), 6)]            # origin off the grid
    res = ingest(rows, GRID, FAST)
    assert res.counts == {"read": 6, "time_filtered": 0, "parsed": 6, "kept": 4,
                          "intra_zone": 1, "out_of_bounds": 1}
    assert len(res.windows) == 2
    assert res.volumes[("A", "I", 1)] == [2, 1]
    assert res.volumes[("E", "A", 2)] == [1, 0]
    ids = {c["id"] for c in res.instance["categories"]}
    assert ids == {"AI-1", "EA-2"}
    inst = instance_from_dict(res.instance)
    assert len(inst.zones) == 9


def test_centroid_request_has_zero_detour():
    res = ingest([rec((50, 250), (150, 250), 0)], GRID, FAST)
    assert res.detours["A"] == [0.0] and res.detours["B"] == [0.0]


def test_all_intra_zone_records_give_no_demand(caplog):
    with caplog.at_level(logging.WARNING, logger="flexbus"):
        res = ingest([rec((10, 10), (20, 20), 1), rec((110, 110), (120, 120), 2)], GRID, FAST)
    assert res.instance["categories"] == [] and res.counts["intra_zone"] == 2
    assert "no inter-zone records" in caplog.text


def test_time_window_and_weekday_filters():
    rows = [rec((50, 250), (250, 50), 1), rec((50, 250), (250, 50), 20),
            rec((50, 250), (250, 50), 2, day=4)]   # 2026-01-04 is a Sunday
    opts = IngestOptions(fit_curves=False, start="08:00", days=("mon",))
    res = ingest(rows, GRID, opts)
    assert res.counts["time_filtered"] == 2 and res.counts["kept"] == 1


def test_scale_rounds_half_up():
    rows = [rec((50, 250), (250, 50), m) for m in (1, 2, 3)]
    opts = IngestOptions(fit_curves=False, scale=0.5)
    assert ingest(rows, GRID, opts).volumes[("A", "I", 1)] == [2]


def test_reader_reports_line_numbers(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("origin_x,origin_y,dest_x,dest_y,timestamp,passengers\n"
                 "1,2,3,4,2026-01-05T08:00:00,1\n"
                 "1,2,3,4,2026-01-05T08:00:00,0\n")
    with pytest.raises(IngestError, match="line 3"):
        read_requests(p)
    p.write_text("a,b\n")
    with pytest.raises(IngestError, match="line 1"):
        read_requests(p)


def test_reader_accepts_epoch_and_iso(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("origin_x,origin_y,dest_x,dest_y,timestamp,passengers\n"
                 "1,2,3,4,1767600000,1\n"
                 "1,2,3,4,2026-01-05T08:00:00,2\n")
    rows = read_requests(p)
    assert len(rows) == 2 and rows[1].passengers == 2


pts = st.tuples(st.floats(-50, 350), st.floats(-50, 350))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(pts, pts, st.integers(0, 59)), max_size=30))
def test_counts_are_conserved(rows):
    res = ingest([rec(o, d, m) for o, d, m in rows], GRID, FAST)
    c = res.counts
    assert c["read"] == c["time_filtered"] + c["parsed"]
    assert c["parsed"] == c["kept"] + c["intra_zone"] + c["out_of_bounds"]
    assert sum(sum(v) for v in res.volumes.values()) == c["kept"]


def test_unknown_weekday_rejected():
    with pytest.raises(IngestError):
        ingest([], GRID, IngestOptions(fit_curves=False, days=("mo",)))

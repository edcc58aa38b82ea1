import datetime as dt

import numpy as np
import pytest

from operon.datagen import make_rng
from operon.ingest import (PV_GRID, PVRecord, SchemaError, read_pv_csv, synth_pv_generator,
                           window_and_interpolate, write_pv_csv)

TIMES = [f"{i // 2}:{30 * (i % 2):02d}" for i in range(48)]


def _record(values, cid=1, day=dt.date(2010, 7, 1)):
    return PVRecord(cid, day, "GG", np.asarray(values, dtype=float))


def _write_rows(path, rows, header=None, preamble=True):
    header = header or (["Customer", "Generator Capacity", "Postcode", "Consumption Category",
                         "date"] + TIMES)
    lines = []
    if preamble:
        lines.append("Solar home electricity data,,,")
    lines.append(",".join(header))
    lines.extend(",".join(r) for r in rows)
    path.write_text("\n".join(lines) + "\n")


def _row(cid, cat, date, vals):
    return [str(cid), "1.5", "2076", cat, date] + [f"{v:g}" for v in vals]


# ---------------------------------------------------------------------------
# windowing

def test_window_grid_shape():
    tr = window_and_interpolate(_record(np.ones(48)))
    assert tr.grid.t0 == 0.0
    assert tr.grid.dt == 0.05
    assert tr.grid.n_points == 201
    assert tr.grid == PV_GRID


def test_window_constant():
    tr = window_and_interpolate(_record(np.full(48, 0.37)))
    np.testing.assert_array_equal(tr.states[:, 0], 0.37)


def test_window_linear_reproduction():
    vals = 0.1 + 0.02 * np.arange(48)
    tr = window_and_interpolate(_record(vals))
    # reading 18 + 2t lands at hour t
    expect = 0.1 + 0.02 * (18 + 2 * tr.times)
    np.testing.assert_allclose(tr.states[:, 0], expect, atol=1e-14)


def test_window_triangle_peak_at_five_hours():
    idx = np.arange(48)
    vals = np.clip(1.0 - np.abs(idx - 28) / 10.0, 0.0, None)
    tr = window_and_interpolate(_record(vals))
    k = int(np.argmax(tr.states[:, 0]))
    assert tr.times[k] == pytest.approx(5.0)
    assert tr.states[k, 0] == 1.0


def test_window_knots_equal_raw_readings():
    r = np.random.default_rng(0)
    vals = r.uniform(0, 1, 48)
    tr = window_and_interpolate(_record(vals))
    np.testing.assert_array_equal(tr.states[::10, 0], vals[18:39])


def test_window_uses_indices_18_to_38_only():
    vals = np.zeros(48)
    vals[:18] = 99.0
    vals[39:] = 99.0
    tr = window_and_interpolate(_record(vals))
    assert np.all(tr.states == 0.0)


def test_record_requires_48_readings():
    with pytest.raises(ValueError):
        _record(np.ones(47))


# ---------------------------------------------------------------------------
# reading

def test_read_filters_category_customer_date(tmp_path):
    rows = [
        _row(1, "GG", "01/07/2010", np.ones(48)),
        _row(1, "GC", "01/07/2010", np.ones(48)),
        _row(2, "GG", "01/07/2010", np.ones(48)),
        _row(3, "GG", "02/07/2010", np.ones(48)),
        _row(3, "GG", "05/07/2010", np.ones(48)),
    ]
    p = tmp_path / "pv.csv"
    _write_rows(p, rows)
    recs = read_pv_csv(p, customer_range=(2, 3),
                       date_range=(dt.date(2010, 7, 1), dt.date(2010, 7, 3)))
    assert [(r.customer_id, r.date) for r in recs] == [(2, dt.date(2010, 7, 1)),
                                                       (3, dt.date(2010, 7, 2))]
    assert all(r.category == "GG" for r in recs)


def test_read_empty_range(tmp_path):
    p = tmp_path / "pv.csv"
    _write_rows(p, [_row(1, "GG", "01/07/2010", np.ones(48))])
    assert read_pv_csv(p, customer_range=(5, 9)) == []


def test_read_skips_short_row(tmp_path):
    p = tmp_path / "pv.csv"
    _write_rows(p, [_row(1, "GG", "01/07/2010", np.ones(48)),
                    _row(2, "GG", "01/07/2010", np.ones(47)),
                    _row(3, "GG", "01/07/2010", np.ones(48))])
    recs = read_pv_csv(p)
    assert [r.customer_id for r in recs] == [1, 3]
    assert recs.skipped == 1
    assert recs.reasons == {"field count": 1}


def test_read_skips_unparsable_and_negative(tmp_path):
    bad = _row(2, "GG", "01/07/2010", np.ones(48))
    bad[10] = "n/a"
    neg = _row(3, "GG", "01/07/2010", -np.ones(48))
    p = tmp_path / "pv.csv"
    _write_rows(p, [_row(1, "GG", "01/07/2010", np.ones(48)), bad, neg])
    recs = read_pv_csv(p)
    assert len(recs) == 1
    assert recs.skipped == 2


def test_read_missing_columns(tmp_path):
    p = tmp_path / "pv.csv"
    _write_rows(p, [], header=["Customer", "Consumption Category"] + TIMES)
    with pytest.raises(SchemaError):
        read_pv_csv(p)
    _write_rows(p, [], header=["Customer", "date"] + TIMES)
    with pytest.raises(SchemaError, match="category"):
        read_pv_csv(p)
    _write_rows(p, [], header=["Customer", "Consumption Category", "date"] + TIMES[:40])
    with pytest.raises(SchemaError, match="half-hour"):
        read_pv_csv(p)


def test_read_accepts_iso_and_short_dates(tmp_path):
    p = tmp_path / "pv.csv"
    _write_rows(p, [_row(1, "GG", "2010-07-01", np.ones(48)),
                    _row(1, "GG", "2-Jul-10", np.ones(48))])
    days = [r.date for r in read_pv_csv(p)]
    assert days == [dt.date(2010, 7, 1), dt.date(2010, 7, 2)]


def test_read_is_deterministic(tmp_path):
    p = tmp_path / "pv.csv"
    write_pv_csv(synth_pv_generator(3, 4, make_rng(0)), p)
    a, b = read_pv_csv(p), read_pv_csv(p)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.half_hourly, y.half_hourly)


# ---------------------------------------------------------------------------
# synthetic generator

def test_synth_round_trip(tmp_path):
    recs = synth_pv_generator(4, 5, make_rng(1))
    p = tmp_path / "pv.csv"
    write_pv_csv(recs, p)
    back = read_pv_csv(p)
    assert back.skipped == 0
    assert len(back) == len(recs)
    for a, b in zip(recs, back):
        assert (a.customer_id, a.date, a.category) == (b.customer_id, b.date, b.category)
        np.testing.assert_array_equal(a.half_hourly, b.half_hourly)


def test_synth_night_is_zero():
    recs = synth_pv_generator(5, 10, make_rng(2))
    for r in recs:
        assert np.all(r.half_hourly[:14] == 0.0)
        assert np.all(r.half_hourly[41:] == 0.0)
        assert np.all(r.half_hourly >= 0.0)
        assert r.half_hourly[28] > 0.0


def test_synth_zero_amplitude():
    recs = synth_pv_generator(2, 3, make_rng(3), amplitude=0.0)
    assert all(np.all(r.half_hourly == 0.0) for r in recs)


def test_synth_rejects_empty():
    with pytest.raises(ValueError):
        synth_pv_generator(0, 3, make_rng(0))


def test_full_year_fifty_customers(tmp_path):
    recs = synth_pv_generator(52, 370, make_rng(4), start=dt.date(2010, 6, 28))
    p = tmp_path / "year.csv"
    write_pv_csv(recs, p)
    # 30 June 2010 through 30 June 2011 inclusive is 366 days
    got = read_pv_csv(p, customer_range=(1, 50),
                      date_range=(dt.date(2010, 6, 30), dt.date(2011, 6, 30)))
    assert len(got) == 18300
    assert len({r.customer_id for r in got}) == 50
    assert len({r.date for r in got}) == 366

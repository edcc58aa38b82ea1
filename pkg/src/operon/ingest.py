"""Half-hourly rooftop PV generation records in the Ausgrid CSV layout.

Only gross-generation (GG) rows are used. A reading at column index ``i``
(0-based) is taken as the value at ``i / 2`` hours after midnight, so the
daylight window 18..38 spans 9:00 to 19:00.
"""
from __future__ import annotations

import csv
import datetime as dt
import math
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dynamics import TimeGrid, Trajectory

READINGS_PER_DAY = 48
WINDOW = (18, 38)
SUBDIVISIONS = 10          # 0.5 h raw spacing / 0.05 h grid spacing
PV_GRID = TimeGrid(0.0, 0.05, 201)
CATEGORIES = ("GG", "GC", "CL")
DAYLIGHT = (14, 40)

_TIME_COL = re.compile(r"^\s*\d{1,2}:\d{2}\s*$")
_CUSTOMER_KEYS = ("customer", "customer_id", "customer id")
_CATEGORY_KEYS = ("consumption category", "category")


class SchemaError(ValueError):
    pass


@dataclass
class PVRecord:
    customer_id: int
    date: dt.date
    category: str
    half_hourly: np.ndarray

    def __post_init__(self):
        self.half_hourly = np.asarray(self.half_hourly, dtype=np.float64)
        if self.half_hourly.shape != (READINGS_PER_DAY,):
            raise ValueError(f"expected {READINGS_PER_DAY} readings, got {self.half_hourly.shape}")


class PVRecords(list):
    """List of records plus a tally of rows that were skipped."""

    def __init__(self, items=(), skipped: int = 0, reasons: Optional[Dict[str, int]] = None):
        super().__init__(items)
        self.skipped = skipped
        self.reasons = reasons or {}


def parse_date(text: str) -> dt.date:
    text = text.strip()
    for fmt in ("%Y-%m-%d", "%d/%m/%Y", "%d-%b-%y", "%d/%m/%y"):
        try:
            return dt.datetime.strptime(text, fmt).date()
        except ValueError:
            continue
    raise ValueError(f"unrecognized date {text!r}")


def _locate_header(rows: List[List[str]]) -> Tuple[int, int, int, int, List[int]]:
    for r, row in enumerate(rows[:10]):
        low = [c.strip().lower() for c in row]
        cust = next((low.index(k) for k in _CUSTOMER_KEYS if k in low), None)
        cat = next((low.index(k) for k in _CATEGORY_KEYS if k in low), None)
        date = low.index("date") if "date" in low else None
        times = [i for i, c in enumerate(row) if _TIME_COL.match(c)]
        if cust is not None and date is not None:
            if cat is None:
                raise SchemaError("missing required column: category")
            if len(times) != READINGS_PER_DAY:
                raise SchemaError(f"expected {READINGS_PER_DAY} half-hour columns, found {len(times)}")
            return r, cust, cat, date, times
    raise SchemaError("missing required columns: customer id and date")


def read_pv_csv(path, customer_range: Optional[Tuple[int, int]] = None,
                date_range: Optional[Tuple[dt.date, dt.date]] = None,
                category: str = "GG") -> PVRecords:
    """Read GG rows, filtered by inclusive customer and date ranges.

    Rows with the wrong number of fields, unparsable numbers or dates are
    skipped and tallied in the returned ``PVRecords``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError("empty file")
    hdr, c_cust, c_cat, c_date, c_times = _locate_header(rows)
    width = len(rows[hdr])
    out = PVRecords()

    def skip(reason: str) -> None:
        out.skipped += 1
        out.reasons[reason] = out.reasons.get(reason, 0) + 1

    for row in rows[hdr + 1:]:
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width:
            skip("field count")
            continue
        if row[c_cat].strip() != category:
            continue
        try:
            cid = int(row[c_cust])
            day = parse_date(row[c_date])
            vals = np.array([float(row[i]) for i in c_times])
        except ValueError:
            skip("parse")
            continue
        if not np.all(np.isfinite(vals)) or (category == "GG" and np.any(vals < 0)):
            skip("value")
            continue
        if customer_range is not None and not customer_range[0] <= cid <= customer_range[1]:
            continue
        if date_range is not None and not date_range[0] <= day <= date_range[1]:
            continue
        out.append(PVRecord(cid, day, category, vals))
    return out


def write_pv_csv(records: Sequence[PVRecord], path) -> None:
    """Ausgrid column layout: Customer, Consumption Category, date, 0:00..23:30."""
    times = [f"{i // 2}:{30 * (i % 2):02d}" for i in range(READINGS_PER_DAY)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["Customer", "Consumption Category", "date"] + times)
        for rec in records:
            w.writerow([str(rec.customer_id), rec.category, rec.date.strftime("%d/%m/%Y")]
                       + [f"{v:.17g}" for v in rec.half_hourly])


def window_and_interpolate(record: PVRecord) -> Trajectory:
    """Readings 18..38 mapped onto [0, 10] h and linearly refined to 0.05 h."""
    raw = record.half_hourly[WINDOW[0]:WINDOW[1] + 1]
    k = np.arange(PV_GRID.n_points)
    j = np.minimum(k // SUBDIVISIONS, raw.size - 2)
    w = (k - j * SUBDIVISIONS) / SUBDIVISIONS
    vals = raw[j] + w * (raw[j + 1] - raw[j])
    knots = k % SUBDIVISIONS == 0
    vals[knots] = raw[k[knots] // SUBDIVISIONS]
    return Trajectory(PV_GRID, vals[:, None])


def synth_pv_generator(n_customers: int, n_days: int, rng: np.random.Generator,
                       start: dt.date = dt.date(2010, 7, 1), first_customer: int = 1,
                       amplitude: Optional[float] = None, cloudiness: float = 0.03) -> List[PVRecord]:
    """Bell-shaped daylight generation curves.

    Each customer gets a peak amplitude (kWh per half hour), each day a
    regional weather multiplier with a small per-customer perturbation, and
    each reading a mild multiplicative cloud factor. Readings outside the
    daylight indices 14..40 are zero.
    """
    if n_customers < 1 or n_days < 1:
        raise ValueError("counts must be at least 1")
    amps = (rng.uniform(0.25, 0.6, n_customers) if amplitude is None
            else np.full(n_customers, float(amplitude)))
    weather = rng.uniform(0.35, 1.0, n_days)
    idx = np.arange(READINGS_PER_DAY)
    lo, hi = DAYLIGHT
    inside = (idx >= lo) & (idx <= hi)
    records = []
    for d in range(n_days):
        day = start + dt.timedelta(days=d)
        season = 1.0 + 0.15 * math.cos(2 * math.pi * (day.timetuple().tm_yday - 355) / 365.25)
        shape = np.where(inside, np.sin(np.pi * np.clip(idx - lo, 0, hi - lo) / (hi - lo)), 0.0)
        shape = np.clip(shape, 0.0, None)
        shape = shape ** (1.5 / season)
        for c in range(n_customers):
            local = np.clip(weather[d] * (1 + 0.05 * rng.standard_normal()), 0.05, 1.2)
            cloud = np.clip(1 + cloudiness * rng.standard_normal(READINGS_PER_DAY), 0.0, None)
            vals = amps[c] * local * shape * cloud
            vals[~inside] = 0.0
            records.append(PVRecord(first_customer + c, day, "GG", vals))
    return records

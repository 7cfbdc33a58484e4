"""Time-series container, CSV ingestion and elementary transforms.

Every analysis module consumes a :class:`TimeSeries`.  Time coordinates are
observation indices (trading days counted from the series start); calendar
dates, when present, ride along as labels only.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import date, datetime
from typing import Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

KINDS = ("level", "log-level", "return")


class SeriesError(ValueError):
    """Raised for malformed input or an invariant violation."""


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Ordered observations of one instrument.

    ``times`` are strictly increasing numbers (integer observation indices for
    anything read from disk), ``values`` are finite reals, ``dates`` is either
    ``None`` or one ISO date string per observation.
    """

    label: str
    times: np.ndarray
    values: np.ndarray
    kind: str = "level"
    dates: Optional[tuple] = None

    def __post_init__(self):
        times = np.asarray(self.times)
        if times.dtype.kind not in "iuf":
            raise SeriesError("times must be numeric")
        times = times.astype(np.int64) if times.dtype.kind in "iu" else times.astype(float)
        values = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or values.ndim != 1:
            raise SeriesError("times and values must be one-dimensional")
        if len(times) != len(values):
            raise SeriesError(f"length mismatch: {len(times)} times vs {len(values)} values")
        if len(times) < 2:
            raise SeriesError(f"series {self.label!r} needs at least 2 observations, got {len(times)}")
        if np.any(np.diff(times) <= 0):
            raise SeriesError("times must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise SeriesError("values must be finite")
        if self.kind not in KINDS:
            raise SeriesError(f"unknown kind {self.kind!r}")
        dates = self.dates
        if dates is not None:
            dates = tuple(str(d) for d in dates)
            if len(dates) != len(times):
                raise SeriesError("dates must have one entry per observation")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dates", dates)

    def __len__(self):
        return len(self.values)

    def __eq__(self, other):
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return (
            self.label == other.label
            and self.kind == other.kind
            and self.dates == other.dates
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    def local_times(self) -> np.ndarray:
        """Window-relative fitting coordinate: 1 at the first observation."""
        return (self.times - self.times[0] + 1).astype(float)

    def date_at(self, i: int) -> Optional[str]:
        return None if self.dates is None else self.dates[i]


@dataclass
class CsvConfig:
    """Column mapping and parsing policy for :func:`parse_price_csv`.

    Columns may be given by header name or by 0-based index.  ``date_col``
    holds either ISO ``YYYY-MM-DD`` dates (observations are then indexed
    1..N after sorting) or raw integer indices (used as times directly).
    """

    date_col: Union[str, int] = 0
    value_col: Union[str, int, None] = None
    time_col: Union[str, int, None] = None
    delimiter: str = ","
    date_format: str = "%Y-%m-%d"
    header: bool = True
    on_error: str = "skip"
    label: Optional[str] = None

    def __post_init__(self):
        if self.on_error not in ("skip", "fail"):
            raise SeriesError("on_error must be 'skip' or 'fail'")


@dataclass
class ParseReport:
    rows_read: int = 0
    rows_skipped: int = 0
    reasons: list = field(default_factory=list)


def _resolve_column(spec, header, what, required=True):
    if spec is None:
        return None
    if isinstance(spec, int) or (isinstance(spec, str) and spec.isdigit()):
        return int(spec)
    if header is None:
        raise SeriesError(f"{what} column {spec!r} given by name but input has no header")
    lowered = [h.strip().lower() for h in header]
    if spec.strip().lower() in lowered:
        return lowered.index(spec.strip().lower())
    if required:
        raise SeriesError(f"{what} column {spec!r} missing (header: {header})")
    return None


def _default_value_col(header, ncols):
    if header is not None:
        lowered = [h.strip().lower() for h in header]
        for name in ("close", "adj close", "value", "price"):
            if name in lowered:
                return lowered.index(name)
    return ncols - 1


def parse_price_csv(text: Union[str, bytes], config: Optional[CsvConfig] = None,
                    report: Optional[ParseReport] = None) -> TimeSeries:
    """Parse delimiter-separated text into a level :class:`TimeSeries`.

    Lines starting with ``#`` are comments; ``# kind=...`` and ``# label=...``
    comments (as written by :func:`to_csv`) restore that metadata.  Bad rows
    are skipped and counted (``on_error='skip'``) or raise (``'fail'``).
    """
    cfg = config or CsvConfig()
    rep = report if report is not None else ParseReport()
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    meta = {}
    lines = []
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            body = stripped.lstrip("#").strip()
            if "=" in body:
                key, _, val = body.partition("=")
                meta[key.strip()] = val.strip()
            continue
        lines.append(line)
    if not lines:
        raise SeriesError("empty input")

    rows = list(csv.reader(lines, delimiter=cfg.delimiter))
    header = None
    if cfg.header:
        header, rows = rows[0], rows[1:]
    if not rows:
        raise SeriesError("no data rows")
    ncols = max(len(r) for r in rows)

    date_idx = _resolve_column(cfg.date_col, header, "date")
    value_idx = _resolve_column(cfg.value_col, header, "value")
    if value_idx is None:
        value_idx = _default_value_col(header, ncols)
    time_idx = _resolve_column(cfg.time_col, header, "time")
    if time_idx is None and header is not None and cfg.time_col is None:
        lowered = [h.strip().lower() for h in header]
        if "time" in lowered and lowered.index("time") != date_idx:
            time_idx = lowered.index("time")
    if value_idx >= ncols:
        raise SeriesError(f"value column {value_idx} missing")

    def bad(lineno, why):
        if cfg.on_error == "fail":
            raise SeriesError(f"row {lineno}: {why}")
        rep.rows_skipped += 1
        rep.reasons.append(f"row {lineno}: {why}")

    keys, dates, explicit_times, values = [], [], [], []
    dated = None
    for lineno, row in enumerate(rows, start=2 if cfg.header else 1):
        rep.rows_read += 1
        if len(row) <= max(date_idx, value_idx, time_idx or 0):
            bad(lineno, "too few columns")
            continue
        raw_key = row[date_idx].strip()
        try:
            value = float(row[value_idx])
        except ValueError:
            bad(lineno, f"unparsable value {row[value_idx]!r}")
            continue
        if not math.isfinite(value):
            bad(lineno, "non-finite value")
            continue
        try:
            key = int(raw_key)
            is_date = False
        except ValueError:
            try:
                key = datetime.strptime(raw_key, cfg.date_format).date()
                is_date = True
            except ValueError:
                if time_idx is not None and raw_key == "":
                    key, is_date = None, False
                else:
                    bad(lineno, f"unparsable date {raw_key!r}")
                    continue
        if dated is None and key is not None:
            dated = is_date
        elif key is not None and dated != is_date:
            bad(lineno, "mixed integer and calendar keys")
            continue
        t = None
        if time_idx is not None:
            try:
                t = int(row[time_idx])
            except ValueError:
                bad(lineno, f"unparsable time {row[time_idx]!r}")
                continue
        keys.append(key if key is not None else t)
        dates.append(key if is_date else None)
        explicit_times.append(t)
        values.append(value)

    if not values:
        raise SeriesError("no parseable rows")
    if rep.rows_skipped:
        logger.info("skipped %d of %d rows", rep.rows_skipped, rep.rows_read)

    sort_keys = explicit_times if time_idx is not None else keys
    order = sorted(range(len(values)), key=lambda i: sort_keys[i])
    deduped = []
    for i in order:
        if deduped and sort_keys[deduped[-1]] == sort_keys[i]:
            if cfg.on_error == "fail":
                raise SeriesError(f"duplicate time key {sort_keys[i]!r}")
            rep.rows_skipped += 1
            rep.reasons.append(f"duplicate time key {sort_keys[i]!r}")
            continue
        deduped.append(i)

    vals = np.array([values[i] for i in deduped])
    if time_idx is not None:
        times = np.array([explicit_times[i] for i in deduped], dtype=np.int64)
    elif dated:
        times = np.arange(1, len(deduped) + 1, dtype=np.int64)
    else:
        times = np.array([keys[i] for i in deduped], dtype=np.int64)
    date_labels = None
    if any(dates[i] is not None for i in deduped):
        date_labels = tuple(dates[i].isoformat() if dates[i] is not None else "" for i in deduped)

    label = cfg.label or meta.get("label") or "series"
    kind = meta.get("kind", "level")
    return TimeSeries(label, times, vals, kind=kind, dates=date_labels)


def read_csv_file(path, config: Optional[CsvConfig] = None, report: Optional[ParseReport] = None) -> TimeSeries:
    with open(path, "rb") as fh:
        return parse_price_csv(fh.read(), config, report)


def to_csv(s: TimeSeries) -> str:
    """Serialize to the CSV schema :func:`parse_price_csv` reads back losslessly."""
    out = io.StringIO()
    out.write(f"# kind={s.kind}\n# label={s.label}\n")
    writer = csv.writer(out, lineterminator="\n")
    if s.dates is not None:
        writer.writerow(["date", "time", "value"])
        for t, d, v in zip(s.times, s.dates, s.values):
            writer.writerow([d, int(t), repr(float(v))])
    else:
        writer.writerow(["time", "value"])
        for t, v in zip(s.times, s.values):
            writer.writerow([int(t), repr(float(v))])
    return out.getvalue()


def to_log(s: TimeSeries) -> TimeSeries:
    if s.kind != "level":
        raise SeriesError(f"to_log expects a level series, got kind={s.kind!r}")
    if np.any(s.values <= 0):
        raise SeriesError("to_log requires strictly positive values")
    return replace(s, values=np.log(s.values), kind="log-level")


def diff_returns(s: TimeSeries, mode: str = "log") -> TimeSeries:
    """One-step returns; the return at position k carries the time of v[k+1]."""
    if len(s) < 3:
        raise SeriesError("diff_returns needs at least 3 observations")
    v = s.values
    if mode == "simple":
        if np.any(v[:-1] == 0):
            raise SeriesError("zero value makes simple return undefined")
        r = (v[1:] - v[:-1]) / v[:-1]
    elif mode == "log":
        if np.any(v <= 0):
            raise SeriesError("log returns require positive values")
        r = np.log(v[1:] / v[:-1])
    else:
        raise SeriesError(f"unknown return mode {mode!r}")
    dates = None if s.dates is None else s.dates[1:]
    return TimeSeries(s.label, s.times[1:], r, kind="return", dates=dates)


def cumulate_log_returns(r: TimeSeries, start_value: float, start_time=None, start_date=None) -> TimeSeries:
    """Inverse of ``diff_returns(mode='log')`` given the first level."""
    if r.kind != "return":
        raise SeriesError("expected a return series")
    levels = start_value * np.exp(np.concatenate([[0.0], np.cumsum(r.values)]))
    t0 = r.times[0] - 1 if start_time is None else start_time
    times = np.concatenate([[t0], r.times])
    dates = None
    if r.dates is not None:
        dates = (start_date or "",) + r.dates
    return TimeSeries(r.label, times, levels, kind="level", dates=dates)


def window(s: TimeSeries, start, end) -> TimeSeries:
    """Contiguous sub-series with ``start <= time <= end``."""
    if not start < end:
        raise SeriesError("window requires start < end")
    lo = int(np.searchsorted(s.times, start, side="left"))
    hi = int(np.searchsorted(s.times, end, side="right"))
    if hi - lo < 2:
        raise SeriesError(f"window [{start}, {end}] holds {hi - lo} observation(s), need 2")
    dates = None if s.dates is None else s.dates[lo:hi]
    return TimeSeries(s.label, s.times[lo:hi], s.values[lo:hi], kind=s.kind, dates=dates)


def head(s: TimeSeries, n: int) -> TimeSeries:
    """First ``n`` observations."""
    if n < 2 or n > len(s):
        raise SeriesError(f"cannot take {n} observations of {len(s)}")
    dates = None if s.dates is None else s.dates[:n]
    return TimeSeries(s.label, s.times[:n], s.values[:n], kind=s.kind, dates=dates)


def time_of_date(s: TimeSeries, when: Union[str, date], side: str = "left") -> int:
    """Observation time of the first (``left``) or last (``right``) row at/around a date."""
    if s.dates is None:
        raise SeriesError("series carries no calendar dates")
    key = when.isoformat() if isinstance(when, date) else str(when)
    idx = int(np.searchsorted(np.array(s.dates), key, side=side))
    if side == "right":
        idx -= 1
    if idx < 0 or idx >= len(s):
        raise SeriesError(f"date {key} outside series range")
    return int(s.times[idx])


def from_values(values: Sequence[float], label: str = "series", kind: str = "level", t0: int = 1) -> TimeSeries:
    v = np.asarray(values, dtype=float)
    return TimeSeries(label, np.arange(t0, t0 + len(v), dtype=np.int64), v, kind=kind)


def project_date(s: TimeSeries, t: float) -> Optional[str]:
    """Calendar date of a (possibly fractional, possibly future) time.

    Inside the sample the nearest observation's date is returned; past the
    end the last date is advanced by whole weekdays, which ignores holidays.
    """
    if s.dates is None or t is None or not np.isfinite(t):
        return None
    last = float(s.times[-1])
    if t <= last:
        idx = int(np.clip(np.searchsorted(s.times, round(t), side="left"), 0, len(s) - 1))
        return s.dates[idx]
    ahead = int(math.ceil(t - last))
    return str(np.busday_offset(np.datetime64(s.dates[-1]), ahead, roll="forward"))

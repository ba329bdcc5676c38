"""Daily time-series datasets: loading, validation, synthesis.

A dataset holds one row per warm-season day with the outcome count ``y``,
the exposure ``x`` (daily maximum temperature, degC), the mediator ``m``
(daily 8-hour maximum ozone, ppm), humidity (g/kg) and a holiday flag.
Calendar features (year, day of year, weekday) are derived from the date.

Identification of the mediation estimands relies on the usual causal
assumptions (consistency, positivity, no unmeasured exposure-mediator,
mediator-outcome or exposure-outcome confounding given the covariates, and
cross-world independence). None of them is testable from the data; this
module only checks the structural invariants below.
"""
from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ArgumentError, DatasetValidationError, InputIOError, ParseError, SchemaError

__all__ = [
    "DEFAULT_SCHEMA",
    "DayRecord",
    "SynthParams",
    "TimeSeriesDataset",
    "ValidationReport",
    "load_dataset",
    "load_holidays",
    "synthesize_dataset",
    "validate",
    "write_dataset",
]

DEFAULT_SCHEMA = {
    "date": "date",
    "y": "y",
    "x": "x",
    "m": "m",
    "humidity": "humidity",
    "holiday": "holiday",
}
REQUIRED_FIELDS = ("date", "y", "x", "m", "humidity")
WEEKDAYS = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")
MIN_DAYS_WARNING = 100
# 1970-01-01 was a Thursday.
_EPOCH_WEEKDAY = 3


@dataclass(frozen=True)
class DayRecord:
    date: dt.date
    y: int
    x: float
    m: float
    humidity: float
    weekday: str
    holiday: bool
    year: int
    doy: int


@dataclass(frozen=True, eq=False)
class TimeSeriesDataset:
    """Column-oriented daily dataset.

    Arrays are copied and frozen (read-only) on construction. ``weekday`` is
    coded 0 (Monday) to 6 (Sunday).
    """

    date: np.ndarray
    y: np.ndarray
    x: np.ndarray
    m: np.ndarray
    humidity: np.ndarray
    holiday: np.ndarray = None
    year: np.ndarray = field(init=False, repr=False)
    doy: np.ndarray = field(init=False, repr=False)
    weekday: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        date = np.asarray(self.date).astype("datetime64[D]")
        n = date.shape[0]
        cols = {
            "date": date,
            "y": np.asarray(self.y, dtype=float),
            "x": np.asarray(self.x, dtype=float),
            "m": np.asarray(self.m, dtype=float),
            "humidity": np.asarray(self.humidity, dtype=float),
            "holiday": (np.zeros(n, dtype=bool) if self.holiday is None
                        else np.asarray(self.holiday, dtype=bool)),
        }
        for name, arr in cols.items():
            if arr.ndim != 1 or arr.shape[0] != n:
                raise ArgumentError(f"column {name!r} must be 1-d with {n} entries")
        years = date.astype("datetime64[Y]")
        cols["year"] = years.astype(int) + 1970
        cols["doy"] = (date - years.astype("datetime64[D]")).astype(int) + 1
        cols["weekday"] = (date.astype(np.int64) + _EPOCH_WEEKDAY) % 7
        for name, arr in cols.items():
            arr = np.array(arr, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.date.shape[0]

    @property
    def n_days(self):
        return len(self)

    def row(self, i) -> DayRecord:
        return DayRecord(
            date=self.date[i].astype(dt.date),
            y=int(self.y[i]),
            x=float(self.x[i]),
            m=float(self.m[i]),
            humidity=float(self.humidity[i]),
            weekday=WEEKDAYS[int(self.weekday[i])],
            holiday=bool(self.holiday[i]),
            year=int(self.year[i]),
            doy=int(self.doy[i]),
        )

    @property
    def rows(self):
        return [self.row(i) for i in range(len(self))]

    def replace(self, **columns) -> "TimeSeriesDataset":
        """Return a copy with some of the base columns swapped out."""
        base = {f: getattr(self, f) for f in ("date", "y", "x", "m", "humidity", "holiday")}
        base.update(columns)
        return TimeSeriesDataset(**base)

    def take(self, idx) -> "TimeSeriesDataset":
        idx = np.asarray(idx)
        return TimeSeriesDataset(
            date=self.date[idx], y=self.y[idx], x=self.x[idx], m=self.m[idx],
            humidity=self.humidity[idx], holiday=self.holiday[idx],
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "date": pd.to_datetime(self.date).strftime("%Y-%m-%d"),
            "y": self.y.astype(np.int64) if np.all(self.y == np.round(self.y)) else self.y,
            "x": self.x,
            "m": self.m,
            "humidity": self.humidity,
            "holiday": self.holiday.astype(int),
        })

    def fingerprint(self) -> str:
        """SHA-256 over the raw column bytes; stable across processes."""
        h = hashlib.sha256()
        for name in ("date", "y", "x", "m", "humidity", "holiday"):
            arr = np.ascontiguousarray(getattr(self, name))
            h.update(name.encode())
            h.update(arr.tobytes())
        return h.hexdigest()


@dataclass
class ValidationReport:
    errors: list = field(default_factory=list)  # (row index, field, message)
    warnings: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.errors

    def raise_if_invalid(self):
        if self.errors:
            i, fld, msg = self.errors[0]
            raise DatasetValidationError(
                f"dataset invalid: row {i}, {fld}: {msg} ({len(self.errors)} error(s))",
                errors=[list(e) for e in self.errors[:20]],
            )


def validate(ds: TimeSeriesDataset) -> ValidationReport:
    report = ValidationReport()
    n = len(ds)
    if n == 0:
        report.errors.append((-1, "date", "dataset is empty"))
        return report
    d = ds.date.astype(np.int64)
    steps = np.diff(d)
    for i in np.flatnonzero(steps == 0):
        report.errors.append((int(i + 1), "date", f"duplicate date {ds.date[i + 1]}"))
    for i in np.flatnonzero(steps < 0):
        report.errors.append((int(i + 1), "date", "dates not strictly increasing"))
    same_year = ds.year[1:] == ds.year[:-1]
    for i in np.flatnonzero(same_year & (steps > 1)):
        report.errors.append(
            (int(i + 1), "date", f"{int(steps[i]) - 1} missing day(s) before {ds.date[i + 1]}"))
    y = ds.y
    for i in np.flatnonzero(~np.isfinite(y)):
        report.errors.append((int(i), "y", "non-finite count"))
    fin = np.isfinite(y)
    for i in np.flatnonzero(fin & (y < 0)):
        report.errors.append((int(i), "y", f"negative count {y[i]:g}"))
    for i in np.flatnonzero(fin & (y != np.round(y))):
        report.errors.append((int(i), "y", f"non-integer count {y[i]:g}"))
    for name in ("x", "m", "humidity"):
        col = getattr(ds, name)
        for i in np.flatnonzero(~np.isfinite(col)):
            report.errors.append((int(i), name, "non-finite value"))
    for i in np.flatnonzero(np.isfinite(ds.m) & (ds.m < 0)):
        report.errors.append((int(i), "m", f"negative mediator {ds.m[i]:g}"))
    if n < MIN_DAYS_WARNING:
        report.warnings.append(
            f"only {n} days; fewer than {MIN_DAYS_WARNING} leaves the 6-df spline terms poorly determined")
    return report


# ---------------------------------------------------------------------------
# CSV ingestion


def load_holidays(path) -> set:
    path = Path(path)
    if not path.exists():
        raise InputIOError(f"holiday file not found: {path}", kind="io.not_found", path=str(path))
    out = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            out.add(np.datetime64(dt.date.fromisoformat(line), "D"))
        except ValueError:
            raise ParseError(f"holiday file line {lineno}: not an ISO date: {line!r}",
                             row=lineno, column="date") from None
    return out


def _parse_numeric(values: pd.Series, column: str) -> np.ndarray:
    # numpy's string-to-float conversion is correctly rounded, so values
    # written with 17 significant digits read back bit-for-bit
    s = values.str.strip().to_numpy(dtype=str)
    try:
        return s.astype(float)
    except ValueError:
        pass
    for i, v in enumerate(s):
        try:
            float(v)
        except ValueError:
            raise ParseError(f"row {i + 1}, column {column}: cannot parse {values.iloc[i]!r} as a number",
                             row=i + 1, column=column) from None
    raise AssertionError("unreachable")


def _parse_bool(values: pd.Series, column: str) -> np.ndarray:
    table = {"1": True, "0": False, "true": True, "false": False, "yes": True, "no": False, "": False}
    out = np.empty(len(values), dtype=bool)
    for i, v in enumerate(values.str.strip().str.lower()):
        if v not in table:
            raise ParseError(f"row {i + 1}, column {column}: cannot parse {values.iloc[i]!r} as a boolean",
                             row=i + 1, column=column)
        out[i] = table[v]
    return out


def load_dataset(path, schema: dict | None = None, holidays=None) -> TimeSeriesDataset:
    """Read a CSV file into a dataset sorted by date.

    Parameters
    ----------
    path
        UTF-8 CSV with a header row and ISO-8601 dates.
    schema
        Map from logical field (``date``, ``y``, ``x``, ``m``, ``humidity``,
        optional ``holiday``) to the CSV header name. Missing keys fall back
        to the logical name.
    holidays
        Optional set of ``datetime64[D]`` dates or a path to a date-list file.
        Days in it are flagged as holidays in addition to any holiday column.

    Raises
    ------
    SchemaError
        A required column is missing.
    ParseError
        A cell is not numeric / not a date (row numbers are 1-based data rows).
    DatasetValidationError
        Duplicate dates.
    """
    path = Path(path)
    if not path.exists():
        raise InputIOError(f"input file not found: {path}", kind="io.not_found", path=str(path))
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        unknown = set(schema) - set(DEFAULT_SCHEMA)
        if unknown:
            raise SchemaError(f"unknown schema field(s): {sorted(unknown)}")
        cols.update(schema)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise InputIOError(f"cannot read {path}: {exc}", kind="io.read") from exc
    for fld in REQUIRED_FIELDS:
        if cols[fld] not in frame.columns:
            raise SchemaError(f"missing required column {cols[fld]!r} (field {fld})", column=cols[fld])

    dates = np.empty(len(frame), dtype="datetime64[D]")
    for i, v in enumerate(frame[cols["date"]]):
        try:
            dates[i] = np.datetime64(dt.date.fromisoformat(v.strip()), "D")
        except ValueError:
            raise ParseError(f"row {i + 1}, column {cols['date']}: not an ISO date: {v!r}",
                             row=i + 1, column=cols["date"]) from None
    data = {f: _parse_numeric(frame[cols[f]], cols[f]) for f in ("y", "x", "m", "humidity")}
    if cols["holiday"] in frame.columns:
        holiday = _parse_bool(frame[cols["holiday"]], cols["holiday"])
    else:
        holiday = np.zeros(len(frame), dtype=bool)
    if holidays is not None:
        if isinstance(holidays, (str, Path)):
            holidays = load_holidays(holidays)
        holiday |= np.isin(dates, np.array(sorted(holidays), dtype="datetime64[D]"))

    order = np.argsort(dates, kind="stable")
    sd = dates[order]
    dup = np.flatnonzero(sd[1:] == sd[:-1])
    if dup.size:
        raise DatasetValidationError(f"duplicate date {sd[dup[0]]}", kind="data.duplicate_date",
                                     date=str(sd[dup[0]]))
    return TimeSeriesDataset(date=sd, holiday=holiday[order], **{k: v[order] for k, v in data.items()})


def write_dataset(ds: TimeSeriesDataset, path) -> None:
    """Write the dataset in the default schema; floats use round-trip repr."""
    frame = ds.to_frame()
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SynthParams:
    """Generator settings for the stand-in dataset.

    Moment targets default to warm-season summary statistics for a large city
    (temperature 29.01 +/- 4.12 degC, humidity 9.33 +/- 1.50 g/kg, ozone
    0.048 +/- 0.009 ppm, median 1548 visits per day).
    """

    start_year: int = 2005
    temp_mean: float = 29.01
    temp_sd: float = 4.12
    temp_seasonal_share: float = 0.35   # fraction of temperature variance from the seasonal cycle
    temp_ar: float = 0.7                # AR(1) coefficient of the day-to-day anomaly
    humidity_mean: float = 9.33
    humidity_sd: float = 1.50
    humidity_temp_corr: float = 0.3
    ozone_mean: float = 0.048
    ozone_sd: float = 0.009
    ozone_noise_share: float = 0.35     # fraction of ozone variance that is unexplained noise
    count_median: float = 1548.0
    heat_log_rr: float = 0.004          # log-RR per degC above heat_threshold
    heat_threshold: float = 30.0
    ozone_log_rr: float = 0.6           # log-RR per ppm of ozone
    nb_size: float = 200.0

    def replace(self, **kw) -> "SynthParams":
        return dataclasses.replace(self, **kw)


def _us_warm_season_holidays(year: int) -> list:
    may31 = dt.date(year, 5, 31)
    memorial = may31 - dt.timedelta(days=may31.weekday())
    sep1 = dt.date(year, 9, 1)
    labor = sep1 + dt.timedelta(days=(7 - sep1.weekday()) % 7)
    return [memorial, dt.date(year, 7, 4), labor]


def _warm_season_dates(T: int, start_year: int) -> np.ndarray:
    out = []
    year = start_year
    while len(out) < T:
        start = np.datetime64(f"{year:04d}-05-01")
        out.extend(start + np.arange(184))
        year += 1
    return np.array(out[:T], dtype="datetime64[D]")


def _ar1(rng, n, rho):
    e = rng.standard_normal(n)
    out = np.empty(n)
    out[0] = e[0]
    s = np.sqrt(1 - rho * rho)
    for t in range(1, n):
        out[t] = rho * out[t - 1] + s * e[t]
    return out


def _standardize(v):
    return (v - v.mean()) / v.std()


def synthesize_dataset(T: int, seed: int, params: SynthParams | None = None) -> TimeSeriesDataset:
    """Generate ``T`` warm-season days (May-October of consecutive years).

    Temperature, humidity and ozone are rescaled to hit their target sample
    mean and SD exactly; ozone depends nonlinearly on temperature. Counts are
    negative binomial around a log-linear mean with a heat threshold, an
    ozone effect, seasonality and weekday/holiday effects.
    """
    if int(T) != T or T <= 0:
        raise ArgumentError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    p = params or SynthParams()
    rng = np.random.default_rng(seed)
    date = _warm_season_dates(T, p.start_year)
    probe = TimeSeriesDataset(date=date, y=np.zeros(T), x=np.zeros(T), m=np.zeros(T),
                              humidity=np.zeros(T))
    season = np.sin(np.pi * (probe.doy - 120.5) / 184.0)
    s_std = _standardize(season) if T > 1 else np.zeros(T)

    share = p.temp_seasonal_share
    zx_raw = np.sqrt(share) * s_std + np.sqrt(1 - share) * _ar1(rng, T, p.temp_ar)
    zx = _standardize(zx_raw) if T > 1 else zx_raw
    x = p.temp_mean + p.temp_sd * zx

    rho = p.humidity_temp_corr
    zh_raw = rho * zx + np.sqrt(1 - rho * rho) * _ar1(rng, T, 0.5)
    zh = _standardize(zh_raw) if T > 1 else zh_raw
    humidity = p.humidity_mean + p.humidity_sd * zh

    signal = np.log1p(np.exp(1.5 * zx)) + 0.3 * s_std - 0.25 * zh
    signal = _standardize(signal) if T > 1 else signal
    zo_raw = np.sqrt(1 - p.ozone_noise_share) * signal + np.sqrt(p.ozone_noise_share) * rng.standard_normal(T)
    zo = _standardize(zo_raw) if T > 1 else zo_raw
    m = np.maximum(p.ozone_mean + p.ozone_sd * zo, 1e-4)

    holidays = set()
    for yr in np.unique(probe.year):
        holidays.update(np.datetime64(d, "D") for d in _us_warm_season_holidays(int(yr)))
    holiday = np.isin(date, np.array(sorted(holidays), dtype="datetime64[D]"))

    weekday_eff = np.array([0.06, 0.03, 0.02, 0.01, 0.0, -0.03, -0.02])
    log_mu = (np.log(p.count_median)
              + p.heat_log_rr * np.log1p(np.exp(x - p.heat_threshold))
              + p.ozone_log_rr * (m - p.ozone_mean)
              + 0.05 * s_std
              + weekday_eff[probe.weekday]
              - 0.08 * holiday)
    mu = np.exp(log_mu)
    y = rng.negative_binomial(p.nb_size, p.nb_size / (p.nb_size + mu))
    return TimeSeriesDataset(date=date, y=y, x=x, m=m, humidity=humidity, holiday=holiday)

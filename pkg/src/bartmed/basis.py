"""Natural cubic spline bases and the outcome/mediator design matrices.

Outcome design (intercept excluded; the GLM adds it)::

    [temperature ns(6)] [m] [m*I2(x), m*I3(x), m*I4(x)] [doy ns(6)]
    [doy ns(6) x year indicators (first year baseline)] [humidity ns(6)]
    [weekday indicators (Monday baseline)] [holiday]

The linear mediator design drops the mediator and interaction columns. The
BART mediator design is the six raw covariates in ``BART_COVARIATES`` order.
Knots and quartile cutpoints are fixed when the :class:`DesignSpec` is made
and reused for every counterfactual rebuild.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .errors import ArgumentError

__all__ = [
    "BART_COVARIATES",
    "DesignMatrix",
    "DesignSpec",
    "ExtrapolationWarning",
    "QuartileSpec",
    "SplineBasis",
    "build_mediator_design",
    "build_outcome_design",
    "make_design_spec",
    "ncs_basis",
    "quartile_indicators",
]

BART_COVARIATES = ("x", "humidity", "doy", "year", "weekday", "holiday")
WEEKDAY_LABELS = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")


class ExtrapolationWarning(UserWarning):
    """Spline evaluated outside its boundary knots (linear continuation)."""


@dataclass(frozen=True)
class SplineBasis:
    df: int
    interior_knots: tuple
    boundary_knots: tuple

    def __post_init__(self):
        lo, hi = self.boundary_knots
        if len(self.interior_knots) != self.df - 1:
            raise ArgumentError("need df - 1 interior knots")
        if not lo < hi:
            raise ArgumentError("boundary knots must satisfy lo < hi")
        if any(not lo < k < hi for k in self.interior_knots):
            raise ArgumentError("interior knots must lie strictly inside the boundary knots")

    def _projection(self):
        lo, hi = self.boundary_knots
        t = np.r_[[lo] * 4, self.interior_knots, [hi] * 4]
        nb = len(t) - 4
        spl = BSpline(t, np.eye(nb), 3, extrapolate=True)
        # second derivative at both boundaries must vanish; drop the first
        # B-spline so constants are not in the span
        const = spl(np.array([lo, hi]), nu=2)[:, 1:]
        q, _ = np.linalg.qr(const.T, mode="complete")
        return spl, q[:, 2:]

    def evaluate(self, values, *, name: str = "spline", warn: bool = True) -> np.ndarray:
        """Evaluate the basis; linear continuation outside the boundary knots."""
        x = np.asarray(values, dtype=float).ravel()
        lo, hi = self.boundary_knots
        spl, proj = self._projection()
        inside = np.clip(x, lo, hi)
        out = spl(inside)[:, 1:] @ proj
        below, above = x < lo, x > hi
        if below.any() or above.any():
            if warn:
                warnings.warn(f"{name}: {int(below.sum() + above.sum())} value(s) outside "
                              f"[{lo:g}, {hi:g}]; extrapolating linearly", ExtrapolationWarning,
                              stacklevel=3)
            slope = spl(np.array([lo, hi]), nu=1)[:, 1:] @ proj
            out[below] += (x[below] - lo)[:, None] * slope[0]
            out[above] += (x[above] - hi)[:, None] * slope[1]
        return out

    def to_dict(self):
        return {"df": self.df, "interior_knots": list(map(float, self.interior_knots)),
                "boundary_knots": list(map(float, self.boundary_knots))}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["df"]), tuple(d["interior_knots"]), tuple(d["boundary_knots"]))


def ncs_basis(values, df: int, boundary=None) -> tuple[SplineBasis, np.ndarray]:
    """Natural cubic spline basis with ``df`` columns, no intercept.

    Interior knots sit at the ``j/df`` quantiles (j = 1..df-1) of the distinct
    input values; boundary knots default to min/max.
    """
    x = np.asarray(values, dtype=float).ravel()
    if int(df) != df or df < 2:
        raise ArgumentError(f"df must be an integer >= 2, got {df!r}")
    if not np.all(np.isfinite(x)):
        raise ArgumentError("spline input contains non-finite values")
    uniq = np.unique(x)
    if uniq.size < df + 1:
        raise ArgumentError(f"need at least {df + 1} distinct values for df={df}, got {uniq.size}")
    lo, hi = (uniq[0], uniq[-1]) if boundary is None else map(float, boundary)
    knots = np.quantile(uniq, np.arange(1, df) / df)
    spec = SplineBasis(int(df), tuple(float(k) for k in knots), (float(lo), float(hi)))
    return spec, spec.evaluate(x)


@dataclass(frozen=True)
class QuartileSpec:
    q25: float
    q50: float
    q75: float

    def __post_init__(self):
        if not self.q25 <= self.q50 <= self.q75:
            raise ArgumentError("quartile cutpoints must be non-decreasing")

    @classmethod
    def from_values(cls, x):
        q = np.quantile(np.asarray(x, dtype=float), [0.25, 0.5, 0.75])
        return cls(*map(float, q))

    @property
    def cutpoints(self):
        return (self.q25, self.q50, self.q75)

    def category(self, x) -> np.ndarray:
        """Quartile index 0..3 with right-closed intervals."""
        return np.searchsorted(np.array(self.cutpoints), np.asarray(x, dtype=float), side="left")

    def indicators(self, x) -> np.ndarray:
        cat = np.atleast_1d(self.category(x))
        return (cat[:, None] == np.arange(1, 4)[None, :]).astype(float)


def quartile_indicators(x: float, q: QuartileSpec) -> tuple[bool, bool, bool]:
    c = int(q.category(x))
    return (c == 1, c == 2, c == 3)


@dataclass(frozen=True)
class DesignSpec:
    role: str
    temperature_basis: SplineBasis
    humidity_basis: SplineBasis
    doy_basis: SplineBasis
    year_levels: tuple
    weekday_levels: tuple
    include_holiday: bool
    quartiles: QuartileSpec
    column_names: tuple

    @property
    def n_columns(self):
        return len(self.column_names)

    def index(self, name: str) -> int:
        return self.column_names.index(name)

    @property
    def temperature_slice(self) -> slice:
        return slice(0, self.temperature_basis.df)

    @property
    def mediator_column(self) -> int:
        if self.role != "outcome":
            raise ArgumentError("mediator column only exists in the outcome design")
        return self.index("m")

    @property
    def interaction_columns(self) -> tuple:
        if self.role != "outcome":
            raise ArgumentError("interaction columns only exist in the outcome design")
        return tuple(self.index(f"m:q{h}") for h in (2, 3, 4))

    def to_dict(self):
        return {
            "role": self.role,
            "temperature_basis": self.temperature_basis.to_dict(),
            "humidity_basis": self.humidity_basis.to_dict(),
            "doy_basis": self.doy_basis.to_dict(),
            "year_levels": list(map(int, self.year_levels)),
            "weekday_levels": list(map(int, self.weekday_levels)),
            "include_holiday": bool(self.include_holiday),
            "quartiles": list(self.quartiles.cutpoints),
            "column_names": list(self.column_names),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            role=d["role"],
            temperature_basis=SplineBasis.from_dict(d["temperature_basis"]),
            humidity_basis=SplineBasis.from_dict(d["humidity_basis"]),
            doy_basis=SplineBasis.from_dict(d["doy_basis"]),
            year_levels=tuple(d["year_levels"]),
            weekday_levels=tuple(d["weekday_levels"]),
            include_holiday=bool(d["include_holiday"]),
            quartiles=QuartileSpec(*d["quartiles"]),
            column_names=tuple(d["column_names"]),
        )


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    values: np.ndarray
    spec: DesignSpec

    @property
    def shape(self):
        return self.values.shape

    @property
    def column_names(self):
        return self.spec.column_names


def _column_names(role, df_t, df_d, df_h, years, weekdays, holiday):
    names = [f"temp_ns{j}" for j in range(1, df_t + 1)]
    if role == "outcome":
        names += ["m", "m:q2", "m:q3", "m:q4"]
    doy = [f"doy_ns{j}" for j in range(1, df_d + 1)]
    names += doy
    names += [f"{d}:year{y}" for y in years[1:] for d in doy]
    names += [f"hum_ns{j}" for j in range(1, df_h + 1)]
    names += [f"wd_{WEEKDAY_LABELS[w]}" for w in weekdays[1:]]
    if holiday:
        names.append("holiday")
    return tuple(names)


def make_design_spec(ds, role: str = "outcome", df=6) -> DesignSpec:
    """Freeze knots, factor levels and quartile cutpoints from fitting data.

    ``df`` is an int (all three splines) or a mapping with keys
    ``temperature``, ``doy``, ``humidity``.
    """
    if role not in ("outcome", "mediator"):
        raise ArgumentError(f"role must be 'outcome' or 'mediator', got {role!r}")
    if len(ds) == 0:
        raise ArgumentError("cannot build a design from an empty dataset")
    dfs = {"temperature": df, "doy": df, "humidity": df} if np.isscalar(df) else dict(df)
    tb, _ = ncs_basis(ds.x, dfs["temperature"])
    db, _ = ncs_basis(ds.doy, dfs["doy"])
    hb, _ = ncs_basis(ds.humidity, dfs["humidity"])
    years = tuple(int(v) for v in np.unique(ds.year))
    weekdays = tuple(int(v) for v in np.unique(ds.weekday))
    holiday = bool(np.any(ds.holiday))
    names = _column_names(role, tb.df, db.df, hb.df, years, weekdays, holiday)
    return DesignSpec(role, tb, hb, db, years, weekdays, holiday, QuartileSpec.from_values(ds.x), names)


def _confounder_block(ds, spec: DesignSpec) -> np.ndarray:
    doy = spec.doy_basis.evaluate(ds.doy, name="day-of-year")
    year_ind = (ds.year[:, None] == np.array(spec.year_levels[1:])[None, :]).astype(float)
    inter = (doy[:, None, :] * year_ind[:, :, None]).reshape(len(ds), -1)
    hum = spec.humidity_basis.evaluate(ds.humidity, name="humidity")
    wd = (ds.weekday[:, None] == np.array(spec.weekday_levels[1:])[None, :]).astype(float)
    blocks = [doy, inter, hum, wd]
    if spec.include_holiday:
        blocks.append(ds.holiday.astype(float)[:, None])
    return np.hstack(blocks)


def _exposure(ds, x_override):
    if x_override is None:
        return np.asarray(ds.x, dtype=float)
    x_override = float(x_override)
    if not np.isfinite(x_override):
        raise ArgumentError("x_override must be finite")
    return np.full(len(ds), x_override)


def _check_design(values):
    # empty or collinear columns are caught by the rank check at fit time, so
    # subsets of days (a single day, say) remain valid prediction designs
    if not np.all(np.isfinite(values)):
        raise ArgumentError("design matrix contains non-finite entries")


def build_outcome_design(ds, spec: DesignSpec, x_override=None, m_override=None) -> DesignMatrix:
    """Outcome regressors. ``x_override`` (scalar) sets every day's exposure;
    ``m_override`` (scalar or per-day array) replaces the mediator."""
    if spec.role != "outcome":
        raise ArgumentError("spec.role must be 'outcome'")
    if len(ds) == 0:
        raise ArgumentError("cannot build a design from an empty dataset")
    x = _exposure(ds, x_override)
    if m_override is None:
        m = np.asarray(ds.m, dtype=float)
    else:
        m = np.broadcast_to(np.asarray(m_override, dtype=float), (len(ds),)).copy()
    temp = spec.temperature_basis.evaluate(x, name="temperature")
    inter = spec.quartiles.indicators(x) * m[:, None]
    values = np.hstack([temp, m[:, None], inter, _confounder_block(ds, spec)])
    if values.shape[1] != spec.n_columns:
        raise ArgumentError("dataset levels do not match the design spec")
    if x_override is None and m_override is None:
        _check_design(values)
    return DesignMatrix(values, spec)


def bart_covariates(ds, x_override=None) -> np.ndarray:
    if len(ds) == 0:
        raise ArgumentError("cannot build a design from an empty dataset")
    x = _exposure(ds, x_override)
    return np.column_stack([x, ds.humidity, ds.doy, ds.year, ds.weekday, ds.holiday]).astype(float)


def build_mediator_design(ds, spec: DesignSpec | None = None, x_override=None, model: str = "linear"):
    """Mediator regressors.

    ``model="linear"`` returns the spline-expanded :class:`DesignMatrix`;
    ``model="bart"`` returns the raw covariate matrix (columns in
    ``BART_COVARIATES`` order) and ignores ``spec``.
    """
    if len(ds) == 0:
        raise ArgumentError("cannot build a design from an empty dataset")
    if model == "bart":
        return bart_covariates(ds, x_override)
    if model != "linear":
        raise ArgumentError(f"unknown mediator model {model!r}")
    if spec is None or spec.role != "mediator":
        raise ArgumentError("linear mediator design needs a spec with role 'mediator'")
    x = _exposure(ds, x_override)
    temp = spec.temperature_basis.evaluate(x, name="temperature")
    values = np.hstack([temp, _confounder_block(ds, spec)])
    if values.shape[1] != spec.n_columns:
        raise ArgumentError("dataset levels do not match the design spec")
    if x_override is None:
        _check_design(values)
    return DesignMatrix(values, spec)

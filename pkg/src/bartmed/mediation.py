"""Natural direct and indirect effects by Monte-Carlo g-computation.

For draw ``k`` the outcome coefficients theta(k), the mediator model draw
and a flat-Dirichlet weight vector w(k) over days are combined into four
confounder-averaged counterfactual means

    F(xa, xb) = sum_t w_t exp{eta0_t(xa) + a(xa) mhat_t(xb) + a(xa)^2 sigma2 / 2}

where ``eta0_t(xa)`` is the outcome linear predictor without the mediator
terms, ``a(xa) = theta_m + theta_{m:q}(xa)`` is the mediator slope in the
exposure quartile of ``xa`` and ``mhat_t(xb)`` is the mediator mean at
exposure ``xb``. The exponential is the lognormal moment of a Gaussian
mediator, so no mediator values are simulated. Effects are risk ratios:

    PNDE = F(x, x*) / F(x*, x*)     TNDE = F(x, x) / F(x*, x)
    PNIE = F(x*, x) / F(x*, x*)     TNIE = F(x, x) / F(x, x*)
    TE   = F(x, x)  / F(x*, x*)

All four means of a draw share theta(k), the mediator draw and w(k), and
w(k) is shared across exposure levels too, so TE = TNDE * PNIE = PNDE * TNIE
holds draw by draw.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .bart import BartPosterior, predict
from .basis import bart_covariates, build_mediator_design, build_outcome_design
from .dataset import TimeSeriesDataset
from .errors import ArgumentError, NumericalError
from .glm import OutcomeFit, sample_coefficients
from .mediator_linear import LinearMediatorFit, sample_mediator_coefficients

__all__ = [
    "ESTIMANDS",
    "CounterfactualDraws",
    "EffectTable",
    "ExposureGrid",
    "bayesian_bootstrap_weights",
    "counterfactual_day_mean",
    "effect_identities_check",
    "effects_from_counterfactuals",
    "estimate_effects",
    "load_effect_draws",
    "write_effect_draws",
    "write_effect_table",
]

ESTIMANDS = ("PNDE", "TNDE", "PNIE", "TNIE", "TE")
# order of the counterfactual combinations (exposure in outcome, exposure in mediator)
COMBOS = ("x,x", "x,x*", "x*,x", "x*,x*")
FORMAT_VERSION = 1
MIN_DRAWS = 100
_CHUNK = 250


@dataclass(frozen=True)
class ExposureGrid:
    """Exposure levels as quantiles of the observed exposure.

    ``resolve`` fixes the numeric values from a dataset; the default compares
    the 0.55, 0.60, ..., 0.95 quantiles with the median.
    """

    reference_quantile: float = 0.50
    exposure_quantiles: tuple = tuple(round(0.55 + 0.05 * i, 2) for i in range(9))
    reference_value: float | None = None
    exposure_values: tuple | None = None

    def __post_init__(self):
        qs = tuple(float(q) for q in np.atleast_1d(self.exposure_quantiles))
        if not qs:
            raise ArgumentError("exposure grid needs at least one level")
        for q in qs + (float(self.reference_quantile),):
            if not 0.0 < q < 1.0:
                raise ArgumentError(f"grid quantiles must lie in (0, 1), got {q}")
        object.__setattr__(self, "exposure_quantiles", qs)
        object.__setattr__(self, "reference_quantile", float(self.reference_quantile))
        if self.exposure_values is not None:
            vals = tuple(float(v) for v in self.exposure_values)
            if len(vals) != len(qs):
                raise ArgumentError("exposure_values must match exposure_quantiles")
            object.__setattr__(self, "exposure_values", vals)

    @property
    def resolved(self) -> bool:
        return self.reference_value is not None and self.exposure_values is not None

    def resolve(self, x) -> "ExposureGrid":
        x = np.asarray(getattr(x, "x", x), dtype=float)
        ref = float(np.quantile(x, self.reference_quantile))
        vals = tuple(float(v) for v in np.quantile(x, self.exposure_quantiles))
        return ExposureGrid(self.reference_quantile, self.exposure_quantiles, ref, vals)

    def __len__(self):
        return len(self.exposure_quantiles)


@dataclass(frozen=True, eq=False)
class CounterfactualDraws:
    """Confounder-averaged means, ``values[level, combo, k]`` with combos in
    ``COMBOS`` order."""

    values: np.ndarray
    combos: tuple = COMBOS


@dataclass(frozen=True, eq=False)
class EffectTable:
    """Summaries per exposure level x estimand; arrays are ``(levels, 5)``."""

    grid: ExposureGrid
    point: np.ndarray
    lo95: np.ndarray
    hi95: np.ndarray
    median: np.ndarray
    draws: np.ndarray | None = None          # (levels, 5, K)
    counterfactuals: CounterfactualDraws | None = None
    meta: dict = field(default_factory=dict)
    estimands: tuple = ESTIMANDS

    def estimate(self, quantile: float, estimand: str) -> tuple:
        """``(point, lo95, hi95)`` for one level and estimand."""
        i = _level_index(self.grid, quantile)
        j = self.estimands.index(estimand)
        return float(self.point[i, j]), float(self.lo95[i, j]), float(self.hi95[i, j])

    def rows(self):
        for i, q in enumerate(self.grid.exposure_quantiles):
            for j, name in enumerate(self.estimands):
                yield {"exposure_quantile": q, "estimand": name, "point": float(self.point[i, j]),
                       "lo95": float(self.lo95[i, j]), "hi95": float(self.hi95[i, j]),
                       "median": float(self.median[i, j]),
                       "exposure": self.grid.exposure_values[i],
                       "reference": self.grid.reference_value}

    def to_frame(self):
        import pandas as pd

        return pd.DataFrame(list(self.rows()))


def _level_index(grid, quantile):
    for i, q in enumerate(grid.exposure_quantiles):
        if abs(q - quantile) < 1e-9:
            return i
    raise ArgumentError(f"quantile {quantile} is not on the grid {grid.exposure_quantiles}")


# -- single-day closed form ------------------------------------------------

def _slope(theta, spec, x):
    """Mediator coefficient in the exposure quartile of ``x``."""
    j = 1 + spec.mediator_column
    cat = int(spec.quartiles.category(x))
    a = theta[..., j]
    if cat > 0:
        a = a + theta[..., 1 + spec.interaction_columns[cat - 1]]
    return a


def _day_dataset(day) -> TimeSeriesDataset:
    return TimeSeriesDataset(date=np.array([np.datetime64(day.date, "D")]), y=[0.0], x=[day.x],
                             m=[0.0], humidity=[day.humidity], holiday=[bool(day.holiday)])


def counterfactual_day_mean(theta, x, mhat, sigma2, day, spec, *, day_index=None) -> float:
    """exp{eta0(x) + a(x) mhat + a(x)^2 sigma2 / 2} for one day.

    Parameters
    ----------
    theta
        Outcome coefficients, intercept first, then ``spec.column_names``.
    x
        Exposure applied to the outcome model.
    mhat, sigma2
        Mean and variance of the Gaussian mediator on that day.
    day
        :class:`~bartmed.dataset.DayRecord` supplying the confounders.
    """
    if sigma2 < 0:
        raise ArgumentError("sigma2 must be non-negative")
    theta = np.asarray(theta, dtype=float)
    X0 = build_outcome_design(_day_dataset(day), spec, x_override=x, m_override=0.0).values[0]
    a = float(_slope(theta, spec, x))
    expo = theta[0] + X0 @ theta[1:] + a * mhat + 0.5 * a * a * sigma2
    if not np.isfinite(expo) or expo > 700:
        where = f"day {day_index}" if day_index is not None else f"{day.date}"
        raise NumericalError(f"non-finite counterfactual mean on {where}", day=str(where))
    return float(np.exp(expo))


# -- Bayesian bootstrap ---------------------------------------------------

def _dirichlet_rows(rng, n_rows, T):
    e = rng.standard_exponential((n_rows, T))
    return e / e.sum(axis=1, keepdims=True)


def bayesian_bootstrap_weights(T: int, seed=None, size: int | None = None) -> np.ndarray:
    """Flat-Dirichlet weights over ``T`` observations (normalised exponentials).

    Returns a length-``T`` vector, or ``size x T`` when ``size`` is given.
    """
    if int(T) != T or T < 1:
        raise ArgumentError(f"T must be a positive integer, got {T!r}")
    rng = np.random.default_rng(seed)
    w = _dirichlet_rows(rng, 1 if size is None else int(size), int(T))
    return w[0] if size is None else w


# -- ratio algebra --------------------------------------------------------

def effects_from_counterfactuals(F) -> np.ndarray:
    """Ratio draws ``(..., 5, K)`` from means ``(..., 4, K)`` in ``COMBOS`` order."""
    F = np.asarray(F)
    xx, xs, sx, ss = (F[..., i, :] for i in range(4))
    return np.stack([xs / ss, xx / sx, sx / ss, xx / xs, xx / ss], axis=-2)


def effect_identities_check(table: EffectTable, tol: float) -> bool:
    """Per-draw check of TE = TNDE * PNIE = PNDE * TNIE at every level.

    Differences equal to ``tol`` pass, so ``tol=0`` asks for exact equality.
    """
    if table.draws is None:
        raise ArgumentError("the effect table has no retained draws")
    d = dict(zip(table.estimands, np.moveaxis(table.draws, -2, 0)))
    e1 = np.abs(d["TE"] - d["TNDE"] * d["PNIE"])
    e2 = np.abs(d["TE"] - d["PNDE"] * d["TNIE"])
    return bool(np.all(e1 <= tol) and np.all(e2 <= tol))


# -- engine ---------------------------------------------------------------

class _MediatorDraws:
    """Mediator means at a fixed exposure for a block of draws, either model."""

    def __init__(self, mediator, ds, K, mode, seed, resample):
        self.mediator, self.ds, self.mode = mediator, ds, mode
        if isinstance(mediator, BartPosterior):
            n = mediator.n_draws
            if K > n and not resample:
                raise ArgumentError(
                    f"K={K} exceeds the {n} retained BART draws; refit with more draws or "
                    "pass resample_draws=True to subsample with replacement", kind="argument.too_many_draws")
            if resample:
                self.index = np.sort(np.random.default_rng(seed).integers(0, n, size=K))
            else:
                self.index = np.round(np.linspace(0, n - 1, K)).astype(np.int64)
            self.sigma2 = mediator.sigma2[self.index]
        elif isinstance(mediator, LinearMediatorFit):
            if mediator.spec is None:
                raise ArgumentError("linear mediator fit has no design spec")
            self.beta = sample_mediator_coefficients(mediator, K, seed)
            spec = mediator.spec
            conf = build_mediator_design(ds, spec, x_override=float(np.median(ds.x))).values
            self.temp = spec.temperature_slice
            self.conf_cols = np.arange(spec.temperature_slice.stop, spec.n_columns)
            self.C = conf[:, self.conf_cols]
            self.sigma2 = np.full(K, mediator.sigma2_hat)
        else:
            raise ArgumentError(f"unsupported mediator model {type(mediator).__name__}")

    def means(self, xvals, k0, k1, noise_seed) -> dict:
        """``{x: (k1 - k0, T) array}`` of mediator means for draws ``k0:k1``."""
        out = {}
        if isinstance(self.mediator, LinearMediatorFit):
            b = self.beta[k0:k1]
            base = b[:, :1] + b[:, 1 + self.conf_cols] @ self.C.T
            bt = b[:, 1 + self.temp.start:1 + self.temp.stop]
        rng = np.random.default_rng(noise_seed)
        for x in xvals:
            if isinstance(self.mediator, BartPosterior):
                mh = predict(self.mediator, bart_covariates(self.ds, x_override=x), self.index[k0:k1])
            else:
                g = self.mediator.spec.temperature_basis.evaluate([x], name="temperature")[0]
                mh = base + (bt @ g)[:, None]
            if self.mode == "predictive":
                mh = mh + rng.standard_normal(mh.shape) * np.sqrt(self.sigma2[k0:k1])[:, None]
            out[x] = mh
        return out


def _chunk_means(job):
    """Counterfactual means ``(levels, 4, k1 - k0)`` for one block of draws.

    Pure in its arguments; blocks can run in any order or process.
    """
    (k0, k1, theta, med, spec, C, ccols, tcols, gx, levels, xs, share_weights,
     w_seed, noise_seed) = job
    th = theta[k0:k1]
    n = k1 - k0
    T = C.shape[0]
    L = len(levels)
    xvals = sorted(set(levels) | {xs})
    n_w = 1 if share_weights else 4 * L
    W = _dirichlet_rows(np.random.default_rng(w_seed), n_w * n, T).reshape(n_w, n, T)
    eta_c = th[:, 1 + ccols] @ C.T
    s2 = med.sigma2[k0:k1]
    mh = med.means(xvals, k0, k1, noise_seed)
    base = {v: th[:, 0] + th[:, 1 + tcols] @ gx[v] for v in xvals}
    slope = {v: _slope(th, spec, v) for v in xvals}
    F = np.empty((L, 4, n))
    cache = {}
    for i, x in enumerate(levels):
        for c, key in enumerate(((x, x), (x, xs), (xs, x), (xs, xs))):
            if share_weights and key in cache:
                F[i, c] = cache[key]
                continue
            xa, xb = key
            a = slope[xa]
            expo = eta_c + (base[xa] + 0.5 * a * a * s2)[:, None] + a[:, None] * mh[xb]
            bad = ~np.isfinite(expo) | (expo > 700)
            if bad.any():
                kk, t = np.argwhere(bad)[0]
                raise NumericalError(f"non-finite counterfactual mean at draw {k0 + kk}, day {t}",
                                     draw=int(k0 + kk), day=int(t))
            Wk = W[0] if share_weights else W[i * 4 + c]
            cache[key] = F[i, c] = np.einsum("kt,kt->k", Wk, np.exp(expo))
    return F


def estimate_effects(outcome: OutcomeFit, mediator, ds: TimeSeriesDataset, grid: ExposureGrid | None = None,
                     K: int = 20000, seed=0, *, mediator_draw_mode: str = "mean",
                     share_weights: bool = True, resample_draws: bool = False,
                     keep_draws: bool = True, workers: int = 1) -> EffectTable:
    """Posterior summaries of the five effects at every grid level.

    Parameters
    ----------
    outcome
        Quasi-Poisson outcome fit with an attached design spec.
    mediator
        :class:`~bartmed.bart.BartPosterior` or :class:`LinearMediatorFit`.
    ds
        Dataset whose days define the confounder distribution.
    grid
        Exposure grid; resolved against ``ds.x`` if not already resolved.
    K
        Number of Monte-Carlo draws (at least 100).
    mediator_draw_mode
        ``"mean"`` uses mediator mean draws with the analytic variance term;
        ``"predictive"`` also adds N(0, sigma2) noise to each day's mediator.
    share_weights
        Use one weight vector per draw for all combinations and levels. When
        false each combination gets its own weights and the per-draw ratio
        identities no longer hold.
    resample_draws
        Allow ``K`` above the number of retained BART draws by resampling.
    workers
        Processes for the draw blocks; results do not depend on it.

    Notes
    -----
    Coefficient and mediator draws come from their own children of
    ``seed``. Draws are split into fixed blocks of 250 and every block gets
    its own weight and noise substreams, so the output is the same for any
    worker count.
    """
    if int(K) != K or K < MIN_DRAWS:
        raise ArgumentError(f"K must be an integer >= {MIN_DRAWS}, got {K!r}")
    K = int(K)
    if mediator_draw_mode not in ("mean", "predictive"):
        raise ArgumentError(f"mediator_draw_mode must be 'mean' or 'predictive', got {mediator_draw_mode!r}")
    spec = outcome.spec
    if spec is None or spec.role != "outcome":
        raise ArgumentError("outcome fit needs an outcome design spec")
    if outcome.n_coef != spec.n_columns + 1:
        raise ArgumentError("outcome coefficients do not match the design spec")
    grid = grid or ExposureGrid()
    if not grid.resolved:
        grid = grid.resolve(ds.x)

    if isinstance(seed, np.random.SeedSequence):
        # spawn from a copy: spawning advances the caller's sequence
        ss = np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
    else:
        ss = np.random.SeedSequence(seed)
    s_theta, s_med, s_w, s_noise = ss.spawn(4)
    theta = sample_coefficients(outcome, K, s_theta).draws
    med = _MediatorDraws(mediator, ds, K, mediator_draw_mode, s_med, resample_draws)

    X0 = build_outcome_design(ds, spec, x_override=grid.reference_value, m_override=0.0).values
    tcols = np.arange(spec.temperature_slice.start, spec.temperature_slice.stop)
    skip = set(tcols.tolist()) | {spec.mediator_column, *spec.interaction_columns}
    ccols = np.array([j for j in range(spec.n_columns) if j not in skip])
    C = np.ascontiguousarray(X0[:, ccols])
    xs = grid.reference_value
    levels = list(grid.exposure_values)
    gx = {v: spec.temperature_basis.evaluate([v], name="temperature")[0] for v in set(levels) | {xs}}

    starts = list(range(0, K, _CHUNK))
    w_seeds, n_seeds = s_w.spawn(len(starts)), s_noise.spawn(len(starts))
    jobs = [(k0, min(K, k0 + _CHUNK), theta, med, spec, C, ccols, tcols, gx, levels, xs,
             share_weights, w_seeds[c], n_seeds[c]) for c, k0 in enumerate(starts)]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            blocks = list(ex.map(_chunk_means, jobs))
    else:
        blocks = [_chunk_means(j) for j in jobs]
    F = np.concatenate(blocks, axis=-1)

    if not np.all(F > 0):
        raise NumericalError("counterfactual means must be positive")
    R = effects_from_counterfactuals(F)
    point = R.mean(axis=-1)
    lo, med50, hi = np.percentile(R, [2.5, 50.0, 97.5], axis=-1)
    meta = {"K": K, "seed": seed if isinstance(seed, (int, type(None))) else
            {"entropy": str(ss.entropy), "spawn_key": list(ss.spawn_key)},
            "mediator_model": "bart" if isinstance(mediator, BartPosterior) else "linear",
            "mediator_draw_mode": mediator_draw_mode, "share_weights": share_weights,
            "resample_draws": resample_draws}
    return EffectTable(grid, point, lo, hi, med50, R if keep_draws else None,
                       CounterfactualDraws(F) if keep_draws else None, meta)


# -- output ---------------------------------------------------------------

_CSV_COLUMNS = ("exposure_quantile", "estimand", "point", "lo95", "hi95", "median", "exposure", "reference")


def _fmt(v):
    return format(v, ".10g") if isinstance(v, float) else str(v)


def write_effect_table(table: EffectTable, path) -> None:
    """CSV with one row per (exposure quantile, estimand)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_CSV_COLUMNS)
        for row in table.rows():
            w.writerow([_fmt(row[c]) for c in _CSV_COLUMNS])


def write_effect_draws(table: EffectTable, path) -> None:
    """Per-draw ratios ``draws[level, estimand, k]`` plus grid metadata (npz)."""
    if table.draws is None:
        raise ArgumentError("the effect table has no retained draws")
    meta = {"format": "bartmed.effect_draws", "format_version": FORMAT_VERSION,
            "estimands": list(table.estimands), "combos": list(COMBOS),
            "exposure_quantiles": list(table.grid.exposure_quantiles),
            "exposure_values": list(table.grid.exposure_values),
            "reference_quantile": table.grid.reference_quantile,
            "reference_value": table.grid.reference_value, "run": table.meta}
    with open(path, "wb") as fh:
        np.savez_compressed(fh, draws=table.draws, counterfactuals=table.counterfactuals.values,
                            meta=np.array(json.dumps(meta, sort_keys=True)))


def load_effect_draws(path) -> EffectTable:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        R, F = z["draws"], z["counterfactuals"]
    if meta.get("format") != "bartmed.effect_draws" or meta.get("format_version") != FORMAT_VERSION:
        raise ArgumentError(f"{path}: not a version-{FORMAT_VERSION} effect-draws file")
    grid = ExposureGrid(meta["reference_quantile"], tuple(meta["exposure_quantiles"]),
                        meta["reference_value"], tuple(meta["exposure_values"]))
    lo, med50, hi = np.percentile(R, [2.5, 50.0, 97.5], axis=-1)
    return EffectTable(grid, R.mean(axis=-1), lo, hi, med50, R, CounterfactualDraws(F), meta["run"],
                       tuple(meta["estimands"]))

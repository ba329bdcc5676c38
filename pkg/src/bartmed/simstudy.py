"""Simulation harness: frozen truth models, replicate generation, oracle
effects and bias / RMSE / coverage summaries.

A truth is a mediator model (linear, or a BART posterior-mean forest) plus
outcome coefficients, both estimated from a template dataset and then frozen.
Replicates keep the template's exposure and confounders, redraw the mediator
from the truth and redraw counts from a negative binomial around the outcome
mean. True effects average the closed-form counterfactual means over the
template days with equal weights.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bart import BartConfig, BartPosterior, fit_bart, predict
from .basis import (bart_covariates, build_mediator_design, build_outcome_design,
                    make_design_spec)
from .dataset import TimeSeriesDataset, synthesize_dataset
from .errors import ArgumentError, BartmedError, ConsistencyError, NumericalError, ScenarioError
from .glm import OutcomeFit, fit_quasipoisson
from .mediation import ESTIMANDS, ExposureGrid, effects_from_counterfactuals, estimate_effects, _slope
from .mediator_linear import LinearMediatorFit, fit_linear_mediator, predict_mediator_mean

__all__ = [
    "ScenarioConfig",
    "ScenarioMetrics",
    "TruthModel",
    "make_truth",
    "metrics_manifest",
    "oracle_estimands",
    "run_scenario",
    "simulate_replicate",
    "summarize",
    "write_scenario_csv",
]

log = logging.getLogger(__name__)

REPORTED = ("PNDE", "TNIE", "TE")
CONTRASTS = (0.75, 0.85, 0.95)
NB_SIZE = 50.0
MAX_FAILURE_SHARE = 0.05
ORACLE_TOL = 1e-3
ORACLE_HARD_TOL = 5e-3
_KINDS = ("linear", "bart")


@dataclass(frozen=True, eq=False)
class TruthModel:
    """Frozen data-generating model.

    ``nb_dispersion`` is the negative-binomial size (variance
    ``mu (1 + mu / size)``); ``None`` gives Poisson counts.
    """

    mediator_kind: str
    mediator: object                    # LinearMediatorFit or single-draw BartPosterior
    sigma2: float
    outcome: OutcomeFit
    nb_dispersion: float | None
    covariates: TimeSeriesDataset

    @property
    def outcome_theta(self):
        return self.outcome.theta_hat

    def mediator_mean(self, x=None) -> np.ndarray:
        """Truth mediator mean per template day, at exposure ``x`` (observed if None)."""
        if self.mediator_kind == "linear":
            return predict_mediator_mean(self.mediator, None, x, self.covariates)
        Z = bart_covariates(self.covariates, x_override=x)
        return predict(self.mediator, Z)[0]

    def replace(self, **kw) -> "TruthModel":
        return dataclasses.replace(self, **kw)

    def null_effects(self) -> "TruthModel":
        """Copy with the exposure and mediator terms of the outcome zeroed, so
        every effect equals one."""
        spec = self.outcome.spec
        theta = self.outcome.theta_hat.copy()
        cols = list(range(spec.temperature_slice.start, spec.temperature_slice.stop))
        cols += [spec.mediator_column, *spec.interaction_columns]
        theta[1 + np.array(cols)] = 0.0
        cov = self.outcome.cov.copy()
        return self.replace(outcome=self.outcome.with_theta(theta, cov))

    def close_mediator_channel(self) -> "TruthModel":
        """Copy with the mediator slope and its interactions zeroed."""
        spec = self.outcome.spec
        theta = self.outcome.theta_hat.copy()
        theta[1 + np.array([spec.mediator_column, *spec.interaction_columns])] = 0.0
        return self.replace(outcome=self.outcome.with_theta(theta))


def _mean_forest(post: BartPosterior, max_draws: int = 200) -> BartPosterior:
    """Collapse retained draws into one forest whose prediction is the
    posterior mean (over up to ``max_draws`` evenly spaced draws)."""
    n = post.n_draws
    idx = np.unique(np.round(np.linspace(0, n - 1, min(n, max_draws))).astype(np.int64))
    roots = post.roots[idx].reshape(1, -1)
    # each draw stores its own nodes, so scaling all leaf values by 1/D
    # turns the sum over D forests into their average
    value = post.value / idx.size
    sigma2 = np.array([float(post.sigma2[idx].mean())])
    return dataclasses.replace(post, roots=roots, value=value, sigma2=sigma2,
                               diagnostics={**post.diagnostics, "mean_forest_draws": int(idx.size)})


def make_truth(ds: TimeSeriesDataset, mediator_kind: str = "linear", seed: int = 0, *,
               bart_config: BartConfig | None = None, nb_dispersion: float | None = NB_SIZE,
               df=6) -> TruthModel:
    """Fit the mediator and outcome models to ``ds`` and freeze them."""
    if mediator_kind not in _KINDS:
        raise ArgumentError(f"mediator_kind must be one of {_KINDS}, got {mediator_kind!r}")
    if nb_dispersion is not None and not nb_dispersion > 0:
        raise ArgumentError("nb_dispersion must be positive (or None for Poisson)")
    out_spec = make_design_spec(ds, "outcome", df)
    outcome = fit_quasipoisson(build_outcome_design(ds, out_spec), ds.y)
    if mediator_kind == "linear":
        med = fit_linear_mediator(build_mediator_design(ds, make_design_spec(ds, "mediator", df)), ds.m)
        sigma2 = med.sigma2_hat
    else:
        cfg = (bart_config or BartConfig.desk()).replace(seed=seed)
        post = fit_bart(bart_covariates(ds), ds.m, cfg)
        med = _mean_forest(post)
        sigma2 = float(med.sigma2[0])
    covariates = ds.replace(y=np.zeros(len(ds)), m=np.zeros(len(ds)))
    return TruthModel(mediator_kind, med, float(sigma2), outcome, nb_dispersion, covariates)


def _outcome_mean(truth: TruthModel, m, x=None):
    spec = truth.outcome.spec
    X = build_outcome_design(truth.covariates, spec, x_override=x, m_override=m).values
    eta = truth.outcome_theta[0] + X @ truth.outcome_theta[1:]
    if not np.all(np.isfinite(eta)) or eta.max() > 700:
        raise NumericalError("outcome mean overflows")
    return np.exp(eta)


def simulate_replicate(truth: TruthModel, seed) -> TimeSeriesDataset:
    """Draw the mediator and the counts for every template day."""
    rng = np.random.default_rng(seed)
    cov = truth.covariates
    m = truth.mediator_mean() + math.sqrt(truth.sigma2) * rng.standard_normal(len(cov))
    mu = _outcome_mean(truth, m)
    size = truth.nb_dispersion
    if size is None or math.isinf(size):
        y = rng.poisson(mu)
    else:
        y = rng.negative_binomial(size, size / (size + mu))
    return cov.replace(y=y, m=m)


def _combos(x, xs):
    return ((x, x), (x, xs), (xs, x), (xs, xs))


def oracle_estimands(truth: TruthModel, grid: ExposureGrid, n_mc: int = 200_000, seed=0, *,
                     check: bool = True) -> dict:
    """True effects at each grid level, computed two ways.

    The closed form averages exp{eta0(xa) + a(xa) m(xb) + a(xa)^2 sigma2 / 2}
    over the template days. The check route draws ``n_mc`` mediator values
    (stratified evenly over days), rebuilds the full outcome design for each
    and averages the exp-link means.

    Returns
    -------
    dict
        ``values`` (levels x 5, closed form, ``ESTIMANDS`` order),
        ``simulated`` (same, check route), ``max_rel_diff``, ``grid``.

    Raises
    ------
    ConsistencyError
        If the two routes differ by more than 0.5% anywhere.
    """
    if n_mc < 100_000:
        raise ArgumentError("n_mc must be at least 100000")
    if not grid.resolved:
        grid = grid.resolve(truth.covariates.x)
    spec = truth.outcome.spec
    theta = truth.outcome_theta
    cov = truth.covariates
    T = len(cov)
    xs = grid.reference_value
    xvals = sorted(set(grid.exposure_values) | {xs})
    mbar = {v: truth.mediator_mean(v) for v in xvals}
    eta0 = {}
    for v in xvals:
        X0 = build_outcome_design(cov, spec, x_override=v, m_override=0.0).values
        eta0[v] = theta[0] + X0 @ theta[1:]

    def closed(xa, xb):
        a = float(_slope(theta, spec, xa))
        return float(np.mean(np.exp(eta0[xa] + a * mbar[xb] + 0.5 * a * a * truth.sigma2)))

    rng = np.random.default_rng(seed)
    reps = int(math.ceil(n_mc / T))
    sd = math.sqrt(truth.sigma2)

    def simulated(xa, xb):
        acc = np.zeros(T)
        for _ in range(reps):
            m = mbar[xb] + sd * rng.standard_normal(T)
            acc += _outcome_mean(truth, m, x=xa)
        return float(np.mean(acc / reps))

    L = len(grid)
    F = np.empty((L, 4, 1))
    Fs = np.empty((L, 4, 1))
    c_cache, s_cache = {}, {}
    for i, x in enumerate(grid.exposure_values):
        for c, key in enumerate(_combos(x, xs)):
            if key not in c_cache:
                c_cache[key] = closed(*key)
                s_cache[key] = simulated(*key) if check else c_cache[key]
            F[i, c, 0], Fs[i, c, 0] = c_cache[key], s_cache[key]
    values = effects_from_counterfactuals(F)[..., 0]
    sim = effects_from_counterfactuals(Fs)[..., 0]
    rel = float(np.max(np.abs(sim / values - 1.0)))
    if check and rel > ORACLE_HARD_TOL:
        raise ConsistencyError(f"closed-form and simulated truths differ by {100 * rel:.3f}%",
                               max_rel_diff=rel)
    return {"values": values, "simulated": sim, "max_rel_diff": rel, "grid": grid,
            "estimands": ESTIMANDS}


# -- scenarios ------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    """Settings shared by every replicate of a scenario.

    ``desk`` is the reduced preset (200 replicates, K = 2000, 50-tree BART
    with 500 burn-in sweeps); ``full`` matches the large-scale study (500
    replicates, K = 20000, 200 trees, 5000 burn-in, 20000 draws).
    """

    n_reps: int = 200
    K: int = 2000
    bart: BartConfig = field(default_factory=BartConfig.desk)
    contrasts: tuple = CONTRASTS
    reference_quantile: float = 0.50
    nb_dispersion: float | None = NB_SIZE
    T: int = 2208
    data_seed: int = 20240101
    n_mc: int = 200_000
    mediator_draw_mode: str = "mean"
    workers: int = 1

    @classmethod
    def preset(cls, name: str, **kw) -> "ScenarioConfig":
        presets = {
            "smoke": dict(n_reps=5, K=200, bart=BartConfig.desk(burn_in=200, n_draws=400)),
            "desk": dict(),
            "full": dict(n_reps=500, K=20000, bart=BartConfig()),
        }
        if name not in presets:
            raise ArgumentError(f"unknown preset {name!r}; choose from {sorted(presets)}", kind="config.invalid")
        base = presets[name]
        base.update(kw)
        return cls(**base)

    def grid(self) -> ExposureGrid:
        return ExposureGrid(self.reference_quantile, tuple(self.contrasts))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["bart"] = self.bart.to_dict()
        d["contrasts"] = list(self.contrasts)
        return d


@dataclass(frozen=True, eq=False)
class ScenarioMetrics:
    """Per (contrast, estimand) metrics of one truth/fit combination.

    ``rows`` hold ``contrast, estimand, truth, mean_point, pct_rb, rmse,
    coverage, n_reps``; ``points``/``lo``/``hi`` are the replicate-level
    estimates ``(reps, contrasts, estimands)``.
    """

    truth_kind: str
    fit_kind: str
    rows: tuple
    truth: np.ndarray
    points: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    n_failed: int
    failures: tuple = ()
    seeds: dict = field(default_factory=dict)

    def row(self, contrast, estimand) -> dict:
        for r in self.rows:
            if abs(r["contrast"] - contrast) < 1e-9 and r["estimand"] == estimand:
                return r
        raise KeyError((contrast, estimand))

    def to_frame(self):
        import pandas as pd

        return pd.DataFrame(list(self.rows))


def summarize(truth, points, lo, hi, contrasts, estimands=REPORTED):
    """%RB, RMSE and coverage from replicate estimates ``(reps, C, E)``."""
    points, lo, hi = map(np.asarray, (points, lo, hi))
    rows = []
    for i, c in enumerate(contrasts):
        for j, e in enumerate(estimands):
            t = float(truth[i, j])
            p = points[:, i, j]
            cover = (lo[:, i, j] <= t) & (t <= hi[:, i, j])
            rows.append({
                "contrast": float(c), "estimand": e, "truth": t, "mean_point": float(p.mean()),
                "pct_rb": float(100.0 * (p.mean() - t) / t),
                "rmse": float(np.sqrt(np.mean((p - t) ** 2))),
                "coverage": float(100.0 * cover.mean()),
                "n_reps": int(p.size),
            })
    return tuple(rows)


def _replicate_seed(seed, rep):
    return np.random.SeedSequence([int(seed), int(rep)])


def _one_replicate(rep, truth, fit_kind, grid, cfg, seed):
    ss = _replicate_seed(seed, rep)
    s_data, s_bart, s_eff = ss.spawn(3)
    ds = simulate_replicate(truth, s_data)
    try:
        spec = truth.outcome.spec
        outcome = fit_quasipoisson(build_outcome_design(ds, spec), ds.y)
        if fit_kind == "linear":
            med = fit_linear_mediator(build_mediator_design(ds, make_design_spec(ds, "mediator")), ds.m)
        else:
            bseed = int(s_bart.generate_state(1)[0])
            med = fit_bart(bart_covariates(ds), ds.m, cfg.bart.replace(seed=bseed))
        tab = estimate_effects(outcome, med, ds, grid, cfg.K, s_eff,
                               mediator_draw_mode=cfg.mediator_draw_mode, keep_draws=False)
    except (BartmedError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return rep, None, f"{type(exc).__name__}: {exc}"
    cols = [ESTIMANDS.index(e) for e in REPORTED]
    return rep, (tab.point[:, cols], tab.lo95[:, cols], tab.hi95[:, cols]), None


def run_scenario(truth_kind: str, fit_kind: str, n_reps: int | None = None, grid: ExposureGrid | None = None,
                 cfg: ScenarioConfig | None = None, seed: int = 0, *, dataset: TimeSeriesDataset | None = None,
                 truth: TruthModel | None = None, progress=None) -> ScenarioMetrics:
    """Simulate, refit and summarise one truth/fit combination.

    Parameters
    ----------
    truth_kind, fit_kind
        ``"linear"`` or ``"bart"``.
    n_reps
        Replicates (overrides ``cfg.n_reps``); at least 2.
    grid
        Contrasts against the reference; defaults to ``cfg.grid()``.
    dataset
        Template dataset; defaults to a synthetic one of ``cfg.T`` days.
    truth
        Pre-built truth (skips :func:`make_truth`).

    Raises
    ------
    ScenarioError
        If more than 5% of replicates fail to fit.
    """
    cfg = cfg or ScenarioConfig()
    n_reps = cfg.n_reps if n_reps is None else n_reps
    if int(n_reps) != n_reps or n_reps < 2:
        raise ArgumentError(f"n_reps must be an integer >= 2, got {n_reps!r}")
    for k in (truth_kind, fit_kind):
        if k not in _KINDS:
            raise ArgumentError(f"model kind must be one of {_KINDS}, got {k!r}")
    if truth is None:
        ds = dataset if dataset is not None else synthesize_dataset(cfg.T, cfg.data_seed)
        truth = make_truth(ds, truth_kind, seed, bart_config=cfg.bart, nb_dispersion=cfg.nb_dispersion)
    grid = (grid or cfg.grid())
    if not grid.resolved:
        grid = grid.resolve(truth.covariates.x)
    oracle = oracle_estimands(truth, grid, cfg.n_mc, seed)
    cols = [ESTIMANDS.index(e) for e in REPORTED]
    true_vals = oracle["values"][:, cols]

    results = []
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            futs = [ex.submit(_one_replicate, r, truth, fit_kind, grid, cfg, seed) for r in range(n_reps)]
            for f in futs:
                results.append(f.result())
                if progress:
                    progress(len(results), n_reps)
    else:
        for r in range(n_reps):
            results.append(_one_replicate(r, truth, fit_kind, grid, cfg, seed))
            if progress:
                progress(r + 1, n_reps)
    results.sort(key=lambda t: t[0])
    ok = [res for _, res, err in results if res is not None]
    failures = tuple((rep, err) for rep, _, err in results if err)
    if failures:
        log.warning("%d of %d replicates failed", len(failures), n_reps)
    if len(failures) > MAX_FAILURE_SHARE * n_reps or len(ok) < 2:
        raise ScenarioError(f"{len(failures)} of {n_reps} replicates failed", failures=len(failures),
                            first=failures[0][1] if failures else None)
    points = np.stack([r[0] for r in ok])
    lo = np.stack([r[1] for r in ok])
    hi = np.stack([r[2] for r in ok])
    rows = summarize(true_vals, points, lo, hi, grid.exposure_quantiles)
    rows = tuple({**r, "n_failed": len(failures)} for r in rows)
    seeds = {"seed": seed, "replicate_seeds": "SeedSequence([seed, rep])", "data_seed": cfg.data_seed,
             "oracle_max_rel_diff": oracle["max_rel_diff"]}
    return ScenarioMetrics(truth_kind, fit_kind, rows, true_vals, points, lo, hi, len(failures),
                           failures, seeds)


def write_scenario_csv(metrics_list, path) -> None:
    """Table of metrics, one row per scenario x contrast x estimand."""
    import csv

    cols = ("truth_model", "fitted_model", "contrast", "estimand", "truth", "mean_point",
            "pct_rb", "rmse", "coverage", "n_reps", "n_failed")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for m in metrics_list:
            for r in m.rows:
                vals = {"truth_model": m.truth_kind, "fitted_model": m.fit_kind, **r}
                w.writerow([format(v, ".10g") if isinstance(v, float) else str(v)
                            for v in (vals[c] for c in cols)])


def metrics_manifest(metrics_list, cfg: ScenarioConfig, seed) -> str:
    return json.dumps({"config": cfg.to_dict(), "seed": seed,
                       "scenarios": [{"truth": m.truth_kind, "fit": m.fit_kind, "n_failed": m.n_failed,
                                      "failures": list(m.failures), **m.seeds} for m in metrics_list]},
                      sort_keys=True, indent=2)

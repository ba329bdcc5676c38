"""BART configuration, fitting entry point and the frozen posterior."""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ..errors import ArgumentError, InputIOError, NumericalError
from .sampler import BartSampler, encode, make_cutpoints

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class BartConfig:
    """Sampler settings.

    Defaults are the full-scale settings (200 trees, 5000 burn-in sweeps,
    20000 kept draws); :meth:`desk` gives the reduced preset used by the test
    suite and the simulation harness.
    """

    n_trees: int = 200
    burn_in: int = 5000
    n_draws: int = 20000
    thin: int = 1
    alpha: float = 0.95
    beta: float = 2.0
    k: float = 2.0
    nu: float = 3.0
    q: float = 0.90
    n_cutpoints: int = 100
    move_probs: tuple = (0.25, 0.25, 0.40, 0.10)
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.burn_in < 0 or self.n_draws < 1 or self.thin < 1:
            raise ArgumentError("n_trees, n_draws, thin must be >= 1 and burn_in >= 0")
        if not 0 < self.alpha < 1 or self.beta < 0:
            raise ArgumentError("alpha must lie in (0, 1) and beta must be >= 0")
        if self.k <= 0 or self.nu <= 0 or not 0 < self.q < 1:
            raise ArgumentError("k, nu must be > 0 and q in (0, 1)")
        if self.n_cutpoints < 1:
            raise ArgumentError("n_cutpoints must be >= 1")
        mp = tuple(float(v) for v in self.move_probs)
        if len(mp) != 4 or min(mp) < 0 or abs(sum(mp) - 1.0) > 1e-9:
            raise ArgumentError("move_probs must be four non-negative numbers summing to 1")
        object.__setattr__(self, "move_probs", mp)

    @classmethod
    def desk(cls, **kw) -> "BartConfig":
        base = dict(n_trees=50, burn_in=500, n_draws=2000)
        base.update(kw)
        return cls(**base)

    def replace(self, **kw) -> "BartConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["move_probs"] = list(self.move_probs)
        return d


@dataclass(frozen=True, eq=False)
class BartPosterior:
    """Retained forests stored as flat node arrays.

    ``roots[d, g]`` indexes the root of tree ``g`` in draw ``d``. Leaf values
    are in standardised units; ``sigma2`` is on the original scale.
    """

    var: np.ndarray
    cut: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    roots: np.ndarray
    sigma2: np.ndarray
    center: float
    half_range: float
    cutpoints: tuple
    covariate_names: tuple = ()
    config: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_draws(self):
        return self.roots.shape[0]

    @property
    def n_trees(self):
        return self.roots.shape[1]

    @property
    def n_covariates(self):
        return len(self.cutpoints)

    def subset(self, draw_index) -> "BartPosterior":
        idx = np.atleast_1d(np.asarray(draw_index, dtype=np.int64))
        return dataclasses.replace(self, roots=self.roots[idx], sigma2=self.sigma2[idx])

    def tree_sizes(self) -> np.ndarray:
        """Number of leaves of every retained tree, shape (n_draws, n_trees)."""
        out = np.zeros(self.roots.shape, dtype=np.int64)
        for d in range(self.n_draws):
            for g in range(self.n_trees):
                stack, n = [int(self.roots[d, g])], 0
                while stack:
                    i = stack.pop()
                    if self.var[i] < 0:
                        n += 1
                    else:
                        stack += [int(self.left[i]), int(self.right[i])]
                out[d, g] = n
        return out


def _prior_scale(y_std, nu, q):
    sd = max(float(np.std(y_std, ddof=1)) if y_std.size > 1 else 0.0, 1e-6)
    return sd * sd * stats.chi2.ppf(1.0 - q, nu) / nu, sd


def fit_bart(Z, m, cfg: BartConfig | None = None, *, covariate_names=None, kernels=None,
             progress=None) -> BartPosterior:
    """Run one chain and return the retained draws.

    Parameters
    ----------
    Z
        ``n x p`` raw covariate matrix (e.g. from ``build_mediator_design(model="bart")``).
    m
        Mediator values.
    cfg
        Sampler settings; defaults to :class:`BartConfig`.
    kernels
        Force ``"python"`` or ``"cython"`` kernels (default: best available).
    """
    cfg = cfg or BartConfig()
    Z = np.asarray(getattr(Z, "values", Z), dtype=float)
    m = np.asarray(m, dtype=float)
    if Z.ndim != 2 or Z.shape[0] != m.shape[0]:
        raise ArgumentError(f"Z has shape {Z.shape} but m has {m.shape[0]} entries")
    if m.size == 0:
        raise ArgumentError("cannot fit BART to an empty dataset")
    if not np.all(np.isfinite(m)) or not np.all(np.isfinite(Z)):
        raise ArgumentError("Z and m must be finite")
    cutpoints = tuple(make_cutpoints(Z[:, j], cfg.n_cutpoints) for j in range(Z.shape[1]))
    if all(c.size == 0 for c in cutpoints):
        raise ArgumentError("every covariate is constant; no split is possible", kind="bart.degenerate_design")
    codes = encode(Z, cutpoints)

    lo, hi = float(m.min()), float(m.max())
    center = 0.5 * (lo + hi)
    half_range = 0.5 * (hi - lo) if hi > lo else 0.5
    y_std = (m - center) / (2.0 * half_range)
    lam, sd = _prior_scale(y_std, cfg.nu, cfg.q)
    tau = 0.5 / (cfg.k * np.sqrt(cfg.n_trees))

    rng = np.random.default_rng(cfg.seed)
    sampler = BartSampler(codes, [c.size for c in cutpoints], y_std, n_trees=cfg.n_trees,
                          alpha=cfg.alpha, beta=cfg.beta, tau=tau, nu=cfg.nu, lam=lam,
                          sigma2=sd * sd, move_probs=cfg.move_probs, rng=rng, kernels=kernels)
    pieces = [[] for _ in range(5)]
    roots = np.empty((cfg.n_draws, cfg.n_trees), dtype=np.int64)
    sigma2 = np.empty(cfg.n_draws)
    offset = 0
    total = cfg.burn_in + cfg.n_draws * cfg.thin
    kept = 0
    for it in range(total):
        sampler.sweep()
        if it >= cfg.burn_in and (it - cfg.burn_in + 1) % cfg.thin == 0:
            for g, arrays in enumerate(sampler.snapshot()):
                var, cut, left, right, value = arrays
                roots[kept, g] = offset
                pieces[0].append(var)
                pieces[1].append(cut)
                pieces[2].append(np.where(left >= 0, left + offset, -1).astype(np.int32))
                pieces[3].append(np.where(right >= 0, right + offset, -1).astype(np.int32))
                pieces[4].append(value)
                offset += var.shape[0]
            sigma2[kept] = sampler.sigma2
            kept += 1
        if progress is not None:
            progress(it + 1, total)
    scale2 = (2.0 * half_range) ** 2
    var, cut, left, right = (np.concatenate(p).astype(np.int32) for p in pieces[:4])
    value = np.concatenate(pieces[4])
    diag = {
        "proposed": sampler.proposed.tolist(),
        "accepted": sampler.accepted.tolist(),
        "kernels": sampler.k.BACKEND,
    }
    names = tuple(covariate_names) if covariate_names is not None else tuple(f"z{j}" for j in range(Z.shape[1]))
    post = BartPosterior(var, cut, left, right, value, roots, sigma2 * scale2, center, half_range,
                         cutpoints, names, cfg.to_dict(), diag)
    if not np.all(np.isfinite(post.value)) or not np.all(post.sigma2 > 0):
        raise NumericalError("non-finite leaf values or non-positive variance in the posterior")
    return post


def _codes_for(post: BartPosterior, Znew):
    Znew = np.asarray(getattr(Znew, "values", Znew), dtype=float)
    if Znew.ndim != 2 or Znew.shape[1] != post.n_covariates:
        raise ArgumentError(f"Znew must have {post.n_covariates} columns, got shape {Znew.shape}")
    return encode(Znew, post.cutpoints)


def predict(post: BartPosterior, Znew, draw_index=None, *, kernels=None) -> np.ndarray:
    """Mean-function draws on the original scale, shape ``(n_draws, rows)``.

    ``draw_index`` selects a single draw (result has one row) or an array of
    draws.
    """
    from ._backend import get_kernels

    codes = _codes_for(post, Znew)
    roots = post.roots if draw_index is None else post.roots[np.atleast_1d(np.asarray(draw_index))]
    k = get_kernels(kernels)
    raw = k.predict_forests(post.var, post.cut, post.left, post.right, post.value,
                            np.ascontiguousarray(roots, dtype=np.int64), codes)
    return post.center + 2.0 * post.half_range * raw


def sample_predictive(post: BartPosterior, Znew, mode: str = "mean", seed=None, draw_index=None) -> np.ndarray:
    """``mode="mean"``: same as :func:`predict`. ``mode="predictive"``: add
    N(0, sigma2_k) noise to every entry of draw ``k``."""
    out = predict(post, Znew, draw_index)
    if mode == "mean":
        return out
    if mode != "predictive":
        raise ArgumentError(f"mode must be 'mean' or 'predictive', got {mode!r}")
    s2 = post.sigma2 if draw_index is None else post.sigma2[np.atleast_1d(np.asarray(draw_index))]
    rng = np.random.default_rng(seed)
    return out + rng.standard_normal(out.shape) * np.sqrt(s2)[:, None]


def save_posterior(post: BartPosterior, path) -> None:
    meta = {
        "format": "bartmed.bart_posterior",
        "format_version": FORMAT_VERSION,
        "center": post.center,
        "half_range": post.half_range,
        "covariate_names": list(post.covariate_names),
        "config": post.config,
        "diagnostics": post.diagnostics,
        "n_cutpoints": [int(c.size) for c in post.cutpoints],
    }
    cuts = np.concatenate(post.cutpoints) if post.cutpoints else np.empty(0)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, var=post.var, cut=post.cut, left=post.left, right=post.right,
                            value=post.value, roots=post.roots, sigma2=post.sigma2, cutpoints=cuts,
                            meta=np.array(json.dumps(meta, sort_keys=True)))


def load_posterior(path) -> BartPosterior:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            arrays = {k: z[k] for k in ("var", "cut", "left", "right", "value", "roots", "sigma2", "cutpoints")}
    except FileNotFoundError:
        raise InputIOError(f"artifact not found: {path}", kind="io.not_found") from None
    if meta.get("format") != "bartmed.bart_posterior" or meta.get("format_version") != FORMAT_VERSION:
        raise InputIOError(f"{path}: not a version-{FORMAT_VERSION} BART posterior", kind="io.format")
    splits = np.cumsum(meta["n_cutpoints"])[:-1]
    cutpoints = tuple(np.split(arrays.pop("cutpoints"), splits))
    return BartPosterior(cutpoints=cutpoints, center=meta["center"], half_range=meta["half_range"],
                         covariate_names=tuple(meta["covariate_names"]), config=meta["config"],
                         diagnostics=meta["diagnostics"], **arrays)

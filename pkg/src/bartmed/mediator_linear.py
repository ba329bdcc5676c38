"""Spline-linear Gaussian mediator regression.

M = b0 + g(X; b1) + b2'C + e, e ~ N(0, sigma2), fit by ordinary least
squares. Coefficient uncertainty is propagated by a parametric bootstrap
(normal draws around the estimate); the residual variance is held fixed at
its estimate.
"""
from __future__ import annotations

import json

import numpy as np
from scipy import linalg

from ._linalg import check_full_rank, mvn_draws
from .basis import DesignMatrix, DesignSpec, build_mediator_design
from .errors import ArgumentError, InputIOError

__all__ = ["LinearMediatorFit", "fit_linear_mediator", "load_linear_mediator",
           "predict_mediator_mean", "sample_mediator_coefficients", "save_linear_mediator"]

FORMAT_VERSION = 1
INTERCEPT = "(Intercept)"


class LinearMediatorFit:
    """OLS fit of the mediator on the spline-expanded design.

    ``beta_hat[0]`` is the intercept; the rest follow ``spec.column_names``.
    """

    __slots__ = ("beta_hat", "cov_beta", "sigma2_hat", "spec", "column_names")

    def __init__(self, beta_hat, cov_beta, sigma2_hat, spec: DesignSpec | None, column_names=None):
        beta_hat = np.asarray(beta_hat, dtype=float)
        cov_beta = np.asarray(cov_beta, dtype=float)
        if cov_beta.shape != (beta_hat.size, beta_hat.size):
            raise ArgumentError("cov_beta shape does not match beta_hat")
        if not sigma2_hat >= 0:
            raise ArgumentError("sigma2_hat must be non-negative")
        if spec is not None and spec.n_columns + 1 != beta_hat.size:
            raise ArgumentError("coefficient vector does not match the design spec")
        if column_names is None:
            column_names = (INTERCEPT,) + (tuple(spec.column_names) if spec is not None
                                           else tuple(f"x{j}" for j in range(beta_hat.size - 1)))
        self.beta_hat = beta_hat
        self.cov_beta = cov_beta
        self.sigma2_hat = float(sigma2_hat)
        self.spec = spec
        self.column_names = tuple(column_names)

    @property
    def n_coef(self):
        return self.beta_hat.size

    def __repr__(self):
        return f"LinearMediatorFit(p={self.n_coef}, sigma2_hat={self.sigma2_hat:.4g})"


def fit_linear_mediator(Z, m) -> LinearMediatorFit:
    """Least-squares fit with an intercept prepended to ``Z``.

    Raises
    ------
    SingularDesignError
        If ``[1, Z]`` is rank deficient.
    ArgumentError
        If there are no residual degrees of freedom.
    """
    spec = Z.spec if isinstance(Z, DesignMatrix) else None
    values = Z.values if isinstance(Z, DesignMatrix) else np.asarray(Z, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    m = np.asarray(m, dtype=float)
    if values.shape[0] != m.shape[0]:
        raise ArgumentError(f"design has {values.shape[0]} rows but m has {m.shape[0]}")
    if not np.all(np.isfinite(m)):
        raise ArgumentError("m must be finite")
    A = np.column_stack([np.ones(m.size), values])
    T, p = A.shape
    if T <= p:
        raise ArgumentError(f"no residual degrees of freedom (T={T}, p={p})", kind="argument.dof")
    names = [INTERCEPT] + (list(spec.column_names) if spec is not None else [f"x{j}" for j in range(p - 1)])
    check_full_rank(A, names)
    q, r = np.linalg.qr(A)
    beta = linalg.solve_triangular(r, q.T @ m)
    resid = m - A @ beta
    sigma2 = float(resid @ resid) / (T - p)
    rinv = linalg.solve_triangular(r, np.eye(p))
    cov = sigma2 * (rinv @ rinv.T)
    return LinearMediatorFit(beta, 0.5 * (cov + cov.T), sigma2, spec, names)


def predict_mediator_mean(fit: LinearMediatorFit, beta_draw=None, x_star=None, ds=None) -> np.ndarray:
    """E[M | X = x_star, C_t] for every day of ``ds``.

    ``x_star=None`` uses each day's observed exposure. ``beta_draw`` may be a
    vector or a ``K x p`` matrix (result is then ``K x T``).
    """
    if fit.spec is None:
        raise ArgumentError("fit has no design spec; cannot rebuild the mediator design")
    if ds is None:
        raise ArgumentError("a dataset is required for the confounders")
    if x_star is not None and not np.isfinite(float(x_star)):
        raise ArgumentError("x_star must be finite")
    Z = build_mediator_design(ds, fit.spec, x_override=x_star).values
    beta = fit.beta_hat if beta_draw is None else np.asarray(beta_draw, dtype=float)
    if beta.shape[-1] != fit.n_coef:
        raise ArgumentError(f"beta_draw must have {fit.n_coef} entries")
    if beta.ndim == 1:
        return beta[0] + Z @ beta[1:]
    return beta[:, :1] + beta[:, 1:] @ Z.T


def sample_mediator_coefficients(fit: LinearMediatorFit, K: int, seed) -> np.ndarray:
    """``K x p`` parametric-bootstrap draws from N(beta_hat, cov_beta)."""
    if int(K) != K or K < 1:
        raise ArgumentError(f"K must be a positive integer, got {K!r}")
    return mvn_draws(fit.beta_hat, fit.cov_beta, int(K), np.random.default_rng(seed))


def save_linear_mediator(fit: LinearMediatorFit, path) -> None:
    meta = {
        "format": "bartmed.linear_mediator",
        "format_version": FORMAT_VERSION,
        "sigma2_hat": fit.sigma2_hat,
        "column_names": list(fit.column_names),
        "spec": fit.spec.to_dict() if fit.spec is not None else None,
    }
    with open(path, "wb") as fh:
        np.savez(fh, beta_hat=fit.beta_hat, cov_beta=fit.cov_beta,
                 meta=np.array(json.dumps(meta, sort_keys=True)))


def load_linear_mediator(path) -> LinearMediatorFit:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            beta, cov = z["beta_hat"], z["cov_beta"]
    except FileNotFoundError:
        raise InputIOError(f"artifact not found: {path}", kind="io.not_found") from None
    if meta.get("format") != "bartmed.linear_mediator" or meta.get("format_version") != FORMAT_VERSION:
        raise InputIOError(f"{path}: not a version-{FORMAT_VERSION} linear mediator fit", kind="io.format")
    spec = DesignSpec.from_dict(meta["spec"]) if meta["spec"] else None
    return LinearMediatorFit(beta, cov, meta["sigma2_hat"], spec, meta["column_names"])

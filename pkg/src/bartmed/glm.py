"""Quasi-Poisson log-linear outcome regression.

The coefficients maximise the Poisson likelihood (IRLS, log link); the
covariance is inflated by the Pearson dispersion. Sampling from the
asymptotic normal distribution of the estimator feeds the Monte-Carlo
mediation engine.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from ._linalg import check_full_rank, mvn_draws
from .basis import DesignMatrix, DesignSpec
from .errors import ArgumentError, InputIOError, NumericalError

__all__ = ["CoefficientDraws", "OutcomeFit", "fit_quasipoisson", "load_outcome_fit",
           "sample_coefficients", "save_outcome_fit"]

FORMAT_VERSION = 1
INTERCEPT = "(Intercept)"


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class OutcomeFit:
    """Fitted outcome model.

    ``theta_hat[0]`` is the intercept; the remaining entries follow
    ``spec.column_names`` when a spec is attached.
    """

    theta_hat: np.ndarray
    cov: np.ndarray
    dispersion: float
    column_names: tuple
    spec: DesignSpec | None = None
    converged: bool = True
    iterations: int = 0
    deviance: float = float("nan")
    deviance_path: tuple = field(default=(), repr=False)

    @property
    def n_coef(self):
        return self.theta_hat.shape[0]

    @property
    def se(self):
        return np.sqrt(np.diag(self.cov))

    def coef_index(self, name: str) -> int:
        return self.column_names.index(name)

    @property
    def mediator_index(self) -> int:
        return self.coef_index("m")

    @property
    def interaction_indices(self) -> tuple:
        return tuple(self.coef_index(f"m:q{h}") for h in (2, 3, 4))

    def with_theta(self, theta_hat, cov=None) -> "OutcomeFit":
        """Copy with replaced coefficients (and optionally covariance)."""
        return OutcomeFit(np.asarray(theta_hat, dtype=float),
                          self.cov if cov is None else np.asarray(cov, dtype=float),
                          self.dispersion, self.column_names, self.spec, self.converged,
                          self.iterations, self.deviance, self.deviance_path)


@dataclass(frozen=True, eq=False)
class CoefficientDraws:
    draws: np.ndarray
    seed: object


def _poisson_deviance(y, mu):
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(y / mu), 0.0)
    return 2.0 * np.sum(term - (y - mu))


def fit_quasipoisson(X, y, *, intercept: bool = True, max_iter: int = 100,
                     tol: float = 1e-9) -> OutcomeFit:
    """Fit log E[y] = X theta by IRLS with Pearson-dispersion covariance.

    Parameters
    ----------
    X
        :class:`DesignMatrix` or 2-d array (``T x p``).
    y
        Non-negative integer counts.
    intercept
        Prepend a column of ones (coefficient name ``(Intercept)``).

    Raises
    ------
    SingularDesignError
        If the design is rank deficient (columns are never dropped).
    """
    spec = X.spec if isinstance(X, DesignMatrix) else None
    values = X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    names = list(spec.column_names) if spec is not None else [f"x{j}" for j in range(values.shape[1])]
    y = np.asarray(y, dtype=float)
    if values.shape[0] != y.shape[0]:
        raise ArgumentError(f"design has {values.shape[0]} rows but y has {y.shape[0]}")
    if np.any(y < 0) or np.any(y != np.round(y)) or not np.all(np.isfinite(y)):
        raise ArgumentError("y must contain non-negative integer counts")
    if intercept:
        values = np.column_stack([np.ones(len(y)), values])
        names = [INTERCEPT] + names
    T, p = values.shape
    check_full_rank(values, names)
    if T <= p:
        raise ArgumentError(f"need more observations than coefficients (T={T}, p={p})")

    theta = np.zeros(p)
    if intercept:
        theta[0] = np.log(y.mean() + 0.5)
    eta = values @ theta
    mu = np.exp(eta)
    dev = _poisson_deviance(y, mu)
    path = [dev]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        z = eta + (y - mu) / mu
        sw = np.sqrt(mu)
        q, r = np.linalg.qr(values * sw[:, None])
        new = linalg.solve_triangular(r, q.T @ (z * sw))
        step = new - theta
        for _ in range(30):
            cand = theta + step
            eta_c = values @ cand
            if np.all(np.isfinite(eta_c)) and eta_c.max() < 700:
                mu_c = np.exp(eta_c)
                dev_c = _poisson_deviance(y, mu_c)
                if dev_c <= dev * (1 + 1e-12) + 1e-12:
                    break
            step *= 0.5
        else:
            raise NumericalError(f"IRLS step halving failed at iteration {it}")
        theta, eta, mu = cand, eta_c, mu_c
        change = abs(dev - dev_c) / (abs(dev_c) + 0.1)
        assert dev_c <= path[-1] * (1 + 1e-12) + 1e-12, "IRLS deviance increased"
        dev = dev_c
        path.append(dev)
        if change < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"IRLS did not converge in {max_iter} iterations", ConvergenceWarning, stacklevel=2)

    sw = np.sqrt(mu)
    _, r = np.linalg.qr(values * sw[:, None])
    rinv = linalg.solve_triangular(r, np.eye(p))
    unscaled = rinv @ rinv.T
    pearson = np.sum((y - mu) ** 2 / mu)
    phi = pearson / (T - p)
    cov = phi * unscaled
    cov = 0.5 * (cov + cov.T)
    return OutcomeFit(theta, cov, float(phi), tuple(names), spec, converged, it, float(dev), tuple(path))


def sample_coefficients(fit, K: int, seed) -> CoefficientDraws:
    """``K`` i.i.d. draws from N(theta_hat, cov); deterministic in ``seed``."""
    if int(K) != K or K < 1:
        raise ArgumentError(f"K must be a positive integer, got {K!r}")
    if not fit.converged:
        raise ArgumentError("cannot sample from a fit that did not converge")
    rng = np.random.default_rng(seed)
    return CoefficientDraws(mvn_draws(fit.theta_hat, fit.cov, int(K), rng), seed)


def save_outcome_fit(fit: OutcomeFit, path) -> None:
    meta = {
        "format": "bartmed.outcome_fit",
        "format_version": FORMAT_VERSION,
        "column_names": list(fit.column_names),
        "dispersion": fit.dispersion,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "deviance": fit.deviance,
        "spec": fit.spec.to_dict() if fit.spec is not None else None,
    }
    with open(path, "wb") as fh:
        np.savez(fh, theta_hat=fit.theta_hat, cov=fit.cov, meta=np.array(json.dumps(meta, sort_keys=True)))


def load_outcome_fit(path) -> OutcomeFit:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            theta, cov = z["theta_hat"], z["cov"]
    except FileNotFoundError:
        raise InputIOError(f"artifact not found: {path}", kind="io.not_found") from None
    if meta.get("format") != "bartmed.outcome_fit" or meta.get("format_version") != FORMAT_VERSION:
        raise InputIOError(f"{path}: not a version-{FORMAT_VERSION} outcome fit", kind="io.format")
    spec = DesignSpec.from_dict(meta["spec"]) if meta["spec"] else None
    return OutcomeFit(theta, cov, meta["dispersion"], tuple(meta["column_names"]), spec,
                      meta["converged"], meta["iterations"], meta["deviance"])

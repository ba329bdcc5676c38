import logging

import numpy as np
from scipy import linalg

from .errors import NumericalError, SingularDesignError

log = logging.getLogger(__name__)


def check_full_rank(X: np.ndarray, names=None, tol: float = 1e-10) -> None:
    """Raise :class:`SingularDesignError` if ``X`` is numerically rank deficient.

    Uses a column-pivoted QR; columns pivoted past the numerical rank are
    reported by name.
    """
    if X.shape[0] < X.shape[1]:
        raise SingularDesignError(f"design has {X.shape[0]} rows but {X.shape[1]} columns")
    if X.shape[1] == 0:
        return
    _, r, piv = linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    rank = int(np.sum(d > tol * max(d[0], np.finfo(float).tiny)))
    if rank < X.shape[1]:
        bad = piv[rank:]
        labels = [names[j] if names is not None else f"col{j}" for j in bad]
        raise SingularDesignError(f"design is rank deficient (rank {rank} < {X.shape[1]}); "
                                  f"collinear column(s): {labels}", columns=labels)


def mvn_draws(mean: np.ndarray, cov: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``K`` rows from N(mean, cov) through a clipped spectral factor.

    Coordinates with zero variance are held exactly at ``mean``.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    p = mean.shape[0]
    out = np.tile(mean, (K, 1))
    free = np.flatnonzero(np.diag(cov) > 0)
    if free.size == 0:
        return out
    sub = cov[np.ix_(free, free)]
    sub = 0.5 * (sub + sub.T)
    try:
        w, v = np.linalg.eigh(sub)
    except np.linalg.LinAlgError:
        jitter = 1e-8 * np.trace(sub) / free.size
        try:
            w, v = np.linalg.eigh(sub + jitter * np.eye(free.size))
        except np.linalg.LinAlgError as exc:
            raise NumericalError("covariance factorisation failed after ridge jitter") from exc
    neg = w < 0
    if neg.any():
        log.info("clipping %d negative eigenvalue(s), most negative %.3g", int(neg.sum()), w.min())
        w = np.where(neg, 0.0, w)
    factor = v * np.sqrt(w)
    z = rng.standard_normal((K, free.size))
    out[:, free] += z @ factor.T
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite coefficient draw")
    assert out.shape == (K, p)
    return out

import warnings

import numpy as np
import pytest
import statsmodels.api as sm

from bartmed.basis import build_outcome_design
from bartmed.errors import ArgumentError, SingularDesignError
from bartmed.glm import (ConvergenceWarning, OutcomeFit, fit_quasipoisson, load_outcome_fit,
                         sample_coefficients, save_outcome_fit)


def test_intercept_only_mean():
    fit = fit_quasipoisson(np.empty((3, 0)), np.array([2, 4, 6]))
    assert abs(fit.theta_hat[0] - np.log(4.0)) < 1e-8
    assert fit.converged
    assert fit.column_names == ("(Intercept)",)


def test_matches_statsmodels(rng):
    n = 400
    X = np.column_stack([rng.normal(size=n), rng.uniform(-1, 1, n), rng.integers(0, 2, n)])
    theta = np.array([1.2, 0.3, -0.5, 0.2])
    y = rng.poisson(np.exp(theta[0] + X @ theta[1:]))
    fit = fit_quasipoisson(X, y)
    ref = sm.GLM(y, sm.add_constant(X), family=sm.families.Poisson()).fit(scale="X2", tol=1e-12)
    assert np.allclose(fit.theta_hat, ref.params, atol=1e-8)
    assert abs(fit.dispersion - ref.scale) < 1e-8
    assert np.allclose(fit.cov, ref.cov_params(), rtol=1e-6, atol=1e-12)


def test_score_equations_and_deviance_path(synth_ds, outcome_fit):
    X = build_outcome_design(synth_ds, outcome_fit.spec).values
    A = np.column_stack([np.ones(len(synth_ds)), X])
    mu = np.exp(A @ outcome_fit.theta_hat)
    score = A.T @ (synth_ds.y - mu)
    assert np.max(np.abs(score)) < 1e-6 * synth_ds.y.sum()
    path = np.array(outcome_fit.deviance_path)
    assert np.all(np.diff(path) <= 1e-12 * path[:-1] + 1e-12)
    assert outcome_fit.converged and outcome_fit.iterations <= 100


def test_covariance_numerically_psd(outcome_fit):
    cov = outcome_fit.cov
    assert np.array_equal(cov, cov.T)
    w = np.linalg.eigvalsh(cov)
    assert w.min() >= -1e-10 * w.max()


def test_partition_consistent(outcome_fit):
    names = outcome_fit.column_names
    assert names[0] == "(Intercept)"
    assert names[1:] == outcome_fit.spec.column_names
    assert names[outcome_fit.mediator_index] == "m"
    assert [names[i] for i in outcome_fit.interaction_indices] == ["m:q2", "m:q3", "m:q4"]


def test_reparameterisation_invariance(rng):
    n = 200
    X = np.column_stack([rng.normal(size=n), rng.normal(size=n)])
    y = rng.poisson(np.exp(0.5 + 0.4 * X[:, 0] - 0.2 * X[:, 1]))
    M = np.array([[2.0, 1.0], [-0.5, 3.0]])
    a = fit_quasipoisson(X, y)
    b = fit_quasipoisson(X @ M + 4.0, y)
    mu_a = np.exp(a.theta_hat[0] + X @ a.theta_hat[1:])
    mu_b = np.exp(b.theta_hat[0] + (X @ M + 4.0) @ b.theta_hat[1:])
    assert np.allclose(mu_a, mu_b, rtol=1e-8)


def test_poisson_recovery_single_repeat(synth_ds, outcome_fit):
    X = build_outcome_design(synth_ds, outcome_fit.spec)
    A = np.column_stack([np.ones(len(synth_ds)), X.values])
    y = np.random.default_rng(3).poisson(np.exp(A @ outcome_fit.theta_hat))
    fit = fit_quasipoisson(X, y)
    z = np.abs(fit.theta_hat - outcome_fit.theta_hat) / fit.se
    assert np.mean(z < 4) >= 0.95
    assert 0.85 <= fit.dispersion <= 1.15


def test_negative_binomial_dispersion(synth_ds, outcome_fit):
    X = build_outcome_design(synth_ds, outcome_fit.spec)
    A = np.column_stack([np.ones(len(synth_ds)), X.values])
    mu = np.exp(A @ outcome_fit.theta_hat)
    # variance = 3 mu  <=>  NB with size = mu / 2
    size = mu / 2.0
    y = np.random.default_rng(11).negative_binomial(size, size / (size + mu))
    fit = fit_quasipoisson(X, y)
    assert 2.4 <= fit.dispersion <= 3.6


def test_rank_deficiency_names_columns(rng):
    X = rng.normal(size=(50, 2))
    X = np.column_stack([X, X[:, 0] + X[:, 1]])
    with pytest.raises(SingularDesignError) as exc:
        fit_quasipoisson(X, rng.poisson(3, 50))
    assert len(exc.value.details["columns"]) == 1


def test_bad_counts_rejected():
    X = np.ones((3, 1))
    for y in ([1, -1, 2], [1.5, 2, 3], [1, np.nan, 2]):
        with pytest.raises(ArgumentError):
            fit_quasipoisson(X, np.array(y, dtype=float), intercept=False)


def test_non_convergence_warns(rng):
    X = rng.normal(size=(100, 2))
    y = rng.poisson(np.exp(1 + X[:, 0]))
    with pytest.warns(ConvergenceWarning):
        fit = fit_quasipoisson(X, y, max_iter=1)
    assert not fit.converged
    with pytest.raises(ArgumentError):
        sample_coefficients(fit, 10, 0)


def test_sampling_moments():
    cov = np.array([[0.04, 0.01, 0.0], [0.01, 0.09, -0.02], [0.0, -0.02, 0.01]])
    theta = np.array([1.0, -2.0, 0.5])
    fit = OutcomeFit(theta, cov, 1.0, ("a", "b", "c"))
    K = 50_000
    d = sample_coefficients(fit, K, 42).draws
    assert d.shape == (K, 3)
    assert np.all(np.abs(d.mean(axis=0) - theta) < 4 * np.sqrt(np.diag(cov) / K))
    assert np.max(np.abs(np.cov(d.T) - cov)) < 0.05 * np.diag(cov).max()
    again = sample_coefficients(fit, K, 42).draws
    assert np.array_equal(d, again)


def test_sampling_semidefinite():
    v = np.array([1.0, 2.0, 0.0])
    cov = np.outer(v, v) * 0.01
    fit = OutcomeFit(np.zeros(3), cov, 1.0, ("a", "b", "c"))
    d = sample_coefficients(fit, 2000, 1).draws
    assert np.all(d[:, 2] == 0.0)
    assert np.allclose(d[:, 1], 2 * d[:, 0])
    with pytest.raises(ArgumentError):
        sample_coefficients(fit, 0, 1)


def test_save_load_round_trip(tmp_path, outcome_fit):
    path = tmp_path / "fit.npz"
    save_outcome_fit(outcome_fit, path)
    back = load_outcome_fit(path)
    assert np.array_equal(back.theta_hat, outcome_fit.theta_hat)
    assert np.array_equal(back.cov, outcome_fit.cov)
    assert back.dispersion == outcome_fit.dispersion
    assert back.column_names == outcome_fit.column_names
    assert back.spec == outcome_fit.spec


def test_no_warning_on_clean_fit(synth_ds, outcome_fit):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit_quasipoisson(build_outcome_design(synth_ds, outcome_fit.spec), synth_ds.y)

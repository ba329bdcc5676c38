import numpy as np
import pytest

from bartmed.bart import (BartConfig, BartPosterior, fit_bart, load_posterior, predict,
                          sample_predictive, save_posterior, split_probability)
from bartmed.bart import _kernels_py
from bartmed.bart._backend import get_kernels
from bartmed.errors import ArgumentError

try:
    from bartmed.bart import _kernels as _kernels_c
except ImportError:  # pragma: no cover
    _kernels_c = None

needs_ext = pytest.mark.skipif(_kernels_c is None, reason="compiled kernels not built")
SMALL = BartConfig(n_trees=20, burn_in=100, n_draws=200, seed=3)


def step_data(n, seed, noise=0.1):
    rng = np.random.default_rng(seed)
    Z = rng.uniform(0, 1, (n, 3))
    m = (Z[:, 0] > 0.5).astype(float) + rng.normal(0, noise, n)
    return Z, m


@pytest.fixture(scope="module")
def step_post():
    Z, m = step_data(1000, 0)
    return fit_bart(Z, m, BartConfig.desk(burn_in=200, n_draws=300, seed=1)), Z, m


# -- kernels --------------------------------------------------------------

@needs_ext
def test_kernels_agree(rng):
    n, p = 500, 4
    X = rng.integers(0, 20, (n, p)).astype(np.int32)
    r = rng.normal(size=n)
    leaf_of = rng.integers(0, 3, n).astype(np.int32)
    for k in (_kernels_py, _kernels_c):
        assert k.BACKEND in ("python", "cython")
    a = _kernels_py.grow_stats(leaf_of, X, r, 1, 2, 7)
    b = _kernels_c.grow_stats(leaf_of, X, r, 1, 2, 7)
    assert a[0] == b[0] and a[2] == b[2]
    assert np.allclose([a[1], a[3]], [b[1], b[3]], atol=1e-12)
    ca, sa = _kernels_py.node_stats(leaf_of, r, 5)
    cb, sb = _kernels_c.node_stats(leaf_of, r, 5)
    assert np.array_equal(ca, cb) and np.allclose(sa, sb, atol=1e-12)
    la, lb = leaf_of.copy(), leaf_of.copy()
    _kernels_py.apply_grow(la, X, 1, 0, 9, 3, 4)
    _kernels_c.apply_grow(lb, X, 1, 0, 9, 3, 4)
    assert np.array_equal(la, lb)
    _kernels_py.relabel(la, 3, 4, 1)
    _kernels_c.relabel(lb, 3, 4, 1)
    assert np.array_equal(la, leaf_of) and np.array_equal(lb, leaf_of)
    ra, rb = r.copy(), r.copy()
    vals = rng.normal(size=3)
    _kernels_py.add_leaf_values(ra, leaf_of, vals, -1.0)
    _kernels_c.add_leaf_values(rb, leaf_of, vals, -1.0)
    assert np.allclose(ra, rb, atol=1e-14)
    z = rng.normal(size=3)
    va, vb = np.zeros(3), np.zeros(3)
    leaves = np.arange(3, dtype=np.int32)
    ra, rb = r.copy(), r.copy()
    assert _kernels_py.draw_leaves(leaf_of, ra, va, leaves, 0.5, 0.01, z)
    assert _kernels_c.draw_leaves(leaf_of, rb, vb, leaves, 0.5, 0.01, z)
    assert np.allclose(va, vb, atol=1e-12) and np.allclose(ra, rb, atol=1e-12)
    empty = np.zeros(n, dtype=np.int32)
    assert not _kernels_c.draw_leaves(empty, r.copy(), np.zeros(2), np.arange(2, dtype=np.int32), 1.0, 1.0, z[:2])
    assert not _kernels_py.draw_leaves(empty, r.copy(), np.zeros(2), np.arange(2, dtype=np.int32), 1.0, 1.0, z[:2])


@needs_ext
def test_backends_give_same_chain():
    Z, m = step_data(300, 4)
    a = fit_bart(Z, m, SMALL, kernels="python")
    b = fit_bart(Z, m, SMALL, kernels="cython")
    assert np.array_equal(a.roots, b.roots) and np.array_equal(a.var, b.var)
    assert np.allclose(a.sigma2, b.sigma2, rtol=1e-9)
    pa = predict(a, Z, kernels="python")
    pb = predict(a, Z, kernels="cython")
    assert np.allclose(pa, pb, atol=1e-12)


def test_get_kernels_rejects_unknown():
    assert get_kernels("python") is _kernels_py
    with pytest.raises(ValueError):
        get_kernels("fortran")


# -- prior and config -----------------------------------------------------

def test_root_split_probability():
    cfg = BartConfig()
    assert split_probability(0, cfg.alpha, cfg.beta) == 0.95
    assert split_probability(1, 0.95, 2.0) == pytest.approx(0.95 / 4)


def test_config_validation():
    with pytest.raises(ArgumentError):
        BartConfig(move_probs=(0.5, 0.5, 0.5, 0.0))
    with pytest.raises(ArgumentError):
        BartConfig(n_draws=0)
    with pytest.raises(ArgumentError):
        BartConfig(alpha=1.0)
    d = BartConfig.desk()
    assert (d.n_trees, d.burn_in, d.n_draws) == (50, 500, 2000)


# -- fitting --------------------------------------------------------------

def test_constant_target():
    rng = np.random.default_rng(2)
    Z = rng.normal(size=(2000, 2))
    post = fit_bart(Z, np.full(2000, 5.0), SMALL)
    pred = predict(post, Z).mean(axis=0)
    assert np.max(np.abs(pred - 5.0)) < 0.01
    assert np.median(post.sigma2) < 1e-3


def test_step_function_held_out(step_post):
    post, _, _ = step_post
    Zt, mt = step_data(500, 99, noise=0.0)
    rmse = np.sqrt(np.mean((predict(post, Zt).mean(axis=0) - mt) ** 2))
    base = np.sqrt(np.mean((mt - mt.mean()) ** 2))
    assert rmse <= 0.15 < base


def test_in_sample_fit_below_noise(step_post):
    post, Z, m = step_post
    fitted = predict(post, Z).mean(axis=0)
    assert np.sqrt(np.mean((fitted - m) ** 2)) <= np.mean(np.sqrt(post.sigma2))


def test_sigma_recovery_on_noise():
    rng = np.random.default_rng(8)
    Z = rng.uniform(size=(2000, 2))
    m = rng.normal(0, 0.5, 2000)
    post = fit_bart(Z, m, BartConfig(n_trees=20, burn_in=200, n_draws=300, seed=2))
    assert 0.45 <= np.median(np.sqrt(post.sigma2)) <= 0.55


def test_single_node_forest_predicts_mean():
    rng = np.random.default_rng(9)
    Z = rng.uniform(size=(2000, 2))
    m = rng.normal(0, 0.5, 2000)
    post = fit_bart(Z, m, BartConfig(n_trees=20, burn_in=100, n_draws=300, alpha=1e-9, seed=2))
    assert np.all(post.tree_sizes() == 1)
    pred = predict(post, Z).mean(axis=0)
    assert np.ptp(pred) < 1e-12
    assert abs(pred[0] - m.mean()) < 3 * m.std(ddof=1) / np.sqrt(m.size)


def test_scale_doubling():
    Z, m = step_data(500, 6)
    a = predict(fit_bart(Z, m, SMALL), Z).mean(axis=0)
    b = predict(fit_bart(Z, 2 * m, SMALL), Z).mean(axis=0)
    assert abs(np.std(b) / np.std(a) - 2.0) < 0.10


def test_deterministic_given_seed():
    Z, m = step_data(200, 7)
    cfg = BartConfig(n_trees=5, burn_in=20, n_draws=30, seed=11)
    a, b = fit_bart(Z, m, cfg), fit_bart(Z, m, cfg)
    assert np.array_equal(a.value, b.value) and np.array_equal(a.sigma2, b.sigma2)


def test_no_empty_leaves(step_post):
    post, Z, _ = step_post
    # every retained leaf is reached by at least one training row
    from bartmed.bart.sampler import encode

    codes = encode(Z, post.cutpoints)
    for d in (0, post.n_draws - 1):
        for g in range(post.n_trees):
            stack, leaves = [(int(post.roots[d, g]), np.arange(len(Z)))], []
            while stack:
                i, rows = stack.pop()
                if post.var[i] < 0:
                    assert rows.size > 0
                else:
                    go = codes[rows, post.var[i]] <= post.cut[i]
                    stack += [(int(post.left[i]), rows[go]), (int(post.right[i]), rows[~go])]


def test_degenerate_design():
    with pytest.raises(ArgumentError) as exc:
        fit_bart(np.ones((50, 2)), np.arange(50.0), SMALL)
    assert exc.value.kind == "bart.degenerate_design"
    with pytest.raises(ArgumentError):
        fit_bart(np.ones((5, 2)), np.arange(4.0), SMALL)
    with pytest.raises(ArgumentError):
        fit_bart(np.arange(10.0)[:, None], np.r_[np.arange(9.0), np.nan], SMALL)


# -- prediction -----------------------------------------------------------

def test_predict_pure_and_checked(step_post):
    post, Z, _ = step_post
    a, b = predict(post, Z), predict(post, Z)
    assert np.array_equal(a, b) and a.shape == (post.n_draws, len(Z))
    assert predict(post, Z, draw_index=5).shape == (1, len(Z))
    with pytest.raises(ArgumentError):
        predict(post, Z[:, :2])
    assert np.array_equal(sample_predictive(post, Z, "mean"), a)
    with pytest.raises(ArgumentError):
        sample_predictive(post, Z, "median")


def test_out_of_range_rows_route(step_post):
    post, _, _ = step_post
    far = np.array([[-10.0, -10.0, -10.0], [10.0, 10.0, 10.0]])
    p = predict(post, far).mean(axis=0)
    assert np.all(np.isfinite(p))
    assert p[0] < 0.2 and p[1] > 0.8


def _stump_posterior(n_draws, sigma):
    return BartPosterior(var=np.array([-1], np.int32), cut=np.array([0], np.int32),
                         left=np.array([-1], np.int32), right=np.array([-1], np.int32),
                         value=np.array([0.0]), roots=np.zeros((n_draws, 1), np.int64),
                         sigma2=np.full(n_draws, sigma**2), center=2.0, half_range=1.0,
                         cutpoints=(np.array([0.5]),))


def test_predictive_noise_sd():
    post = _stump_posterior(4000, 0.2)
    Z = np.linspace(0, 1, 5)[:, None]
    out = sample_predictive(post, Z, "predictive", seed=4)
    assert np.allclose(predict(post, Z), 2.0)
    sd = out.std(axis=0, ddof=1)
    assert np.all(np.abs(sd / 0.2 - 1) < 0.10)
    assert np.array_equal(out, sample_predictive(post, Z, "predictive", seed=4))


def test_save_load_round_trip(tmp_path, step_post):
    post, Z, _ = step_post
    save_posterior(post, tmp_path / "b.npz")
    back = load_posterior(tmp_path / "b.npz")
    assert np.array_equal(predict(back, Z), predict(post, Z))
    assert np.array_equal(back.sigma2, post.sigma2)
    assert all(np.array_equal(a, b) for a, b in zip(back.cutpoints, post.cutpoints))
    assert back.subset([0, 2]).n_draws == 2

import math

import numpy as np
import pytest

from densecast import nn
from densecast.bbb import (
    BbbTrainConfig,
    VariationalNetwork,
    bbb_gradients,
    build_variational_network,
    elbo_loss,
    kl_closed_form,
    kl_monte_carlo,
    load_bbb_checkpoint,
    predict_bbb,
    sample_weights,
    save_bbb_checkpoint,
    softplus,
    softplus_inv,
    train_bbb,
)
from densecast.nn import LayerSpec

from _gradcheck import finite_diff_grads, max_relative_error


def small_specs(F=2, L=4):
    return [
        LayerSpec("conv1d_bottleneck", in_size=F, out_size=2, kernel=1),
        LayerSpec("activation", activation="tanh"),
        LayerSpec("dense", in_size=2 * L, out_size=3),
        LayerSpec("activation", activation="tanh"),
        LayerSpec("dense", in_size=3, out_size=1),
    ]


def small_data(rng, n=6, L=4, F=2):
    X = rng.normal(size=(n, L, F))
    y = rng.normal(size=n)
    return X, y


def test_softplus_and_inverse():
    x = np.array([-30.0, -1.0, 0.0, 2.0, 40.0])
    assert np.allclose(softplus(x), np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0))
    assert np.allclose(softplus(softplus_inv(np.array([0.01, 1.0, 3.0]))),
                       [0.01, 1.0, 3.0])
    assert np.all(softplus(x) > 0)


def test_sample_weights_moments_and_determinism():
    vnet = build_variational_network(small_specs(), rng_or_seed=0)
    layer = vnet.var_layers()[0]
    layer.mu = [np.zeros_like(m) for m in layer.mu]
    layer.rho = [np.full_like(r, softplus_inv(1.0)) for r in layer.rho]
    draws = []
    rng = np.random.default_rng(1)
    for _ in range(25_000):
        sampled = sample_weights(layer, rng)
        draws.append(np.concatenate([w.ravel() for w, _ in sampled]))
    flat = np.concatenate(draws)
    assert abs(flat.mean()) <= 0.01
    assert abs(flat.std() - 1.0) <= 0.01

    s1 = sample_weights(layer, np.random.default_rng(7))
    s2 = sample_weights(layer, np.random.default_rng(7))
    for (w1, e1), (w2, e2) in zip(s1, s2):
        assert np.array_equal(w1, w2) and np.array_equal(e1, e2)


def test_sigma_to_zero_gives_mean_weights():
    vnet = build_variational_network(small_specs(), rng_or_seed=2)
    layer = vnet.var_layers()[0]
    layer.rho = [np.full_like(r, -60.0) for r in layer.rho]
    sampled = sample_weights(layer, np.random.default_rng(3))
    for (w, _), mu in zip(sampled, layer.mu):
        assert np.allclose(w, mu, atol=1e-20)


def test_parameter_count_doubles_deterministic_twin():
    specs = small_specs()
    det = nn.build_network(specs, rng_or_seed=4)
    var = build_variational_network(specs, rng_or_seed=4)
    assert var.n_params() == 2 * det.n_params()


def test_kl_zero_when_posterior_equals_prior():
    vnet = build_variational_network(small_specs(), prior_sigma=1.3, rng_or_seed=5)
    for layer in vnet.var_layers():
        layer.mu = [np.zeros_like(m) for m in layer.mu]
        layer.rho = [np.full_like(r, softplus_inv(1.3)) for r in layer.rho]
    assert kl_closed_form(vnet) == pytest.approx(0.0, abs=1e-10)
    mean, se = kl_monte_carlo(vnet, 2000, np.random.default_rng(6))
    assert abs(mean) <= 3 * se


def test_kl_nonnegative_and_positive_away_from_prior():
    vnet = build_variational_network(small_specs(), prior_sigma=1.0, rng_or_seed=7)
    assert kl_closed_form(vnet) >= -1e-12
    vnet.var_layers()[0].mu[0][0] += 2.0
    assert kl_closed_form(vnet) > 0.1


def test_kl_monte_carlo_matches_closed_form():
    vnet = build_variational_network(small_specs(), prior_sigma=1.0, rng_or_seed=8,
                                     init_sigma=0.3)
    vnet.var_layers()[0].mu[0][:] += 0.5
    closed = kl_closed_form(vnet)
    mean, se = kl_monte_carlo(vnet, 10_000, np.random.default_rng(9))
    assert abs(mean - closed) <= 3 * se


def test_elbo_terms_breakdown():
    rng = np.random.default_rng(10)
    vnet = build_variational_network(small_specs(), rng_or_seed=11)
    X, y = small_data(rng)
    loss, terms = elbo_loss(vnet, X, y, n_samples=3, rng=rng, sigma_obs=0.7,
                            kl_weight=0.25)
    assert len(terms) == 3
    recon = np.mean([t["loss"] for t in terms])
    assert loss == pytest.approx(recon, rel=1e-12)
    for t in terms:
        assert t["loss"] == pytest.approx(
            (0.25 * (t["log_q"] - t["log_prior"]) + t["nll"]) / X.shape[0], rel=1e-12)


def test_bbb_gradients_match_fixed_eps_finite_differences():
    rng = np.random.default_rng(12)
    vnet = build_variational_network(small_specs(), rng_or_seed=13, init_sigma=0.2)
    X, y = small_data(rng)

    def loss_fn():
        return bbb_gradients(vnet, X, y, np.random.default_rng(77),
                             sigma_obs=0.8, kl_weight=0.5)[0]

    _, analytic = bbb_gradients(vnet, X, y, np.random.default_rng(77),
                                sigma_obs=0.8, kl_weight=0.5)
    numeric = finite_diff_grads(loss_fn, vnet.parameters())
    assert max_relative_error(analytic, numeric) <= 1e-5


def test_one_weight_quadratic_gradients_by_hand():
    # single dense weight, no bias path used: with zero KL weight and
    # sigma_obs = 1 the objective reduces to 0.5 * (w x - y)^2 per sample
    specs = [LayerSpec("dense", in_size=1, out_size=1)]
    vnet = build_variational_network(specs, rng_or_seed=14, init_sigma=0.5)
    layer = vnet.var_layers()[0]
    layer.mu = [np.array([[0.7]]), np.array([0.0])]
    layer.rho = [np.array([[softplus_inv(0.5)]]), np.array([-60.0])]
    X = np.array([[[1.0]]])
    y = np.array([2.0])
    seed = 15
    loss, grads = bbb_gradients(vnet, X, y, np.random.default_rng(seed),
                                sigma_obs=1.0, kl_weight=0.0)
    w, eps = layer.sampled[0]
    w = float(w[0, 0])
    eps = float(eps[0, 0])
    # df/dw = (w*1 - 2) * 1; d_mu = df/dw; d_sigma = df/dw * eps
    df_dw = w - 2.0
    assert grads[0][0, 0] == pytest.approx(df_dw, rel=1e-12)
    sig_deriv = 1.0 / (1.0 + math.exp(-softplus_inv(0.5)))
    assert grads[2][0, 0] == pytest.approx(df_dw * eps * sig_deriv, rel=1e-12)


def test_train_bbb_fits_linear_task_comparably():
    rng = np.random.default_rng(16)
    X = rng.uniform(-1, 1, size=(200, 1, 1))
    y = 2.0 * X[:, 0, 0] + 1.0 + 0.1 * rng.normal(size=200)
    Xv = rng.uniform(-1, 1, size=(60, 1, 1))
    yv = 2.0 * Xv[:, 0, 0] + 1.0 + 0.1 * rng.normal(size=60)
    specs = [LayerSpec("conv1d_bottleneck", in_size=1, out_size=1, kernel=1),
             LayerSpec("dense", in_size=1, out_size=1)]

    det = nn.build_network(specs, rng_or_seed=17)
    det_cfg = nn.TrainConfig(learning_rate=0.05, max_epochs=300, batch_size=50,
                             early_stop_patience=40, rng_seed=18)
    nn.train(det, (X, y), (Xv, yv), det_cfg)
    det_mse = nn.mse(det.predict(Xv), yv)

    vnet = build_variational_network(specs, rng_or_seed=17, init_sigma=0.05)
    # likelihood gradients scale with 1/sigma_obs^2, so the step shrinks
    cfg = BbbTrainConfig(learning_rate=1e-3, max_epochs=300, batch_size=50,
                         early_stop_patience=40, rng_seed=18, sigma_obs=0.1)
    train_bbb(vnet, (X, y), (Xv, yv), cfg)
    post_mean = predict_bbb(vnet, Xv[0], n=200, rng=np.random.default_rng(19)).mean()
    bbb_mse = nn.mse(vnet.predict_mean(Xv), yv)
    assert bbb_mse <= 2.0 * det_mse + 1e-3
    assert np.isfinite(post_mean)


def test_tiny_prior_pins_posterior_mean_to_zero():
    rng = np.random.default_rng(20)
    X = rng.uniform(-1, 1, size=(100, 1, 1))
    y = 2.0 * X[:, 0, 0]
    specs = [LayerSpec("dense", in_size=1, out_size=1)]
    vnet = build_variational_network(specs, rng_or_seed=21, init_sigma=0.05)
    vnet.prior_sigma = 0.05
    cfg = BbbTrainConfig(learning_rate=1e-3, max_epochs=200, batch_size=100,
                         early_stop_patience=200, rng_seed=22, sigma_obs=10.0)
    train_bbb(vnet, (X, y), (X, y), cfg)
    mu = vnet.var_layers()[0].mu[0]
    assert abs(float(mu[0, 0])) < 0.05


def test_predict_bbb_degenerate_posterior_and_seed_stability():
    vnet = build_variational_network(small_specs(), rng_or_seed=23)
    for layer in vnet.var_layers():
        layer.rho = [np.full_like(r, -60.0) for r in layer.rho]
    X = np.random.default_rng(24).normal(size=(4, 2))
    dens = predict_bbb(vnet, X, n=50, rng=np.random.default_rng(25))
    assert dens.std() <= 1e-10
    vnet.set_mean_weights()
    assert dens.samples[0] == pytest.approx(float(vnet._inner.predict(X[None])[0]),
                                            abs=1e-12)

    vnet2 = build_variational_network(small_specs(), rng_or_seed=23, init_sigma=0.3)
    d1 = predict_bbb(vnet2, X, n=400, rng=np.random.default_rng(26))
    d2 = predict_bbb(vnet2, X, n=400, rng=np.random.default_rng(27))
    se = d1.std() / math.sqrt(400)
    assert abs(d1.mean() - d2.mean()) <= 3 * (se + d2.std() / math.sqrt(400))


def test_bbb_checkpoint_roundtrip(tmp_path):
    vnet = build_variational_network(small_specs(), prior_sigma=1.7, rng_or_seed=28)
    path = str(tmp_path / "bbb.dcnn")
    save_bbb_checkpoint(vnet, path, metadata={"seed": 28})
    loaded, meta = load_bbb_checkpoint(path)
    assert meta["prior_sigma"] == 1.7
    assert loaded.prior_sigma == 1.7
    X = np.random.default_rng(29).normal(size=(3, 4, 2))
    assert np.array_equal(loaded.predict_mean(X), vnet.predict_mean(X))
    for a, b in zip(loaded.parameters(), vnet.parameters()):
        assert np.array_equal(a, b)


def test_predict_bbb_requires_two_draws():
    vnet = build_variational_network(small_specs(), rng_or_seed=30)
    with pytest.raises(ValueError):
        predict_bbb(vnet, np.zeros((4, 2)), n=1)

"""Bayes by Backprop on the numpy feed-forward engine.

Every weight gets a Gaussian variational posterior N(mu, sigma^2) with
sigma = softplus(rho); sampling uses the local reparameterization
w = mu + sigma * eps. The per-sample objective is

    f(w, theta) = log q(w|theta) - log P(w) - log P(D|w)

whose gradients follow the reparameterized form: the mean update adds the
backpropagated df/dw to the explicit df/dmu, the scale update multiplies
df/dw by eps and adds df/dsigma, then chains through softplus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .density import EmpiricalDensity

__all__ = [
    "VariationalLayer",
    "VariationalNetwork",
    "BbbTrainConfig",
    "softplus",
    "softplus_inv",
    "sample_weights",
    "elbo_loss",
    "bbb_gradients",
    "train_bbb",
    "predict_bbb",
    "kl_closed_form",
    "kl_monte_carlo",
    "build_variational_network",
    "pilot_sigma_obs",
    "BBB_LAYER_CLASSES",
    "save_bbb_checkpoint",
    "load_bbb_checkpoint",
]

_LOG_2PI = math.log(2.0 * math.pi)

# training-time floor on rho: keeps log(sigma) finite if the optimizer drives
# the posterior scale toward zero (softplus(-20) ~ 2e-9)
RHO_MIN = -20.0


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_inv(y):
    return np.log(np.expm1(y))


def _sigmoid(x):
    out = np.empty_like(np.asarray(x, dtype=float))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class VariationalLayer:
    """(mu, rho) pair for every weight of a deterministic layer.

    The wrapped layer performs the forward/backward math with the currently
    sampled weights; this class owns the variational parameters and the
    sampled-noise cache.
    """

    has_params = True

    def __init__(self, inner, init_sigma=0.01, rng=None):
        self.inner = inner
        if rng is not None:
            # mean initialized like the deterministic twin, scale small
            self.mu = [np.array(p) for p in inner.params]
        else:
            self.mu = [np.zeros_like(p) for p in inner.params]
        rho0 = float(softplus_inv(init_sigma))
        self.rho = [np.full_like(p, rho0) for p in self.mu]
        self.sampled = None  # list of (w, eps) after sample()

    @property
    def kind(self):
        return "var_" + self.inner.spec_dict()["kind"]

    @property
    def bottleneck(self):
        return getattr(self.inner, "bottleneck", False)

    def sigmas(self):
        return [softplus(r) for r in self.rho]

    def sample(self, rng):
        sampled = []
        values = []
        for mu, rho in zip(self.mu, self.rho):
            eps = rng.standard_normal(mu.shape)
            w = mu + softplus(rho) * eps
            sampled.append((w, eps))
            values.append(w)
        self.sampled = sampled
        self.inner.set_params(values)
        return sampled

    def set_mean_weights(self):
        self.inner.set_params([np.array(m) for m in self.mu])
        self.sampled = None

    @property
    def params(self):
        # optimizer-visible parameters: mu then rho for each weight buffer
        return [*self.mu, *self.rho]

    def set_params(self, values):
        k = len(self.mu)
        self.mu = [np.array(v, dtype=float) for v in values[:k]]
        self.rho = [np.array(v, dtype=float) for v in values[k:]]

    def spec_dict(self):
        d = self.inner.spec_dict()
        return {**d, "kind": "var_" + d["kind"]}

    def buffers(self):
        out = {}
        inner_names = list(self.inner.buffers().keys())
        for name, mu, rho in zip(inner_names, self.mu, self.rho):
            out[f"mu_{name}"] = mu
            out[f"rho_{name}"] = rho
        return out

    @classmethod
    def from_spec(cls, spec, buffers):
        inner_kind = spec["kind"][len("var_"):]
        inner_cls = nn.LAYER_CLASSES[inner_kind]
        inner_spec = {**spec, "kind": inner_kind}
        mu_buffers = {name[len("mu_"):]: np.array(arr)
                      for name, arr in buffers.items() if name.startswith("mu_")}
        inner = inner_cls.from_spec(inner_spec, mu_buffers)
        layer = cls(inner)
        names = list(inner.buffers().keys())
        layer.mu = [np.array(buffers[f"mu_{n}"]) for n in names]
        layer.rho = [np.array(buffers[f"rho_{n}"]) for n in names]
        layer.set_mean_weights()
        return layer


BBB_LAYER_CLASSES = {
    **nn.LAYER_CLASSES,
    "var_conv1d": VariationalLayer,
    "var_conv1d_bottleneck": VariationalLayer,
    "var_dense": VariationalLayer,
}


class VariationalNetwork:
    """Layer stack mixing variational layers with plain activations."""

    def __init__(self, layers, prior_sigma=1.0):
        if not prior_sigma > 0.0:
            raise ValueError("prior_sigma must be positive")
        self.layers = list(layers)
        self.prior_sigma = float(prior_sigma)
        self._inner = nn.Network([
            l.inner if isinstance(l, VariationalLayer) else l for l in self.layers])

    def var_layers(self):
        return [l for l in self.layers if isinstance(l, VariationalLayer)]

    def sample_all(self, rng):
        for layer in self.var_layers():
            layer.sample(rng)

    def set_mean_weights(self):
        for layer in self.var_layers():
            layer.set_mean_weights()

    def forward(self, X, training=False, rng=None):
        return self._inner.forward(X, training=training, rng=rng)

    def predict_sampled(self, X, rng):
        """One posterior draw, one forward pass."""
        self.sample_all(rng)
        return self._inner.predict(X)

    def predict_mean(self, X):
        self.set_mean_weights()
        return self._inner.predict(X)

    def n_params(self) -> int:
        return sum(p.size for layer in self.var_layers() for p in layer.params)

    def parameters(self):
        return [p for layer in self.var_layers() for p in layer.params]

    def get_state(self):
        return [np.array(p) for p in self.parameters()]

    def set_state(self, state):
        it = iter(state)
        for layer in self.var_layers():
            k = len(layer.params)
            layer.set_params([next(it) for _ in range(k)])


def build_variational_network(specs, prior_sigma=1.0, rng_or_seed=0,
                              init_sigma=0.01) -> VariationalNetwork:
    rng = (rng_or_seed if isinstance(rng_or_seed, np.random.Generator)
           else np.random.default_rng(rng_or_seed))
    layers = []
    for spec in specs:
        if spec.kind in ("conv1d", "conv1d_bottleneck", "dense"):
            inner = nn.build_network([spec], rng_or_seed=rng).layers[0]
            layers.append(VariationalLayer(inner, init_sigma=init_sigma, rng=rng))
        elif spec.kind == "activation":
            layers.append(nn.Activation(spec.activation))
        else:
            raise ValueError(f"layer kind {spec.kind!r} not supported here")
    return VariationalNetwork(layers, prior_sigma=prior_sigma)


def sample_weights(layer: VariationalLayer, rng) -> list:
    """Draw w = mu + softplus(rho) * eps for every buffer; returns (w, eps) pairs."""
    return layer.sample(rng)


# ---------------------------------------------------------------------------
# ELBO pieces
# ---------------------------------------------------------------------------

def _log_q(layer: VariationalLayer) -> float:
    total = 0.0
    for (w, _), mu, rho in zip(layer.sampled, layer.mu, layer.rho):
        sigma = softplus(rho)
        total += float(np.sum(-0.5 * _LOG_2PI - np.log(sigma)
                              - (w - mu) ** 2 / (2.0 * sigma ** 2)))
    return total


def _log_prior(layer: VariationalLayer, prior_sigma: float) -> float:
    total = 0.0
    for (w, _) in layer.sampled:
        total += float(np.sum(-0.5 * _LOG_2PI - math.log(prior_sigma)
                              - w ** 2 / (2.0 * prior_sigma ** 2)))
    return total


def gaussian_nll(pred, y, sigma_obs: float) -> float:
    pred = np.asarray(pred, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    return float(np.sum((y - pred) ** 2) / (2.0 * sigma_obs ** 2)
                 + y.size * (0.5 * _LOG_2PI + math.log(sigma_obs)))


def kl_closed_form(network: VariationalNetwork) -> float:
    """KL(q || prior) for factorized Gaussians, exact."""
    s0 = network.prior_sigma
    total = 0.0
    for layer in network.var_layers():
        for mu, rho in zip(layer.mu, layer.rho):
            sigma = softplus(rho)
            total += float(np.sum(np.log(s0 / sigma)
                                  + (sigma ** 2 + mu ** 2) / (2.0 * s0 ** 2) - 0.5))
    return total


def kl_monte_carlo(network: VariationalNetwork, n: int, rng) -> tuple[float, float]:
    """Monte Carlo estimate (mean, standard error) of E_q[log q - log P]."""
    draws = np.empty(n)
    for i in range(n):
        network.sample_all(rng)
        lq = sum(_log_q(l) for l in network.var_layers())
        lp = sum(_log_prior(l, network.prior_sigma) for l in network.var_layers())
        draws[i] = lq - lp
    return float(draws.mean()), float(draws.std(ddof=1) / math.sqrt(n))


def elbo_loss(network: VariationalNetwork, X, y, n_samples: int, rng,
              sigma_obs: float = 1.0, kl_weight: float = 1.0):
    """Sampled negative ELBO of one batch, averaged over posterior draws.

    Per draw: kl_weight * (log q - log P(w)) + Gaussian NLL of the batch,
    everything divided by the batch size for step-size stability. Returns the
    scalar plus the per-sample term breakdown.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    X = np.asarray(X, dtype=float)
    n_b = X.shape[0] if X.ndim == 3 else 1
    terms = []
    total = 0.0
    for _ in range(n_samples):
        network.sample_all(rng)
        pred = network._inner.predict(X)
        nll = gaussian_nll(pred, y, sigma_obs)
        lq = sum(_log_q(l) for l in network.var_layers())
        lp = sum(_log_prior(l, network.prior_sigma) for l in network.var_layers())
        sample_loss = (kl_weight * (lq - lp) + nll) / n_b
        if not np.isfinite(sample_loss):
            raise nn.DivergenceError("non-finite ELBO sample")
        terms.append({"log_q": lq, "log_prior": lp, "nll": nll,
                      "loss": sample_loss})
        total += sample_loss
    return total / n_samples, terms


def bbb_gradients(network: VariationalNetwork, X, y, rng,
                  sigma_obs: float = 1.0, kl_weight: float = 1.0):
    """One-sample gradients (d_mu, d_rho) of the batch objective.

    Uses the cached (w, eps) from a fresh draw: d_mu = df/dw + df/dmu and
    d_sigma = (df/dw) eps + df/dsigma, chained through sigma = softplus(rho).
    Returns (loss, flat gradient list aligned with network.parameters()).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None, :, :]
    n_b = X.shape[0]
    network.sample_all(rng)
    out, caches = network._inner.forward(X)
    y2 = np.asarray(y, dtype=float).reshape(out.shape)
    nll = gaussian_nll(out, y2, sigma_obs)
    lq = sum(_log_q(l) for l in network.var_layers())
    lp = sum(_log_prior(l, network.prior_sigma) for l in network.var_layers())
    loss = (kl_weight * (lq - lp) + nll) / n_b

    d_out = (out - y2) / (sigma_obs ** 2)
    inner_grads = network._inner.backward(caches, d_out)

    flat = []
    gi = iter(inner_grads)
    s0 = network.prior_sigma
    for layer in network.layers:
        g_inner = next(gi)
        if not isinstance(layer, VariationalLayer):
            continue
        d_mu_list, d_rho_list = [], []
        for (w, eps), mu, rho, g_w in zip(layer.sampled, layer.mu, layer.rho,
                                          g_inner):
            sigma = softplus(rho)
            # df/dw: data term from backprop plus the explicit w-dependence of
            # log q and log P(w)
            df_dw = g_w + kl_weight * (-(w - mu) / sigma ** 2 + w / s0 ** 2)
            df_dmu = kl_weight * (w - mu) / sigma ** 2
            df_dsigma = kl_weight * (-1.0 / sigma + (w - mu) ** 2 / sigma ** 3)
            d_mu = df_dw + df_dmu
            d_sigma = df_dw * eps + df_dsigma
            d_mu_list.append(d_mu / n_b)
            d_rho_list.append(d_sigma * _sigmoid(rho) / n_b)
        flat.extend(d_mu_list)
        flat.extend(d_rho_list)
    return loss, flat


@dataclass(frozen=True)
class BbbTrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 200
    batch_size: int = 32
    early_stop_patience: int = 16
    rng_seed: int = 0
    momentum: float = 0.9
    n_train_samples: int = 1
    prior_sigma: float = 1.0
    sigma_obs: float | None = None  # None: pilot deterministic fit supplies it

    def __post_init__(self):
        if self.n_train_samples < 1:
            raise ValueError("n_train_samples must be >= 1")
        if not self.learning_rate > 0.0:
            raise ValueError("learning_rate must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")


def pilot_sigma_obs(specs, train_set, val_set, config: BbbTrainConfig) -> float:
    """Residual std of a quick deterministic fit, mapping MSE to a likelihood
    scale."""
    net = nn.build_network(specs, rng_or_seed=config.rng_seed)
    cfg = nn.TrainConfig(learning_rate=config.learning_rate,
                         max_epochs=config.max_epochs,
                         batch_size=config.batch_size,
                         early_stop_patience=config.early_stop_patience,
                         rng_seed=config.rng_seed)
    nn.train(net, train_set, val_set, cfg)
    resid = np.asarray(train_set[1], float) - net.predict(train_set[0])
    return max(float(resid.std(ddof=1)), 1e-3)


def train_bbb(network: VariationalNetwork, train_set, val_set,
              config: BbbTrainConfig, sigma_obs: float | None = None):
    """ELBO training with minibatch KL weighting 1/num_batches.

    Early stopping tracks the validation bound with the KL term at full
    weight and the likelihood evaluated at the posterior mean weights (a
    deterministic proxy, so runs reproduce bitwise).
    """
    X_train, y_train = train_set
    X_val, y_val = val_set
    X_train = np.asarray(X_train, dtype=float)
    y_train = np.asarray(y_train, dtype=float)
    if sigma_obs is None:
        sigma_obs = config.sigma_obs
    if sigma_obs is None:
        raise ValueError("sigma_obs is required (pass it or set it in the config)")

    rng = np.random.default_rng(config.rng_seed)
    velocity = [np.zeros_like(p) for p in network.parameters()]
    is_rho = []
    for layer in network.var_layers():
        k = len(layer.mu)
        is_rho.extend([False] * k + [True] * k)
    n = X_train.shape[0]
    num_batches = max(1, math.ceil(n / config.batch_size))

    def val_loss():
        pred = network.predict_mean(X_val)
        return (gaussian_nll(pred, y_val, sigma_obs)
                + kl_closed_form(network)) / max(len(y_val), 1)

    best_val = np.inf
    best_state = network.get_state()
    best_epoch = -1
    bad_epochs = 0
    history = {"train_loss": [], "val_loss": []}

    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            agg = None
            loss_sum = 0.0
            for _ in range(config.n_train_samples):
                loss, grads = bbb_gradients(
                    network, X_train[idx], y_train[idx], rng,
                    sigma_obs=sigma_obs, kl_weight=1.0 / num_batches)
                loss_sum += loss
                agg = grads if agg is None else [a + g for a, g in zip(agg, grads)]
            grads = [a / config.n_train_samples for a in agg]
            if not np.isfinite(loss_sum):
                raise nn.DivergenceError(f"non-finite ELBO at epoch {epoch}",
                                         epoch=epoch)
            params = network.parameters()
            for i, (p, g) in enumerate(zip(params, grads)):
                velocity[i] = config.momentum * velocity[i] - config.learning_rate * g
                p += velocity[i]
                if is_rho[i]:
                    np.maximum(p, RHO_MIN, out=p)
            epoch_loss += loss_sum / config.n_train_samples
        history["train_loss"].append(epoch_loss / num_batches)

        vl = val_loss()
        if not np.isfinite(vl):
            raise nn.DivergenceError(f"non-finite validation bound at epoch {epoch}",
                                     epoch=epoch)
        history["val_loss"].append(vl)
        if vl < best_val:
            best_val = vl
            best_state = network.get_state()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.early_stop_patience:
                break

    network.set_state(best_state)
    history["best_epoch"] = best_epoch
    history["best_val_loss"] = best_val
    history["epochs_run"] = len(history["val_loss"])
    history["sigma_obs"] = sigma_obs
    return history


def predict_bbb(network: VariationalNetwork, X, n: int = 100, rng=None,
                provenance: str = "bbb") -> EmpiricalDensity:
    """n forward passes with freshly sampled weights; the sample set is the
    density nowcast."""
    if n < 2:
        raise ValueError("need at least 2 posterior draws")
    rng = rng if rng is not None else np.random.default_rng(0)
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None, :, :]
    draws = np.empty(n)
    for i in range(n):
        draws[i] = float(network.predict_sampled(X, rng)[0])
    return EmpiricalDensity(samples=draws, provenance=provenance)


def save_bbb_checkpoint(network: VariationalNetwork, path: str,
                        metadata: dict | None = None) -> None:
    meta = dict(metadata or {})
    meta["prior_sigma"] = network.prior_sigma
    meta["variational"] = True
    nn.save_checkpoint(network, path, metadata=meta)


def load_bbb_checkpoint(path: str) -> tuple[VariationalNetwork, dict]:
    raw, metadata = nn.load_checkpoint(path, layer_classes=BBB_LAYER_CLASSES)
    network = VariationalNetwork(raw.layers,
                                 prior_sigma=metadata.get("prior_sigma", 1.0))
    return network, metadata

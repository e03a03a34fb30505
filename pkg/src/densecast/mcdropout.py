"""Monte Carlo dropout inference: Bernoulli mask draws over a dropout-trained
network yield an ensemble of member networks whose outputs form the empirical
predictive density.

Masks use the inverted-dropout convention throughout (kept units scaled by
1/(1-p) at sampling time), so member outputs are unbiased for the
deterministic output wherever the map is linear; the unscaled formulation
differs from ours by exactly that factor.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .density import EmpiricalDensity
from .nn import Network

__all__ = [
    "DropoutMask",
    "MaskedMember",
    "maskable_shapes",
    "mask_length",
    "sample_mask",
    "apply_mask",
    "predict_mcdropout",
]


@dataclass(frozen=True)
class DropoutMask:
    """Flat 0/1 vector over all maskable neurons plus per-layer split info."""

    z: np.ndarray
    layer_shapes: tuple
    rates: tuple

    def __post_init__(self):
        z = np.asarray(self.z)
        if not np.isin(z, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        expected = sum(int(np.prod(s)) for s in self.layer_shapes)
        if z.size != expected:
            raise ValueError(
                f"mask length {z.size} != maskable neuron count {expected}")
        object.__setattr__(self, "z", z.astype(float))

    def per_layer(self) -> list:
        out = []
        offset = 0
        for shape in self.layer_shapes:
            size = int(np.prod(shape))
            out.append(self.z[offset:offset + size].reshape(shape))
            offset += size
        return out


def maskable_shapes(network: Network, input_shape) -> tuple:
    """Input shape seen by each dropout layer for one sequence (no batch dim)."""
    probe = np.zeros((1,) + tuple(input_shape))
    shapes = []
    out = probe
    for layer in network.layers:
        if layer.kind == "dropout":
            shapes.append(tuple(out.shape[1:]))
        out, _ = layer.forward(out, training=False, rng=None)
    return tuple(shapes)


def mask_length(network: Network, input_shape) -> int:
    return sum(int(np.prod(s)) for s in maskable_shapes(network, input_shape))


def sample_mask(network: Network, input_shape, rng) -> DropoutMask:
    """Draw z ~ Bernoulli(1-p) per maskable neuron (per-layer rates)."""
    shapes = maskable_shapes(network, input_shape)
    rates = tuple(l.rate for l in network.dropout_layers())
    parts = [(rng.random(int(np.prod(s))) >= p).astype(float)
             for s, p in zip(shapes, rates)]
    z = np.concatenate(parts) if parts else np.empty(0)
    return DropoutMask(z=z, layer_shapes=shapes, rates=rates)


class MaskedMember:
    """One ensemble member: the live network seen through a fixed mask.

    Weights are shared with the ensemble, not copied: mutating a retained
    ensemble weight changes every member output that uses it.
    """

    def __init__(self, network: Network, mask: DropoutMask):
        self.network = network
        self.mask = mask

    def predict(self, X) -> np.ndarray:
        return self.network.predict(X, fixed_masks=self.mask.per_layer())


def apply_mask(network: Network, mask: DropoutMask) -> MaskedMember:
    """Bind a sampled mask to the network; zeroing neuron j suppresses exactly
    the contribution of its outgoing weights."""
    n_dropout = len(network.dropout_layers())
    if len(mask.layer_shapes) != n_dropout:
        raise ValueError(
            f"mask covers {len(mask.layer_shapes)} dropout layers, "
            f"network has {n_dropout}")
    return MaskedMember(network, mask)


def predict_mcdropout(network: Network, X, n: int = 100, rng=None,
                      provenance: str = "mcdropout") -> EmpiricalDensity:
    """n stochastic forward passes with dropout active (training-like mode).

    Masks are resampled independently per pass and per layer; the draw set is
    the density nowcast. With no active dropout the density is degenerate,
    which is signalled with a warning.
    """
    if n < 2:
        raise ValueError("need at least 2 dropout draws")
    rng = rng if rng is not None else np.random.default_rng(0)
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None, :, :]
    if X.shape[0] != 1:
        raise ValueError("predict_mcdropout expects a single input sequence")
    rates = [l.rate for l in network.dropout_layers()]
    if not rates or all(r == 0.0 for r in rates):
        warnings.warn("no active dropout: predictive density is degenerate")
    # one batched pass == n independent passes (masks are drawn per element)
    tiled = np.repeat(X, n, axis=0)
    draws = network.predict(tiled, training=True, rng=rng)
    return EmpiricalDensity(samples=np.asarray(draws, dtype=float),
                            provenance=provenance)

"""A small differentiable encoder with explicit reverse-mode gradients.

Maps patch latents to feature vectors with an affine layer (optionally an
extra tanh hidden layer), plus a linear classifier head used only during
pretraining.  The computation pipeline is fixed, so gradients are written
out by hand and checked against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 32
    feature_dim: int = 16
    hidden_dim: int = 0
    num_classes: int = 64

    def __post_init__(self):
        if self.input_dim < 1 or self.feature_dim < 2:
            raise ValueError("input_dim must be >= 1 and feature_dim >= 2")
        if self.hidden_dim < 0 or self.num_classes < 2:
            raise ValueError("hidden_dim must be >= 0 and num_classes >= 2")


@dataclass
class EncoderParams:
    first_weight: np.ndarray
    first_bias: np.ndarray
    second_weight: np.ndarray | None
    second_bias: np.ndarray | None
    head_weight: np.ndarray
    head_bias: np.ndarray

    @property
    def has_hidden(self):
        return self.second_weight is not None

    def copy(self):
        return EncoderParams(
            first_weight=self.first_weight.copy(),
            first_bias=self.first_bias.copy(),
            second_weight=None if self.second_weight is None else self.second_weight.copy(),
            second_bias=None if self.second_bias is None else self.second_bias.copy(),
            head_weight=self.head_weight.copy(),
            head_bias=self.head_bias.copy(),
        )

    def arrays(self):
        """Named parameter arrays, skipping absent hidden-layer slots."""
        out = [("first_weight", self.first_weight), ("first_bias", self.first_bias)]
        if self.second_weight is not None:
            out += [("second_weight", self.second_weight), ("second_bias", self.second_bias)]
        out += [("head_weight", self.head_weight), ("head_bias", self.head_bias)]
        return out


@dataclass
class EncoderGradients:
    first_weight: np.ndarray
    first_bias: np.ndarray
    second_weight: np.ndarray | None
    second_bias: np.ndarray | None
    head_weight: np.ndarray
    head_bias: np.ndarray

    @classmethod
    def zeros_like(cls, params):
        return cls(
            first_weight=np.zeros_like(params.first_weight),
            first_bias=np.zeros_like(params.first_bias),
            second_weight=None
            if params.second_weight is None
            else np.zeros_like(params.second_weight),
            second_bias=None if params.second_bias is None else np.zeros_like(params.second_bias),
            head_weight=np.zeros_like(params.head_weight),
            head_bias=np.zeros_like(params.head_bias),
        )

    def add(self, other, scale=1.0):
        self.first_weight += scale * other.first_weight
        self.first_bias += scale * other.first_bias
        if self.second_weight is not None and other.second_weight is not None:
            self.second_weight += scale * other.second_weight
            self.second_bias += scale * other.second_bias
        self.head_weight += scale * other.head_weight
        self.head_bias += scale * other.head_bias
        return self


def init_encoder_params(rng, config):
    hidden = config.hidden_dim
    if hidden > 0:
        first_weight = rng.normal(scale=1.0 / np.sqrt(config.input_dim), size=(hidden, config.input_dim))
        first_bias = np.zeros(hidden)
        second_weight = rng.normal(scale=1.0 / np.sqrt(hidden), size=(config.feature_dim, hidden))
        second_bias = np.zeros(config.feature_dim)
    else:
        first_weight = rng.normal(
            scale=1.0 / np.sqrt(config.input_dim), size=(config.feature_dim, config.input_dim)
        )
        first_bias = np.zeros(config.feature_dim)
        second_weight = None
        second_bias = None
    return EncoderParams(
        first_weight=first_weight,
        first_bias=first_bias,
        second_weight=second_weight,
        second_bias=second_bias,
        head_weight=rng.normal(
            scale=1.0 / np.sqrt(config.feature_dim), size=(config.num_classes, config.feature_dim)
        ),
        head_bias=np.zeros(config.num_classes),
    )


def encode(params, inputs):
    """Features for a batch of latents; returns (features, cache for the vjp)."""
    x = np.asarray(inputs, dtype=np.float64)
    if params.has_hidden:
        hidden = np.tanh(x @ params.first_weight.T + params.first_bias)
        features = hidden @ params.second_weight.T + params.second_bias
        return features, (x, hidden)
    features = x @ params.first_weight.T + params.first_bias
    return features, (x, None)


def encode_vjp(params, cache, feature_grad):
    """Parameter gradients of a scalar loss given d loss / d features."""
    x, hidden = cache
    grads = EncoderGradients.zeros_like(params)
    if params.has_hidden:
        grads.second_weight += feature_grad.T @ hidden
        grads.second_bias += feature_grad.sum(axis=0)
        pre_grad = (feature_grad @ params.second_weight) * (1.0 - hidden**2)
        grads.first_weight += pre_grad.T @ x
        grads.first_bias += pre_grad.sum(axis=0)
    else:
        grads.first_weight += feature_grad.T @ x
        grads.first_bias += feature_grad.sum(axis=0)
    return grads


def head_logits(params, features):
    return features @ params.head_weight.T + params.head_bias


def head_vjp(params, features, logit_grad):
    """Head-parameter gradients plus the gradient flowing back to features."""
    head_weight_grad = logit_grad.T @ features
    head_bias_grad = logit_grad.sum(axis=0)
    feature_grad = logit_grad @ params.head_weight
    return head_weight_grad, head_bias_grad, feature_grad


def sgd_step(params, grads, learning_rate):
    """In-place plain gradient descent on every parameter array."""
    params.first_weight -= learning_rate * grads.first_weight
    params.first_bias -= learning_rate * grads.first_bias
    if params.has_hidden:
        params.second_weight -= learning_rate * grads.second_weight
        params.second_bias -= learning_rate * grads.second_bias
    params.head_weight -= learning_rate * grads.head_weight
    params.head_bias -= learning_rate * grads.head_bias

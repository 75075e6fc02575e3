"""Predicts the transport regularization strength from the two feature sets.

Each feature is concatenated with a learnable 16-dimensional tag that marks
which set it came from; a shared affine layer plus tanh maps every tagged
feature to a hidden vector, the hidden vectors of both sets are mean-pooled
together, and an output head reduces the pool to one real ``o``.  The
predicted strength is ``0.1 * exp(o)`` clamped to [1e-3, 10], so a
zero-initialized head yields exactly the default 0.1.

Mean pooling makes the prediction invariant to reordering features inside
either set up to floating-point accumulation order (tested at 1e-12).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import validate_feature_set

TAG_DIM = 16
EPSILON_MIN = 1e-3
EPSILON_MAX = 10.0
EPSILON_DEFAULT = 0.1


@dataclass
class ModulateParams:
    """Learnable state: two set tags, the shared layer, and the output head."""

    first_tag: np.ndarray
    second_tag: np.ndarray
    hidden_weight: np.ndarray
    hidden_bias: np.ndarray
    output_weight: np.ndarray
    output_bias: float

    def __post_init__(self):
        if self.first_tag.shape != (TAG_DIM,) or self.second_tag.shape != (TAG_DIM,):
            raise ValueError(f"set tags must have dimension {TAG_DIM}")
        for array in (self.hidden_weight, self.hidden_bias, self.output_weight):
            if not np.all(np.isfinite(array)):
                raise ValueError("modulate parameters contain NaN or Inf")
        if not np.isfinite(self.output_bias):
            raise ValueError("modulate parameters contain NaN or Inf")

    @property
    def hidden_dim(self):
        return self.hidden_weight.shape[0]

    @property
    def feature_dim(self):
        return self.hidden_weight.shape[1] - TAG_DIM

    def copy(self):
        return ModulateParams(
            first_tag=self.first_tag.copy(),
            second_tag=self.second_tag.copy(),
            hidden_weight=self.hidden_weight.copy(),
            hidden_bias=self.hidden_bias.copy(),
            output_weight=self.output_weight.copy(),
            output_bias=float(self.output_bias),
        )


def init_modulate_params(rng, feature_dim, hidden_dim=32):
    """Fresh parameters with a zero output head, so predictions start at 0.1."""
    scale = 1.0 / np.sqrt(feature_dim + TAG_DIM)
    return ModulateParams(
        first_tag=rng.normal(scale=0.1, size=TAG_DIM),
        second_tag=rng.normal(scale=0.1, size=TAG_DIM),
        hidden_weight=rng.normal(scale=scale, size=(hidden_dim, feature_dim + TAG_DIM)),
        hidden_bias=np.zeros(hidden_dim),
        output_weight=np.zeros(hidden_dim),
        output_bias=0.0,
    )


@dataclass
class EpsilonPrediction:
    epsilon: float
    raw_output: float


@dataclass
class ModulateGradients:
    first_tag: np.ndarray
    second_tag: np.ndarray
    hidden_weight: np.ndarray
    hidden_bias: np.ndarray
    output_weight: np.ndarray
    output_bias: float

    @classmethod
    def zeros_like(cls, params):
        return cls(
            first_tag=np.zeros(TAG_DIM),
            second_tag=np.zeros(TAG_DIM),
            hidden_weight=np.zeros_like(params.hidden_weight),
            hidden_bias=np.zeros_like(params.hidden_bias),
            output_weight=np.zeros_like(params.output_weight),
            output_bias=0.0,
        )

    def add(self, other, scale=1.0):
        self.first_tag += scale * other.first_tag
        self.second_tag += scale * other.second_tag
        self.hidden_weight += scale * other.hidden_weight
        self.hidden_bias += scale * other.hidden_bias
        self.output_weight += scale * other.output_weight
        self.output_bias += scale * other.output_bias
        return self


def modulate_sgd_step(params, grads, learning_rate):
    """In-place plain gradient descent on the predictor parameters."""
    params.first_tag -= learning_rate * grads.first_tag
    params.second_tag -= learning_rate * grads.second_tag
    params.hidden_weight -= learning_rate * grads.hidden_weight
    params.hidden_bias -= learning_rate * grads.hidden_bias
    params.output_weight -= learning_rate * grads.output_weight
    params.output_bias -= learning_rate * grads.output_bias


def _forward(first, second, params):
    u = validate_feature_set(first)
    v = validate_feature_set(second)
    if u.shape[1] != params.feature_dim or v.shape[1] != params.feature_dim:
        raise ValueError(
            f"feature dimension {u.shape[1]} does not match predictor ({params.feature_dim})"
        )
    tagged = np.concatenate(
        [
            np.hstack([u, np.tile(params.first_tag, (u.shape[0], 1))]),
            np.hstack([v, np.tile(params.second_tag, (v.shape[0], 1))]),
        ]
    )
    hidden = np.tanh(tagged @ params.hidden_weight.T + params.hidden_bias)
    pooled = hidden.mean(axis=0)
    raw = float(np.dot(params.output_weight, pooled) + params.output_bias)
    epsilon = min(EPSILON_MAX, max(EPSILON_MIN, EPSILON_DEFAULT * np.exp(raw)))
    return EpsilonPrediction(epsilon=epsilon, raw_output=raw), (u, v, tagged, hidden)


def predict_epsilon(first, second, params):
    """Regularization strength for this pair of sets, in [1e-3, 10]."""
    prediction, _ = _forward(first, second, params)
    return prediction


def epsilon_gradient(first, second, params, upstream):
    """Gradients of ``upstream * d epsilon`` through the predictor.

    Returns (parameter gradients, first-set gradient, second-set gradient).
    Inside clamp saturation the prediction is locally constant, so every
    gradient is exactly zero there.
    """
    prediction, (u, v, tagged, hidden) = _forward(first, second, params)
    unclamped = EPSILON_DEFAULT * np.exp(prediction.raw_output)
    if not EPSILON_MIN < unclamped < EPSILON_MAX:
        zero = ModulateGradients(
            first_tag=np.zeros(TAG_DIM),
            second_tag=np.zeros(TAG_DIM),
            hidden_weight=np.zeros_like(params.hidden_weight),
            hidden_bias=np.zeros_like(params.hidden_bias),
            output_weight=np.zeros_like(params.output_weight),
            output_bias=0.0,
        )
        return zero, np.zeros_like(u), np.zeros_like(v)

    raw_bar = float(upstream) * prediction.epsilon
    pooled_bar = raw_bar * params.output_weight
    hidden_bar = np.tile(pooled_bar / tagged.shape[0], (tagged.shape[0], 1))
    pre_bar = hidden_bar * (1.0 - hidden**2)
    tagged_bar = pre_bar @ params.hidden_weight

    n_first = u.shape[0]
    grads = ModulateGradients(
        first_tag=tagged_bar[:n_first, params.feature_dim :].sum(axis=0),
        second_tag=tagged_bar[n_first:, params.feature_dim :].sum(axis=0),
        hidden_weight=pre_bar.T @ tagged,
        hidden_bias=pre_bar.sum(axis=0),
        output_weight=raw_bar * hidden.mean(axis=0),
        output_bias=raw_bar,
    )
    return grads, tagged_bar[:n_first, : params.feature_dim], tagged_bar[n_first:, : params.feature_dim]

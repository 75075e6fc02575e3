"""Local feature sets and the transport-based similarity score.

A feature set is an (n, d) array of nonzero vectors, one per cropped patch
of an image (or one per averaged prototype patch).  All quantities here are
cosine-based, so every operation is invariant to positive rescaling of the
features.  ``adaptive_score`` combines the cosine cost matrix, the
per-node weights, and the regularized transport plan into a similarity in
[-1, 1]; ``adaptive_score_with_grad`` additionally backpropagates through
the solver into both feature sets and the regularization strength.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .transport import (
    SinkhornConfig,
    exact_emd_solve,
    sinkhorn_solve,
    sinkhorn_unrolled_backward,
)


class DegenerateGeometryError(ValueError):
    """A mean feature vanished, so cosine weights are undefined."""


def validate_feature_set(features):
    """Return the features as a float64 (n, d) array, checking invariants."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"feature set must be a (n, d) array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("feature set contains NaN or Inf")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValueError("feature set contains a zero vector")
    return x


def _check_pair(first, second):
    u = validate_feature_set(first)
    v = validate_feature_set(second)
    if u.shape[1] != v.shape[1]:
        raise ValueError(f"feature dimensions differ: {u.shape[1]} vs {v.shape[1]}")
    if u.shape[0] != v.shape[0]:
        raise ValueError(f"set cardinalities differ: {u.shape[0]} vs {v.shape[0]}")
    return u, v


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / norms, norms[:, 0]


def cosine_cost_matrix(first, second):
    """Pairwise transport costs 1 - cos(u_i, v_j); entries lie in [0, 2]."""
    u, v = _check_pair(first, second)
    u_hat, _ = _unit_rows(u)
    v_hat, _ = _unit_rows(v)
    return 1.0 - u_hat @ v_hat.T


def cosine_cost_vjp(first, second, cost_grad):
    """Gradients of a scalar loss through the cosine cost matrix."""
    u, v = _check_pair(first, second)
    u_hat, u_norm = _unit_rows(u)
    v_hat, v_norm = _unit_rows(v)
    sims = u_hat @ v_hat.T
    sim_grad = -np.asarray(cost_grad, dtype=np.float64)
    u_grad = (sim_grad @ v_hat - (sim_grad * sims).sum(axis=1, keepdims=True) * u_hat)
    u_grad /= u_norm[:, None]
    v_grad = (sim_grad.T @ u_hat - (sim_grad * sims).sum(axis=0)[:, None] * v_hat)
    v_grad /= v_norm[:, None]
    return u_grad, v_grad


def _softmax(scores):
    shifted = scores - scores.max()
    weights = np.exp(shifted)
    return weights / weights.sum()


def _cos_to_mean(x, mean):
    mean_norm = np.linalg.norm(mean)
    if mean_norm == 0:
        raise DegenerateGeometryError("mean of the opposite set is the zero vector")
    x_hat, _ = _unit_rows(x)
    return x_hat @ (mean / mean_norm)


def node_weights(first, second):
    """Per-node mass for each set: softmax of cosines to the other set's mean.

    Nodes pointing toward the opposite set's mean direction carry more of
    the transported mass.  Raises DegenerateGeometryError when either mean
    vanishes.
    """
    u, v = _check_pair(first, second)
    row = _softmax(_cos_to_mean(u, v.mean(axis=0)))
    col = _softmax(_cos_to_mean(v, u.mean(axis=0)))
    return row, col


def node_weights_vjp(first, second, row_grad, col_grad):
    """Gradients of a scalar loss through both weight vectors."""
    u, v = _check_pair(first, second)
    u_grad = np.zeros_like(u)
    v_grad = np.zeros_like(v)
    for x, mean_src, w_grad, x_grad, m_grad in (
        (u, v, row_grad, u_grad, v_grad),
        (v, u, col_grad, v_grad, u_grad),
    ):
        mean = mean_src.mean(axis=0)
        mean_norm = np.linalg.norm(mean)
        if mean_norm == 0:
            raise DegenerateGeometryError("mean of the opposite set is the zero vector")
        mean_hat = mean / mean_norm
        scores = _cos_to_mean(x, mean)
        weights = _softmax(scores)
        score_grad = weights * (w_grad - np.dot(w_grad, weights))
        x_hat, x_norm = _unit_rows(x)
        x_grad += score_grad[:, None] * (mean_hat[None, :] - scores[:, None] * x_hat) / x_norm[:, None]
        mean_bar = (score_grad[:, None] * (x_hat - scores[:, None] * mean_hat[None, :])).sum(axis=0)
        m_grad += mean_bar[None, :] / (mean_norm * mean_src.shape[0])
    return u_grad, v_grad


def adaptive_score(first, second, epsilon, config):
    """Similarity of two feature sets through the regularized transport plan.

    Solves the transport problem under the cosine costs and node weights,
    then sums similarity-weighted plan mass: ``sum((1 - costs) * plan)``.
    The result lies in [-1, 1] (clipped against solver-tolerance spill).
    """
    score, _ = _score_with_solution(first, second, epsilon, config)
    return score


def adaptive_score_detail(first, second, epsilon, config):
    """Score plus the underlying solver result (plan, iteration count)."""
    score, parts = _score_with_solution(first, second, epsilon, config)
    return score, parts[-1]


def emd_score(first, second):
    """The same similarity under the exact unregularized vertex plan."""
    u, v = _check_pair(first, second)
    costs = cosine_cost_matrix(u, v)
    row, col = node_weights(u, v)
    result = exact_emd_solve(row, col, costs)
    raw = float(np.sum((1.0 - costs) * result.plan))
    return min(1.0, max(-1.0, raw)), result


@dataclass
class ScoreGradients:
    first: np.ndarray
    second: np.ndarray
    epsilon: float


def adaptive_score_with_grad(first, second, epsilon, config):
    """Score plus its gradients with respect to both sets and epsilon."""
    score, parts = _score_with_solution(first, second, epsilon, config)
    u, v, costs, row, col, cfg, result = parts
    plan_grad = 1.0 - costs
    cost_grad = -result.plan
    solver = sinkhorn_unrolled_backward(row, col, costs, cfg, plan_grad, result=result)
    cost_grad = cost_grad + solver.costs
    u_grad, v_grad = cosine_cost_vjp(u, v, cost_grad)
    u_extra, v_extra = node_weights_vjp(u, v, solver.row_weights, solver.col_weights)
    return score, ScoreGradients(
        first=u_grad + u_extra,
        second=v_grad + v_extra,
        epsilon=solver.epsilon,
    )


def _score_with_solution(first, second, epsilon, config):
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    u, v = _check_pair(first, second)
    costs = cosine_cost_matrix(u, v)
    row, col = node_weights(u, v)
    cfg = replace(config, epsilon=float(epsilon))
    result = sinkhorn_solve(row, col, costs, cfg)
    raw = float(np.sum((1.0 - costs) * result.plan))
    score = min(1.0, max(-1.0, raw))
    return score, (u, v, costs, row, col, cfg, result)


def build_prototype(support_sets, labels, class_id, shots):
    """Average the feature sets of one class, position by position.

    Exactly ``shots`` support sets must carry ``class_id``; the m-th
    prototype feature is the mean of the m-th feature of each of them.
    Raises ValueError when the average produces a zero vector (degenerate
    cancellation) or when no support matches.
    """
    matching = [
        validate_feature_set(features)
        for features, label in zip(support_sets, labels)
        if label == class_id
    ]
    if not matching:
        raise ValueError(f"no support set carries class {class_id!r}")
    if len(matching) != shots:
        raise ValueError(
            f"expected {shots} support sets for class {class_id!r}, found {len(matching)}"
        )
    shape = matching[0].shape
    if any(m.shape != shape for m in matching):
        raise ValueError("support sets disagree on cardinality or dimension")
    prototype = np.mean(matching, axis=0)
    if np.any(np.linalg.norm(prototype, axis=1) == 0):
        raise ValueError("prototype averaging produced a zero vector")
    return prototype

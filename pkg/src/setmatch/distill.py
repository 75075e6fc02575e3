"""Soft-label supervision built on a chain of binary splits.

A length-``n_c`` logit vector induces ``n_c - 1`` without-replacement
binary decisions: "class i versus everything after i".  The classical
KL divergence between two softmax distributions equals a weighted sum of
the per-split KL terms, with weights given by the teacher's suffix
probability mass; that identity is implemented here as an executable
check (``decomposed_kl``).  Raising the teacher temperature flattens the
weights toward ``(n_c - i + 1) / n_c``; ``uniform_chain_kl`` uses those
limit weights directly so every split contributes at the same rate
regardless of how confident the teacher is.

``pretrain_losses`` combines hard cross-entropy on the first patches of
an image with the chain divergence on the remaining patches, and
``ema_update`` maintains the momentum teacher that produces the soft
targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12


def _check_logits(logits, minimum_classes=2):
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < minimum_classes:
        raise ValueError(
            f"logits must be a 1-D vector with at least {minimum_classes} classes, got shape {z.shape}"
        )
    if not np.all(np.isfinite(z)):
        raise ValueError("logits contain NaN or Inf")
    return z


def softmax_probs(logits, temperature=1.0):
    """Softmax of ``logits / temperature``; temperature must be positive."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = _check_logits(logits, minimum_classes=1)
    shifted = z / temperature
    shifted = shifted - shifted.max()
    weights = np.exp(shifted)
    return weights / weights.sum()


def _suffix_logsumexp(logits):
    """suffix[i] = log sum_{k >= i} exp(logits[k]), computed right to left."""
    return np.logaddexp.accumulate(logits[::-1])[::-1]


def binary_chain(logits):
    """The (n_c - 1, 2) chain of binary split distributions.

    Row i holds (q_i, q_not_i): the probability that the input is class i
    given that it is none of the classes before i, and its complement.
    """
    z = _check_logits(logits)
    suffix = _suffix_logsumexp(z)
    head = np.exp(z[:-1] - suffix[:-1])
    tail = np.exp(suffix[1:] - suffix[:-1])
    return np.stack([head, tail], axis=1)


@dataclass
class ChainWeights:
    """Per-split weights: teacher suffix mass, its cardinality-normalized
    form, and the temperature limit (n_c - i + 1) / n_c."""

    raw: np.ndarray
    normalized: np.ndarray
    limit: np.ndarray


def chain_weights(teacher_logits, temperature=1.0):
    """Weights of each binary split under the teacher distribution.

    ``raw[i]`` is the teacher's probability mass on classes i..n_c at the
    given temperature; ``normalized`` divides by the number of remaining
    classes; ``limit`` is the infinite-temperature value, computed as an
    exact ratio of integers.
    """
    z = _check_logits(teacher_logits)
    n_classes = z.size
    probs = softmax_probs(z, temperature)
    suffix = np.cumsum(probs[::-1])[::-1]
    raw = suffix[:-1]
    cardinality = np.arange(n_classes, 1, -1, dtype=np.float64)
    normalized = raw / cardinality
    limit = cardinality / float(n_classes)
    return ChainWeights(raw=raw, normalized=normalized, limit=limit)


def kl(p, q):
    """Kullback-Leibler divergence sum(p * log(p / q)).

    Zero entries of ``p`` contribute nothing (0 log 0 = 0); ``q`` must be
    strictly positive.  Probabilities are floored at 1e-12 inside the
    logarithms.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    if np.any(q <= 0):
        raise ValueError("q has a zero (or negative) entry")
    logs = np.log(np.maximum(p, PROB_FLOOR)) - np.log(np.maximum(q, PROB_FLOOR))
    return float(np.sum(np.where(p > 0, p * logs, 0.0)))


def _pair_kl(target, output):
    logs = np.log(np.maximum(target, PROB_FLOOR)) - np.log(np.maximum(output, PROB_FLOOR))
    return float(np.sum(np.where(target > 0, target * logs, 0.0)))


def _chain_sum(teacher_logits, student_logits, weights):
    teacher_pairs = binary_chain(teacher_logits)
    student_pairs = binary_chain(student_logits)
    return float(
        sum(
            w * _pair_kl(t, s)
            for w, t, s in zip(weights, teacher_pairs, student_pairs)
        )
    )


def decomposed_kl(teacher_logits, student_logits):
    """KL divergence rebuilt from the binary chain with raw suffix weights.

    Equals ``kl(softmax(teacher), softmax(student))`` up to rounding; this
    function exists to make that identity executable.
    """
    zt = _check_logits(teacher_logits)
    zs = _check_logits(student_logits)
    if zt.size != zs.size:
        raise ValueError("teacher and student logits differ in length")
    return _chain_sum(zt, zs, chain_weights(zt).raw)


def uniform_chain_kl(teacher_logits, student_logits):
    """Chain divergence with the flat limit weights (n_c - i + 1) / n_c.

    Nonnegative; zero exactly when the two chains coincide, in particular
    under any common shift of the logits.
    """
    zt = _check_logits(teacher_logits)
    zs = _check_logits(student_logits)
    if zt.size != zs.size:
        raise ValueError("teacher and student logits differ in length")
    return _chain_sum(zt, zs, chain_weights(zt).limit)


def tempered_chain_kl(teacher_logits, student_logits, temperature):
    """Chain divergence with suffix weights at the given teacher temperature.

    At temperature 1 this is the classical KL divergence; as the
    temperature grows it approaches ``uniform_chain_kl``.  The binary
    split targets themselves are never temperature-scaled.
    """
    zt = _check_logits(teacher_logits)
    zs = _check_logits(student_logits)
    if zt.size != zs.size:
        raise ValueError("teacher and student logits differ in length")
    return _chain_sum(zt, zs, chain_weights(zt, temperature).raw)


def _suffix_softmax_matrix(logits):
    """Row j holds the softmax of logits restricted to classes j..n_c."""
    z = np.asarray(logits, dtype=np.float64)
    n = z.size
    suffix = _suffix_logsumexp(z)
    matrix = np.exp(z[None, :] - suffix[:, None])
    return np.where(np.arange(n)[None, :] >= np.arange(n)[:, None], matrix, 0.0)


def chain_kl_grad(teacher_logits, student_logits, weights):
    """Gradient of the weighted chain divergence w.r.t. the student logits."""
    zt = _check_logits(teacher_logits)
    zs = _check_logits(student_logits)
    w = np.asarray(weights, dtype=np.float64)
    teacher_pairs = binary_chain(zt)
    head = teacher_pairs[:, 0]
    tail = teacher_pairs[:, 1]
    sfx = _suffix_softmax_matrix(zs)
    splits = zs.size - 1
    grad = sfx[:splits].T @ w - sfx[1 : splits + 1].T @ (w * tail)
    grad[:splits] -= w * head
    return grad


def soft_divergence_fn(scheme, temperature=1.0):
    """Resolve a soft-loss scheme name to (divergence, gradient) callables.

    ``uniform`` uses the flat limit weights; ``tempered`` uses teacher
    suffix weights at the given temperature (temperature 1 reproduces the
    classical KL divergence).
    """
    if scheme == "uniform":
        div = uniform_chain_kl
        grad = lambda zt, zs: chain_kl_grad(zt, zs, chain_weights(zt).limit)
    elif scheme == "tempered":
        div = lambda zt, zs: tempered_chain_kl(zt, zs, temperature)
        grad = lambda zt, zs: chain_kl_grad(zt, zs, chain_weights(zt, temperature).raw)
    else:
        raise ValueError(f"unknown soft-loss scheme {scheme!r}")
    return div, grad


@dataclass
class PretrainLosses:
    cross_entropy: float
    soft: float
    total: float


def pretrain_losses(
    student_logits,
    teacher_logits,
    one_hot_label,
    hard_count,
    n_patches,
    soft_weight,
    soft_divergence=uniform_chain_kl,
):
    """Per-image pretraining losses over a stack of patch logits.

    The first ``hard_count`` patches are supervised by the ground-truth
    label: cross-entropy of the softmax of their mean logit vector.  The
    remaining patches are supervised by the teacher through
    ``soft_divergence``, averaged.  ``total = cross_entropy + soft_weight * soft``.
    """
    student = np.asarray(student_logits, dtype=np.float64)
    teacher = np.asarray(teacher_logits, dtype=np.float64)
    label = np.asarray(one_hot_label, dtype=np.float64)
    if student.ndim != 2 or student.shape[0] != n_patches:
        raise ValueError(
            f"student logits must have shape ({n_patches}, n_classes), got {student.shape}"
        )
    if teacher.shape != student.shape:
        raise ValueError("teacher and student logit stacks differ in shape")
    if label.shape != (student.shape[1],):
        raise ValueError("label length does not match the class count")
    if not 0 < hard_count < n_patches:
        raise ValueError(
            f"hard patch count must satisfy 0 < l < n_patches, got l={hard_count}, n_patches={n_patches}"
        )

    mean_logits = student[:hard_count].mean(axis=0)
    probs = softmax_probs(mean_logits)
    cross_entropy = float(-np.dot(label, np.log(np.maximum(probs, PROB_FLOOR))))

    soft_terms = [
        soft_divergence(teacher[p], student[p]) for p in range(hard_count, n_patches)
    ]
    soft = float(np.mean(soft_terms))
    return PretrainLosses(
        cross_entropy=cross_entropy,
        soft=soft,
        total=cross_entropy + soft_weight * soft,
    )


def ema_update(teacher_params, student_params, momentum):
    """Momentum average ``m * teacher + (1 - m) * student``, elementwise."""
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    teacher = np.asarray(teacher_params, dtype=np.float64)
    student = np.asarray(student_params, dtype=np.float64)
    if teacher.shape != student.shape:
        raise ValueError(f"shape mismatch: {teacher.shape} vs {student.shape}")
    return momentum * teacher + (1.0 - momentum) * student

"""Episodic training and evaluation on the synthetic world.

Two training stages operate on one ModelState.  ``pretrain`` teaches the
student encoder to classify base-class patches, warming up on hard labels
only and then mixing in chain-divergence supervision against a momentum
teacher.  ``meta_train`` then fine-tunes the teacher encoder (the deployed
feature extractor) and the strength predictor across sampled tasks, first
with the encoder frozen and then jointly.  Gradients flow through the
transport solver via its recorded unrolled iteration and are validated by
``grad_check`` against central finite differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .distill import (
    ema_update,
    pretrain_losses,
    soft_divergence_fn,
    softmax_probs,
)
from .encoder import (
    EncoderConfig,
    EncoderGradients,
    EncoderParams,
    encode,
    encode_vjp,
    head_logits,
    head_vjp,
    init_encoder_params,
    sgd_step,
)
from .features import (
    adaptive_score_detail,
    adaptive_score_with_grad,
    build_prototype,
    emd_score,
)
from .modulate import (
    ModulateGradients,
    epsilon_gradient,
    init_modulate_params,
    modulate_sgd_step,
    predict_epsilon,
)
from .transport import ConvergenceError, SinkhornConfig
from .world import crop_patches, sample_episode

PROB_FLOOR = 1e-12

METRICS = ("adaptive", "sinkhorn", "emd")


class EngineError(RuntimeError):
    pass


class DivergenceError(EngineError):
    """Training produced a non-finite loss; carries the trace so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class SkipBudgetError(EngineError):
    """Too many episodes were skipped for solver non-convergence."""

    def __init__(self, skipped, attempted, limit):
        super().__init__(
            f"skipped {skipped}/{attempted} episodes, exceeding the {limit:.1%} budget"
        )
        self.skipped = skipped
        self.attempted = attempted


@dataclass
class ModelState:
    """Student/teacher encoders plus the strength predictor and step count."""

    student: EncoderParams
    teacher: EncoderParams
    modulate: object
    step_count: int = 0

    def copy(self):
        return ModelState(
            student=self.student.copy(),
            teacher=self.teacher.copy(),
            modulate=self.modulate.copy(),
            step_count=self.step_count,
        )


def init_model_state(seed, encoder_config, modulate_hidden_dim=32):
    rng = np.random.default_rng(seed)
    student = init_encoder_params(rng, encoder_config)
    return ModelState(
        student=student,
        teacher=student.copy(),
        modulate=init_modulate_params(rng, encoder_config.feature_dim, modulate_hidden_dim),
    )


def _ema_encoder(teacher, student, momentum):
    teacher.first_weight = ema_update(teacher.first_weight, student.first_weight, momentum)
    teacher.first_bias = ema_update(teacher.first_bias, student.first_bias, momentum)
    if teacher.has_hidden:
        teacher.second_weight = ema_update(teacher.second_weight, student.second_weight, momentum)
        teacher.second_bias = ema_update(teacher.second_bias, student.second_bias, momentum)
    teacher.head_weight = ema_update(teacher.head_weight, student.head_weight, momentum)
    teacher.head_bias = ema_update(teacher.head_bias, student.head_bias, momentum)


def _decayed(base_rate, epoch, milestones, factor):
    drops = sum(1 for m in milestones if epoch >= m)
    return base_rate * factor**drops


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainSchedule:
    epochs: int = 20
    warmup_epochs: int = 5
    steps_per_epoch: int = 50
    batch_size: int = 16
    learning_rate: float = 0.05
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 0.1
    soft_weight: float = 0.1
    momentum: float = 0.999
    patches_per_image: int = 4
    hard_patches: int = 1
    soft_scheme: str = "uniform"
    soft_temperature: float = 1.0

    def __post_init__(self):
        if not 0 < self.hard_patches < self.patches_per_image:
            raise ValueError("need 0 < hard_patches < patches_per_image")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class PretrainResult:
    model: ModelState
    epoch_records: list
    step_losses: np.ndarray


def _sample_pretrain_batch(world, rng, batch_size, n_patches):
    labels = rng.integers(0, world.num_base_classes, size=batch_size)
    latents = world.base_class_means[labels] + world.intra_class_sigma * rng.normal(
        size=(batch_size, world.latent_dim)
    )
    patches = np.stack(
        [crop_patches(world, latents[i], n_patches, rng) for i in range(batch_size)]
    )
    return patches, labels


def _batch_logits(params, patches):
    batch, n_patches, dim = patches.shape
    features, cache = encode(params, patches.reshape(batch * n_patches, dim))
    logits = head_logits(params, features).reshape(batch, n_patches, -1)
    return logits, features, cache


def _pretrain_batch_losses(student, teacher, patches, labels, schedule):
    divergence, _ = soft_divergence_fn(schedule.soft_scheme, schedule.soft_temperature)
    logits, _, _ = _batch_logits(student, patches)
    n_classes = logits.shape[2]
    teacher_logits = (
        _batch_logits(teacher, patches)[0] if teacher is not None else np.zeros_like(logits)
    )
    ce_sum = soft_sum = 0.0
    for i in range(patches.shape[0]):
        one_hot = np.zeros(n_classes)
        one_hot[labels[i]] = 1.0
        if teacher is None:
            probs = softmax_probs(logits[i, : schedule.hard_patches].mean(axis=0))
            ce_sum += -float(np.log(max(probs[labels[i]], PROB_FLOOR)))
        else:
            losses = pretrain_losses(
                logits[i],
                teacher_logits[i],
                one_hot,
                schedule.hard_patches,
                schedule.patches_per_image,
                schedule.soft_weight,
                soft_divergence=divergence,
            )
            ce_sum += losses.cross_entropy
            soft_sum += losses.soft
    batch = patches.shape[0]
    ce = ce_sum / batch
    soft = soft_sum / batch
    return ce, soft, ce + schedule.soft_weight * soft


def _pretrain_batch_grads(student, teacher, patches, labels, schedule):
    """Losses and student-parameter gradients for one minibatch."""
    _, soft_grad_fn = soft_divergence_fn(schedule.soft_scheme, schedule.soft_temperature)
    divergence, _ = soft_divergence_fn(schedule.soft_scheme, schedule.soft_temperature)
    batch, n_patches, _ = patches.shape
    hard = schedule.hard_patches
    logits, features, cache = _batch_logits(student, patches)
    n_classes = logits.shape[2]
    teacher_logits = _batch_logits(teacher, patches)[0] if teacher is not None else None

    logit_grads = np.zeros_like(logits)
    ce_sum = soft_sum = 0.0
    for i in range(batch):
        mean_logits = logits[i, :hard].mean(axis=0)
        probs = softmax_probs(mean_logits)
        ce_sum += -float(np.log(max(probs[labels[i]], PROB_FLOOR)))
        ce_grad = probs.copy()
        ce_grad[labels[i]] -= 1.0
        logit_grads[i, :hard] += ce_grad[None, :] / (hard * batch)

        if teacher is not None:
            for p in range(hard, n_patches):
                soft_sum += divergence(teacher_logits[i, p], logits[i, p])
                if schedule.soft_weight != 0.0:
                    logit_grads[i, p] += (
                        schedule.soft_weight
                        * soft_grad_fn(teacher_logits[i, p], logits[i, p])
                        / ((n_patches - hard) * batch)
                    )

    flat_grads = logit_grads.reshape(batch * n_patches, n_classes)
    head_w_grad, head_b_grad, feature_grad = head_vjp(student, features, flat_grads)
    grads = encode_vjp(student, cache, feature_grad)
    grads.head_weight += head_w_grad
    grads.head_bias += head_b_grad

    ce = ce_sum / batch
    soft = soft_sum / (batch * (n_patches - hard)) if teacher is not None else 0.0
    return ce, soft, ce + schedule.soft_weight * soft, grads


def pretrain(world, model, schedule, seed):
    """Warm up on hard labels, then calibrate against the momentum teacher.

    The teacher is initialized as a copy of the student when the warmup
    ends and tracks it by momentum averaging after every subsequent step.
    Deterministic for a fixed (world, model, schedule, seed).  Raises
    DivergenceError (with the trace so far) if any loss goes non-finite.
    """
    if model.student.head_weight.shape[0] != world.num_base_classes:
        raise ValueError(
            f"encoder head has {model.student.head_weight.shape[0]} classes, "
            f"world has {world.num_base_classes}"
        )
    rng = np.random.default_rng(seed)
    step_losses = []
    epoch_records = []
    total_epochs = schedule.warmup_epochs + schedule.epochs
    for epoch in range(total_epochs):
        warmup = epoch < schedule.warmup_epochs
        if epoch == schedule.warmup_epochs:
            model.teacher = model.student.copy()
        rate = _decayed(
            schedule.learning_rate, epoch, schedule.lr_decay_epochs, schedule.lr_decay_factor
        )
        epoch_ce = []
        epoch_soft = []
        for _ in range(schedule.steps_per_epoch):
            patches, labels = _sample_pretrain_batch(
                world, rng, schedule.batch_size, schedule.patches_per_image
            )
            teacher = None if warmup else model.teacher
            try:
                ce, soft, total, grads = _pretrain_batch_grads(
                    model.student, teacher, patches, labels, schedule
                )
            except ValueError as exc:
                # Overflowed parameters surface as non-finite logits upstream.
                raise DivergenceError(
                    f"non-finite values at epoch {epoch}: {exc}", trace=epoch_records
                ) from exc
            if not np.isfinite(total):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}", trace=epoch_records
                )
            sgd_step(model.student, grads, rate)
            if not warmup:
                _ema_encoder(model.teacher, model.student, schedule.momentum)
            model.step_count += 1
            step_losses.append((ce, soft, total))
            epoch_ce.append(ce)
            epoch_soft.append(soft)
        epoch_records.append(
            {
                "epoch": epoch,
                "phase": "warmup" if warmup else "calibration",
                "loss_ce": float(np.mean(epoch_ce)),
                "loss_soft": float(np.mean(epoch_soft)),
                "loss_total": float(
                    np.mean(epoch_ce) + schedule.soft_weight * np.mean(epoch_soft)
                ),
                "learning_rate": rate,
            }
        )
    if schedule.epochs == 0 and schedule.warmup_epochs == total_epochs:
        model.teacher = model.student.copy()
    return PretrainResult(
        model=model, epoch_records=epoch_records, step_losses=np.array(step_losses)
    )


# ---------------------------------------------------------------------------
# Episodic scoring
# ---------------------------------------------------------------------------

DEFAULT_EPISODE_SOLVER = SinkhornConfig(epsilon=0.1, tolerance=1e-5, max_iterations=5000)


def _pair_score(query_set, prototype, model, metric, fixed_epsilon, solver):
    if metric == "adaptive":
        eps = predict_epsilon(query_set, prototype, model.modulate).epsilon
        score, result = adaptive_score_detail(query_set, prototype, eps, solver)
        return score, result.iterations
    if metric == "sinkhorn":
        score, result = adaptive_score_detail(query_set, prototype, fixed_epsilon, solver)
        return score, result.iterations
    if metric == "emd":
        score, result = emd_score(query_set, prototype)
        return score, result.pivots
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def classify_query(
    query_set,
    prototypes,
    model,
    solver=DEFAULT_EPISODE_SOLVER,
    metric="adaptive",
    fixed_epsilon=0.1,
):
    """Class probabilities for one query set: softmax over its pair scores."""
    scores = np.array(
        [
            _pair_score(query_set, prototype, model, metric, fixed_epsilon, solver)[0]
            for prototype in prototypes
        ]
    )
    return softmax_probs(scores)


def _encode_patch_sets(encoder_params, patch_stack):
    sets, n_patches, dim = patch_stack.shape
    features, cache = encode(encoder_params, patch_stack.reshape(sets * n_patches, dim))
    return features.reshape(sets, n_patches, -1), cache


def _episode_prototypes(support_features, support_labels, n_way, n_shot):
    sets = [support_features[i] for i in range(support_features.shape[0])]
    return np.stack(
        [
            build_prototype(sets, support_labels, class_id=j, shots=n_shot)
            for j in range(n_way)
        ]
    )


def _crop_task_patches(world, task, patches_per_set, rng):
    support = np.stack(
        [crop_patches(world, latent, patches_per_set, rng) for latent in task.support_latents]
    )
    query = np.stack(
        [crop_patches(world, latent, patches_per_set, rng) for latent in task.query_latents]
    )
    return support, query


def _episode_loss_from_patches(
    model, support_patches, support_labels, query_patches, query_labels, n_way, n_shot, solver
):
    """Mean episodic cross-entropy under the adaptive metric (forward only)."""
    support_features, _ = _encode_patch_sets(model.teacher, support_patches)
    query_features, _ = _encode_patch_sets(model.teacher, query_patches)
    prototypes = _episode_prototypes(support_features, support_labels, n_way, n_shot)
    total = 0.0
    for i in range(query_patches.shape[0]):
        probs = classify_query(query_features[i], prototypes, model, solver=solver)
        total += -float(np.log(max(probs[query_labels[i]], PROB_FLOOR)))
    return total / query_patches.shape[0]


def _episode_backward_from_patches(
    model,
    support_patches,
    support_labels,
    query_patches,
    query_labels,
    n_way,
    n_shot,
    solver,
    train_encoder,
):
    """Episodic loss, accuracy, and gradients for the teacher encoder and predictor."""
    support_features, support_cache = _encode_patch_sets(model.teacher, support_patches)
    query_features, query_cache = _encode_patch_sets(model.teacher, query_patches)
    prototypes = _episode_prototypes(support_features, support_labels, n_way, n_shot)

    n_queries = query_patches.shape[0]
    query_grads = np.zeros_like(query_features)
    proto_grads = np.zeros_like(prototypes)
    modulate_grads = ModulateGradients.zeros_like(model.modulate)
    loss = 0.0
    correct = 0

    for i in range(n_queries):
        query_set = query_features[i]
        pair_grads = []
        scores = np.empty(n_way)
        epsilons = np.empty(n_way)
        for j in range(n_way):
            epsilons[j] = predict_epsilon(query_set, prototypes[j], model.modulate).epsilon
            scores[j], grads = adaptive_score_with_grad(
                query_set, prototypes[j], epsilons[j], solver
            )
            pair_grads.append(grads)
        probs = softmax_probs(scores)
        label = query_labels[i]
        loss += -float(np.log(max(probs[label], PROB_FLOOR)))
        correct += int(np.argmax(probs) == label)

        score_bar = probs.copy()
        score_bar[label] -= 1.0
        score_bar /= n_queries
        for j in range(n_way):
            upstream = score_bar[j]
            if upstream == 0.0:
                continue
            query_grads[i] += upstream * pair_grads[j].first
            proto_grads[j] += upstream * pair_grads[j].second
            mod_grad, query_extra, proto_extra = epsilon_gradient(
                query_set, prototypes[j], model.modulate, upstream * pair_grads[j].epsilon
            )
            modulate_grads.add(mod_grad)
            query_grads[i] += query_extra
            proto_grads[j] += proto_extra

    loss /= n_queries
    accuracy = correct / n_queries

    encoder_grads = EncoderGradients.zeros_like(model.teacher)
    if train_encoder:
        support_grads = np.zeros_like(support_features)
        for s in range(support_patches.shape[0]):
            support_grads[s] = proto_grads[support_labels[s]] / n_shot
        feature_dim = query_features.shape[2]
        encoder_grads.add(
            encode_vjp(model.teacher, query_cache, query_grads.reshape(-1, feature_dim))
        )
        encoder_grads.add(
            encode_vjp(model.teacher, support_cache, support_grads.reshape(-1, feature_dim))
        )
    return loss, accuracy, encoder_grads, modulate_grads


# ---------------------------------------------------------------------------
# Meta-training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetaSchedule:
    phase1_epochs: int = 100
    phase2_epochs: int = 100
    steps_per_epoch: int = 50
    tasks_per_step: int = 4
    n_way: int = 5
    n_shot: int = 1
    n_query: int = 3
    patches_per_set: int = 9
    phase1_learning_rate: float = 1e-3
    phase2_learning_rate: float = 5e-4
    lr_decay_epochs: tuple = (60, 90)
    lr_decay_factor: float = 0.1
    solver: SinkhornConfig = field(default_factory=lambda: DEFAULT_EPISODE_SOLVER)
    skip_limit: float = 0.01


@dataclass
class MetaResult:
    model: ModelState
    epoch_records: list
    skipped: int
    attempted: int


def meta_train(world, model, schedule, seed):
    """Two-phase episodic fine-tuning of the deployed (teacher) encoder.

    Phase 1 trains only the strength predictor with the encoder frozen;
    phase 2 trains the encoder and predictor jointly.  Episodes whose
    transport solve does not converge are skipped and counted; the run
    fails if the skip rate exceeds ``schedule.skip_limit``.
    """
    rng = np.random.default_rng(seed)
    records = []
    skipped = 0
    attempted = 0
    phases = (
        ("predictor", schedule.phase1_epochs, schedule.phase1_learning_rate, False),
        ("joint", schedule.phase2_epochs, schedule.phase2_learning_rate, True),
    )
    for phase_name, epochs, base_rate, train_encoder in phases:
        for epoch in range(epochs):
            rate = _decayed(base_rate, epoch, schedule.lr_decay_epochs, schedule.lr_decay_factor)
            losses = []
            accuracies = []
            for _ in range(schedule.steps_per_epoch):
                encoder_acc = EncoderGradients.zeros_like(model.teacher)
                modulate_acc = ModulateGradients.zeros_like(model.modulate)
                used = 0
                for _ in range(schedule.tasks_per_step):
                    attempted += 1
                    task = sample_episode(
                        world, rng, "base", schedule.n_way, schedule.n_shot, schedule.n_query
                    )
                    support_patches, query_patches = _crop_task_patches(
                        world, task, schedule.patches_per_set, rng
                    )
                    try:
                        loss, accuracy, enc_grads, mod_grads = _episode_backward_from_patches(
                            model,
                            support_patches,
                            task.support_labels,
                            query_patches,
                            task.query_labels,
                            schedule.n_way,
                            schedule.n_shot,
                            schedule.solver,
                            train_encoder,
                        )
                    except ConvergenceError:
                        skipped += 1
                        continue
                    used += 1
                    losses.append(loss)
                    accuracies.append(accuracy)
                    encoder_acc.add(enc_grads)
                    modulate_acc.add(mod_grads)
                if used:
                    modulate_sgd_step(model.modulate, modulate_acc, rate / used)
                    if train_encoder:
                        sgd_step(model.teacher, encoder_acc, rate / used)
                model.step_count += 1
            records.append(
                {
                    "phase": phase_name,
                    "epoch": epoch,
                    "loss": float(np.mean(losses)) if losses else float("nan"),
                    "accuracy": float(np.mean(accuracies)) if accuracies else float("nan"),
                    "learning_rate": rate,
                }
            )
    if attempted and skipped / attempted > schedule.skip_limit:
        raise SkipBudgetError(skipped, attempted, schedule.skip_limit)
    return MetaResult(model=model, epoch_records=records, skipped=skipped, attempted=attempted)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    ci95: float
    episode_accuracies: np.ndarray
    query_count: int
    mean_solver_iterations: float
    episode_times: list | None
    skipped: int


def evaluate(
    world,
    model,
    split,
    episodes,
    n_way,
    n_shot,
    n_query,
    patches_per_set=9,
    metric="adaptive",
    fixed_epsilon=0.1,
    solver=DEFAULT_EPISODE_SOLVER,
    seed=0,
    collect_times=False,
):
    """Mean episode accuracy with a 95% confidence interval.

    Episode e draws its task and crops from ``default_rng([seed, e])``, so
    results are independent of execution order and identical across metric
    choices for the same seed.  Episodes whose solver fails to converge are
    skipped and counted; more than 1% skips aborts the run.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    episode_accuracies = []
    episode_times = [] if collect_times else None
    iteration_counts = []
    query_count = 0
    skipped = 0
    for index in range(episodes):
        rng = np.random.default_rng([seed, index])
        task = sample_episode(world, rng, split, n_way, n_shot, n_query)
        started = time.perf_counter()
        try:
            support_patches, query_patches = _crop_task_patches(
                world, task, patches_per_set, rng
            )
            support_features, _ = _encode_patch_sets(model.teacher, support_patches)
            query_features, _ = _encode_patch_sets(model.teacher, query_patches)
            prototypes = _episode_prototypes(
                support_features, task.support_labels, n_way, n_shot
            )
            correct = 0
            for i in range(query_patches.shape[0]):
                scores = np.empty(n_way)
                for j in range(n_way):
                    scores[j], iterations = _pair_score(
                        query_features[i], prototypes[j], model, metric, fixed_epsilon, solver
                    )
                    iteration_counts.append(iterations)
                probs = softmax_probs(scores)
                correct += int(np.argmax(probs) == task.query_labels[i])
                query_count += 1
        except ConvergenceError:
            skipped += 1
            continue
        episode_accuracies.append(correct / query_patches.shape[0])
        if collect_times:
            episode_times.append(time.perf_counter() - started)
    if skipped > max(1, 0.01 * episodes):
        raise SkipBudgetError(skipped, episodes, 0.01)
    accuracies = np.array(episode_accuracies)
    ci95 = (
        1.96 * float(np.std(accuracies, ddof=1)) / np.sqrt(accuracies.size)
        if accuracies.size > 1
        else 0.0
    )
    return EvalResult(
        accuracy=float(np.mean(accuracies)),
        ci95=ci95,
        episode_accuracies=accuracies,
        query_count=query_count,
        mean_solver_iterations=float(np.mean(iteration_counts)) if iteration_counts else 0.0,
        episode_times=episode_times,
        skipped=skipped,
    )


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckInstance:
    """A small fixed scenario, sized so finite differences stay fast."""

    world: object
    seed: int
    encoder_config: EncoderConfig
    modulate_hidden_dim: int = 4
    n_way: int = 2
    n_shot: int = 1
    n_query: int = 1
    patches_per_set: int = 3
    batch_size: int = 2
    patches_per_image: int = 3
    hard_patches: int = 1
    soft_weight: float = 0.3
    freeze_encoder: bool = False
    fd_step: float = 1e-5
    solver: SinkhornConfig = field(
        default_factory=lambda: SinkhornConfig(
            epsilon=0.1, tolerance=1e-12, max_iterations=30_000
        )
    )


@dataclass
class GradCheckEntry:
    part: str
    parameter: str
    index: tuple
    analytic: float
    numeric: float
    relative_error: float


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst: list
    encoder_grads_zero: bool | None

    def passed(self, threshold=1e-4):
        return self.max_relative_error <= threshold


def _relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)


def _fd_entries(part, name, array, grad_array, loss_fn, step):
    entries = []
    flat = array.reshape(-1)
    grad_flat = np.asarray(grad_array).reshape(-1)
    for k in range(flat.size):
        original = flat[k]
        flat[k] = original + step
        up = loss_fn()
        flat[k] = original - step
        down = loss_fn()
        flat[k] = original
        numeric = (up - down) / (2 * step)
        index = np.unravel_index(k, array.shape) if array.ndim else (k,)
        entries.append(
            GradCheckEntry(
                part=part,
                parameter=name,
                index=tuple(int(v) for v in index),
                analytic=float(grad_flat[k]),
                numeric=float(numeric),
                relative_error=_relative_error(float(grad_flat[k]), float(numeric)),
            )
        )
    return entries


def build_gradcheck_model(instance):
    """A model sized for the instance, with a small random predictor head.

    The head is perturbed away from zero so the predicted strength moves
    with its inputs (a zero head has identically zero upstream gradients),
    while staying well inside the clamp range.
    """
    model = init_model_state(instance.seed, instance.encoder_config, instance.modulate_hidden_dim)
    rng = np.random.default_rng(instance.seed + 7)
    model.modulate.output_weight = rng.normal(scale=0.2, size=instance.modulate_hidden_dim)
    model.modulate.output_bias = float(rng.normal(scale=0.05))
    # Teacher diverges slightly from the student so soft targets are informative.
    model.teacher = model.student.copy()
    for _, array in model.teacher.arrays():
        array += rng.normal(scale=0.05, size=array.shape)
    return model


def grad_check(model, instance):
    """Compare analytic gradients with central finite differences.

    Covers the pretraining loss with respect to every student parameter
    and the episodic cross-entropy (through the transport solver and the
    strength predictor) with respect to every teacher-encoder and
    predictor parameter.  Returns a report with the worst offenders.
    """
    rng = np.random.default_rng(instance.seed)
    entries = []

    # Pretraining loss part.
    schedule = PretrainSchedule(
        epochs=1,
        warmup_epochs=0,
        steps_per_epoch=1,
        batch_size=instance.batch_size,
        patches_per_image=instance.patches_per_image,
        hard_patches=instance.hard_patches,
        soft_weight=instance.soft_weight,
    )
    patches, labels = _sample_pretrain_batch(
        instance.world, rng, instance.batch_size, instance.patches_per_image
    )
    _, _, _, grads = _pretrain_batch_grads(
        model.student, model.teacher, patches, labels, schedule
    )

    def pretrain_loss():
        return _pretrain_batch_losses(model.student, model.teacher, patches, labels, schedule)[2]

    for name, array in model.student.arrays():
        entries.extend(
            _fd_entries(
                "pretrain", name, array, getattr(grads, name), pretrain_loss, instance.fd_step
            )
        )

    # Episodic part.
    task = sample_episode(
        instance.world, rng, "base", instance.n_way, instance.n_shot, instance.n_query
    )
    support_patches, query_patches = _crop_task_patches(
        instance.world, task, instance.patches_per_set, rng
    )
    _, _, encoder_grads, modulate_grads = _episode_backward_from_patches(
        model,
        support_patches,
        task.support_labels,
        query_patches,
        task.query_labels,
        instance.n_way,
        instance.n_shot,
        instance.solver,
        train_encoder=not instance.freeze_encoder,
    )

    def episode_loss():
        return _episode_loss_from_patches(
            model,
            support_patches,
            task.support_labels,
            query_patches,
            task.query_labels,
            instance.n_way,
            instance.n_shot,
            instance.solver,
        )

    encoder_grads_zero = None
    if instance.freeze_encoder:
        encoder_grads_zero = all(
            np.all(getattr(encoder_grads, name) == 0.0) for name, _ in model.teacher.arrays()
        )
    else:
        for name, array in model.teacher.arrays():
            entries.extend(
                _fd_entries(
                    "episode",
                    "teacher." + name,
                    array,
                    getattr(encoder_grads, name),
                    episode_loss,
                    instance.fd_step,
                )
            )

    for name in ("first_tag", "second_tag", "hidden_weight", "hidden_bias", "output_weight"):
        entries.extend(
            _fd_entries(
                "episode",
                "modulate." + name,
                getattr(model.modulate, name),
                getattr(modulate_grads, name),
                episode_loss,
                instance.fd_step,
            )
        )
    original_bias = model.modulate.output_bias
    model.modulate.output_bias = original_bias + instance.fd_step
    up = episode_loss()
    model.modulate.output_bias = original_bias - instance.fd_step
    down = episode_loss()
    model.modulate.output_bias = original_bias
    numeric = (up - down) / (2 * instance.fd_step)
    entries.append(
        GradCheckEntry(
            part="episode",
            parameter="modulate.output_bias",
            index=(),
            analytic=float(modulate_grads.output_bias),
            numeric=float(numeric),
            relative_error=_relative_error(modulate_grads.output_bias, numeric),
        )
    )

    entries.sort(key=lambda e: e.relative_error, reverse=True)
    return GradCheckReport(
        max_relative_error=entries[0].relative_error if entries else 0.0,
        worst=entries[:10],
        encoder_grads_zero=encoder_grads_zero,
    )

"""Synthetic latent-space data for desk-scale episodic experiments.

Classes are Gaussian blobs around rejection-sampled means that are kept at
least ``min_separation`` apart, split into disjoint base / validation /
novel groups.  An "image" is a latent vector; "cropping" it perturbs the
latent with Gaussian noise, except that with probability
``semantic_flip_prob`` the patch is resampled from a class-agnostic
background distribution instead, so a crop can lose the image's semantics
entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPLITS = ("base", "val", "novel")


class InfeasibleWorldError(ValueError):
    """Requested class count / separation cannot fit in the latent space."""


@dataclass(frozen=True)
class WorldConfig:
    num_base_classes: int = 64
    num_val_classes: int = 16
    num_novel_classes: int = 20
    latent_dim: int = 32
    mean_scale: float = 1.0
    min_separation: float = 3.0
    intra_class_sigma: float = 0.25
    crop_sigma: float = 0.25
    semantic_flip_prob: float = 0.0
    background_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.num_base_classes, self.num_novel_classes) < 1:
            raise ValueError("need at least one base and one novel class")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")
        if self.intra_class_sigma <= 0 or self.crop_sigma < 0:
            raise ValueError("sigmas must be positive")
        if not 0 <= self.semantic_flip_prob < 1:
            raise ValueError("semantic_flip_prob must lie in [0, 1)")


@dataclass
class SyntheticWorld:
    base_class_means: np.ndarray
    val_class_means: np.ndarray
    novel_class_means: np.ndarray
    intra_class_sigma: float
    crop_sigma: float
    semantic_flip_prob: float
    background_scale: float
    rng_seed: int

    @property
    def latent_dim(self):
        return self.base_class_means.shape[1]

    @property
    def num_base_classes(self):
        return self.base_class_means.shape[0]

    def class_means(self, split):
        if split == "base":
            return self.base_class_means
        if split == "val":
            return self.val_class_means
        if split == "novel":
            return self.novel_class_means
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")


def generate_world(config):
    """Deterministically build a world from its config.

    Means are rejection-sampled from N(0, mean_scale^2 I) until every pair
    (across all splits) is at least ``min_separation`` apart; when a mean
    cannot be placed within the attempt budget the request is infeasible.
    """
    rng = np.random.default_rng(config.seed)
    total = config.num_base_classes + config.num_val_classes + config.num_novel_classes
    means = np.empty((total, config.latent_dim))
    placed = 0
    attempts_per_mean = 2000
    for index in range(total):
        for _ in range(attempts_per_mean):
            candidate = rng.normal(scale=config.mean_scale, size=config.latent_dim)
            if placed == 0:
                break
            distances = np.linalg.norm(means[:placed] - candidate, axis=1)
            if np.all(distances >= config.min_separation):
                break
        else:
            raise InfeasibleWorldError(
                f"could not place class mean {index + 1}/{total} with separation "
                f"{config.min_separation} in {config.latent_dim} dimensions"
            )
        means[placed] = candidate
        placed += 1

    n_base = config.num_base_classes
    n_val = config.num_val_classes
    return SyntheticWorld(
        base_class_means=means[:n_base],
        val_class_means=means[n_base : n_base + n_val],
        novel_class_means=means[n_base + n_val :],
        intra_class_sigma=config.intra_class_sigma,
        crop_sigma=config.crop_sigma,
        semantic_flip_prob=config.semantic_flip_prob,
        background_scale=config.background_scale,
        rng_seed=config.seed,
    )


def sample_class_latents(world, rng, split, class_index, count):
    """Draw image latents around one class mean."""
    mean = world.class_means(split)[class_index]
    return mean + world.intra_class_sigma * rng.normal(size=(count, world.latent_dim))


def crop_patches(world, image_latent, count, rng):
    """Simulated random crops of one image latent.

    Each patch is the latent plus crop noise, except that with probability
    ``semantic_flip_prob`` it is resampled from the background distribution
    (losing any class information).  Both noise draws are consumed for every
    patch so the stream layout does not depend on the flip outcomes.
    """
    if count < 1:
        raise ValueError("patch count must be at least 1")
    latent = np.asarray(image_latent, dtype=np.float64)
    flips = rng.random(count) < world.semantic_flip_prob
    noise = world.crop_sigma * rng.normal(size=(count, latent.size))
    background = world.background_scale * rng.normal(size=(count, latent.size))
    return np.where(flips[:, None], background, latent[None, :] + noise)


@dataclass
class EpisodeTask:
    """One N-way K-shot task with Q queries per class.

    Labels are episode-local (0..N-1); ``class_ids`` maps them back to the
    split's class indices.
    """

    support_latents: np.ndarray
    support_labels: np.ndarray
    query_latents: np.ndarray
    query_labels: np.ndarray
    n_way: int
    n_shot: int
    n_query: int
    class_ids: np.ndarray
    split: str

    def __post_init__(self):
        if self.support_latents.shape[0] != self.n_way * self.n_shot:
            raise ValueError("support size does not match n_way * n_shot")
        if self.query_latents.shape[0] != self.n_way * self.n_query:
            raise ValueError("query size does not match n_way * n_query")
        for label in range(self.n_way):
            if np.count_nonzero(self.support_labels == label) != self.n_shot:
                raise ValueError(f"class {label} does not have exactly {self.n_shot} supports")
            if np.count_nonzero(self.query_labels == label) != self.n_query:
                raise ValueError(f"class {label} does not have exactly {self.n_query} queries")


def sample_episode(world, rng, split, n_way, n_shot, n_query):
    """Draw a task whose classes all come from one split."""
    means = world.class_means(split)
    if n_way > means.shape[0]:
        raise ValueError(
            f"cannot sample {n_way} classes from split {split!r} with {means.shape[0]} classes"
        )
    class_ids = rng.choice(means.shape[0], size=n_way, replace=False)
    support, squery = [], []
    support_labels, query_labels = [], []
    for label, class_index in enumerate(class_ids):
        latents = sample_class_latents(world, rng, split, class_index, n_shot + n_query)
        support.append(latents[:n_shot])
        squery.append(latents[n_shot:])
        support_labels.extend([label] * n_shot)
        query_labels.extend([label] * n_query)
    return EpisodeTask(
        support_latents=np.concatenate(support),
        support_labels=np.array(support_labels),
        query_latents=np.concatenate(squery),
        query_labels=np.array(query_labels),
        n_way=n_way,
        n_shot=n_shot,
        n_query=n_query,
        class_ids=np.asarray(class_ids),
        split=split,
    )

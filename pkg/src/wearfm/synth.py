"""Synthetic corpus and task generation from diagonal Gaussian mixtures.

The healthy pre-training corpus is drawn from a mixture model (either fitted
to real instances with EM or a seeded stand-in model), and labeled synthetic
tasks place one mixture per class with a controlled mean separation so the
achievable accuracy is known by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datapipe import SEQUENCE_TOKENS, SensorSequence, SplitDataset, chronological_split
from .errors import ValidationError
from .seeding import rng_from

VARIANCE_FLOOR = 1e-6


@dataclass
class GmmModel:
    """Diagonal-covariance Gaussian mixture."""

    weights: np.ndarray  # (M,)
    means: np.ndarray  # (M, D)
    variances: np.ndarray  # (M, D)
    log_likelihoods: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.weights.ndim != 1 or self.means.ndim != 2 or self.variances.shape != self.means.shape:
            raise ValidationError("inconsistent mixture shapes")
        if (self.weights < 0).any() or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValidationError("mixture weights must be a simplex")
        if (self.variances < 0).any():
            raise ValidationError("variances must be non-negative")

    @property
    def components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _log_prob(x: np.ndarray, model: GmmModel) -> np.ndarray:
    """Per-sample, per-component log densities, shape (N, M)."""
    var = np.maximum(model.variances, VARIANCE_FLOOR)
    diff = x[:, None, :] - model.means[None, :, :]
    quad = (diff * diff / var[None, :, :]).sum(axis=2)
    log_norm = 0.5 * (np.log(2.0 * np.pi) * model.dim + np.log(var).sum(axis=1))
    return np.log(np.maximum(model.weights, 1e-300))[None, :] - log_norm[None, :] - 0.5 * quad


def log_likelihood(x: np.ndarray, model: GmmModel) -> float:
    lp = _log_prob(x, model)
    m = lp.max(axis=1, keepdims=True)
    return float((m[:, 0] + np.log(np.exp(lp - m).sum(axis=1))).sum())


def gmm_fit(
    x: np.ndarray,
    components: int,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-6,
) -> GmmModel:
    """Fit a diagonal mixture with EM until the total log-likelihood improves
    by less than `tol` (or `max_iter` iterations)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"gmm_fit expects (N, D) instances, got shape {x.shape}")
    n, d = x.shape
    if n < components:
        raise ValidationError(f"need at least {components} samples, got {n}")

    rng = rng_from(seed, "gmm-init")
    picks = rng.choice(n, size=components, replace=False)
    means = x[picks].copy()
    base_var = np.maximum(x.var(axis=0), VARIANCE_FLOOR)
    variances = np.tile(base_var, (components, 1))
    weights = np.full(components, 1.0 / components)
    model = GmmModel(weights=weights, means=means, variances=variances)

    history: list[float] = []
    prev = -np.inf
    for _ in range(max_iter):
        lp = _log_prob(x, model)
        m = lp.max(axis=1, keepdims=True)
        log_total = m[:, 0] + np.log(np.exp(lp - m).sum(axis=1))
        ll = float(log_total.sum())
        history.append(ll)
        resp = np.exp(lp - log_total[:, None])  # (N, M)
        nk = resp.sum(axis=0)
        nk_safe = np.maximum(nk, 1e-12)
        means = (resp.T @ x) / nk_safe[:, None]
        sq = resp.T @ (x * x) / nk_safe[:, None]
        variances = np.maximum(sq - means * means, VARIANCE_FLOOR)
        weights = nk / n
        weights = weights / weights.sum()
        model = GmmModel(weights=weights, means=means, variances=variances)
        if ll - prev < tol and np.isfinite(prev):
            break
        prev = ll
    model.log_likelihoods = history
    return model


def gmm_sample(model: GmmModel, n: int, seed: int = 0) -> np.ndarray:
    """Draw n instances: component by weight, then a diagonal Gaussian draw."""
    if n < 1:
        raise ValidationError("need n >= 1 samples")
    rng = rng_from(seed, "gmm-sample")
    comps = rng.choice(model.components, size=n, p=model.weights)
    noise = rng.standard_normal((n, model.dim))
    return model.means[comps] + noise * np.sqrt(model.variances[comps])


def default_healthy_model(dim: int = 128, components: int = 8, seed: int = 7) -> GmmModel:
    """Stand-in mixture for a healthy-wearer corpus on standardized features."""
    rng = rng_from(seed, "healthy-model")
    raw = rng.uniform(0.5, 1.5, size=components)
    weights = raw / raw.sum()
    means = rng.normal(0.0, 1.0, size=(components, dim))
    variances = rng.uniform(0.05, 0.25, size=(components, dim))
    return GmmModel(weights=weights, means=means, variances=variances)


def instances_to_sequences(
    x: np.ndarray, subject_id: str = "synthetic", label: int | None = None, task_id=None
) -> list[SensorSequence]:
    """Pack instances into 15-token sequences; the remainder is dropped."""
    x = np.asarray(x, dtype=np.float64)
    n_seq = x.shape[0] // SEQUENCE_TOKENS
    out = []
    for i in range(n_seq):
        tokens = x[i * SEQUENCE_TOKENS : (i + 1) * SEQUENCE_TOKENS]
        out.append(SensorSequence(tokens, subject_id=subject_id, label=label, task_id=task_id))
    return out


def make_corpus(n_instances: int = 100_000, model: GmmModel | None = None, seed: int = 0):
    """Healthy pre-training corpus: sampled instances packed into sequences."""
    model = model or default_healthy_model()
    x = gmm_sample(model, n_instances, seed=seed)
    return instances_to_sequences(x, subject_id="healthy-corpus")


@dataclass
class SyntheticTaskSpec:
    """Recipe for a labeled task with known class separability.

    `separation` is the minimum Euclidean distance between class means in
    units of the per-feature noise scale; `nominal_bayes_accuracy` documents
    the sequence-level accuracy an ideal classifier would reach (15 tokens
    per sequence multiply the effective separation by sqrt(15)).
    """

    task_id: str
    class_models: list[GmmModel]
    sequences_per_class: int
    seed: int = 0
    separation: float | None = None
    nominal_bayes_accuracy: float | None = None

    def __post_init__(self):
        if len(self.class_models) < 2:
            raise ValidationError("a task needs at least 2 classes")
        if self.sequences_per_class < 1:
            raise ValidationError("need at least one sequence per class")

    @property
    def classes(self) -> int:
        return len(self.class_models)


def separated_task_spec(
    task_id: str,
    classes: int,
    separation: float,
    sequences_per_class: int,
    dim: int = 128,
    seed: int = 0,
    base_model: GmmModel | None = None,
    noise: float = 1.0,
) -> SyntheticTaskSpec:
    """Place one Gaussian per class at pairwise mean distance `separation`.

    Class means sit on orthogonal axes (scaled by 1/sqrt(2) so the pairwise
    distance equals `separation`), offset from the base model's overall mean
    so tasks live in the same region of feature space as the healthy corpus.
    """
    if classes > dim:
        raise ValidationError("need dim >= classes for orthogonal placement")
    base_mean = np.zeros(dim) if base_model is None else base_model.means.mean(axis=0)
    rng = rng_from(seed, "task-axes")
    axes = rng.permutation(dim)[:classes]
    models = []
    for c in range(classes):
        mean = base_mean.copy()
        mean[axes[c]] += separation / math.sqrt(2.0)
        var = np.full(dim, float(noise) ** 2)
        models.append(GmmModel(weights=np.array([1.0]), means=mean[None, :], variances=var[None, :]))
    pooled = separation * math.sqrt(SEQUENCE_TOKENS) / 2.0
    pairwise_err = 0.5 * math.erfc(pooled / math.sqrt(2.0))
    bayes = max(0.0, 1.0 - (classes - 1) * pairwise_err)
    return SyntheticTaskSpec(
        task_id=task_id,
        class_models=models,
        sequences_per_class=sequences_per_class,
        seed=seed,
        separation=separation,
        nominal_bayes_accuracy=bayes,
    )


def make_synthetic_task(spec: SyntheticTaskSpec) -> SplitDataset:
    """Sample the task and split it chronologically, one subject per class,
    so every split stays class-balanced."""
    sequences: list[SensorSequence] = []
    for cls, model in enumerate(spec.class_models):
        x = gmm_sample(model, spec.sequences_per_class * SEQUENCE_TOKENS, seed=spec.seed * 1000 + cls)
        sequences.extend(
            instances_to_sequences(x, subject_id=f"{spec.task_id}-c{cls}", label=cls, task_id=spec.task_id)
        )
    ds = chronological_split(sequences)
    ds.provenance["synthetic"] = {
        "task_id": spec.task_id,
        "classes": spec.classes,
        "sequences_per_class": spec.sequences_per_class,
        "seed": spec.seed,
        "separation": spec.separation,
        "nominal_bayes_accuracy": spec.nominal_bayes_accuracy,
    }
    return ds

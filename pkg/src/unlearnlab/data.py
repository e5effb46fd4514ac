"""Synthetic datasets and forget/retain splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .nn_core import Batch

SCENARIOS = ("random_fraction", "class_fraction")


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "random_fraction"
    fraction: float = 0.10
    target_class: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if not 0.0 < self.fraction < 1.0:
            raise ValueError("fraction must lie in (0, 1)")
        if self.scenario == "class_fraction" and self.target_class is None:
            raise ValueError("class_fraction needs a target_class")


@dataclass(frozen=True)
class DatasetSplit:
    train: Batch
    test: Batch
    retain: Batch
    forget: Batch
    retain_idx: np.ndarray
    forget_idx: np.ndarray
    scenario: str
    fraction: float
    target_class: int | None = None


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def make_gaussian_blobs(num_classes=4, per_class=500, dim=16, separation=3.0, seed=0, test_per_class=None):
    """Isotropic unit-variance Gaussian classes.

    Class means sit on the vertices of a regular simplex with edge length
    ``separation`` (centred at the origin), so every pair of classes is
    equally hard to tell apart. Returns ``(train, test)``; ``test`` holds
    ``test_per_class`` fresh draws per class (default ``per_class``).
    """
    if per_class < 2:
        raise ValueError("per_class must be at least 2")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    if dim < num_classes:
        raise ValueError("dim must be at least num_classes for simplex means")
    test_per_class = per_class if test_per_class is None else test_per_class
    rng = np.random.default_rng(seed)
    means = np.zeros((num_classes, dim))
    means[:, :num_classes] = np.eye(num_classes) * separation / np.sqrt(2.0)
    means -= means.mean(axis=0)

    def draw(n):
        y = np.repeat(np.arange(num_classes), n)
        x = means[y] + rng.normal(size=(len(y), dim))
        perm = rng.permutation(len(y))
        return Batch(x[perm], y[perm])

    return draw(per_class), draw(test_per_class)


def make_rings(num_classes=2, per_class=500, dim=2, separation=1.0, seed=0, noise=0.15, test_per_class=None):
    """Concentric rings, one per class, in the first two coordinates.

    Class ``k`` lies near radius ``(k + 1) * separation``; the remaining
    ``dim - 2`` coordinates carry pure ``noise``. Not linearly separable.
    """
    if per_class < 2:
        raise ValueError("per_class must be at least 2")
    if dim < 2:
        raise ValueError("dim must be at least 2")
    test_per_class = per_class if test_per_class is None else test_per_class
    rng = np.random.default_rng(seed)

    def draw(n):
        y = np.repeat(np.arange(num_classes), n)
        angle = rng.uniform(0.0, 2 * np.pi, size=len(y))
        radius = (y + 1) * separation + rng.normal(scale=noise, size=len(y))
        x = rng.normal(scale=noise, size=(len(y), dim))
        x[:, 0] = radius * np.cos(angle)
        x[:, 1] = radius * np.sin(angle)
        perm = rng.permutation(len(y))
        return Batch(x[perm], y[perm])

    return draw(per_class), draw(test_per_class)


GENERATORS = {"blobs": make_gaussian_blobs, "rings": make_rings}


def split_forget(train: Batch, test: Batch, config: ScenarioConfig) -> DatasetSplit:
    """Draw the forget set uniformly without replacement.

    ``random_fraction`` picks ``round(fraction * |train|)`` examples from the
    whole training set; ``class_fraction`` picks ``round(fraction * n_k)``
    among the ``n_k`` members of ``target_class``. Rounding is half-up.
    """
    rng = np.random.default_rng(config.seed)
    n = len(train)
    if config.scenario == "random_fraction":
        pool = np.arange(n)
    else:
        pool = np.flatnonzero(train.y == config.target_class)
        if len(pool) == 0:
            raise ValueError(f"class {config.target_class} has no training members")
    k = _round_half_up(config.fraction * len(pool))
    if k == 0:
        raise ValueError("forget set would be empty")
    if k == n:
        raise ValueError("retain set would be empty")
    forget_idx = np.sort(rng.choice(pool, size=k, replace=False))
    retain_mask = np.ones(n, dtype=bool)
    retain_mask[forget_idx] = False
    retain_idx = np.flatnonzero(retain_mask)
    return DatasetSplit(
        train=train,
        test=test,
        retain=train.subset(retain_idx),
        forget=train.subset(forget_idx),
        retain_idx=retain_idx,
        forget_idx=forget_idx,
        scenario=config.scenario,
        fraction=config.fraction,
        target_class=config.target_class,
    )


def randomize_labels(batch: Batch, num_classes: int, seed) -> Batch:
    """Replace every label by one drawn uniformly from the *other* classes."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    shift = rng.integers(1, num_classes, size=len(batch))
    return Batch(batch.x.copy(), (batch.y + shift) % num_classes)


def relabeled_train(split: DatasetSplit, num_classes: int, seed) -> Batch:
    """The training set with forget-set labels randomised (retain untouched)."""
    y = split.train.y.copy()
    y[split.forget_idx] = randomize_labels(split.forget, num_classes, seed).y
    return Batch(split.train.x, y)


def batches(source: Batch, batch_size: int, seed) -> Iterator[Batch]:
    """One epoch: a seeded permutation cut into consecutive chunks."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = rng.permutation(len(source))
    for start in range(0, len(perm), batch_size):
        yield source.subset(perm[start : start + batch_size])


def save_csv(path, batch: Batch) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(batch.x.shape[1])] + ["label"])
        for row, label in zip(batch.x, batch.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path) -> Batch:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    x = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64).reshape(len(body), -1)
    y = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return Batch(x, y)


def export_split(directory, split: DatasetSplit) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in ("train", "test", "retain", "forget"):
        save_csv(d / f"{name}.csv", getattr(split, name))

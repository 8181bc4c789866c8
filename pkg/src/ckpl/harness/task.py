"""Synthetic pre-patchified classification tasks.

Each class has a mean patch grid. A sample is its class mean plus isotropic
patch noise plus a per-sample "style" offset drawn from a low-rank nuisance
subspace and shared by all patches. The nuisance carries no label information
but dominates cosine geometry, so a nearest-centroid base learner errs while
a trained linear read-out can learn to ignore it. Hard-tail samples get their
style offset scaled up by ``tail_scale`` and their center moved a fraction
``tail_shift`` of the way toward another class's mean.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


class TaskSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticTaskSpec:
    num_classes: int = 4
    samples_per_class: int = 100
    num_patches: int = 4
    embed_dim: int = 16
    cluster_spread: float = 0.3
    hard_tail_fraction: float = 0.4
    label_noise: float = 0.0
    seed: int = 0
    test_fraction: float = 0.5
    nuisance_rank: int = 1
    nuisance_scale: float = 4.0
    tail_scale: float = 3.0
    class_sep: float = 0.7
    tail_shift: float = 0.0

    def validate(self) -> None:
        if self.num_classes < 1:
            raise TaskSpecError("num_classes must be >= 1")
        if self.samples_per_class < 2:
            raise TaskSpecError("samples_per_class must be >= 2 (train and test)")
        if self.num_patches < 1 or self.embed_dim < 1:
            raise TaskSpecError("num_patches and embed_dim must be positive")
        for name in ("hard_tail_fraction", "label_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise TaskSpecError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 < self.test_fraction < 1.0:
            raise TaskSpecError("test_fraction must lie in (0, 1)")
        if self.cluster_spread < 0 or self.nuisance_scale < 0 or self.tail_scale < 1:
            raise TaskSpecError("spread and nuisance scales must be >= 0, tail_scale >= 1")
        if not 0.0 <= self.tail_shift < 1.0:
            raise TaskSpecError("tail_shift must lie in [0, 1)")
        if not 0 <= self.nuisance_rank <= self.embed_dim:
            raise TaskSpecError("nuisance_rank must lie in [0, embed_dim]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    patches: np.ndarray      # (n, E, d)
    labels: np.ndarray       # (n,)
    ids: np.ndarray          # (n,) global sample ids
    hard_tail: np.ndarray    # (n,) bool

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Task:
    spec: SyntheticTaskSpec
    class_names: list[str]
    train: Dataset
    test: Dataset


def _class_names(n: int) -> list[str]:
    return [f"class_{i:02d}" for i in range(n)]


def generate_task(spec: SyntheticTaskSpec) -> Task:
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x7461736B]))
    c, m, e, d = spec.num_classes, spec.samples_per_class, spec.num_patches, spec.embed_dim
    means = rng.normal(0, spec.class_sep, (c, e, d))
    basis = np.linalg.qr(rng.normal(size=(d, d)))[0][:, :spec.nuisance_rank].T  # (r, d)

    labels = np.repeat(np.arange(c), m)
    n = len(labels)
    tail = np.zeros(n, dtype=bool)
    n_tail = int(round(spec.hard_tail_fraction * m))
    for k in range(c):
        rows = np.flatnonzero(labels == k)
        tail[rng.choice(rows, n_tail, replace=False)] = True
    scale = np.where(tail, spec.tail_scale, 1.0)[:, None, None]
    noise = rng.normal(0, spec.cluster_spread, (n, e, d))
    style = rng.normal(0, spec.nuisance_scale, (n, spec.nuisance_rank)) @ basis
    # tail samples slide part of the way toward a random other class mean;
    # a separate stream keeps unshifted tasks identical
    shift_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x7368696674]))
    other = (labels + shift_rng.integers(1, max(c, 2), n)) % c
    shift = np.where(tail, spec.tail_shift, 0.0)[:, None, None]
    centers = (1 - shift) * means[labels] + shift * means[other]
    patches = centers + noise + scale * style[:, None, :]

    observed = labels.copy()
    if spec.label_noise > 0 and c > 1:
        flip = rng.random(n) < spec.label_noise
        shift = rng.integers(1, c, n)
        observed[flip] = (labels[flip] + shift[flip]) % c

    # per-class stratified split keeps class balance within one sample
    test_mask = np.zeros(n, dtype=bool)
    n_test = max(1, min(m - 1, int(round(spec.test_fraction * m))))
    for k in range(c):
        rows = np.flatnonzero(labels == k)
        test_mask[rng.choice(rows, n_test, replace=False)] = True
    ids = np.arange(n)

    def part(mask):
        return Dataset(patches[mask], observed[mask], ids[mask], tail[mask])

    return Task(spec, _class_names(c), part(~test_mask), part(test_mask))


def save_task(task: Task, path) -> None:
    np.savez(
        path,
        train_patches=task.train.patches, train_labels=task.train.labels,
        train_ids=task.train.ids, train_tail=task.train.hard_tail,
        test_patches=task.test.patches, test_labels=task.test.labels,
        test_ids=task.test.ids, test_tail=task.test.hard_tail,
        class_names=np.array(task.class_names),
    )

"""Difficulty scoring by cosine distance to class centroids, and the two-stage easy-to-hard protocol."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .knowledge import build_triplets, predict_base
from .training import FeatureBank, Metrics, TrainConfig, TrainState, evaluate, fit, predict

log = logging.getLogger(__name__)


class MissingCentroidError(LookupError):
    pass


@dataclass
class ClassCentroids:
    centroids: dict[int, np.ndarray]
    counts: dict[int, int]

    def __getitem__(self, c: int) -> np.ndarray:
        try:
            return self.centroids[c]
        except KeyError:
            raise MissingCentroidError(f"class {c} has no samples, so no centroid") from None

    def matrix(self, num_classes: int) -> np.ndarray:
        return np.stack([self[c] for c in range(num_classes)])


def class_centroids(features, labels) -> ClassCentroids:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    cents, counts = {}, {}
    for c in np.unique(labels):
        members = features[labels == c]
        cents[int(c)] = members.mean(axis=0)
        counts[int(c)] = len(members)
    return ClassCentroids(cents, counts)


def difficulty(feature, centroid) -> float | np.ndarray:
    """Cosine distance 1 - cos(e, o); degenerate vectors score 1."""
    return 1.0 - nx.cosine_similarity(nx.as_tensor(feature), nx.as_tensor(centroid)).values


def score_samples(features, labels, centroids: ClassCentroids) -> np.ndarray:
    labels = np.asarray(labels)
    cmat = np.stack([centroids[int(c)] for c in labels]) if len(labels) else np.zeros((0, 1))
    return difficulty(np.asarray(features, dtype=np.float64), cmat)


@dataclass
class CurriculumSplit:
    easy_ids: dict[int, list[int]]
    hard_ids: dict[int, list[int]]
    scores: dict[int, float] = field(repr=False)
    labels: dict[int, int] = field(repr=False, default_factory=dict)
    scores_hard: dict[int, float] = field(repr=False, default_factory=dict)

    def all_easy(self) -> list[int]:
        return [i for c in sorted(self.easy_ids) for i in self.easy_ids[c]]

    def all_hard(self) -> list[int]:
        return [i for c in sorted(self.hard_ids) for i in self.hard_ids[c]]

    def write_csv(self, path) -> None:
        import csv

        easy, hard = set(self.all_easy()), set(self.all_hard())
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            # D_easy: frozen base features; D_hard: stage-1 model features
            w.writerow(["sample_id", "class", "D_easy", "D_hard", "stage"])
            for sid in sorted(self.scores):
                stage = "easy" if sid in easy else "hard" if sid in hard else "unused"
                d_h = self.scores_hard.get(sid)
                w.writerow([sid, self.labels.get(sid, ""), repr(float(self.scores[sid])),
                            "" if d_h is None else repr(float(d_h)), stage])


def _select(ids, labels, scores, n: int, hardest: bool, exclude=()) -> dict[int, list[int]]:
    if n < 1:
        raise nx.ParameterError(f"N must be >= 1, got {n}")
    ids = np.asarray(ids)
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    excluded = set(int(i) for i in exclude)
    out = {}
    for c in np.unique(labels):
        rows = [r for r in np.flatnonzero(labels == c) if int(ids[r]) not in excluded]
        # stable: ties resolved by lower sample id in both directions
        key = (lambda r: (-scores[r], ids[r])) if hardest else (lambda r: (scores[r], ids[r]))
        rows.sort(key=key)
        if len(rows) < n:
            log.warning("class %d has only %d eligible samples for N=%d", c, len(rows), n)
        out[int(c)] = [int(ids[r]) for r in rows[:n]]
    return out


def select_easy(ids, labels, scores, n: int, exclude=()) -> dict[int, list[int]]:
    """Per class, the ``n`` samples with the lowest difficulty."""
    return _select(ids, labels, scores, n, hardest=False, exclude=exclude)


def select_hard(ids, labels, scores, n: int, exclude=()) -> dict[int, list[int]]:
    """Per class, the ``n`` samples with the highest difficulty."""
    return _select(ids, labels, scores, n, hardest=True, exclude=exclude)


def _require_centroids(labels, num_classes: int, centroids: ClassCentroids) -> None:
    for c in range(num_classes):
        centroids[c]


@dataclass
class TwoStageResult:
    metrics_e: Metrics
    metrics_h: Metrics
    split: CurriculumSplit
    state_e: TrainState
    state_h: TrainState
    logs_e: list = field(default_factory=list)
    logs_h: list = field(default_factory=list)


def run_two_stage(state: TrainState, train: FeatureBank, test: FeatureBank, config: TrainConfig, n: int,
                  exclude_easy: bool = True, hard_lr_initial: float | None = None,
                  on_epoch=None) -> TwoStageResult:
    """Train IOTA-e on the easiest ``n`` per class, then IOTA-h on the hardest ``n``.

    Stage 2 scores the pool with IOTA-e's features and predictions (the
    updated base learner). Test metrics are reported against the original
    frozen base learner's predictions. ``state`` is trained in place for stage 1.
    ``on_epoch(stage, log)`` receives ``"easy"`` or ``"hard"`` with each epoch log.
    """
    if n < 1:
        raise nx.ParameterError(f"N must be >= 1, got {n}")
    num_classes = state.prompt_set.size
    base_cents = class_centroids(train.cls_features, train.labels)
    _require_centroids(train.labels, num_classes, base_cents)
    cmat = base_cents.matrix(num_classes)
    base_train_pred = predict_base(train.cls_features, cmat)
    base_test_pred = predict_base(test.cls_features, cmat)

    scores_e = score_samples(train.cls_features, train.labels, base_cents)
    easy = select_easy(train.ids, train.labels, scores_e, n)
    easy_ids = [i for c in sorted(easy) for i in easy[c]]
    stage1 = train.select_ids(easy_ids)
    trip_e = {t.sample_id: t for t in build_triplets(stage1.labels, base_train_pred[_rows(train, easy_ids)],
                                                     stage1.ids)}
    logs_e = fit(state, stage1, trip_e, config, config.lr_initial, test, base_test_pred, _tagged(on_epoch, "easy"))
    metrics_e = evaluate(state, test, base_test_pred, config)

    # IOTA-e is now the base learner for scoring and corrective knowledge
    preds_e, out_e = predict(state, train, config)
    feats_e = out_e.c_out.values
    cents_e = class_centroids(feats_e, train.labels)
    scores_h = score_samples(feats_e, train.labels, cents_e)
    hard = select_hard(train.ids, train.labels, scores_h, n, exclude=easy_ids if exclude_easy else ())
    hard_ids = [i for c in sorted(hard) for i in hard[c]]
    if not hard_ids:
        raise nx.ParameterError("no samples left for the hard stage")
    stage2 = train.select_ids(hard_ids)
    trip_h = {t.sample_id: t for t in build_triplets(stage2.labels, preds_e[_rows(train, hard_ids)], stage2.ids)}
    state_h = state.clone()
    lr_h = config.lr_initial_hard_stage if hard_lr_initial is None else hard_lr_initial
    logs_h = fit(state_h, stage2, trip_h, config, lr_h, test, base_test_pred, _tagged(on_epoch, "hard"))
    metrics_h = evaluate(state_h, test, base_test_pred, config)

    split = CurriculumSplit(
        easy_ids=easy, hard_ids=hard,
        scores={int(i): float(s) for i, s in zip(train.ids, scores_e)},
        labels={int(i): int(c) for i, c in zip(train.ids, train.labels)},
        scores_hard={int(i): float(s) for i, s in zip(train.ids, scores_h)},
    )
    return TwoStageResult(metrics_e, metrics_h, split, state, state_h, logs_e, logs_h)


def _tagged(on_epoch, stage: str):
    if on_epoch is None:
        return None
    return lambda rec: on_epoch(stage, rec)


def _rows(bank: FeatureBank, ids: Sequence[int]) -> np.ndarray:
    pos = {int(i): r for r, i in enumerate(bank.ids)}
    return np.array([pos[int(i)] for i in ids], dtype=np.int64)

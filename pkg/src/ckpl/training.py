"""Two-pass forward, combined loss, SGD with cosine annealing, and evaluation."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .encoders import BaseLearner, KnowledgeEncoder, NCLSToken, encode_image, forward_with_prompts
from .knowledge import CorrectiveTriplet, KnowledgePromptSet, PromptTemplate, build_prompt_set
from .numerics import Tensor
from .selection import MatchDistribution, MatchHead, aggregate_prompt, ckg_loss, compute_match_token, match_distribution


@dataclass
class TrainConfig:
    lam: float = 0.2
    tau: float = 0.1
    prompt_length: int = 2
    epochs: int = 50
    batch_size: int = 32
    lr_initial: float = 0.003
    lr_final: float = 0.0001
    lr_initial_hard_stage: float = 0.0005
    seed: int = 0
    inject_depth: tuple[int, ...] | None = None  # None: every block
    hidden_dim: int | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise nx.ParameterError(f"lambda must be >= 0, got {self.lam}")
        if not self.tau > 0:
            raise nx.ParameterError(f"tau must be > 0, got {self.tau}")
        if self.prompt_length < 1 or self.epochs < 1 or self.batch_size < 1:
            raise nx.ParameterError("prompt_length, epochs and batch_size must be positive")
        if self.lr_final > self.lr_initial:
            raise nx.ParameterError("lr_final must not exceed lr_initial")


@dataclass
class Classifier:
    weights: Tensor  # (C, d_t)
    bias: Tensor     # (C,)

    @classmethod
    def init(cls, num_classes: int, d_t: int, seed: int = 0, scale: float = 0.02):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x636C6173]))
        return cls(nx.parameter(rng.normal(0, scale, (num_classes, d_t)), "classifier.weights"),
                   nx.parameter(np.zeros(num_classes), "classifier.bias"))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weights.transpose() + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.weights, self.bias]


@dataclass
class FeatureBank:
    """Per-sample frozen quantities: labels, c_L from the plain pass, and x^p_0."""

    ids: np.ndarray
    labels: np.ndarray
    cls_features: np.ndarray
    patch_tokens: np.ndarray

    @classmethod
    def build(cls, model: BaseLearner, patches: np.ndarray, labels, ids=None) -> FeatureBank:
        patches = np.asarray(patches, dtype=np.float64)
        c_L, _ = encode_image(model, patches)
        with nx.no_grad():
            xp = model.embed_patches(patches).values
        ids = np.arange(len(patches)) if ids is None else np.asarray(ids)
        return cls(ids, np.asarray(labels, dtype=np.int64), c_L.values, xp)

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, rows) -> FeatureBank:
        rows = np.asarray(rows, dtype=np.int64)
        return FeatureBank(self.ids[rows], self.labels[rows], self.cls_features[rows], self.patch_tokens[rows])

    def select_ids(self, ids) -> FeatureBank:
        pos = {int(i): r for r, i in enumerate(self.ids)}
        return self.take([pos[int(i)] for i in ids])


@dataclass
class TrainState:
    base: BaseLearner
    prompt_set: KnowledgePromptSet
    head: MatchHead
    ncls: NCLSToken
    classifier: Classifier
    step: int = 0

    def trainables(self) -> list[Tensor]:
        return [*self.head.parameters(), self.prompt_set.prompts, self.ncls.c_prime,
                *self.classifier.parameters()]

    def named_trainables(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.trainables()}

    def trainable_count(self) -> int:
        return sum(t.size for t in self.trainables())

    def clone(self) -> TrainState:
        """Copy of the trainable parameters; frozen modules are shared."""
        new = copy.copy(self)
        new.prompt_set = copy.copy(self.prompt_set)
        new.prompt_set.prompts = nx.parameter(self.prompt_set.prompts.values.copy(), "prompt_set.prompts")
        new.head = MatchHead(*(nx.parameter(t.values.copy(), t.name) for t in self.head.parameters()))
        new.ncls = NCLSToken(nx.parameter(self.ncls.c_prime.values.copy(), "ncls"))
        new.classifier = Classifier(*(nx.parameter(t.values.copy(), t.name)
                                      for t in self.classifier.parameters()))
        return new


def init_state(base: BaseLearner, encoder: KnowledgeEncoder, class_names: Sequence[str],
               template: PromptTemplate, config: TrainConfig) -> TrainState:
    d = base.config.embed_dim
    return TrainState(
        base=base,
        prompt_set=build_prompt_set(class_names, template, encoder, config.prompt_length, d, config.seed),
        head=MatchHead.init(d, config.hidden_dim, config.seed),
        ncls=NCLSToken.from_base(base),
        classifier=Classifier.init(len(class_names), d, config.seed),
    )


@dataclass
class Forward:
    logits: Tensor
    dist: MatchDistribution
    c_out: Tensor


def forward(state: TrainState, bank: FeatureBank, config: TrainConfig) -> Forward:
    """Pass 1 (cached c_L) drives prompt selection; pass 2 runs the injected transformer."""
    m_hat = compute_match_token(state.head, Tensor(bank.cls_features))
    dist = match_distribution(m_hat, state.prompt_set, config.tau)
    agg = aggregate_prompt(m_hat, state.prompt_set, config.tau, weights=dist.probs)
    c_out = forward_with_prompts(state.base, state.ncls, agg.v_hat,
                                 patch_tokens=Tensor(bank.patch_tokens), depth=config.inject_depth)
    return Forward(state.classifier(c_out), dist, c_out)


@dataclass
class LossTerms:
    total: Tensor
    cls: Tensor
    ckg: Tensor


def loss_terms(logits: Tensor, label, dist: MatchDistribution, A, B, lam: float) -> LossTerms:
    if lam < 0:
        raise nx.ParameterError(f"lambda must be >= 0, got {lam}")
    l_cls = nx.mean(nx.cross_entropy(logits, label))
    l_ckg = nx.mean(ckg_loss(dist, A, B))
    return LossTerms(l_cls + l_ckg * lam, l_cls, l_ckg)


def total_loss(logits: Tensor, label, dist: MatchDistribution, A, B, lam: float) -> Tensor:
    """Cross-entropy plus lambda times the corrective-knowledge loss (batch means)."""
    return loss_terms(logits, label, dist, A, B, lam).total


def triplet_indices(state: TrainState, bank: FeatureBank,
                    triplets: Mapping[int, CorrectiveTriplet]) -> tuple[np.ndarray, np.ndarray]:
    a, b = [], []
    for sid in bank.ids:
        try:
            t = triplets[int(sid)]
        except KeyError:
            raise LookupError(f"no corrective triplet for sample {int(sid)}") from None
        ia, ib = state.prompt_set.pair_for(t)
        a.append(ia)
        b.append(ib)
    return np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)


def batch_objective(state: TrainState, bank: FeatureBank, triplets, config: TrainConfig) -> LossTerms:
    A, B = triplet_indices(state, bank, triplets)
    out = forward(state, bank, config)
    return loss_terms(out.logits, bank.labels, out.dist, A, B, config.lam)


@dataclass
class StepLosses:
    total: float
    cls: float
    ckg: float


def train_step(state: TrainState, bank: FeatureBank, triplets, config: TrainConfig, lr: float) -> StepLosses:
    """One SGD step on the batch-mean objective; only trainables move."""
    params = state.trainables()
    for p in params:
        p.grad = None
    terms = batch_objective(state, bank, triplets, config)
    terms.total.backward()
    if lr != 0:
        for p in params:
            if p.grad is not None:
                p.values -= lr * p.grad
    state.step += 1
    return StepLosses(terms.total.item(), terms.cls.item(), terms.ckg.item())


def gradient_paths(state: TrainState, bank: FeatureBank, triplets, config: TrainConfig) -> dict[str, float]:
    """Gradient norm reaching the MATCH head from each loss term separately."""
    out = {}
    for key in ("cls", "ckg"):
        for p in state.trainables():
            p.grad = None
        terms = batch_objective(state, bank, triplets, config)
        target = terms.cls if key == "cls" else terms.ckg * config.lam
        target.backward()
        sq = sum(float((p.grad ** 2).sum()) for p in state.head.parameters() if p.grad is not None)
        out[key] = math.sqrt(sq)
    for p in state.trainables():
        p.grad = None
    return out


def cosine_lr(step: int, total_steps: int, lr_initial: float, lr_final: float) -> float:
    if total_steps == 0:
        return lr_initial
    if not 0 <= step <= total_steps:
        raise nx.ParameterError(f"step {step} outside [0, {total_steps}]")
    return lr_final + 0.5 * (lr_initial - lr_final) * (1 + math.cos(math.pi * step / total_steps))


@dataclass
class Metrics:
    accuracy: float
    loss_cls: float
    loss_ckg: float
    correction_rate: float | None
    per_class_accuracy: dict[int, float]
    predictions: np.ndarray = field(repr=False)
    num_wrong_base: int = 0

    def row(self) -> dict[str, object]:
        return {
            "accuracy": self.accuracy,
            "loss_cls": self.loss_cls,
            "loss_ckg": self.loss_ckg,
            "correction_rate": "" if self.correction_rate is None else self.correction_rate,
            "num_wrong_base": self.num_wrong_base,
        }

    def same_as(self, other: Metrics) -> bool:
        return (self.row() == other.row() and self.per_class_accuracy == other.per_class_accuracy
                and np.array_equal(self.predictions, other.predictions))


def correction_rate(labels, predictions, base_predictions) -> float | None:
    """Accuracy on the samples the base learner gets wrong; None if there are none."""
    labels, predictions, base = map(np.asarray, (labels, predictions, base_predictions))
    wrong = base != labels
    if not wrong.any():
        return None
    return float((predictions[wrong] == labels[wrong]).mean())


def metrics_from_predictions(labels, predictions, base_predictions, loss_cls=float("nan"),
                             loss_ckg=float("nan")) -> Metrics:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    per_class = {int(c): float((predictions[labels == c] == c).mean()) for c in np.unique(labels)}
    return Metrics(
        accuracy=float((predictions == labels).mean()),
        loss_cls=loss_cls,
        loss_ckg=loss_ckg,
        correction_rate=correction_rate(labels, predictions, base_predictions),
        per_class_accuracy=per_class,
        predictions=predictions,
        num_wrong_base=int((np.asarray(base_predictions) != labels).sum()),
    )


def predict(state: TrainState, bank: FeatureBank, config: TrainConfig) -> tuple[np.ndarray, Forward]:
    with nx.no_grad():
        out = forward(state, bank, config)
    return np.argmax(out.logits.values, axis=-1), out


def evaluate(state: TrainState, bank: FeatureBank, base_predictions, config: TrainConfig) -> Metrics:
    base_predictions = np.asarray(base_predictions, dtype=np.int64)
    if len(base_predictions) != len(bank):
        raise nx.DimensionError(f"{len(base_predictions)} base predictions for {len(bank)} samples")
    preds, out = predict(state, bank, config)
    A = np.array([state.prompt_set.entry(int(c)) for c in bank.labels], dtype=np.int64)
    B = np.array([state.prompt_set.entry(int(c)) for c in base_predictions], dtype=np.int64)
    with nx.no_grad():
        terms = loss_terms(out.logits, bank.labels, out.dist, A, B, config.lam)
    return metrics_from_predictions(bank.labels, preds, base_predictions, terms.cls.item(), terms.ckg.item())


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    loss_cls: float
    loss_ckg: float
    accuracy: float | None = None
    correction_rate: float | None = None


def fit(state: TrainState, bank: FeatureBank, triplets: Mapping[int, CorrectiveTriplet], config: TrainConfig,
        lr_initial: float | None = None, eval_bank: FeatureBank | None = None,
        eval_base_predictions=None, on_epoch: Callable[[EpochLog], None] | None = None) -> list[EpochLog]:
    """Train for ``config.epochs`` epochs of seeded shuffled mini-batches."""
    lr0 = config.lr_initial if lr_initial is None else lr_initial
    lr_end = min(config.lr_final, lr0)
    n = len(bank)
    per_epoch = math.ceil(n / config.batch_size)
    total = config.epochs * per_epoch
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x73686666]))
    logs = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(3)
        lr = lr0
        for start in range(0, n, config.batch_size):
            rows = order[start:start + config.batch_size]
            lr = cosine_lr(step, total, lr0, lr_end)
            res = train_step(state, bank.take(rows), triplets, config, lr)
            sums += np.array([res.total, res.cls, res.ckg]) * len(rows)
            step += 1
        _, cls_l, ckg_l = sums / n
        log = EpochLog(epoch, lr, cls_l + config.lam * ckg_l, cls_l, ckg_l)
        if eval_bank is not None:
            m = evaluate(state, eval_bank, eval_base_predictions, config)
            log.accuracy, log.correction_rate = m.accuracy, m.correction_rate
        logs.append(log)
        if on_epoch is not None:
            on_epoch(log)
    return logs


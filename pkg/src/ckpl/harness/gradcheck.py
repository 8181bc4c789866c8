"""Seeded toy instances for finite-difference checks of the CKG and total losses.

A draw fixes one random model (frozen encoder, prompt set, head, NCLS,
classifier) and ``instances`` independent random batches with their own
labels and triplets. Per-instance losses come back as a vector, so one
perturbation sweep checks every instance of the draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import numerics as nx
from ..encoders import BaseLearner, KnowledgeEncoder, VisionEncoderConfig
from ..knowledge import GENERIC, CorrectiveTriplet
from ..selection import ckg_loss, compute_match_token, match_distribution
from ..training import FeatureBank, TrainConfig, TrainState, forward, init_state, triplet_indices

CKG_TOL = 1e-4
TOTAL_TOL = 1e-3


@dataclass
class ToyDraw:
    state: TrainState
    bank: FeatureBank  # instances * batch rows, instance-major
    triplets: dict[int, CorrectiveTriplet]
    config: TrainConfig
    instances: int
    batch: int


def toy_draw(seed: int, instances: int = 1, batch: int = 2, num_layers: int = 2, d_t: int = 16,
             num_classes: int = 4, prompt_length: int = 2, num_patches: int = 4) -> ToyDraw:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6763]))
    base = BaseLearner(VisionEncoderConfig(num_layers, d_t, num_patches, num_heads=2, seed=seed))
    names = [f"c{i}" for i in range(num_classes)]
    enc = KnowledgeEncoder(names, [GENERIC.template_id], d_t, seed=seed)
    cfg = TrainConfig(prompt_length=prompt_length, seed=seed, lam=float(rng.uniform(0.1, 2.0)))
    state = init_state(base, enc, names, GENERIC, cfg)
    # move the classifier off its near-zero init so every term carries signal
    for t in state.classifier.parameters():
        t.values[...] = rng.normal(0, 0.3, t.values.shape)
    n = instances * batch
    labels = rng.integers(0, num_classes, n)
    bank = FeatureBank.build(base, rng.normal(size=(n, num_patches, d_t)), labels)
    wrong = (labels + rng.integers(1, num_classes, n)) % num_classes
    preds = np.where(rng.random(n) < 0.5, labels, wrong)
    preds[::batch] = wrong[::batch]  # every instance exercises the suppression term
    triplets = {int(i): CorrectiveTriplet(int(i), int(a), int(b)) for i, a, b in zip(bank.ids, labels, preds)}
    return ToyDraw(state, bank, triplets, cfg, instances, batch)


def _per_instance(rows: nx.Tensor, draw: ToyDraw) -> nx.Tensor:
    return nx.mean(rows.reshape(draw.instances, draw.batch), axis=-1)


def ckg_losses(draw: ToyDraw) -> nx.Tensor:
    """Batch-mean CKG loss of each instance; only pass 1 is evaluated."""
    A, B = triplet_indices(draw.state, draw.bank, draw.triplets)
    m_hat = compute_match_token(draw.state.head, nx.Tensor(draw.bank.cls_features))
    dist = match_distribution(m_hat, draw.state.prompt_set, draw.config.tau)
    return _per_instance(ckg_loss(dist, A, B), draw)


def total_losses(draw: ToyDraw) -> nx.Tensor:
    """Batch-mean cross-entropy plus lambda times batch-mean CKG, per instance."""
    A, B = triplet_indices(draw.state, draw.bank, draw.triplets)
    out = forward(draw.state, draw.bank, draw.config)
    rows = nx.cross_entropy(out.logits, draw.bank.labels) + ckg_loss(out.dist, A, B) * draw.config.lam
    return _per_instance(rows, draw)


def check_ckg(draw: ToyDraw, h: float = 1e-5, tol: float = CKG_TOL) -> nx.GradCheckReport:
    params = [*draw.state.head.parameters(), draw.state.prompt_set.prompts]
    return nx.grad_check(lambda: ckg_losses(draw), params, h=h, tol=tol)


def check_total(draw: ToyDraw, h: float = 1e-5, tol: float = TOTAL_TOL) -> nx.GradCheckReport:
    return nx.grad_check(lambda: total_losses(draw), draw.state.trainables(), h=h, tol=tol)

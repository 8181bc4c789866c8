"""MATCH token, soft prompt matching, the corrective-knowledge loss, and prompt aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .knowledge import KnowledgePromptSet
from .numerics import DimensionError, Tensor

CKG_EPS = 1e-8


@dataclass
class MatchHead:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    norm_g: Tensor
    norm_b: Tensor

    @classmethod
    def init(cls, d_t: int, hidden_dim: int | None = None, seed: int = 0, scale: float | None = None):
        hidden = d_t if hidden_dim is None else hidden_dim
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D617463]))
        s1 = 1 / np.sqrt(d_t) if scale is None else scale
        s2 = 1 / np.sqrt(hidden) if scale is None else scale
        return cls(
            w1=nx.parameter(rng.normal(0, s1, (d_t, hidden)), "head.w1"),
            b1=nx.parameter(np.zeros(hidden), "head.b1"),
            w2=nx.parameter(rng.normal(0, s2, (hidden, d_t)), "head.w2"),
            b2=nx.parameter(np.zeros(d_t), "head.b2"),
            norm_g=nx.parameter(np.ones(d_t), "head.norm_g"),
            norm_b=nx.parameter(np.zeros(d_t), "head.norm_b"),
        )

    @property
    def d_t(self) -> int:
        return self.w1.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2, self.norm_g, self.norm_b]


def compute_match_token(head: MatchHead, c_L) -> Tensor:
    """m = c_L + relu(norm(mlp(c_L))), with a one-hidden-layer relu MLP."""
    c_L = nx.as_tensor(c_L)
    if c_L.shape[-1] != head.d_t:
        raise DimensionError(f"c_L width {c_L.shape[-1]} != head width {head.d_t}")
    hidden = nx.relu(nx.linear(c_L, head.w1, head.b1))
    delta = nx.relu(nx.layer_norm(nx.linear(hidden, head.w2, head.b2), head.norm_g, head.norm_b))
    return c_L + delta


@dataclass
class MatchDistribution:
    probs: Tensor  # (..., S)
    tau: float


@dataclass
class AggregatedPrompt:
    v_hat: Tensor    # (..., prompt_length, d_t)
    weights: Tensor  # (..., S)


def _similarities(m_hat, prompt_set: KnowledgePromptSet) -> Tensor:
    m_hat = nx.as_tensor(m_hat)
    keys = prompt_set.keys
    if m_hat.shape[-1] != keys.shape[-1]:
        raise DimensionError(f"MATCH token width {m_hat.shape[-1]} != key width {keys.shape[-1]}")
    m = m_hat.reshape(*m_hat.shape[:-1], 1, m_hat.shape[-1])
    return nx.cosine_similarity(m, keys)


def match_distribution(m_hat, prompt_set: KnowledgePromptSet, tau: float = 0.1) -> MatchDistribution:
    return MatchDistribution(nx.softmax_with_temperature(_similarities(m_hat, prompt_set), tau), tau)


def ckg_loss(dist: MatchDistribution, A, B) -> Tensor:
    """-log P(k_A) - [A != B] log(1 - P(k_B) + eps), per row of ``dist``."""
    p = dist.probs
    s = p.shape[-1]
    a = np.asarray(A, dtype=np.int64)
    b = np.asarray(B, dtype=np.int64)
    if np.any((a < 0) | (a >= s)) or np.any((b < 0) | (b >= s)):
        raise IndexError(f"prompt index out of range for set of size {s}: A={A}, B={B}")
    true_term = -nx.log(nx.take_last(p, a))
    wrong = (a != b).astype(np.float64)
    wrong_term = -nx.log(1.0 - nx.take_last(p, b) + CKG_EPS)
    return true_term + wrong_term * wrong


def aggregate_prompt(m_hat, prompt_set: KnowledgePromptSet, tau: float = 0.1,
                     weights: Tensor | None = None) -> AggregatedPrompt:
    """Convex combination of row-normalized prompts, weighted by the matching softmax.

    ``weights`` may be passed to reuse an already-computed matching distribution.
    """
    if weights is None:
        weights = match_distribution(m_hat, prompt_set, tau).probs
    s, p, d = prompt_set.prompts.shape
    normed = nx.l2_normalize(prompt_set.prompts).reshape(s, p * d)
    v_hat = (weights.reshape(-1, s) @ normed).reshape(*weights.shape[:-1], p, d)
    return AggregatedPrompt(v_hat, weights)

"""Corrective-knowledge triplets, true/wrong prompt verbalization, and the prompt set."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .encoders import KnowledgeEncoder, encode_prompt
from .numerics import DimensionError, Tensor

PLACEHOLDER = "[CLASS]"


@dataclass(frozen=True)
class CorrectiveTriplet:
    sample_id: int
    true_class: int
    predicted_class: int

    @property
    def is_wrong(self) -> bool:
        return self.true_class != self.predicted_class


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    pattern: str

    def __post_init__(self):
        if self.pattern.count(PLACEHOLDER) != 1:
            raise ValueError(f"template {self.template_id!r} needs exactly one {PLACEHOLDER}")

    def render(self, class_name: str) -> str:
        return self.pattern.replace(PLACEHOLDER, class_name)

    def parse(self, text: str) -> str:
        """Recover the class name from a rendered prompt."""
        head, tail = self.pattern.split(PLACEHOLDER)
        if not (text.startswith(head) and text.endswith(tail)) or len(text) < len(head) + len(tail):
            raise ValueError(f"{text!r} was not rendered from template {self.template_id!r}")
        return text[len(head):len(text) - len(tail)]


GENERIC = PromptTemplate("generic", "This is a photo of a [CLASS].")
FLOWER = PromptTemplate("flower", "This is a photo of a [CLASS], a type of flower.")
AIRCRAFT = PromptTemplate("aircraft", "This is a photo of a [CLASS], a type of aircraft.")
DOG = PromptTemplate("dog", "This is a photo of a [CLASS], a type of dog.")
SATELLITE = PromptTemplate("satellite", "This is a centered satellite photo of [CLASS].")
AERIAL = PromptTemplate("aerial", "This is an aerial imagery of a [CLASS].")
ACTION = PromptTemplate("action", "This is a photo of a person doing [CLASS].")
TEMPLATES = {t.template_id: t for t in (GENERIC, FLOWER, AIRCRAFT, DOG, SATELLITE, AERIAL, ACTION)}


class Polarity(str, Enum):
    TRUE = "TRUE"
    WRONG = "WRONG"


@dataclass(frozen=True)
class HumanPrompt:
    text: str
    class_id: int
    template_id: str
    polarity: Polarity = Polarity.TRUE


def render_prompt(template: PromptTemplate, class_names: Sequence[str], class_id: int,
                  polarity: Polarity = Polarity.TRUE) -> HumanPrompt:
    if not 0 <= class_id < len(class_names):
        raise LookupError(f"no class name for class {class_id}")
    return HumanPrompt(template.render(class_names[class_id]), class_id, template.template_id, polarity)


def predict_base(features, centroids) -> np.ndarray:
    """Nearest centroid by cosine similarity; ties go to the lowest class index."""
    f = nx.as_tensor(features)
    c = nx.as_tensor(centroids)
    sims = nx.cosine_similarity(f.values[:, None, :], c.values[None, :, :]).values
    # argmax returns the first maximum, which is the lowest index on exact ties
    return np.argmax(sims, axis=1)


def build_triplets(labels: Sequence[int], predictions: Sequence[int],
                   sample_ids: Sequence[int] | None = None) -> list[CorrectiveTriplet]:
    if len(labels) != len(predictions):
        raise DimensionError(f"{len(labels)} labels vs {len(predictions)} predictions")
    ids = range(len(labels)) if sample_ids is None else sample_ids
    if len(ids) != len(labels):
        raise DimensionError(f"{len(ids)} sample ids vs {len(labels)} labels")
    return [CorrectiveTriplet(int(i), int(a), int(b)) for i, a, b in zip(ids, labels, predictions)]


def verbalize(triplet: CorrectiveTriplet, template: PromptTemplate,
              class_names: Sequence[str]) -> tuple[HumanPrompt, HumanPrompt | None]:
    true = render_prompt(template, class_names, triplet.true_class, Polarity.TRUE)
    if not triplet.is_wrong:
        return true, None
    return true, render_prompt(template, class_names, triplet.predicted_class, Polarity.WRONG)


def export_triplets(path, triplets: Iterable[CorrectiveTriplet], template: PromptTemplate,
                    class_names: Sequence[str]) -> None:
    """One JSON object per line: sample_id, A, B, true_text, wrong_text."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            true, wrong = verbalize(t, template, class_names)
            rec = {"sample_id": t.sample_id, "A": t.true_class, "B": t.predicted_class,
                   "true_text": true.text, "wrong_text": wrong.text if wrong else ""}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


@dataclass
class KnowledgePromptSet:
    """One (frozen key, learnable prompt) pair per class."""

    keys: Tensor          # (S, d_k), frozen, unit rows
    prompts: Tensor       # (S, prompt_length, d_t), trainable
    class_index_of: dict[int, int]
    texts: list[str]

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    @property
    def prompt_length(self) -> int:
        return self.prompts.shape[1]

    def entry(self, class_id: int) -> int:
        try:
            return self.class_index_of[class_id]
        except KeyError:
            raise IndexError(f"class {class_id} has no prompt-set entry") from None

    def pair_for(self, triplet: CorrectiveTriplet) -> tuple[int, int]:
        """Entry indices (A, B) for a true/wrong prompt pair."""
        return self.entry(triplet.true_class), self.entry(triplet.predicted_class)


def build_prompt_set(class_names: Sequence[str], template: PromptTemplate, encoder: KnowledgeEncoder,
                     prompt_length: int = 2, d_t: int | None = None, seed: int = 0,
                     init_scale: float = 0.02) -> KnowledgePromptSet:
    if not class_names:
        raise ValueError("prompt set needs at least one class")
    if len(set(class_names)) != len(class_names):
        raise ValueError(f"duplicate class names: {list(class_names)}")
    if prompt_length < 1:
        raise nx.ParameterError(f"prompt_length must be >= 1, got {prompt_length}")
    d_t = encoder.dim if d_t is None else d_t
    prompts = [render_prompt(template, class_names, j) for j in range(len(class_names))]
    keys = np.stack([encode_prompt(encoder, p).values for p in prompts])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70726F6D]))
    values = rng.normal(0, init_scale, (len(class_names), prompt_length, d_t))
    return KnowledgePromptSet(
        keys=nx.Tensor(keys, requires_grad=False, name="prompt_set.keys"),
        prompts=nx.parameter(values, name="prompt_set.prompts"),
        class_index_of={j: j for j in range(len(class_names))},
        texts=[p.text for p in prompts],
    )

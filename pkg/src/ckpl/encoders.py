"""Frozen toy vision transformer, frozen knowledge encoder, and the NCLS token.

The transformer is pre-LN with multi-head softmax attention and a GELU MLP.
Inputs are pre-patchified feature grids of shape ``(..., E, d_t)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, ParameterError, Tensor


@dataclass(frozen=True)
class VisionEncoderConfig:
    num_layers: int = 2
    embed_dim: int = 16
    num_patches: int = 4
    num_heads: int = 2
    mlp_ratio: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 0 or self.embed_dim < 1 or self.num_patches < 1 or self.num_heads < 1:
            raise ParameterError(f"invalid encoder config {self}")
        if self.embed_dim % self.num_heads:
            raise ParameterError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )


def _frozen(values, name) -> Tensor:
    return Tensor(values, requires_grad=False, name=name)


@dataclass
class Block:
    ln1_g: Tensor
    ln1_b: Tensor
    w_qkv: Tensor
    b_qkv: Tensor
    w_out: Tensor
    b_out: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w_fc1: Tensor
    b_fc1: Tensor
    w_fc2: Tensor
    b_fc2: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


class BaseLearner:
    """Frozen transformer over patch tokens with a CLS token in front."""

    def __init__(self, config: VisionEncoderConfig):
        self.config = config
        d, e = config.embed_dim, config.num_patches
        rng = np.random.default_rng(config.seed)
        scale = 1.0 / np.sqrt(d)
        self.patch_w = _frozen(rng.normal(0, scale, (d, d)) + np.eye(d), "patch.w")
        self.patch_b = _frozen(np.zeros(d), "patch.b")
        self.pos = _frozen(rng.normal(0, 0.1, (e, d)), "patch.pos")
        self.cls = _frozen(rng.normal(0, 1.0, d), "cls")
        hidden = config.mlp_ratio * d
        self.blocks = []
        for _ in range(config.num_layers):
            self.blocks.append(Block(
                ln1_g=_frozen(np.ones(d), None), ln1_b=_frozen(np.zeros(d), None),
                w_qkv=_frozen(rng.normal(0, scale, (d, 3 * d)), None),
                b_qkv=_frozen(np.zeros(3 * d), None),
                w_out=_frozen(rng.normal(0, scale, (d, d)), None),
                b_out=_frozen(np.zeros(d), None),
                ln2_g=_frozen(np.ones(d), None), ln2_b=_frozen(np.zeros(d), None),
                w_fc1=_frozen(rng.normal(0, scale, (d, hidden)), None),
                b_fc1=_frozen(np.zeros(hidden), None),
                w_fc2=_frozen(rng.normal(0, 1.0 / np.sqrt(hidden), (hidden, d)), None),
                b_fc2=_frozen(np.zeros(d), None),
            ))
        for name, t in self.named_parameters().items():
            t.name = name

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"patch.w": self.patch_w, "patch.b": self.patch_b, "patch.pos": self.pos, "cls": self.cls}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"blocks.{i + 1}"))
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.named_parameters().items()):
            h.update(name.encode())
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t.values).tobytes())
        return h.hexdigest()

    def embed_patches(self, image) -> Tensor:
        """Patch features ``(..., E, d_t)`` to patch tokens ``x^p_0``."""
        image = nx.as_tensor(image)
        e, d = self.config.num_patches, self.config.embed_dim
        if image.ndim < 2 or image.shape[-2:] != (e, d):
            raise DimensionError(f"expected patches (..., {e}, {d}), got {image.shape}")
        return nx.linear(image, self.patch_w, self.patch_b) + self.pos

    def attention(self, blk: Block, x: Tensor) -> Tensor:
        qkv = nx.linear(x, blk.w_qkv, blk.b_qkv)
        return nx.linear(nx.attention_core(qkv, self.config.num_heads), blk.w_out, blk.b_out)

    def block(self, i: int, x: Tensor) -> Tensor:
        """Apply block ``i`` (1-based) to a token sequence ``(..., T, d_t)``."""
        blk = self.blocks[i - 1]
        x = x + self.attention(blk, nx.layer_norm(x, blk.ln1_g, blk.ln1_b))
        hdn = nx.gelu(nx.linear(nx.layer_norm(x, blk.ln2_g, blk.ln2_b), blk.w_fc1, blk.b_fc1))
        return x + nx.linear(hdn, blk.w_fc2, blk.b_fc2)


def _prepend(token: Tensor, rest: Tensor) -> Tensor:
    lead = rest.shape[:-2]
    tok = nx.broadcast_to(token.reshape(1, token.shape[-1]), (*lead, 1, token.shape[-1])) \
        if token.ndim == 1 else token.reshape(*token.shape[:-1], 1, token.shape[-1])
    return nx.concat([tok, rest], axis=-2)


def encode_image(model: BaseLearner, image) -> tuple[Tensor, Tensor]:
    """Plain frozen forward: returns (c_L, patch tokens after block L)."""
    with nx.no_grad():
        x = _prepend(model.cls, model.embed_patches(image))
        for i in range(1, model.config.num_layers + 1):
            x = model.block(i, x)
    return x[..., 0, :], x[..., 1:, :]


def inject_depth_config(model: BaseLearner, layers=None) -> frozenset[int]:
    """Validate an injection depth set; ``None`` means every block."""
    n = model.config.num_layers
    if layers is None:
        return frozenset(range(1, n + 1))
    layers = frozenset(int(i) for i in layers)
    bad = sorted(i for i in layers if not 1 <= i <= n)
    if bad:
        raise ParameterError(f"injection depth {bad} outside blocks 1..{n}")
    return layers


def forward_with_prompts(
    model: BaseLearner,
    ncls,
    v_hat: Tensor,
    image=None,
    depth=None,
    patch_tokens: Tensor | None = None,
) -> Tensor:
    """Run ``[c', v_hat, x^p]`` through the blocks and return ``c'_L``.

    At every block in ``depth`` the prompt slots are (re)filled with ``v_hat``;
    elsewhere they carry whatever the previous block produced. Before the first
    listed block there are no prompt slots at all. ``patch_tokens`` may be given
    instead of ``image`` to reuse an already-embedded ``x^p_0``.
    """
    c_prime = ncls.c_prime if isinstance(ncls, NCLSToken) else nx.as_tensor(ncls)
    depth = inject_depth_config(model, depth)
    d = model.config.embed_dim
    if v_hat.ndim < 2 or v_hat.shape[-2] < 1:
        raise DimensionError(f"prompt must have at least one token, got shape {v_hat.shape}")
    if v_hat.shape[-1] != d:
        raise DimensionError(f"prompt width {v_hat.shape[-1]} != embed_dim {d}")
    if c_prime.shape[-1] != d:
        raise DimensionError(f"NCLS width {c_prime.shape[-1]} != embed_dim {d}")
    xp = patch_tokens if patch_tokens is not None else model.embed_patches(image)
    lead = xp.shape[:-2]
    p = v_hat.shape[-2]
    if v_hat.ndim == 2 and lead:
        v_hat = nx.broadcast_to(v_hat, (*lead, p, d))
    x = None
    has_prompt = False
    for i in range(1, model.config.num_layers + 1):
        if i in depth:
            if has_prompt:
                x = nx.splice(x, v_hat, 1)
            elif x is None:
                x = _prepend(c_prime, nx.concat([v_hat, xp], axis=-2))
            else:
                x = nx.concat([x[..., :1, :], v_hat, x[..., 1:, :]], axis=-2)
            has_prompt = True
        elif x is None:
            x = _prepend(c_prime, xp)
        x = model.block(i, x)
    return x[..., 0, :]


class KnowledgeEncoder:
    """Frozen map from a rendered prompt (class, template) to a unit vector.

    Stands in for a text encoder: a seeded table of class and template vectors,
    concatenated, passed through a fixed tanh projection, then unit-normalized.
    """

    def __init__(self, class_names, template_ids, dim: int, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6B6E6F77]))
        self.dim = dim
        self.class_ids = {name: i for i, name in enumerate(class_names)}
        self.class_embeddings = {
            i: _frozen(rng.normal(0, 1, dim), f"knowledge.class.{i}") for i in self.class_ids.values()
        }
        self.template_embeddings = {
            t: _frozen(rng.normal(0, 1, dim), f"knowledge.template.{t}") for t in template_ids
        }
        self.mixing = _frozen(rng.normal(0, 1 / np.sqrt(2 * dim), (2 * dim, dim)), "knowledge.mixing")

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"knowledge.mixing": self.mixing}
        for t in (*self.class_embeddings.values(), *self.template_embeddings.values()):
            out[t.name] = t
        return out


def encode_prompt(encoder: KnowledgeEncoder, prompt) -> Tensor:
    if prompt.class_id not in encoder.class_embeddings:
        raise LookupError(f"unknown class id {prompt.class_id}")
    if prompt.template_id not in encoder.template_embeddings:
        raise LookupError(f"unknown template id {prompt.template_id!r}")
    z = np.concatenate([
        encoder.class_embeddings[prompt.class_id].values,
        encoder.template_embeddings[prompt.template_id].values,
    ])
    k = np.tanh(z @ encoder.mixing.values)
    return _frozen(k / np.linalg.norm(k), None)


@dataclass
class NCLSToken:
    c_prime: Tensor = field(repr=False)

    @classmethod
    def from_base(cls, model: BaseLearner) -> NCLSToken:
        return cls(nx.parameter(model.cls.values.copy(), name="ncls"))

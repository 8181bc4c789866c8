import json
from pathlib import Path

import numpy as np
import pytest

from ckpl import numerics as nx
from ckpl.encoders import (BaseLearner, KnowledgeEncoder, NCLSToken, VisionEncoderConfig, encode_image,
                           encode_prompt, forward_with_prompts, inject_depth_config)
from ckpl.knowledge import GENERIC, render_prompt
from ckpl.numerics import DimensionError, ParameterError, Tensor

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="module")
def model():
    return BaseLearner(VisionEncoderConfig(num_layers=2, embed_dim=16, num_patches=4, num_heads=2, seed=7))


def _patches(seed, lead=()):
    return np.random.default_rng(seed).normal(size=(*lead, 4, 16))


def test_encode_image_golden():
    rec = json.loads((GOLDEN / "encode_image_seed42.json").read_text())
    m = BaseLearner(VisionEncoderConfig(num_layers=2, embed_dim=16, num_patches=4, num_heads=2, seed=42))
    c_l, _ = encode_image(m, np.ones((4, 16)))
    np.testing.assert_allclose(c_l.values, rec["c_L"], rtol=0, atol=1e-12)


def test_encode_image_deterministic(model):
    x = _patches(0)
    a, _ = encode_image(model, x)
    b, _ = encode_image(model, x.copy())
    assert np.array_equal(a.values, b.values)


def test_zero_layers_returns_cls():
    m = BaseLearner(VisionEncoderConfig(num_layers=0, seed=3))
    c_l, _ = encode_image(m, _patches(1))
    np.testing.assert_array_equal(c_l.values, m.cls.values)


def test_batched_encoding_matches_single(model):
    x = _patches(2, (3,))
    batch, _ = encode_image(model, x)
    for i in range(3):
        np.testing.assert_allclose(batch.values[i], encode_image(model, x[i])[0].values, atol=1e-13)


def test_wrong_patch_grid_rejected(model):
    with pytest.raises(DimensionError):
        encode_image(model, np.ones((5, 16)))


def test_heads_must_divide_width():
    with pytest.raises(ParameterError):
        VisionEncoderConfig(embed_dim=10, num_heads=3)


def test_base_parameters_are_frozen(model):
    assert all(not t.requires_grad for t in model.named_parameters().values())
    assert model.parameter_count() > 0


def test_frozen_weights_get_no_gradient(model):
    ncls = NCLSToken.from_base(model)
    v = nx.parameter(np.random.default_rng(3).normal(size=(2, 16)))
    out = forward_with_prompts(model, ncls, v, image=_patches(4))
    nx.tsum(out * out).backward()
    assert all(t.grad is None for t in model.named_parameters().values())
    assert ncls.c_prime.grad is not None and v.grad is not None


def test_zero_length_prompt_rejected(model):
    with pytest.raises(DimensionError):
        forward_with_prompts(model, NCLSToken.from_base(model), Tensor(np.zeros((0, 16))), image=_patches(0))


def test_prompt_width_mismatch_rejected(model):
    with pytest.raises(DimensionError):
        forward_with_prompts(model, NCLSToken.from_base(model), Tensor(np.zeros((2, 8))), image=_patches(0))


def test_output_sensitive_to_prompt(model):
    ncls = NCLSToken.from_base(model)
    rng = np.random.default_rng(5)
    v = rng.normal(size=(2, 16))
    dv = rng.normal(size=(2, 16))
    dv /= np.linalg.norm(dv)
    x = _patches(6)
    a = forward_with_prompts(model, ncls, Tensor(v), image=x).values
    b = forward_with_prompts(model, ncls, Tensor(v + dv), image=x).values
    assert np.linalg.norm(a - b) > 0


def test_default_depth_is_every_block(model):
    assert inject_depth_config(model) == frozenset({1, 2})
    ncls = NCLSToken.from_base(model)
    v = Tensor(np.random.default_rng(7).normal(size=(2, 16)))
    x = _patches(8)
    a = forward_with_prompts(model, ncls, v, image=x).values
    b = forward_with_prompts(model, ncls, v, image=x, depth=[1, 2]).values
    assert np.array_equal(a, b)


def test_empty_depth_is_plain_forward_with_ncls(model):
    ncls = NCLSToken.from_base(model)
    x = _patches(9)
    out = forward_with_prompts(model, ncls, Tensor(np.ones((2, 16))), image=x, depth=[]).values
    np.testing.assert_allclose(out, encode_image(model, x)[0].values, atol=1e-13)


def test_shallow_and_deep_injection_differ(model):
    ncls = NCLSToken.from_base(model)
    v = Tensor(np.random.default_rng(10).normal(size=(2, 16)))
    x = _patches(11)
    a = forward_with_prompts(model, ncls, v, image=x, depth=[1]).values
    b = forward_with_prompts(model, ncls, v, image=x, depth=[1, 2]).values
    assert not np.allclose(a, b)


def test_depth_out_of_range(model):
    with pytest.raises(ParameterError):
        inject_depth_config(model, [0])
    with pytest.raises(ParameterError):
        inject_depth_config(model, [3])


def test_injection_only_at_second_block_reference(model):
    """Depth {2}: block 1 sees [c', x^p]; prompts enter before block 2."""
    ncls = NCLSToken.from_base(model)
    v = np.random.default_rng(12).normal(size=(2, 16))
    x = _patches(13)
    got = forward_with_prompts(model, ncls, Tensor(v), image=x, depth=[2]).values
    with nx.no_grad():
        seq = np.concatenate([ncls.c_prime.values[None], model.embed_patches(x).values])
        seq = model.block(1, Tensor(seq)).values
        seq = np.concatenate([seq[:1], v, seq[1:]])
        want = model.block(2, Tensor(seq)).values[0]
    np.testing.assert_allclose(got, want, atol=1e-13)


def test_reinjection_overwrites_prompt_slots(model):
    ncls = NCLSToken.from_base(model)
    v = np.random.default_rng(14).normal(size=(2, 16))
    x = _patches(15)
    got = forward_with_prompts(model, ncls, Tensor(v), image=x).values
    with nx.no_grad():
        seq = np.concatenate([ncls.c_prime.values[None], v, model.embed_patches(x).values])
        seq = model.block(1, Tensor(seq)).values
        seq[1:3] = v
        want = model.block(2, Tensor(seq)).values[0]
    np.testing.assert_allclose(got, want, atol=1e-13)


def test_ncls_starts_as_cls_copy(model):
    ncls = NCLSToken.from_base(model)
    assert np.array_equal(ncls.c_prime.values, model.cls.values)
    assert ncls.c_prime.requires_grad
    ncls.c_prime.values += 1
    assert not np.array_equal(ncls.c_prime.values, model.cls.values)


# ------------------------------------------------------------ knowledge encoder


@pytest.fixture(scope="module")
def kenc():
    return KnowledgeEncoder(["dog", "cat", "fox"], ["generic"], 16, seed=0)


def test_prompt_embedding_unit_and_deterministic(kenc):
    p = render_prompt(GENERIC, ["dog", "cat", "fox"], 0)
    a, b = encode_prompt(kenc, p), encode_prompt(kenc, p)
    assert np.array_equal(a.values, b.values)
    assert np.linalg.norm(a.values) == pytest.approx(1.0, abs=1e-9)
    assert not a.requires_grad


def test_distinct_classes_distinct_embeddings(kenc):
    names = ["dog", "cat", "fox"]
    embs = [encode_prompt(kenc, render_prompt(GENERIC, names, j)).values for j in range(3)]
    for i in range(3):
        for j in range(i + 1, 3):
            assert embs[i] @ embs[j] < 0.99


def test_unknown_prompt_ids(kenc):
    p = render_prompt(GENERIC, ["a", "b", "c", "d"], 3)
    with pytest.raises(LookupError):
        encode_prompt(kenc, p)
    from ckpl.knowledge import FLOWER
    with pytest.raises(LookupError):
        encode_prompt(kenc, render_prompt(FLOWER, ["dog"], 0))


def test_encode_prompt_pure_over_repeats(kenc):
    p = render_prompt(GENERIC, ["dog", "cat", "fox"], 1)
    first = encode_prompt(kenc, p).values
    assert all(np.array_equal(encode_prompt(kenc, p).values, first) for _ in range(1000))


def test_zero_prompt_empty_depth_equals_plain_encoding(model):
    x = _patches(16)
    out = forward_with_prompts(model, NCLSToken.from_base(model), Tensor(np.zeros((2, 16))), image=x, depth=[])
    assert np.array_equal(out.values, encode_image(model, x)[0].values)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sentadapt.encoder import (
    SEP_ID,
    BaseParameters,
    ConfigError,
    EncoderConfig,
    SentenceEncoder,
    embed_texts,
    embed_tokens,
    encode,
    tokenize,
)

CFG = EncoderConfig(vocab_size=97, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_len=24)


@pytest.fixture(scope="module")
def base():
    return BaseParameters.initialize(CFG, seed=3, frozen=True)


def test_tokenize_examples():
    assert tokenize("", CFG) == [SEP_ID]
    a, b = tokenize("Hello hello", CFG)
    assert a == b and a >= 2
    assert tokenize("title [SEP] abstract", CFG)[1] == SEP_ID
    long_cfg = EncoderConfig(max_len=512)
    assert len(tokenize(" ".join(f"w{i}" for i in range(600)), long_cfg)) == 512


@settings(max_examples=100, deadline=None)
@given(st.text(max_size=80))
def test_tokenize_is_total_and_in_range(text):
    ids = tokenize(text, CFG)
    assert 1 <= len(ids) <= CFG.max_len
    assert all(1 <= i < CFG.vocab_size for i in ids)
    assert ids == tokenize(text.upper(), CFG) or text.upper().lower() != text.lower()


@pytest.mark.parametrize("bad", [dict(n_layers=0), dict(d_model=10, n_heads=4), dict(max_len=0),
                                 dict(pooling="max"), dict(vocab_size=2)])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        EncoderConfig(**bad)


def test_param_shapes_validated_at_build():
    p = BaseParameters.initialize(CFG, 0)
    tensors = dict(p.tensors)
    tensors["embeddings.token"] = tensors["embeddings.position"]
    with pytest.raises(ConfigError):
        BaseParameters(CFG, tensors)


def test_frozen_flag_controls_requires_grad():
    p = BaseParameters.initialize(CFG, 0, frozen=True)
    assert p.frozen and not any(t.requires_grad for t in p.tensors.values())
    p.unfreeze()
    assert all(t.requires_grad for t in p.tensors.values())


def test_initialization_is_seeded():
    a = BaseParameters.initialize(CFG, 5)
    assert a.checksum() == BaseParameters.initialize(CFG, 5).checksum()
    assert a.checksum() != BaseParameters.initialize(CFG, 6).checksum()


def test_save_load_round_trip(tmp_path, base):
    path = base.save(tmp_path / "b.ckpt")
    again = BaseParameters.load(path)
    assert again.config == base.config and again.checksum() == base.checksum()
    assert list(again.tensors) == list(base.tensors)


def test_encode_shapes_and_determinism(base):
    texts = ["alpha beta", "gamma", "alpha beta", ""]
    out = encode(texts, base, config=CFG)
    assert len(out) == 4 and out[0].vector.shape == (16,)
    assert out[0].vector.tobytes() == out[2].vector.tobytes()
    assert all(np.isfinite(e.vector).all() for e in out)
    with pytest.raises(ConfigError):
        encode(texts, base, config=EncoderConfig())


def test_padding_does_not_change_embeddings(base):
    token_lists = [tokenize(t, CFG) for t in ["a b c d e", "f", "g h"]]
    batched = embed_tokens(base, token_lists).data
    single = np.stack([embed_tokens(base, [t]).data[0] for t in token_lists])
    np.testing.assert_allclose(batched, single, atol=1e-12)


def test_mean_pooling_ignores_padding():
    p = BaseParameters.initialize(EncoderConfig(**{**CFG.to_dict(), "pooling": "mean"}), 3)
    token_lists = [[5, 6, 7], [8]]
    batched = embed_tokens(p, token_lists).data
    np.testing.assert_allclose(batched[1], embed_tokens(p, [[8]]).data[0], atol=1e-12)


def test_single_token_cls_equals_mean(base):
    mean_params = BaseParameters(EncoderConfig(**{**CFG.to_dict(), "pooling": "mean"}), base.tensors, frozen=True)
    for text in ["solo", ""]:
        a = embed_texts(base, [text])
        b = embed_texts(mean_params, [text])
        np.testing.assert_array_equal(a, b)


@settings(max_examples=20, deadline=None)
@given(st.permutations(range(5)))
def test_batch_permutation_equivariance(perm):
    p = BaseParameters.initialize(CFG, 3)
    texts = ["one two", "three", "four five six", "seven", "eight nine"]
    out = embed_texts(p, texts)
    shuffled = embed_texts(p, [texts[i] for i in perm])
    np.testing.assert_allclose(shuffled, out[list(perm)], atol=1e-12)


def test_sentence_encoder_wrapper(base):
    enc = SentenceEncoder(base, label="x")
    assert enc.dim == 16 and enc.embed(["a"]).shape == (1, 16)

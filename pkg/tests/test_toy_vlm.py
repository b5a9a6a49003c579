import numpy as np
import pytest

from vtsparse.errors import ConfigError, ShapeError
from vtsparse.numerics import OpCounter
from vtsparse.rng import XorShiftStream, fnv1a64, splitmix64
from vtsparse.toy_vlm import (
    LAYER_TAGS,
    ModelConfig,
    TokenSequence,
    build_model,
    embed_sequence,
    forward_layer,
    layer_multiply_adds,
    prefill,
    project_visual,
)

from conftest import make_sequence


def test_splitmix_reference_value():
    # first output of the reference C splitmix64 seeded with 0
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    # published FNV-1a 64-bit test vector
    assert fnv1a64("a") == 0xAF63DC4C8601EC8C


def test_streams_deterministic_and_name_separated():
    a = XorShiftStream(3, "w").uniform(50)
    assert np.array_equal(a, XorShiftStream(3, "w").uniform(50))
    assert not np.array_equal(a, XorShiftStream(3, "v").uniform(50))
    assert np.all((a >= 0) & (a < 1))


def test_symmetric_draw_bounded():
    x = XorShiftStream(0, "x").symmetric((40, 30), 0.1)
    assert x.shape == (40, 30) and np.all(np.abs(x) <= 0.1)


def test_model_checksums():
    cfg = ModelConfig(num_layers=1, hidden_dim=16, ffn_dim=8, vocab_size=32, max_positions=64)
    assert build_model(cfg).checksum() == build_model(cfg).checksum()
    a = build_model(ModelConfig(**{**cfg.__dict__, "seed": 1}))
    b = build_model(ModelConfig(**{**cfg.__dict__, "seed": 2}))
    assert a.checksum() != b.checksum()


def test_head_dim_and_validation():
    assert ModelConfig(hidden_dim=64, num_heads=4).head_dim == 16
    with pytest.raises(ConfigError, match="model.hidden_dim"):
        ModelConfig(hidden_dim=30, num_heads=4)
    with pytest.raises(ConfigError, match="model.num_layers"):
        ModelConfig(num_layers=0)


def test_token_sequence_layout():
    seq = TokenSequence([1, 2], np.zeros((3, 4)), [5, 6, 7, 8])
    assert seq.visual_span == (2, 5)
    assert seq.question_positions.tolist() == [5, 6, 7, 8]
    assert seq.kinds().tolist() == [0, 0, 1, 1, 1, 2, 2, 2, 2]
    with pytest.raises(ShapeError):
        TokenSequence([1], np.zeros((3, 4)), [])


def test_embedding_linearity_and_duplicates(small_model):
    z = np.random.default_rng(0).normal(size=(3, 32))
    z[1] = 0.0
    proj = project_visual(small_model, z)
    assert np.array_equal(proj[1], np.zeros(32))
    seq = TokenSequence([4, 4], z, [9, 9])
    emb = embed_sequence(small_model, seq)
    assert np.array_equal(emb[0], emb[1]) and np.array_equal(emb[-1], emb[-2])
    with pytest.raises(ShapeError):
        project_visual(small_model, np.ones((2, 5)))


def test_single_token_attends_to_itself(small_model):
    _, view = forward_layer(small_model, 0, np.ones((1, 32)), np.array([0]))
    assert view.logits.tolist() == [[1.0]]


def test_attention_is_causal_and_row_stochastic(small_model):
    H = np.random.default_rng(1).normal(size=(9, 32))
    _, view = forward_layer(small_model, 0, H, np.arange(9))
    assert np.allclose(view.logits.sum(axis=1), 1.0)
    assert np.all(np.triu(view.logits, 1) == 0.0)


def test_noncontiguous_positions_still_causal(small_model):
    H = np.random.default_rng(2).normal(size=(4, 32))
    _, view = forward_layer(small_model, 1, H, np.array([0, 5, 6, 10]))
    assert np.all(np.triu(view.logits, 1) == 0.0)


@pytest.mark.parametrize("L", [1, 5, 17])
def test_layer_multiply_adds_closed_form(small_model, L):
    c = OpCounter()
    forward_layer(small_model, 0, np.ones((L, 32)), np.arange(L), c)
    cfg = small_model.config
    assert sum(c.by_tag[t] for t in LAYER_TAGS) == layer_multiply_adds(L, cfg.hidden_dim, cfg.ffn_dim)


def test_prefill_without_hook_keeps_length(small_model, small_seq):
    t = prefill(small_model, small_seq)
    assert t.lengths_out == [small_seq.length] * 3 == t.lengths_in
    assert t.final_visual_count == small_seq.visual_len


def test_prefill_deterministic(small_model, small_seq):
    a = prefill(small_model, small_seq)
    b = prefill(small_model, small_seq)
    assert np.array_equal(a.hidden, b.hidden)
    assert a.counter.snapshot() == b.counter.snapshot()


def test_prefill_rejects_long_sequence():
    model = build_model(ModelConfig(num_layers=1, hidden_dim=8, num_heads=2, ffn_dim=8, vocab_size=16, max_positions=10))
    with pytest.raises(ShapeError, match="max_positions"):
        prefill(model, make_sequence(0, visual_len=8, dim=8, vocab=16))

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vtsparse.errors import ConfigError
from vtsparse.numerics import OpCounter, _rank_by_elimination
from vtsparse.sparsify import (
    PriorityMatrix,
    SparsifyConfig,
    Sparsifier,
    adaptive_deletions,
    budget_schedule,
    deletion_count,
    net_removal,
    prune,
    significance,
    slice_priority,
    text_positions_survive,
)
from vtsparse.toy_vlm import LayerAttentionView, forward_layer, prefill

from conftest import make_sequence


def _view(A, positions):
    return LayerAttentionView(0, A, None, np.asarray(positions))


def test_slice_matches_index_pairs():
    rng = np.random.default_rng(0)
    A = rng.random((10, 10))
    pos = np.array([0, 1, 3, 4, 5, 7, 8, 9, 11, 12])
    pm = slice_priority(_view(A, pos), [8, 12], [3, 4, 5])
    assert pm.P.shape == (2, 3)
    for i, rp in enumerate([8, 12]):
        for j, vp in enumerate([3, 4, 5]):
            assert pm.P[i, j] == A[list(pos).index(rp), list(pos).index(vp)]


def test_uniform_attention_gives_equal_entries():
    pm = slice_priority(_view(np.full((6, 6), 1 / 6), np.arange(6)), [4, 5], [1, 2, 3])
    assert np.all(pm.P == 1 / 6)


def test_slice_of_real_layer(small_model, small_seq):
    H = np.random.default_rng(1).normal(size=(small_seq.length, 32))
    _, view = forward_layer(small_model, 0, H, np.arange(small_seq.length))
    raters = small_seq.question_positions[[0, 2]]
    pm = slice_priority(view, raters, small_seq.visual_positions)
    assert np.array_equal(pm.P, view.logits[np.ix_(raters, small_seq.visual_positions)])


def test_significance_examples():
    c = OpCounter()
    assert significance(PriorityMatrix(np.array([[0.2, 0.8], [0.4, 0.6]]), None, None), c).tolist() == pytest.approx([0.3, 0.7])
    assert c.stage_flops["significance"] == 4
    row = np.array([[0.1, 0.2, 0.7]])
    assert np.array_equal(significance(row), row[0])
    P = np.random.default_rng(2).random((5, 7))
    oracle = [sum(P[i, j] for i in range(5)) / 5 for j in range(7)]
    assert np.allclose(significance(P), oracle, atol=1e-15)


def test_deletion_count_examples():
    assert deletion_count(np.eye(4), 1.0) == 0
    assert adaptive_deletions(10, 7, 1.0) == 3
    assert adaptive_deletions(10, 0, 5.0) == 9  # one survivor
    assert adaptive_deletions(10, 7, 0.5) == 1  # floor


def test_deletion_count_rank_bound():
    rng = np.random.default_rng(3)
    for _ in range(20):
        P = rng.random((4, 16))
        lam = float(rng.uniform(0.1, 1.0))
        n = deletion_count(P, lam)
        assert n >= np.floor(12 * lam)
        assert n == int(np.floor(lam * (16 - _rank_by_elimination(P, 1e-10))))


def test_prune_examples():
    assert prune([0.1, 0.5, 0.3], 1)[0].tolist() == [0]
    pruned, kept = prune([0.2] * 5, 2, positions=[10, 11, 12, 13, 14])
    assert pruned.tolist() == [0, 1] and kept.tolist() == [2, 3, 4]


@given(st.lists(st.integers(0, 5), min_size=1, max_size=30), st.data())
def test_prune_matches_sort_oracle(vals, data):
    n = data.draw(st.integers(0, len(vals) - 1))
    oracle = sorted(range(len(vals)), key=lambda i: (vals[i], i))[:n]
    pruned, kept = prune(np.array(vals, dtype=float), n)
    assert pruned.tolist() == sorted(oracle)
    assert sorted(pruned.tolist() + kept.tolist()) == list(range(len(vals)))


def test_prune_rejects_all():
    with pytest.raises(ValueError):
        prune([1.0, 2.0], 2)


def test_budget_schedule_passthrough_and_clamp():
    assert budget_schedule(SparsifyConfig(), 100, 3, 17) == 17
    cfg = SparsifyConfig(budget=64)
    # an intermediate layer may not drop the visual count under the budget
    n = budget_schedule(cfg, 70, 3, 40)
    assert 70 - net_removal(n, cfg.tau, cfg.theta) >= 64
    assert 70 - net_removal(n + 1, cfg.tau, cfg.theta) < 64
    # the last active layer lands exactly on the budget
    n = budget_schedule(cfg, 300, 1, 0)
    assert 300 - net_removal(n, cfg.tau, cfg.theta) == 64
    with pytest.raises(ConfigError):
        budget_schedule(cfg, 50, 1, 0)


@given(st.integers(2, 600), st.data())
def test_budget_last_layer_exact(current, data):
    budget = data.draw(st.integers(1, current))
    for tau, theta in [(0.25, 0.25), (0.0, 0.5), (0.5, 0.1)]:
        cfg = SparsifyConfig(budget=budget, tau=tau, theta=theta)
        reachable = [n for n in range(current) if current - net_removal(n, tau, theta) == budget]
        if reachable:
            assert budget_schedule(cfg, current, 1, 0) == reachable[0]
        else:
            with pytest.raises(ConfigError):
                budget_schedule(cfg, current, 1, 0)


def test_budget_unreachable_when_everything_is_rebuilt():
    # tau = theta = 1 turns every pruned token into its own center: net removal is always 0
    cfg = SparsifyConfig(budget=10, tau=1.0, theta=1.0)
    with pytest.raises(ConfigError, match="unreachable"):
        budget_schedule(cfg, 20, 1, 0)


def test_config_validation():
    with pytest.raises(ConfigError, match=r"tau out of \[0,1\]"):
        SparsifyConfig(tau=1.5)
    with pytest.raises(ConfigError, match="lambda"):
        SparsifyConfig(lam=-1)
    assert SparsifyConfig().resolve_active(4) == (1, 2, 3)
    assert SparsifyConfig(active_layers=(3, 0, 9)).resolve_active(4) == (0, 3)


def test_sparsifier_keeps_text_and_reduces_visual(small_model):
    seq = make_sequence(5, visual_len=40)
    trace = prefill(small_model, seq, Sparsifier(SparsifyConfig()))
    assert text_positions_survive(trace, seq)
    assert trace.final_visual_count < seq.visual_len
    for plan in trace.plans[1:]:
        assert plan.visual_out == plan.visual_in - plan.deletion_count + plan.reconstructed_count
        assert set(plan.pruned).isdisjoint(plan.retained)


def test_layer_zero_inactive_by_default(small_model, small_seq):
    trace = prefill(small_model, small_seq, Sparsifier())
    assert trace.plans[0] is None


def test_lambda_zero_never_prunes(small_model, small_seq):
    trace = prefill(small_model, small_seq, Sparsifier(SparsifyConfig(lam=0.0)))
    assert all(p.deletion_count == 0 for p in trace.plans if p is not None)
    base = prefill(small_model, small_seq)
    assert np.array_equal(trace.hidden, base.hidden)


def test_positions_stay_sorted_and_unique(small_model):
    seq = make_sequence(9, visual_len=48)
    trace = prefill(small_model, seq, Sparsifier(SparsifyConfig(tau=1.0, theta=0.5)))
    pos = trace.position_ids
    assert np.all(np.diff(pos) > 0)

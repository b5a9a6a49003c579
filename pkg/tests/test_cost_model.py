import numpy as np
import pytest
from hypothesis import given, strategies as st

from vtsparse.cost_model import (
    build_ledger,
    cache_estimate,
    layer_reduction,
    net_savings,
    reconcile,
    stage_cost,
)
from vtsparse.errors import UnknownStage
from vtsparse.sparsify import SparsifyConfig, Sparsifier
from vtsparse.toy_vlm import ModelConfig, TokenSequence, build_model, prefill

from conftest import make_sequence


def test_stage_cost_examples():
    assert stage_cost("significance", L_t=8, L_v=64) == 512
    assert stage_cost("reconstruction", D=16, L_r=5, C=5) == 0
    assert stage_cost("aggregation", L_r=10, D=16) == 10 * 29 * 32 + 10 == 9290
    assert stage_cost("rater_selection", L_t=3, L_v=4, D=5) == 120
    with pytest.raises(UnknownStage):
        stage_cost("warp_drive", L=1)
    with pytest.raises(TypeError):
        stage_cost("significance", L_t=3)


def test_layer_reduction_examples():
    assert layer_reduction(7, 7, 64) == 0
    assert layer_reduction(13, 3, 64) == 258560
    with pytest.raises(ValueError):
        layer_reduction(1, 2, 8)


@given(st.integers(0, 500), st.integers(0, 500), st.integers(1, 512))
def test_layer_reduction_expression_oracle(a, b, d):
    n, c = max(a, b), min(a, b)
    assert layer_reduction(n, c, d) == eval(f"6*({n}-{c})*{d}**2 + 2*({n}-{c})**2*{d}")


def _run(model, seq, cfg=None):
    return prefill(model, seq, Sparsifier(cfg or SparsifyConfig()))


def test_no_pruning_costs_only_rater_selection(small_model, small_seq):
    trace = _run(small_model, small_seq, SparsifyConfig(lam=0.0, active_layers=()))
    exact, _ = net_savings(trace)
    assert exact == -stage_cost("rater_selection", L_t=small_seq.text_len, L_v=small_seq.visual_len, D=32)


def test_full_reconstruction_gives_zero_reduction(small_model):
    seq = make_sequence(3, visual_len=30)
    trace = _run(small_model, seq, SparsifyConfig(tau=1.0, theta=1.0, active_layers=(1,)))
    plan = trace.plans[1]
    assert plan.deletion_count == plan.reconstructed_count > 0
    ledger = build_ledger(trace)
    assert ledger.reduction_total == 0 and ledger.net_savings_exact < 0


def test_exact_savings_equals_stage_sum_oracle(small_model):
    seq = make_sequence(11, visual_len=40)
    trace = _run(small_model, seq)
    d = 32
    overhead = stage_cost("rater_selection", L_t=seq.text_len, L_v=seq.visual_len, D=d)
    reduction = 0
    n_cum = c_cum = 0
    for plan in trace.plans:
        reduction += layer_reduction(n_cum, c_cum, d)
        if plan is None:
            continue
        overhead += stage_cost("significance", L_t=plan.rater_count, L_v=plan.visual_in)
        overhead += stage_cost("rank", L_t=plan.rater_count, L_v=plan.visual_in)
        if plan.recycled_count:
            overhead += stage_cost("aggregation", L_r=plan.recycled_count, D=d)
            overhead += stage_cost("reconstruction", D=d, L_r=plan.recycled_count, C=plan.reconstructed_count)
        n_cum += plan.deletion_count
        c_cum += plan.reconstructed_count
    ledger = build_ledger(trace)
    assert ledger.net_savings_exact == reduction - overhead
    assert sum(l.net for l in ledger.layers) - ledger.rater_selection == ledger.net_savings_exact


def test_instrumented_stage_counts_match_closed_forms(small_model):
    trace = _run(small_model, make_sequence(12, visual_len=40))
    stages = reconcile(trace, prefill(small_model, make_sequence(12, visual_len=40)))["stages"]
    for name, v in stages.items():
        assert v["analytic"] == v["instrumented"], name


def test_reconcile_zero_when_disabled(small_model, small_seq):
    trace = _run(small_model, small_seq, SparsifyConfig(lam=0.0))
    rec = reconcile(trace, prefill(small_model, small_seq))
    assert rec["instrumented_reduction"] == rec["formula_reduction"] == 0
    assert all(l["delta"] == 0 for l in rec["layers"])


def test_cache_ratio_examples(small_model, small_seq):
    assert cache_estimate(prefill(small_model, small_seq))["ratio"] == 1.0
    trace = _run(small_model, make_sequence(2, visual_len=40))
    r = cache_estimate(trace)["ratio"]
    assert 0 < r < 1


class KeepThird:
    """Hook that keeps exactly one third of the visual tokens after layer 0."""

    def begin(self, model, seq, emb, counter):
        return None

    def after_layer(self, model, layer, H, positions, kinds, view, counter):
        if layer != 0:
            return H, positions, kinds, None
        keep = np.arange(len(positions)) % 3 == 0
        return H[keep], positions[keep], kinds[keep], None


def test_cache_ratio_one_third_all_visual():
    model = build_model(ModelConfig(num_layers=6, num_heads=2, hidden_dim=16, ffn_dim=16, vocab_size=16))
    seq = TokenSequence([], np.random.default_rng(0).normal(size=(300, 16)), [1])
    trace = prefill(model, seq, KeepThird())
    # 301 tokens, 101 survive every layer
    assert cache_estimate(trace)["ratio"] == pytest.approx(101 / 301)
    assert cache_estimate(trace)["ratio"] == pytest.approx(1 / 3, abs=0.01)

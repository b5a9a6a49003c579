import numpy as np
import pytest

from vtsparse.toy_vlm import ModelConfig, TokenSequence, build_model


def make_sequence(seed, visual_len=24, dim=32, pre=3, question=6, vocab=64):
    rng = np.random.default_rng(seed)
    return TokenSequence(
        rng.integers(0, vocab, pre),
        rng.normal(size=(visual_len, dim)),
        rng.integers(0, vocab, question),
    )


@pytest.fixture(scope="session")
def small_model():
    return build_model(ModelConfig(num_layers=3, num_heads=2, hidden_dim=32, ffn_dim=32, vocab_size=64, seed=7))


@pytest.fixture
def small_seq():
    return make_sequence(0)


ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

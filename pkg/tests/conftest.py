import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from simmt.data import MultimodalExample
from simmt.multimodal import AlignmentMatrix, RegionFeatures
from simmt.transformer import BOS, EOS, ModelConfig, Transformer

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_config(**kw) -> ModelConfig:
    base = dict(num_layers=2, model_dim=16, ff_dim=32, num_heads=2, src_vocab_size=12,
                tgt_vocab_size=14, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def random_example(rng, src_len, tgt_len, src_vocab=12, tgt_vocab=14, regions=0, region_dim=6,
                   annotate=False):
    src = np.r_[rng.integers(4, src_vocab, src_len - 1), EOS]
    tgt = np.r_[BOS, rng.integers(4, tgt_vocab, tgt_len), EOS]
    feats = align = None
    if regions:
        feats = RegionFeatures(rng.normal(size=(regions, region_dim)), np.ones(regions, bool))
        if annotate:
            m = np.zeros((regions, src_len))
            cols = np.zeros(src_len, bool)
            j = int(rng.integers(src_len))
            m[int(rng.integers(regions)), j] = 1.0
            cols[j] = True
            align = AlignmentMatrix(m, cols)
    return MultimodalExample(src, tgt, 0 if regions else None, feats, align)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return Transformer(tiny_config(), seed=0)


@pytest.fixture
def tiny_mm_model():
    return Transformer(tiny_config(region_dim=6), seed=0)


def schedule_oracle(k, src_len, writes):
    """Action string of the wait-k policy, built by counting instead of min()."""
    actions, read = [], 0
    for _ in range(writes):
        target = k + (actions.count("W"))
        while read < target and read < src_len:
            actions.append("R")
            read += 1
        actions.append("W")
    return "".join(actions)


def no_eos_model(config, seed=0):
    """A model whose output bias forbids EOS, so decoding runs to max_len."""
    model = Transformer(config, seed=seed)
    model.params["out.b"].data[EOS] = -1e9
    return model


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

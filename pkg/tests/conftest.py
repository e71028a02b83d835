import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fogdesk.config import TrainConfig
from fogdesk.data import docstring_corpus

settings.register_profile("suite", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory):
    """A small deterministic English corpus (about 200 kB)."""
    path = tmp_path_factory.mktemp("corpus") / "small.txt"
    path.write_bytes(docstring_corpus(min_bytes=200_000))
    return path


@pytest.fixture(scope="session")
def big_corpus_path(tmp_path_factory):
    """A deterministic corpus of at least 1 MB."""
    path = tmp_path_factory.mktemp("corpus") / "big.txt"
    path.write_bytes(docstring_corpus(min_bytes=1_200_000))
    return path


@pytest.fixture
def tiny_config(corpus_path):
    def make(**kw):
        base = dict(arch="fog-opt", layers=2, hidden=32, ffn_hidden=64, heads=2, qk_groups=1,
                    total_steps=10, batch_size=2, context=16, warmup_steps=2, cooldown_steps=4,
                    peak_lr=3e-3, precision="fp32", corpus=str(corpus_path))
        base.update(kw)
        return TrainConfig(**base)

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

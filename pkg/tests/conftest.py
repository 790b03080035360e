import os

import numpy as np
import pytest

from sko.model import ModelConfig
from sko.trainer import TrainConfig


@pytest.fixture(autouse=True, scope="session")
def _clean_env():
    """The fault hook must never leak into a test run."""
    os.environ.pop("SKO_FAULT_FLIP_C2", None)
    yield
    os.environ.pop("SKO_FAULT_FLIP_C2", None)


PHRASE = "the quick brown fox jumps over the lazy dog. "


@pytest.fixture
def phrase_corpus(tmp_path):
    """A 512-byte corpus whose long-range structure is fully predictable."""
    path = tmp_path / "phrase.txt"
    path.write_text((PHRASE * 12)[:512])
    return str(path)


def micro_model_config(**kw):
    base = dict(vocab_size=16, D=8, N=8, H=2, L=1, q=4,
                degrees=[2.0, 3.0], seed=0)
    base.update(kw)
    return ModelConfig(**base)


def micro_train_config(dataset, **kw):
    base = dict(total_steps=10, eval_interval=5, batch_size=4,
                dataset=dataset, val_fraction=0.1, eval_batches=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def rng(seed=0):
    return np.random.default_rng(seed)

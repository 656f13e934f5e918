import time

import numpy as np
import pytest
import torch

from labelqc.conditioning import embed_classes
from labelqc.loss import LossConfig
from labelqc.oracle import GeneratorConfig, build_corpus
from labelqc.regressor import slice_dataset, train

# toy setting shared by the trained-model tests
TOY_SEED = 0
TOY_EPOCHS = 10
TOY_SLICES_PER_RECORD = 3

ACCEPTANCE_LINES = []
TIMINGS = {}


def pytest_configure(config):
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_corpus")
    t0 = time.perf_counter()
    manifest = build_corpus(GeneratorConfig(), TOY_SEED, out)
    TIMINGS["corpus"] = time.perf_counter() - t0
    return manifest


@pytest.fixture(scope="session")
def toy_table(toy_corpus):
    return embed_classes(toy_corpus.vocab(), "hash_fallback", d_t=64)


@pytest.fixture(scope="session")
def toy_data(toy_corpus):
    t0 = time.perf_counter()
    data = slice_dataset(toy_corpus, "train", TOY_SLICES_PER_RECORD)
    TIMINGS["dataset"] = time.perf_counter() - t0
    return data


@pytest.fixture(scope="session")
def trained_full(toy_corpus, toy_table, toy_data):
    """Conditioned model with the ranking term, the default configuration."""
    t0 = time.perf_counter()
    model = train(toy_corpus, toy_table, dict(epochs=TOY_EPOCHS, seed=TOY_SEED), LossConfig(), data=toy_data)
    TIMINGS["train"] = time.perf_counter() - t0
    return model


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    cfg = GeneratorConfig(classes=("liver", "spleen", "kidney"), n_volumes=4)
    return build_corpus(cfg, 7, tmp_path_factory.mktemp("small_corpus"))

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from xattn.data import SynthConfig, synth_corpus, synth_generate  # noqa: E402
from xattn.embeddings import EmbeddingTable, SkipGramConfig, train_embeddings  # noqa: E402
from xattn.model import ModelConfig, init_params  # noqa: E402
from xattn.text import tokenize  # noqa: E402
from xattn.trainer import TrainConfig, train  # noqa: E402

# one line per acceptance criterion, printed in the terminal summary
CRITERIA: dict[int, str] = {}

TINY = ModelConfig(roi_dim=5, dim=6, geom_dim=3, score_dim=2, alpha_hidden=(8, 4),
                   cls_hidden=(8, 6, 5, 4), n_attrs=22)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_params():
    return init_params(TINY, seed=3)


def toy_table(words, dim=6, seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingTable(list(words), rng.standard_normal((len(words), dim)))


@pytest.fixture(scope="session")
def synth_table():
    """Embeddings trained on the templated corpus, as used for the planted set."""
    corpus = [tokenize(t) for t in synth_corpus(3000, seed=0)]
    return train_embeddings(corpus, SkipGramConfig(dim=256, epochs=10, seed=0))


@pytest.fixture(scope="session")
def planted(synth_table):
    samples, gt = synth_generate(SynthConfig(num_images=200, rois_per_image=20, feat_dim=64,
                                             noise_sigma=0.1, seed=7), synth_table)
    return samples, gt


def planted_train_config() -> TrainConfig:
    # the 150-image pool is split 90/10 into train/validation; 50 images stay held out
    return TrainConfig(lr=1e-4, weight_decay=5e-4, batch_size=10, max_steps=2000,
                       seed=0, split=(0.9, 0.1, 0.0))


def run_planted(samples, table):
    params = init_params(ModelConfig(roi_dim=64, dim=256, beta=0.8, lam_a=1.0, lam_b=1.0), seed=0)
    t0 = time.perf_counter()
    res = train(samples[:150], planted_train_config(), params, table)
    return res, time.perf_counter() - t0


@pytest.fixture(scope="session")
def planted_run(planted, synth_table):
    samples, _ = planted
    return run_planted(samples, synth_table)

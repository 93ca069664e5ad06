import os

import numpy as np
import pytest

from g2p_transformer.data import build_vocabularies, parse_cmudict
from g2p_transformer.model import ModelConfig
from g2p_transformer.training import TrainOptions, train

DATA = os.path.join(os.path.dirname(__file__), "data")
CMU_100 = os.path.join(DATA, "cmudict_100.txt")
CMU_HELDOUT = os.path.join(DATA, "cmudict_heldout_50.txt")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cmu_entries():
    with open(CMU_100, encoding="utf-8") as fh:
        return parse_cmudict(fh.read())


@pytest.fixture(scope="session")
def heldout_entries():
    with open(CMU_HELDOUT, encoding="utf-8") as fh:
        return parse_cmudict(fh.read())


@pytest.fixture(scope="session")
def cmu_vocabs(cmu_entries, heldout_entries):
    return build_vocabularies(cmu_entries + heldout_entries)


@pytest.fixture
def tiny_config():
    return ModelConfig(n_enc_blocks=1, n_dec_blocks=1, d_m=8, d_ff=12, heads=2,
                       dropout=0.0, max_len=24, grapheme_vocab_size=9, phoneme_vocab_size=10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def overfit_run(cmu_entries, cmu_vocabs, tmp_path_factory):
    """Transformer 3x3 trained on the 100-word sample until it reproduces it."""
    vocab_g, vocab_p = cmu_vocabs
    config = ModelConfig(n_enc_blocks=3, n_dec_blocks=3, grapheme_vocab_size=len(vocab_g),
                         phoneme_vocab_size=len(vocab_p))
    out = tmp_path_factory.mktemp("overfit")
    options = TrainOptions(lr=2e-4, batch_size=32, max_epochs=500, seed=0,
                           target_dev_wer=0.0, out_dir=str(out))
    result = train(config, cmu_entries, cmu_entries, vocab_g, vocab_p, options)
    result.checkpoint.extra["dataset"] = "cmudict"
    return result, out

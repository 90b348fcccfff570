import sys
from pathlib import Path

import numpy as np
import pytest

from fidfilter.model import ModelConfig, random_weights
from fidfilter.runtime import load_dataset, fixture_path
from fidfilter.toy import TOY_CONFIG

sys.path.insert(0, str(Path(__file__).parent))

TINY = ModelConfig(d_model=8, n_heads=2, n_enc_layers=2, n_dec_layers=2, d_ff=16, d_kv=4,
                   vocab_size=32, rel_pos_buckets=8, rel_pos_max_distance=16)
# tiny dimensions, full tokenizer vocabulary so FidInput text can be generated
TINY_TEXT = ModelConfig(d_model=16, n_heads=2, n_enc_layers=2, n_dec_layers=3, d_ff=32, d_kv=8,
                        vocab_size=512, rel_pos_buckets=8, rel_pos_max_distance=32)


@pytest.fixture(scope="session")
def tiny():
    return random_weights(TINY, seed=1)


@pytest.fixture(scope="session")
def tiny_text():
    return random_weights(TINY_TEXT, seed=2)


@pytest.fixture(scope="session")
def toy():
    return random_weights(TOY_CONFIG, seed=0)


@pytest.fixture(scope="session")
def fixture_data():
    return load_dataset(fixture_path())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

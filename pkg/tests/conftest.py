import sys

import numpy as np
import pytest
import torch

from apdlab.lm_family import Corpus, train_family
from apdlab.traces import collect_traces

torch.set_num_threads(1)

TEXT = "\n".join(
    ["the cat sat on the mat", "a dog ran in the park", "the bird sang at dawn",
     "we read books at night", "she baked bread today", "rain fell on the roof"] * 8
)
SMALL_SPECS = [(4, 8, 8), (6, 16, 16), (8, 24, 24), (8, 40, 40)]


@pytest.fixture(scope="session")
def corpus():
    return Corpus.from_text(TEXT, mode="char", valid_ratio=0.15, seed=0)


@pytest.fixture(scope="session")
def family(corpus):
    return train_family(corpus, SMALL_SPECS, seed=3, k=3, epochs=2, lr=3e-3, batch_size=64)


@pytest.fixture(scope="session")
def traces(family, corpus):
    return collect_traces(family, corpus.train_lines[:12], layout=(8, 3, 3), seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.CRITERIA):
        terminalreporter.write_line(mod.CRITERIA[n])

from __future__ import annotations

import numpy as np
import pytest
import torch

from laml_tts.frontend import LexiconG2P
from laml_tts.toy import make_toy_corpus

torch.set_num_threads(1)

ENGLISH = {
    "hi": ["h", "a", "ɪ"],
    "there": ["ð", "ɛ", "r"],
    "one": ["w", "ʌ", "n"],
    "two": ["t", "u"],
    "word": ["w", "ɜ", "r", "d"],
    "well": ["w", "ɛ", "l"],
    "no": ["n", "o"],
}


@pytest.fixture(scope="session")
def english_g2p() -> LexiconG2P:
    return LexiconG2P({0: ENGLISH})


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """Two pseudo-languages, four utterances each, gold durations known."""
    return make_toy_corpus(tmp_path_factory.mktemp("toy"), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_samples(toy_corpus):
    from toyutil import gold_samples

    return gold_samples(toy_corpus)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, seconds, detail in sorted(results):
        terminalreporter.write_line(f"[{number:2d}] {'PASS' if ok else 'FAIL'} {name} ({seconds:.1f}s) {detail}")
    passed = sum(r[2] for r in results)
    terminalreporter.write_line(f"{passed}/{len(results)} criteria passed")

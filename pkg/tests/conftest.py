import numpy as np
import pytest

from microcorn.datagen import CorpusConfig, build_corpus
from microcorn.models import ToyLM, ToyLMConfig, default_tokenizer

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def tok():
    return default_tokenizer()


@pytest.fixture(scope="session")
def small_corpus():
    return build_corpus(CorpusConfig(n_documents=384, n_train=96, n_test=32, n_golden=8, seed=3))


@pytest.fixture(scope="session")
def small_docs(small_corpus):
    return {d.id: d for d in small_corpus.documents}


@pytest.fixture
def untrained_lm(tok):
    lm = ToyLM(ToyLMConfig(vocab_size=len(tok)), seed=5)
    lm.freeze()
    return lm


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def pretrained(small_corpus, small_docs, tok):
    from microcorn.models import pretrain_toy_lm

    return pretrain_toy_lm(small_corpus.train, small_docs, tok, epochs=4, seed=0)

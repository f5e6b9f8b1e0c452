"""Shared tiny fixtures: a 5-document corpus and a model that memorizes it."""
from __future__ import annotations

import pytest

from docmia.seqmodel import ModelConfig, Seq2SeqModel, TrainConfig, qa_examples, train
from docmia.synthdata import CorpusConfig, generate_corpus

TINY = CorpusConfig(n_train=5, n_member=3, n_nonmember=3, n_pretrain=6)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(TINY, 0)


@pytest.fixture(scope="session")
def fresh_model(tiny_corpus):
    return Seq2SeqModel.initialize(ModelConfig(len(tiny_corpus.vocab)), 0, tiny_corpus.vocab)


@pytest.fixture(scope="session")
def overfit(tiny_corpus):
    """(model, train result) after memorizing the 5 training documents."""
    model = Seq2SeqModel.initialize(ModelConfig(len(tiny_corpus.vocab)), 0, tiny_corpus.vocab)
    res = train(model, qa_examples(tiny_corpus.train), TrainConfig(epochs=150, batch_size=8, lr=1e-2, schedule="cosine"))
    return model, res


# acceptance verdicts, printed together at the end of the session
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        ok, detail = CRITERIA[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")

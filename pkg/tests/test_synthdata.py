import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docmia.synthdata import (
    TRAIN_TEMPLATES,
    VARIANT_TEMPLATES,
    CorpusConfig,
    Document,
    PerturbationSpec,
    QAPair,
    generate_corpus,
    load_corpus,
    perturb_questions,
    save_corpus,
)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CorpusConfig(), 0)


def test_same_seed_gives_identical_corpus(tmp_path):
    a, b = generate_corpus(CorpusConfig(), 7), generate_corpus(CorpusConfig(), 7)
    save_corpus(a, tmp_path / "a.jsonl")
    save_corpus(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert generate_corpus(CorpusConfig(), 8).content_hash() != a.content_hash()


def test_attack_set_is_balanced(corpus):
    assert len(corpus.attack_set) == 100
    assert corpus.attack_labels.sum() == 50


def test_question_cap(corpus):
    docs = corpus.train + corpus.nonmembers + corpus.pretrain
    assert max(len(d.qa) for d in docs) <= 10
    assert min(len(d.qa) for d in docs) >= 1


def test_pools_are_disjoint_and_members_are_trained(corpus):
    train = {d.doc_id for d in corpus.train}
    assert {d.doc_id for d in corpus.members} <= train
    assert not train & {d.doc_id for d in corpus.nonmembers}
    assert not train & {d.doc_id for d in corpus.pretrain}
    assert not {d.doc_id for d in corpus.nonmembers} & {d.doc_id for d in corpus.pretrain}


def test_answers_are_extractive(corpus):
    for d in corpus.train[:50]:
        for qa in d.qa:
            assert d.value_of(qa.field_key) == qa.answer
            assert qa.template_id in TRAIN_TEMPLATES


def test_single_question_stratum_nonempty(corpus):
    assert any(len(d.qa) == 1 for d in corpus.members)


def test_corpus_round_trip(tmp_path, corpus):
    save_corpus(corpus, tmp_path / "c.jsonl")
    back = load_corpus(tmp_path / "c.jsonl")
    assert back.content_hash() == corpus.content_hash()
    assert [d.doc_id for d in back.members] == [d.doc_id for d in corpus.members]


def test_config_validation():
    with pytest.raises(ValueError):
        generate_corpus(CorpusConfig(n_train=10, n_member=20), 0)
    with pytest.raises(ValueError):
        generate_corpus(CorpusConfig(max_questions=0), 0)


def test_exact_mode_returns_training_questions(corpus):
    d = corpus.members[0]
    assert perturb_questions(d, PerturbationSpec("exact")) == list(d.qa)


def test_template_variant_is_deterministic_rephrasing(corpus):
    spec = PerturbationSpec("template-variant", 3)
    for d in corpus.members[:20]:
        a, b = perturb_questions(d, spec), perturb_questions(d, spec)
        assert a == b
        for orig, new in zip(d.qa, a):
            assert new.template_id in VARIANT_TEMPLATES
            assert new.question != orig.question
            assert new.answer == orig.answer and new.field_key in new.question


def test_perturbation_errors():
    with pytest.raises(ValueError):
        perturb_questions(Document("x", (("total", ("1",)),), ()), PerturbationSpec())
    bad = Document("x", (("total", ("1",)),), (QAPair(("q",), ("1",), 99, "total"),))
    with pytest.raises(ValueError):
        perturb_questions(bad, PerturbationSpec("template-variant"))
    good = Document("x", (("total", ("1",)),), (QAPair(("q",), ("1",), 0, "total"),))
    with pytest.raises(ValueError):
        perturb_questions(good, PerturbationSpec("shuffle"))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 10))
def test_question_counts_respect_cap(seed, cap):
    c = generate_corpus(CorpusConfig(n_train=20, n_member=5, n_nonmember=5, n_pretrain=5, max_questions=cap), seed)
    counts = np.array([len(d.qa) for d in c.train])
    assert counts.max() <= cap and counts.min() >= 1

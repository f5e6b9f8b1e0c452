import math

import numpy as np
import pytest

from docmia.attack import (
    AttackHyperparams,
    AttackVariant,
    dump_traces,
    extract_corpus_traces,
    extract_document_features,
    extract_trace,
    extract_traces,
    load_traces,
)
from docmia.metrics import nls
from docmia.synthdata import KEY_NAMES, Document, QAPair, render_question

FL = AttackVariant("FL", "final-projection")
HP = AttackHyperparams(lr=1e-3, max_steps=40, tau=1e-3)


def _pairs(docs):
    return [(d, i, qa) for d in docs for i, qa in enumerate(d.qa)]


def test_infinite_tau_stops_immediately(tiny_corpus, overfit):
    model, _ = overfit
    hp = AttackHyperparams(tau=math.inf)
    for variant in (FL, AttackVariant("FLLoRA", "final-projection", 2), AttackVariant("IG")):
        for t in extract_traces(model, _pairs(tiny_corpus.attack_set), variant, hp):
            assert t.delta == 0.0 and t.steps == 0
            assert len(t.utilities) == 1


def test_step_budget_and_history_length(tiny_corpus, overfit):
    model, _ = overfit
    hp = AttackHyperparams(lr=1e-3, max_steps=5, tau=0.0)
    for t in extract_traces(model, _pairs(tiny_corpus.nonmembers), FL, hp):
        assert t.steps == 5 and len(t.utilities) == 5
        assert t.delta > 0
        assert t.final_loss < t.initial_loss


def test_lora_step_zero_utility_is_base_utility(tiny_corpus, overfit):
    model, _ = overfit
    hp = AttackHyperparams(max_steps=3, tau=0.0)
    for d, _, qa in _pairs(tiny_corpus.attack_set):
        t = extract_trace(model, d, qa, AttackVariant("FLLoRA", "final-projection", 4), hp)
        assert t.utilities[0] == nls(model.generate(d, qa.question).tokens, qa.answer)
        assert t.initial_loss == pytest.approx(model.answer_loss(d, qa.question, qa.answer), abs=1e-12)


@pytest.mark.parametrize("variant", [FL, AttackVariant("FLLoRA", "final-projection", 4), AttackVariant("IG")], ids=lambda v: v.kind)
def test_members_move_less(tiny_corpus, overfit, variant):
    model, _ = overfit
    traces = extract_corpus_traces(model, tiny_corpus.attack_set, variant, HP)
    mean_delta = lambda docs: np.mean([t.delta for d in docs for t in traces[d.doc_id]])  # noqa: E731
    assert mean_delta(tiny_corpus.members) < mean_delta(tiny_corpus.nonmembers)


def _many_questions_doc(n=15):
    keys = KEY_NAMES[:n]
    fields = tuple((k, (str(i % 10),)) for i, k in enumerate(keys))
    return Document("big", fields, tuple(QAPair(render_question(0, k), v, 0, k) for k, v in fields))


def test_question_cap_and_single_pair(tiny_corpus, overfit):
    model, _ = overfit
    big = _many_questions_doc()
    assert len(extract_document_features(model, big, None, FL, AttackHyperparams(max_steps=2, max_questions=10))) == 10
    one = Document("one", big.fields[:1], big.qa[:1])
    assert len(extract_document_features(model, one, None, FL, AttackHyperparams(max_steps=2))) == 1


def test_traces_independent_of_order_and_chunking(tiny_corpus, overfit):
    model, _ = overfit
    pairs = _pairs(tiny_corpus.attack_set)
    base = extract_traces(model, pairs, FL, HP)
    perm = np.random.default_rng(0).permutation(len(pairs))
    shuffled = extract_traces(model, [pairs[i] for i in perm], FL, AttackHyperparams(**{**HP.__dict__, "chunk_size": 3}))
    for k, i in enumerate(perm):
        a, b = base[i], shuffled[k]
        assert (a.doc_id, a.question_index, a.steps) == (b.doc_id, b.question_index, b.steps)
        assert a.delta == pytest.approx(b.delta, rel=1e-9, abs=1e-12)
        assert a.utilities == b.utilities


def test_single_pair_matches_batched(tiny_corpus, overfit):
    model, _ = overfit
    pairs = _pairs(tiny_corpus.attack_set)
    batched = extract_traces(model, pairs, FL, HP)
    for (d, i, qa), t in list(zip(pairs, batched))[:4]:
        s = extract_trace(model, d, qa, FL, HP)
        assert s.steps == t.steps
        assert s.delta == pytest.approx(t.delta, rel=1e-9, abs=1e-12)


def test_threads_do_not_change_results(tiny_corpus, overfit):
    model, _ = overfit
    hp = AttackHyperparams(**{**HP.__dict__, "chunk_size": 4})
    a = extract_corpus_traces(model, tiny_corpus.attack_set, FL, hp, jobs=1)
    b = extract_corpus_traces(model, tiny_corpus.attack_set, FL, hp, jobs=3)
    assert [t.to_record() for ts in a.values() for t in ts] == [t.to_record() for ts in b.values() for t in ts]


def test_attack_never_modifies_target(tiny_corpus, overfit):
    model, _ = overfit
    before = model.fingerprint()
    for v in (FL, AttackVariant("FLLoRA", "final-projection", 2), AttackVariant("IG")):
        extract_corpus_traces(model, tiny_corpus.attack_set[:2], v, AttackHyperparams(max_steps=3))
    assert model.fingerprint() == before


def test_other_layers(tiny_corpus, overfit):
    model, _ = overfit
    for layer in ("decoder.0.fc1", "decoder.0.fc2", "encoder.0.fc2"):
        ts = extract_traces(model, _pairs(tiny_corpus.nonmembers[:1]), AttackVariant("FL", layer), AttackHyperparams(max_steps=3, tau=0.0))
        assert all(t.steps == 3 and t.delta > 0 for t in ts)
    with pytest.raises(KeyError):
        extract_traces(model, _pairs(tiny_corpus.nonmembers[:1]), AttackVariant("FL", "decoder.9.fc1"), HP)


def test_trace_round_trip(tmp_path, tiny_corpus, overfit):
    model, _ = overfit
    traces = extract_corpus_traces(model, tiny_corpus.attack_set, FL, AttackHyperparams(max_steps=4))
    dump_traces(traces, tmp_path / "t.jsonl", FL)
    back = load_traces(tmp_path / "t.jsonl")
    assert {k: [t.to_record() for t in v] for k, v in back.items()} == {k: [t.to_record() for t in v] for k, v in traces.items()}


def test_hyperparameter_validation():
    for bad in ({"lr": 0}, {"max_steps": 0}, {"tau": -1}, {"max_questions": 0}, {"utility": "bleu"}):
        with pytest.raises(ValueError):
            AttackHyperparams(**bad)
    with pytest.raises(ValueError):
        AttackVariant("GA")

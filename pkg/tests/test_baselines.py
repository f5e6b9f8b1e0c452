import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docmia import numerics as nx
from docmia.baselines import (
    PairStats,
    collect_pair_stats,
    loss_ta,
    lowest_k_mean,
    min_k_pair_score,
    min_k_pp_pair_score,
    min_k_pp_token_scores,
    per_example_grad_norms,
    run_baseline,
    score_ta,
)
from docmia.features import DegenerateInput
from docmia.numerics import Tensor
from docmia.seqmodel import batch_loss, make_batch


def test_score_ta_example_and_boundary():
    assert score_ta([0.9, 0.8, 0.2, 0.1]).tolist() == [1, 1, 0, 0]
    assert score_ta([0.4] * 4).tolist() == [1] * 4


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 100), min_size=2, max_size=20), st.integers(-5, 5))
def test_score_ta_shift_invariant(u, c):
    u = np.array(u, dtype=np.float64) / 4
    assert score_ta(u).tolist() == score_ta(u + c).tolist()


def test_loss_ta_example_and_boundary():
    assert loss_ta([0.1, 0.2, 2.0, 3.0]).tolist() == [1, 1, 0, 0]
    assert loss_ta([1.5] * 3).tolist() == [1] * 3


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=2, max_size=20), st.sampled_from([0.5, 2.0, 4.0]))
def test_loss_ta_scale_invariant(l, c):
    l = np.array(l, dtype=np.float64)
    assert loss_ta(l).tolist() == loss_ta(l * c).tolist()


def test_min_k_examples():
    lp = [-0.1, -0.5, -2.0]
    assert min_k_pair_score(lp, 0.34) == pytest.approx(-2.0)
    assert min_k_pair_score(lp, 1.0) == pytest.approx(np.mean(lp))
    with pytest.raises(ValueError):
        lowest_k_mean(lp, 0.0)


def test_min_k_pp_hand_value():
    z, skipped = min_k_pp_token_scores([math.log(0.9)], [np.array([0.9, 0.1])])
    assert skipped == 0
    assert z[0] == pytest.approx(0.3333, abs=1e-3)


def test_min_k_pp_mode_positive_and_uniform_skipped():
    p = np.array([0.97, 0.01, 0.01, 0.01])
    z, _ = min_k_pp_token_scores([math.log(0.97)], [p])
    assert z[0] > 0
    u = np.full(4, 0.25)
    z, skipped = min_k_pp_token_scores([math.log(0.25), math.log(0.9)], [u, np.array([0.9, 0.1])])
    assert skipped == 1 and len(z) == 1
    with pytest.raises(ValueError):
        min_k_pp_pair_score([math.log(0.25)], [u], 1.0)


def _stats(groups):
    out = {}
    for i, (u, l) in enumerate(groups):
        out[f"d{i}"] = [PairStats(f"d{i}", u, l, l * 2, np.array([-l]), np.array([[0.5, 0.5]]))]
    return out


def test_score_ua_separated_groups():
    s = _stats([(0.95, 0.1), (0.9, 0.1), (0.1, 2.0), (0.05, 2.1)])
    r = run_baseline("score-ua", s)
    assert r.labels.tolist() == [1, 1, 0, 0]
    assert run_baseline("score-ua-all", s).labels.tolist() == [1, 1, 0, 0]
    assert run_baseline("gradient-ua", s).labels.tolist() == [1, 1, 0, 0]
    assert run_baseline("scoreloss-ua-all", s).labels.tolist() == [1, 1, 0, 0]
    assert run_baseline("min-k", s).labels.tolist() == [1, 1, 0, 0]


def test_score_ua_constant_scores_degenerate():
    with pytest.raises(DegenerateInput):
        run_baseline("score-ua", _stats([(0.5, 0.1), (0.5, 0.2), (0.5, 0.3)]))


def test_scoreloss_with_constant_utility_follows_loss():
    s = _stats([(0.5, 0.1), (0.5, 0.2), (0.5, 3.0), (0.5, 3.1)])
    assert run_baseline("scoreloss-ua-all", s).labels.tolist() == loss_ta([0.1, 0.2, 3.0, 3.1]).tolist()


def test_unknown_baseline():
    with pytest.raises(ValueError):
        run_baseline("zlib", _stats([(0.1, 0.1), (0.9, 0.2)]))


def test_grad_norm_matches_full_gradient_norm(tiny_corpus, overfit):
    model, _ = overfit
    ex = [(d, qa.question, qa.answer) for d in tiny_corpus.attack_set[:4] for qa in d.qa[:1]]
    norms = per_example_grad_norms(model, make_batch(model, ex))
    for e, n in zip(ex, norms):
        leaves = {k: Tensor(v, True) for k, v in model.params.items()}
        total, _ = batch_loss(model, make_batch(model, [e]), leaves)
        assert n == pytest.approx(nx.l2_norm(nx.backward(total, leaves)), rel=1e-9)


def test_memorized_pairs_have_small_gradients(tiny_corpus, overfit):
    model, _ = overfit
    stats = collect_pair_stats(model, tiny_corpus.attack_set)
    mem = [p.grad_norm for d in tiny_corpus.members for p in stats[d.doc_id]]
    non = [p.grad_norm for d in tiny_corpus.nonmembers for p in stats[d.doc_id]]
    assert np.mean(mem) < np.mean(non)
    assert min(mem) < 0.05 * np.mean(non)

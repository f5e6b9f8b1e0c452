"""Comparison attacks: threshold, clustering and Min-K% style baselines.

All of them start from per-pair statistics of the target at its trained
parameters (no fine-tuning): the greedy answer's utility, the gold answer's
loss, the gradient norm of that loss, and the generated tokens'
log-probabilities and next-token distributions.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .attack import select_questions
from .features import PHI_ALL, build_descriptors, cluster_descriptors
from .metrics import utility
from .numerics import Tensor
from .seqmodel import Seq2SeqModel, batch_loss, generate, make_batch
from .synthdata import Document, detokenize

log = logging.getLogger(__name__)

BASELINES = ("score-ta", "score-ua", "score-ua-all", "loss-ta", "gradient-ua", "scoreloss-ua-all", "min-k", "min-k++")
MIN_K_GRID = (0.6, 0.7, 0.8, 0.9, 1.0)


@dataclass
class PairStats:
    doc_id: str
    utility: float
    loss: float
    grad_norm: float | None
    logprobs: np.ndarray  # generated tokens, <eos> included when emitted
    distributions: np.ndarray  # (steps, V)


@dataclass
class BaselineResult:
    name: str
    doc_ids: list[str]
    labels: np.ndarray  # 1 = member
    scores: np.ndarray  # higher = more member-like
    info: dict


def collect_pair_stats(
    model: Seq2SeqModel,
    documents: Sequence[Document],
    max_questions: int = 10,
    utility_kind: str = "nls",
    with_gradients: bool = True,
    questions=None,
    chunk_size: int = 64,
) -> dict[str, list[PairStats]]:
    pairs = []
    for d in documents:
        for qa in select_questions(d, questions(d) if questions else None, max_questions):
            pairs.append((d, qa))
    out: dict[str, list[PairStats]] = {d.doc_id: [] for d in documents}
    base = model.tensors()
    for start in range(0, len(pairs), chunk_size):
        chunk = pairs[start : start + chunk_size]
        gens = generate(model, [(d, qa.question) for d, qa in chunk])
        batch = make_batch(model, [(d, qa.question, qa.answer) for d, qa in chunk])
        norms = per_example_grad_norms(model, batch) if with_gradients else [None] * len(chunk)
        _, losses = batch_loss(model, batch, base)
        for (d, qa), g, loss, gn in zip(chunk, gens, losses, norms):
            u = utility(utility_kind, detokenize(g.tokens), detokenize(qa.answer))
            out[d.doc_id].append(PairStats(d.doc_id, u, float(loss), gn, g.logprobs, g.distributions))
    return out


def per_example_grad_norms(model: Seq2SeqModel, batch) -> list[float]:
    """``||grad_theta loss||_2`` over all parameters, for each example separately."""
    n = len(batch)
    leaves = {k: Tensor(np.repeat(v[None], n, axis=0), True) for k, v in model.params.items()}
    total, _ = batch_loss(model, batch, leaves)
    grads = nx.backward(total, leaves)
    sq = sum(np.square(g).reshape(n, -1).sum(axis=1) for g in grads.values())
    return [float(x) for x in np.sqrt(sq)]


def _doc_mean(stats: dict[str, list[PairStats]], attr: str) -> np.ndarray:
    return np.array([np.mean([getattr(p, attr) for p in ps]) for ps in stats.values()])


# ---------------------------------------------------------------------------
# threshold attacks


def score_ta(mean_utilities) -> np.ndarray:
    """Member iff the document's mean utility is at least the attack-set mean."""
    u = np.asarray(mean_utilities, dtype=np.float64)
    return (u >= u.mean()).astype(np.int64)


def loss_ta(mean_losses) -> np.ndarray:
    """Member iff the document's mean loss is at most the attack-set mean."""
    l = np.asarray(mean_losses, dtype=np.float64)
    return (l <= l.mean()).astype(np.int64)


# ---------------------------------------------------------------------------
# Min-K% and Min-K%++


def lowest_k_mean(values, k: float) -> float:
    if not 0 < k <= 1:
        raise ValueError("K fraction must be in (0, 1]")
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("empty answer")
    n = max(1, int(math.floor(k * v.size)))
    return float(v[:n].mean())


def min_k_pair_score(logprobs, k: float) -> float:
    return lowest_k_mean(logprobs, k)


def min_k_pp_token_scores(logprobs, distributions) -> tuple[np.ndarray, int]:
    """Per-token ``(log p(token) - mu) / sigma`` over the next-token distribution.

    Tokens whose distribution has zero spread of log-probabilities are
    skipped; the number skipped is returned.
    """
    z, skipped = [], 0
    for lp, p in zip(logprobs, distributions):
        p = np.asarray(p, dtype=np.float64)
        with np.errstate(divide="ignore"):
            logp = np.log(p)
        ok = p > 0
        mu = float(np.sum(p[ok] * logp[ok]))
        var = float(np.sum(p[ok] * (logp[ok] - mu) ** 2))
        sigma = math.sqrt(max(var, 0.0))
        if sigma <= 1e-12:
            skipped += 1
            continue
        z.append((lp - mu) / sigma)
    return np.array(z), skipped


def min_k_pp_pair_score(logprobs, distributions, k: float) -> float:
    z, skipped = min_k_pp_token_scores(logprobs, distributions)
    if skipped:
        log.debug("min-k++: %d tokens with a flat distribution skipped", skipped)
    if z.size == 0:
        raise ValueError("every token had a flat next-token distribution")
    return lowest_k_mean(z, k)


# ---------------------------------------------------------------------------
# running the baselines


def _cluster(name, stats, columns, direction, seed, per_pair) -> BaselineResult:
    recs = {d: [per_pair(p) for p in ps] for d, ps in stats.items()}
    desc = build_descriptors(recs, columns)
    res = cluster_descriptors(desc, seed, direction=direction)
    return BaselineResult(name, desc.doc_ids, res.labels, res.scores, {"columns": desc.names})


def run_baseline(name: str, stats: dict[str, list[PairStats]], seed: int = 0, k: float = 1.0) -> BaselineResult:
    doc_ids = list(stats)
    if name == "score-ta":
        u = _doc_mean(stats, "utility")
        return BaselineResult(name, doc_ids, score_ta(u), u, {"kappa": float(u.mean())})
    if name == "loss-ta":
        l = _doc_mean(stats, "loss")
        return BaselineResult(name, doc_ids, loss_ta(l), -l, {"kappa": float(l.mean())})
    if name == "score-ua":
        return _cluster(name, stats, [("avg", "utility")], ("avg", "utility"), seed, lambda p: {"utility": p.utility})
    if name == "score-ua-all":
        return _cluster(name, stats, [(a, "utility") for a in PHI_ALL], ("avg", "utility"), seed, lambda p: {"utility": p.utility})
    if name == "gradient-ua":
        if any(p.grad_norm is None for ps in stats.values() for p in ps):
            raise ValueError("gradient-ua needs per-pair gradient norms")
        cols = [(a, f) for f in ("grad_norm", "utility") for a in PHI_ALL]
        return _cluster(name, stats, cols, ("avg", "grad_norm"), seed, lambda p: {"grad_norm": p.grad_norm, "utility": p.utility})
    if name == "scoreloss-ua-all":
        cols = [(a, f) for f in ("loss", "utility") for a in PHI_ALL]
        return _cluster(name, stats, cols, ("avg", "loss"), seed, lambda p: {"loss": p.loss, "utility": p.utility})
    if name in ("min-k", "min-k++"):
        if name == "min-k":
            score = lambda p: min_k_pair_score(p.logprobs, k)  # noqa: E731
        else:
            score = lambda p: min_k_pp_pair_score(p.logprobs, p.distributions, k)  # noqa: E731
        res = _cluster(name, stats, [("avg", "score")], ("avg", "score"), seed, lambda p: {"score": score(p)})
        # the per-document score itself is the natural continuous signal
        res.scores = np.array([np.mean([score(p) for p in ps]) for ps in stats.values()])
        res.info["k"] = k
        return res
    raise ValueError(f"unknown baseline {name!r}; expected one of {BASELINES}")

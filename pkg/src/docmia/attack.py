"""Optimization-distance features for one (question, answer) pair at a time.

For every pair the designated parameters (one layer, a fresh LoRA adapter on
that layer, or the continuous document input) are fine-tuned with Adam on
the pair's answer NLL, starting from the target's values.  The trace records
how far they moved (delta), how many steps it took and the utility of the
greedy answer along the way.

Pairs are optimized independently but computed together: each designated
tensor gets a leading axis with one copy per pair, so a single forward and
backward pass advances every pair by one step, and pairs that have stopped
are simply masked out of the update.
"""
from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .metrics import UtilityKind, utility
from .numerics import NumericError, Tensor
from .seqmodel import Batch, Seq2SeqModel, batch_loss, encode, greedy_ids, lora_dims, make_batch
from .synthdata import Document, QAPair, detokenize

log = logging.getLogger(__name__)

VARIANT_KINDS = ("FL", "FLLoRA", "IG")


@dataclass(frozen=True)
class AttackVariant:
    kind: str = "FL"
    layer: str = "final-projection"
    rank: int = 4

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ValueError(f"unknown attack variant {self.kind!r}; expected one of {VARIANT_KINDS}")
        if self.kind == "FLLoRA" and self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")

    def check(self, model: Seq2SeqModel) -> None:
        if self.kind == "FL":
            model.resolve_layer(self.layer)
        elif self.kind == "FLLoRA":
            lora_dims(model, self.layer)

    @property
    def label(self) -> str:
        if self.kind == "IG":
            return "IG"
        if self.kind == "FLLoRA":
            return f"FLLoRA[{self.layer},r={self.rank}]"
        return f"FL[{self.layer}]"


@dataclass(frozen=True)
class AttackHyperparams:
    lr: float = 1e-3
    max_steps: int = 200
    tau: float = 1e-3
    utility: str = "nls"
    max_questions: int = 10
    seed: int = 0  # LoRA adapter initialization
    chunk_size: int = 64  # pairs optimized together; fixed so results never depend on --jobs

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not self.tau >= 0:
            raise ValueError("tau must be >= 0")
        if self.max_questions < 1:
            raise ValueError("max_questions must be >= 1")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        UtilityKind(self.utility)


@dataclass
class OptimizationTrace:
    doc_id: str
    question_index: int
    delta: float
    steps: int
    utilities: list[float]
    initial_loss: float
    final_loss: float
    failed: bool = False
    error: str | None = None

    @property
    def utility(self) -> float:
        """Mean utility over the optimization (the per-pair ``u``)."""
        return float(np.mean(self.utilities)) if self.utilities else float("nan")

    def to_record(self, variant: AttackVariant | None = None) -> dict:
        rec = asdict(self)
        rec["utility"] = self.utility
        if variant is not None:
            rec["variant"] = variant.label
        return rec


class AttackError(RuntimeError):
    pass


def select_questions(doc: Document, questions: Sequence[QAPair] | None, max_questions: int) -> list[QAPair]:
    """The first ``max_questions`` pairs in corpus order."""
    qs = list(doc.qa if questions is None else questions)
    if not qs:
        raise ValueError(f"document {doc.doc_id} has no question-answer pairs")
    return qs[:max_questions]


# ---------------------------------------------------------------------------
# designated parameters


class _Designated:
    """Stacked per-pair copies of whatever the variant optimizes."""

    def __init__(self, model: Seq2SeqModel, batch: Batch, variant: AttackVariant, hp: AttackHyperparams):
        self.model = model
        self.variant = variant
        n = len(batch)
        if variant.kind == "FL":
            names = model.resolve_layer(variant.layer)
            self.values = {k: np.repeat(model.params[k][None], n, axis=0) for k in names}
            self.decoder_only = all(k.startswith(("decoder.", "final-projection.")) for k in names)
        elif variant.kind == "FLLoRA":
            d_in, d_out = lora_dims(model, variant.layer)
            rng = nx.rng_stream(hp.seed, f"lora/{variant.layer}")
            A = nx.kaiming_init(d_in, (d_in, variant.rank), rng)
            self.values = {"A": np.repeat(A[None], n, axis=0), "B": np.zeros((n, variant.rank, d_out))}
            self.decoder_only = variant.layer.startswith(("decoder.", "final-projection"))
        else:
            table = model.params["encoder.embedding.tokens"]
            view = table[batch.src] * batch.doc_mask[..., None]
            self.values = {"view": view}
            self.decoder_only = False
        self.initial = {k: v.copy() for k, v in self.values.items()}

    def leaves(self, idx: np.ndarray) -> dict[str, Tensor]:
        return {k: Tensor(v[idx], True) for k, v in self.values.items()}

    def constants(self, idx: np.ndarray) -> dict[str, Tensor]:
        return {k: Tensor(v[idx]) for k, v in self.values.items()}

    def forward_args(self, leaves: dict[str, Tensor]) -> tuple[dict, dict | None, Tensor | None]:
        """(parameter overrides, lora map, document view) for the forward pass."""
        kind = self.variant.kind
        if kind == "FL":
            return leaves, None, None
        if kind == "FLLoRA":
            return {}, {self.variant.layer: (leaves["A"], leaves["B"], 1.0)}, None
        return {}, None, leaves["view"]

    def distances(self) -> np.ndarray:
        sq = sum(np.square(v - self.initial[k]).reshape(v.shape[0], -1).sum(axis=1) for k, v in self.values.items())
        return np.sqrt(sq)


# ---------------------------------------------------------------------------
# trace extraction


def _answers(model: Seq2SeqModel, ids: list[list[int]]) -> list[str]:
    return [detokenize(model.vocab.decode(s)) for s in ids]


def _optimize_chunk(model: Seq2SeqModel, pairs: Sequence[tuple[Document, int, QAPair]], variant: AttackVariant, hp: AttackHyperparams) -> list[OptimizationTrace]:
    batch = make_batch(model, [(d, qa.question, qa.answer) for d, _, qa in pairs])
    n = len(batch)
    golds = [detokenize(qa.answer) for _, _, qa in pairs]
    des = _Designated(model, batch, variant, hp)
    base = model.tensors()
    memory = None
    if des.decoder_only:
        memory = encode(model, batch, base).data

    state = nx.AdamState(lr=hp.lr)
    active = np.ones(n, dtype=bool)
    steps = np.zeros(n, dtype=np.int64)
    prev_loss = np.zeros(n)
    first_loss = np.full(n, np.nan)
    last_loss = np.full(n, np.nan)
    history: list[list[float]] = [[] for _ in range(n)]
    failed: dict[int, str] = {}

    while active.any():
        idx = np.flatnonzero(active)
        sub = batch.take(idx)
        mem = Tensor(memory[idx]) if memory is not None else None
        leaves = des.leaves(idx)
        overrides, lora, view = des.forward_args(leaves)
        P = dict(base)
        P.update(overrides)
        try:
            total, per = batch_loss(model, sub, P, lora, view, mem)
            if not np.all(np.isfinite(per)):
                raise NumericError("non-finite loss")
            grads = nx.backward(total, leaves)
        except NumericError:
            # isolate the offending pairs by retrying one at a time
            per, grads = _per_pair_fallback(model, sub, base, des, idx, mem, failed)
        c_over, c_lora, c_view = des.forward_args(des.constants(idx))
        Pc = dict(base)
        Pc.update(c_over)
        ids, _, _ = greedy_ids(model, sub, Pc, c_lora, c_view, mem)
        for j, pred in zip(idx, _answers(model, ids)):
            if j not in failed:
                history[j].append(utility(hp.utility, pred, golds[j]))

        stop = np.zeros(len(idx), dtype=bool)
        for r, j in enumerate(idx):
            if j in failed:
                stop[r] = True
                continue
            loss = float(per[r])
            if steps[j] == 0:
                first_loss[j] = loss
                hit = loss < hp.tau
            else:
                hit = abs(prev_loss[j] - loss) < hp.tau
            last_loss[j] = loss
            prev_loss[j] = loss
            stop[r] = hit
        go = np.zeros(n, dtype=bool)
        go[idx[~stop]] = True
        active[idx[stop]] = False
        if go.any():
            full = {k: np.zeros_like(v) for k, v in des.values.items()}
            for k in full:
                full[k][idx] = grads[k]
            nx.adam_step(des.values, full, state, active=go)
            steps[go] += 1
            active &= steps < hp.max_steps

    # pairs that exhausted the step budget: loss at the final parameters
    exhausted = np.flatnonzero((steps >= hp.max_steps))
    if exhausted.size:
        sub = batch.take(exhausted)
        mem = Tensor(memory[exhausted]) if memory is not None else None
        over, lora, view = des.forward_args(des.constants(exhausted))
        P = dict(base)
        P.update(over)
        _, per = batch_loss(model, sub, P, lora, view, mem)
        last_loss[exhausted] = per

    dist = des.distances()
    out = []
    for j, (doc, qi, _) in enumerate(pairs):
        err = failed.get(j)
        out.append(
            OptimizationTrace(
                doc_id=doc.doc_id,
                question_index=qi,
                delta=float(dist[j]) if err is None else float("nan"),
                steps=int(steps[j]),
                utilities=history[j],
                initial_loss=float(first_loss[j]),
                final_loss=float(last_loss[j]) if err is None else float("nan"),
                failed=err is not None,
                error=err,
            )
        )
    return out


def _per_pair_fallback(model, sub, base, des, idx, mem, failed):
    per = np.zeros(len(idx))
    grads = {k: np.zeros((len(idx),) + v.shape[1:]) for k, v in des.values.items()}
    for r, j in enumerate(idx):
        if j in failed:
            continue
        one = np.array([j])
        leaves = des.leaves(one)
        over, lora, view = des.forward_args(leaves)
        P = dict(base)
        P.update(over)
        m1 = Tensor(mem.data[r : r + 1]) if mem is not None else None
        try:
            total, p1 = batch_loss(model, sub.take(np.array([r])), P, lora, view, m1)
            if not np.all(np.isfinite(p1)):
                raise NumericError("non-finite loss")
            g = nx.backward(total, leaves)
        except NumericError as e:
            failed[j] = str(e) or "numeric failure"
            log.warning("trace %d failed: %s", j, failed[j])
            continue
        per[r] = p1[0]
        for k in grads:
            grads[k][r] = g[k][0]
    return per, grads


def extract_traces(
    model: Seq2SeqModel,
    pairs: Sequence[tuple[Document, int, QAPair]],
    variant: AttackVariant,
    hp: AttackHyperparams,
    jobs: int = 1,
) -> list[OptimizationTrace]:
    """Traces for ``(document, question index, qa)`` triples, in input order.

    Pairs are split into fixed chunks of ``hp.chunk_size``; chunks run on up
    to ``jobs`` threads.  The chunking never depends on ``jobs``.
    """
    variant.check(model)
    chunks = [pairs[i : i + hp.chunk_size] for i in range(0, len(pairs), hp.chunk_size)]
    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(lambda c: _optimize_chunk(model, c, variant, hp), chunks))
    else:
        parts = [_optimize_chunk(model, c, variant, hp) for c in chunks]
    return [t for part in parts for t in part]


def extract_trace(model: Seq2SeqModel, document: Document, qa: QAPair, variant: AttackVariant, hp: AttackHyperparams) -> OptimizationTrace:
    return extract_traces(model, [(document, 0, qa)], variant, hp)[0]


def extract_document_features(model, document: Document, questions, variant: AttackVariant, hp: AttackHyperparams) -> list[OptimizationTrace]:
    qs = select_questions(document, questions, hp.max_questions)
    return extract_traces(model, [(document, i, qa) for i, qa in enumerate(qs)], variant, hp)


def extract_corpus_traces(
    model: Seq2SeqModel,
    documents: Sequence[Document],
    variant: AttackVariant,
    hp: AttackHyperparams,
    questions=None,
    jobs: int = 1,
) -> dict[str, list[OptimizationTrace]]:
    """Traces for every document, keyed by doc_id (document order preserved).

    ``questions(doc)`` optionally supplies the attacker's questions (for
    example template variants); the default is the document's own pairs.
    """
    pairs = []
    for doc in documents:
        qs = select_questions(doc, questions(doc) if questions else None, hp.max_questions)
        pairs.extend((doc, i, qa) for i, qa in enumerate(qs))
    traces = extract_traces(model, pairs, variant, hp, jobs)
    out: dict[str, list[OptimizationTrace]] = {d.doc_id: [] for d in documents}
    for t in traces:
        out[t.doc_id].append(t)
    n_failed = sum(t.failed for t in traces)
    if n_failed:
        log.warning("%d of %d traces failed and will be excluded", n_failed, len(traces))
    return out


def dump_traces(traces: dict[str, list[OptimizationTrace]], path, variant: AttackVariant | None = None) -> None:
    with open(path, "w") as fh:
        for doc_traces in traces.values():
            for t in doc_traces:
                rec = t.to_record(variant)
                for k in ("delta", "initial_loss", "final_loss", "utility"):
                    if isinstance(rec[k], float) and not math.isfinite(rec[k]):
                        rec[k] = None
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_traces(path) -> dict[str, list[OptimizationTrace]]:
    out: dict[str, list[OptimizationTrace]] = {}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            rec.pop("utility", None)
            rec.pop("variant", None)
            for k in ("delta", "initial_loss", "final_loss"):
                if rec[k] is None:
                    rec[k] = float("nan")
            out.setdefault(rec["doc_id"], []).append(OptimizationTrace(**rec))
    return out

"""Label-only attack: distill the black box into a proxy, then attack the proxy.

The attacker only sees an answer oracle.  It asks the oracle its questions
about every attack-set document, trains a proxy (initialized from a model
trained on a disjoint document pool) to reproduce those answers, and runs
the white-box feature extraction against the proxy using its own question
and answer pairs.
"""
from __future__ import annotations

import json
import logging
import subprocess
import sys
import threading
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackHyperparams, AttackVariant, OptimizationTrace, extract_corpus_traces, select_questions
from .features import ClusterResult, FeatureDescriptors, build_descriptors, cluster_descriptors, trace_records
from .seqmodel import ModelConfig, Seq2SeqModel, TrainConfig, generate, qa_examples, train
from .synthdata import Document, QAPair, Vocabulary, document_from_record, document_to_record

log = logging.getLogger(__name__)


class QueryBudgetExceeded(RuntimeError):
    pass


class BlackBoxHandle:
    """Answer oracle with exact query accounting.

    Wraps a function ``answer(pairs) -> answers`` over ``(document,
    question)`` pairs.  The handle keeps no reference to any model, so code
    holding only the handle cannot read parameters, losses or log-probs.
    """

    __slots__ = ("_answer", "_count", "_budget", "_lock")

    def __init__(self, answer: Callable[[list[tuple[Document, tuple]]], list[tuple[str, ...]]], budget: int | None = None):
        self._answer = answer
        self._count = 0
        self._budget = budget
        self._lock = threading.Lock()

    @property
    def queries(self) -> int:
        return self._count

    @property
    def budget(self) -> int | None:
        return self._budget

    @property
    def remaining(self) -> float:
        return float("inf") if self._budget is None else self._budget - self._count

    def ask(self, document: Document, question) -> tuple[str, ...]:
        return self.ask_many([(document, tuple(question))])[0]

    def ask_many(self, pairs: Sequence[tuple[Document, tuple]]) -> list[tuple[str, ...]]:
        with self._lock:
            if len(pairs) > self.remaining:
                raise QueryBudgetExceeded(f"{len(pairs)} queries requested, {self.remaining} left of budget {self._budget}")
            self._count += len(pairs)
            return [tuple(a) for a in self._answer(list(pairs))]


def model_oracle(model: Seq2SeqModel, budget: int | None = None) -> BlackBoxHandle:
    """Oracle answering with the model's greedy decode."""

    def answer(pairs):
        return [tuple(g.tokens) for g in generate(model, pairs)]

    return BlackBoxHandle(answer, budget)


class SubprocessAnswerer:
    """Talks to an external answerer over line-delimited JSON on stdin/stdout.

    Request: ``{"doc": <document record>, "question": [tokens]}``.
    Response: ``{"answer": [tokens]}``, one line per request, same order.
    """

    def __init__(self, argv: Sequence[str]):
        self.proc = subprocess.Popen(list(argv), stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1)

    def __call__(self, pairs):
        out = []
        for doc, q in pairs:
            rec = document_to_record(Document(doc.doc_id, doc.fields))
            self.proc.stdin.write(json.dumps({"doc": rec, "question": list(q)}) + "\n")
            self.proc.stdin.flush()
            line = self.proc.stdout.readline()
            if not line:
                raise RuntimeError("external answerer closed its output")
            out.append(tuple(json.loads(line)["answer"]))
        return out

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=30)


def subprocess_oracle(argv: Sequence[str], budget: int | None = None) -> tuple[BlackBoxHandle, SubprocessAnswerer]:
    ans = SubprocessAnswerer(argv)
    return BlackBoxHandle(ans, budget), ans


def serve_checkpoint(path: str, stdin=None, stdout=None) -> None:
    """Answer line-delimited queries with a checkpoint (the far end of the adapter)."""
    from .seqmodel import load_checkpoint

    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    model = load_checkpoint(path)
    for line in stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        doc = document_from_record({**req["doc"], "qa": req["doc"].get("qa", [])})
        g = generate(model, [(doc, tuple(req["question"]))])[0]
        stdout.write(json.dumps({"answer": g.tokens}) + "\n")
        stdout.flush()


# ---------------------------------------------------------------------------
# query dataset


@dataclass
class QueryDataset:
    documents: list[Document]  # qa answers are oracle answers

    def __len__(self):
        return sum(len(d.qa) for d in self.documents)

    def examples(self):
        return qa_examples(self.documents)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"format": "docmia-query-dataset", "version": 1}) + "\n")
            for d in self.documents:
                fh.write(json.dumps(document_to_record(d, ["query"]), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "QueryDataset":
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("format") != "docmia-query-dataset":
                raise ValueError(f"{path}: not a query dataset")
            return cls([document_from_record(json.loads(line)) for line in fh if line.strip()])


def build_query_dataset(oracle: BlackBoxHandle, documents: Sequence[Document], max_questions: int = 10, questions=None) -> QueryDataset:
    """One oracle call per (document, question); aborts up front if over budget."""
    plan = []
    for d in documents:
        qs = select_questions(d, questions(d) if questions else None, max_questions)
        plan.append((d, qs))
    needed = sum(len(qs) for _, qs in plan)
    if needed > oracle.remaining:
        raise QueryBudgetExceeded(f"{needed} queries needed, only {oracle.remaining} left")
    answers = oracle.ask_many([(d, qa.question) for d, qs in plan for qa in qs])
    out, k = [], 0
    for d, qs in plan:
        qa = []
        for q in qs:
            qa.append(QAPair(q.question, answers[k], q.template_id, q.field_key))
            k += 1
        out.append(Document(d.doc_id, d.fields, tuple(qa)))
    return QueryDataset(out)


# ---------------------------------------------------------------------------
# proxy


@dataclass(frozen=True)
class ProxyConfig:
    d_model: int = 48
    d_ff: int = 96
    n_encoder_blocks: int = 1
    n_decoder_blocks: int = 1
    pretrain: TrainConfig = TrainConfig(epochs=30, batch_size=32, lr=3e-3)
    distill: TrainConfig = TrainConfig(epochs=50, batch_size=8, lr=3e-3, loss_floor=1e-2)
    seed: int = 0

    def model_config(self, vocab_size: int, like: ModelConfig | None = None) -> ModelConfig:
        base = like or ModelConfig(vocab_size)
        return ModelConfig(
            vocab_size,
            d_model=self.d_model,
            d_ff=self.d_ff,
            n_encoder_blocks=self.n_encoder_blocks,
            n_decoder_blocks=self.n_decoder_blocks,
            max_source_len=base.max_source_len,
            max_answer_len=base.max_answer_len,
            max_rows=base.max_rows,
            max_cols=base.max_cols,
        )

    @classmethod
    def matching(cls, target: ModelConfig, **kw) -> "ProxyConfig":
        """Same architecture as the target."""
        return cls(d_model=target.d_model, d_ff=target.d_ff, n_encoder_blocks=target.n_encoder_blocks, n_decoder_blocks=target.n_decoder_blocks, **kw)


def pretrain_proxy(cfg: ProxyConfig, pool: Sequence[Document], vocab: Vocabulary | None = None, exclude: Sequence[Document] = ()) -> Seq2SeqModel:
    """Proxy initialization trained on the disjoint pool's own question-answer pairs."""
    if not pool:
        raise ValueError("the pretrain pool is empty")
    clash = {d.doc_id for d in pool} & {d.doc_id for d in exclude}
    if clash:
        raise ValueError(f"pretrain pool overlaps the protected documents: {sorted(clash)[:5]}")
    vocab = vocab or Vocabulary.default()
    model = Seq2SeqModel.initialize(cfg.model_config(len(vocab)), cfg.seed, vocab)
    train(model, qa_examples(pool), cfg.pretrain)
    model.metadata.update({"role": "proxy-pretrained", "pool_size": len(pool)})
    return model


@dataclass
class DistillResult:
    model: Seq2SeqModel
    loss_curve: list[float]
    snapshots: list[dict[str, np.ndarray]] = field(default_factory=list)


def distill_proxy(pretrained: Seq2SeqModel, data: QueryDataset, cfg: TrainConfig, keep_snapshots: bool = False) -> DistillResult:
    """Fit the proxy to the oracle's answers until the loss floor or epoch cap."""
    if len(data) == 0:
        raise ValueError("the query dataset is empty")
    model = pretrained.clone()
    snaps: list[dict[str, np.ndarray]] = []

    def keep(epoch, m, loss):
        if keep_snapshots:
            snaps.append({k: v.copy() for k, v in m.params.items()})
        return False

    res = train(model, data.examples(), cfg, callback=keep)
    model.metadata.update({"role": "proxy-distilled", "epochs": res.epochs_run})
    return DistillResult(model, res.loss_curve, snaps)


@dataclass
class BlackBoxResult:
    traces: dict[str, list[OptimizationTrace]]
    descriptors: FeatureDescriptors
    clusters: ClusterResult
    query_count: int
    distill: DistillResult


def blackbox_attack(
    oracle: BlackBoxHandle,
    documents: Sequence[Document],
    variant: AttackVariant,
    hp: AttackHyperparams,
    proxy: ProxyConfig,
    pool: Sequence[Document],
    columns,
    seed: int = 0,
    pretrained: Seq2SeqModel | None = None,
    jobs: int = 1,
) -> BlackBoxResult:
    """Query, distill, then run the white-box pipeline against the proxy."""
    start = oracle.queries
    data = build_query_dataset(oracle, documents, hp.max_questions)
    if pretrained is None:
        pretrained = pretrain_proxy(proxy, pool, exclude=documents)
    distilled = distill_proxy(pretrained, data, proxy.distill)
    traces = extract_corpus_traces(distilled.model, documents, variant, hp, jobs=jobs)
    desc = build_descriptors(trace_records(traces), columns)
    clusters = cluster_descriptors(desc, seed)
    return BlackBoxResult(traces, desc, clusters, oracle.queries - start, distilled)


if __name__ == "__main__":
    # python -m docmia.blackbox CHECKPOINT: serve answers over stdin/stdout
    serve_checkpoint(sys.argv[1])

"""A tiny encoder-decoder answer generator over synthetic documents.

The encoder reads ``question <sep> document`` and the decoder emits the
answer tokens followed by ``<eos>``.  One pre-norm attention block on each
side, single-head attention, and a named vocabulary projection.

Parameters live in a flat ``name -> ndarray`` dict.  Names are
``<layer>.<leaf>`` and the layer registry maps every layer to its leaves.
The forward functions take a ``name -> Tensor`` mapping instead of reading
the dict directly, so callers can substitute trainable leaves, per-example
copies (leading batch axis), LoRA adapters or a free document embedding.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import OrderedDict
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .synthdata import BOS_ID, EOS_ID, PAD_ID, SEP, Document, Vocabulary

log = logging.getLogger(__name__)

NEG_INF = -1e9
CHECKPOINT_FORMAT = "docmia-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    d_ff: int = 64
    n_encoder_blocks: int = 1
    n_decoder_blocks: int = 1
    max_source_len: int = 72
    max_answer_len: int = 4  # answer tokens, <eos> excluded
    max_rows: int = 16  # layout rows: 0 = question, 1.. = document fields
    max_cols: int = 8  # layout columns: offset inside the row

    def check(self) -> None:
        for name in ("vocab_size", "d_model", "d_ff", "n_encoder_blocks", "n_decoder_blocks", "max_source_len", "max_answer_len", "max_rows", "max_cols"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.vocab_size <= EOS_ID:
            raise ValueError("vocabulary must include the special tokens")


# ---------------------------------------------------------------------------
# parameters and layer registry


def _layer_shapes(cfg: ModelConfig) -> "OrderedDict[str, dict[str, tuple]]":
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    attn = {"query": (d, d), "key": (d, d), "value": (d, d), "out": (d, d)}
    norm = {"gain": (d,), "bias": (d,)}
    layers: OrderedDict[str, dict[str, tuple]] = OrderedDict()
    layers["encoder.embedding"] = {"tokens": (V, d), "rows": (cfg.max_rows, d), "cols": (cfg.max_cols, d)}
    for i in range(cfg.n_encoder_blocks):
        p = f"encoder.{i}"
        layers[f"{p}.attn-norm"] = dict(norm)
        layers[f"{p}.self-attn"] = dict(attn)
        layers[f"{p}.layer-norm"] = dict(norm)
        layers[f"{p}.fc1"] = {"weight": (d, f), "bias": (f,)}
        layers[f"{p}.fc2"] = {"weight": (f, d), "bias": (d,)}
    layers["encoder.final-norm"] = dict(norm)
    layers["decoder.embedding"] = {"tokens": (V, d), "positions": (cfg.max_answer_len + 1, d)}
    for i in range(cfg.n_decoder_blocks):
        p = f"decoder.{i}"
        layers[f"{p}.attn-norm"] = dict(norm)
        layers[f"{p}.self-attn"] = dict(attn)
        layers[f"{p}.cross-norm"] = dict(norm)
        layers[f"{p}.cross-attn"] = dict(attn)
        layers[f"{p}.layer-norm"] = dict(norm)
        layers[f"{p}.fc1"] = {"weight": (d, f), "bias": (f,)}
        layers[f"{p}.fc2"] = {"weight": (f, d), "bias": (d,)}
    layers["decoder.final-norm"] = dict(norm)
    layers["final-projection"] = {"weight": (d, V), "bias": (V,)}
    return layers


def _init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = nx.rng_stream(seed, "model-init")
    params: dict[str, np.ndarray] = {}
    for layer, leaves in _layer_shapes(cfg).items():
        for leaf, shape in leaves.items():
            name = f"{layer}.{leaf}"
            if layer == "final-projection":
                # zero head: the untrained model predicts a uniform distribution
                params[name] = np.zeros(shape)
            elif leaf == "gain":
                params[name] = np.ones(shape)
            elif leaf == "bias":
                params[name] = np.zeros(shape)
            elif leaf in ("tokens", "positions", "rows", "cols"):
                params[name] = rng.normal(0.0, 1.0, size=shape)
            else:
                params[name] = nx.kaiming_init(shape[0], shape, rng)
                if leaf in ("out",) or layer.endswith("fc2"):
                    params[name] *= 0.5
    return params


class Seq2SeqModel:
    """Configuration, vocabulary and parameter arrays of one model."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], vocab: Vocabulary | None = None, metadata: dict | None = None):
        config.check()
        self.config = config
        self.vocab = vocab or Vocabulary.default()
        if len(self.vocab) != config.vocab_size:
            raise ValueError("vocabulary size does not match the model config")
        self.params = params
        self.metadata = dict(metadata or {})
        self.layers: OrderedDict[str, list[str]] = OrderedDict(
            (layer, [f"{layer}.{leaf}" for leaf in leaves]) for layer, leaves in _layer_shapes(config).items()
        )
        expected = {n for names in self.layers.values() for n in names}
        if expected != set(params):
            raise ValueError("parameter names do not match the layer registry")

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int, vocab: Vocabulary | None = None) -> "Seq2SeqModel":
        return cls(config, _init_params(config, seed), vocab, {"init_seed": seed})

    def clone(self) -> "Seq2SeqModel":
        return Seq2SeqModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.vocab, self.metadata)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def layer_params(self, layer: str) -> list[str]:
        try:
            return self.layers[layer]
        except KeyError:
            raise KeyError(f"unknown layer {layer!r}; known: {', '.join(self.layers)}") from None

    def resolve_layer(self, layer: str) -> list[str]:
        """Parameter names of ``layer``; ``"*"`` selects the whole model."""
        if layer == "*":
            return list(self.params)
        return self.layer_params(layer)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def tensors(self, overrides: Mapping[str, Tensor] | None = None) -> dict[str, Tensor]:
        out = {k: Tensor(v) for k, v in self.params.items()}
        if overrides:
            out.update(overrides)
        return out

    # convenience single-example API -------------------------------------

    def generate(self, document: Document, question) -> "Generation":
        return generate(self, [(document, tuple(question))])[0]

    def answer_loss(self, document: Document, question, answer) -> float:
        batch = make_batch(self, [(document, tuple(question), tuple(answer))])
        _, per = batch_loss(self, batch, self.tensors())
        return float(per[0])

    def answer_token_logprobs(self, document: Document, question, answer) -> np.ndarray:
        batch = make_batch(self, [(document, tuple(question), tuple(answer))])
        return token_logprobs(self, batch, self.tensors())[0]


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    src: np.ndarray  # (B, Ts) token ids
    src_rows: np.ndarray  # (B, Ts) layout row ids
    src_cols: np.ndarray  # (B, Ts) layout column ids
    src_valid: np.ndarray  # (B, Ts) bool
    doc_mask: np.ndarray  # (B, Ts) 1.0 on document positions
    tgt_in: np.ndarray  # (B, Tt) <bos> + answer
    tgt_out: np.ndarray  # (B, Tt) answer + <eos>
    tgt_weight: np.ndarray  # (B, Tt) 1.0 on real target tokens

    def __len__(self):
        return self.src.shape[0]

    @property
    def src_bias(self) -> np.ndarray:
        return np.where(self.src_valid, 0.0, NEG_INF)[:, None, :]

    def take(self, idx) -> "Batch":
        return Batch(*(getattr(self, f)[idx] for f in ("src", "src_rows", "src_cols", "src_valid", "doc_mask", "tgt_in", "tgt_out", "tgt_weight")))


def source_tokens(question, document: Document) -> tuple[list[str], int]:
    """Encoder input tokens and the offset where the document starts."""
    q = list(question)
    return q + [SEP] + list(document.linearization), len(q) + 1


def source_layout(question, document: Document) -> tuple[list[int], list[int]]:
    """Row/column of every source token.

    The question (and the separator after it) sits on row 0; field ``i`` of
    the document on row ``i + 1`` with its key at column 0, the value tokens
    after it and the field separator last.
    """
    rows = [0] * (len(question) + 1)
    cols = list(range(len(question) + 1))
    for i, (_, value) in enumerate(document.fields):
        if i:
            # separator before this field belongs to the previous row's end
            rows.append(i)
            cols.append(len(document.fields[i - 1][1]) + 1)
        rows.extend([i + 1] * (1 + len(value)))
        cols.extend(range(1 + len(value)))
    return rows, cols


def make_batch(model: Seq2SeqModel, examples: Sequence[tuple[Document, tuple, tuple | None]]) -> Batch:
    """Encode ``(document, question, answer)`` triples; ``answer`` may be None."""
    cfg, vocab = model.config, model.vocab
    srcs, layouts, offsets, doc_lens = [], [], [], []
    for doc, question, _ in examples:
        toks, off = source_tokens(question, doc)
        if len(toks) > cfg.max_source_len:
            raise ValueError(f"source of {doc.doc_id} has {len(toks)} tokens, max is {cfg.max_source_len}")
        rows, cols = source_layout(question, doc)
        if max(rows) >= cfg.max_rows or max(cols) >= cfg.max_cols:
            raise ValueError(f"document {doc.doc_id} does not fit the {cfg.max_rows}x{cfg.max_cols} layout grid")
        srcs.append(vocab.encode(toks))
        layouts.append((rows, cols))
        offsets.append(off)
        doc_lens.append(len(toks) - off)
    B = len(examples)
    Ts = max(len(s) for s in srcs)
    Tt = cfg.max_answer_len + 1
    src = np.full((B, Ts), PAD_ID, dtype=np.int64)
    src_rows = np.zeros((B, Ts), dtype=np.int64)
    src_cols = np.zeros((B, Ts), dtype=np.int64)
    doc_mask = np.zeros((B, Ts))
    tgt_in = np.full((B, Tt), PAD_ID, dtype=np.int64)
    tgt_out = np.full((B, Tt), PAD_ID, dtype=np.int64)
    tgt_w = np.zeros((B, Tt))
    for i, (s, off, n) in enumerate(zip(srcs, offsets, doc_lens)):
        src[i, : len(s)] = s
        src_rows[i, : len(s)] = layouts[i][0]
        src_cols[i, : len(s)] = layouts[i][1]
        doc_mask[i, off : off + n] = 1.0
        answer = examples[i][2]
        tgt_in[i, 0] = BOS_ID
        if answer is None:
            continue
        if len(answer) > cfg.max_answer_len:
            raise ValueError(f"answer of length {len(answer)} exceeds max_answer_len={cfg.max_answer_len}")
        ids = vocab.encode(answer)
        tgt_in[i, 1 : len(ids) + 1] = ids
        tgt_out[i, : len(ids)] = ids
        tgt_out[i, len(ids)] = EOS_ID
        tgt_w[i, : len(ids) + 1] = 1.0
    src_valid = src != PAD_ID
    return Batch(src, src_rows, src_cols, src_valid, doc_mask, tgt_in, tgt_out, tgt_w)


# ---------------------------------------------------------------------------
# forward pass

LoraMap = Mapping[str, tuple[Tensor, Tensor, float]]


def _bias_like(b: Tensor, ndim: int) -> Tensor:
    if b.ndim == 2 and ndim == 3:
        return nx.reshape(b, (b.shape[0], 1, b.shape[1]))
    return b


def _linear(x: Tensor, P: Mapping[str, Tensor], layer: str, lora: LoraMap | None) -> Tensor:
    y = x @ P[f"{layer}.weight"]
    bias = P.get(f"{layer}.bias")
    if bias is not None:
        y = y + _bias_like(bias, x.ndim)
    if lora and layer in lora:
        A, B, scale = lora[layer]
        y = y + ((x @ A) @ B) * scale
    return y


def _norm(x: Tensor, P: Mapping[str, Tensor], layer: str) -> Tensor:
    return nx.layer_norm(x, P[f"{layer}.gain"], P[f"{layer}.bias"])


def _attention(xq: Tensor, xkv: Tensor, P, layer: str, bias: np.ndarray, d: int) -> Tensor:
    q = xq @ P[f"{layer}.query"]
    k = xkv @ P[f"{layer}.key"]
    v = xkv @ P[f"{layer}.value"]
    scores = (q @ nx.transpose(k)) * (1.0 / math.sqrt(d)) + bias
    return (nx.softmax(scores) @ v) @ P[f"{layer}.out"]


def _positions(table: Tensor, B: int, T: int) -> Tensor:
    ids = np.arange(T)
    if table.ndim == 3:
        ids = np.broadcast_to(ids, (B, T))
    return nx.embedding(table, ids)


def _layout(table: Tensor, ids: np.ndarray) -> Tensor:
    return nx.embedding(table, ids)


def encode(model: Seq2SeqModel, batch: Batch, P: Mapping[str, Tensor], lora: LoraMap | None = None, doc_view: Tensor | None = None) -> Tensor:
    """Encoder memory ``(B, Ts, d)``.

    ``doc_view`` replaces the token embeddings on document positions with a
    free ``(B, Ts, d)`` input (only its document rows are used).
    """
    cfg = model.config
    B, Ts = batch.src.shape
    x = nx.embedding(P["encoder.embedding.tokens"], batch.src)
    if doc_view is not None:
        m = batch.doc_mask[..., None]
        x = x * (1.0 - m) + doc_view * m
    x = x + _layout(P["encoder.embedding.rows"], batch.src_rows)
    x = x + _layout(P["encoder.embedding.cols"], batch.src_cols)
    bias = batch.src_bias
    for i in range(cfg.n_encoder_blocks):
        p = f"encoder.{i}"
        h = _norm(x, P, f"{p}.attn-norm")
        x = x + _attention(h, h, P, f"{p}.self-attn", bias, cfg.d_model)
        h = _norm(x, P, f"{p}.layer-norm")
        h = nx.relu(_linear(h, P, f"{p}.fc1", lora))
        x = x + _linear(h, P, f"{p}.fc2", lora)
    return _norm(x, P, "encoder.final-norm")


def decode(model: Seq2SeqModel, memory: Tensor, src_bias: np.ndarray, tgt_in: np.ndarray, P: Mapping[str, Tensor], lora: LoraMap | None = None) -> Tensor:
    """Next-token logits ``(B, Tt, V)`` for a teacher-forced prefix."""
    cfg = model.config
    B, Tt = tgt_in.shape
    x = nx.embedding(P["decoder.embedding.tokens"], tgt_in)
    x = x + _positions(P["decoder.embedding.positions"], B, Tt)
    causal = np.triu(np.full((Tt, Tt), NEG_INF), k=1)
    for i in range(cfg.n_decoder_blocks):
        p = f"decoder.{i}"
        h = _norm(x, P, f"{p}.attn-norm")
        x = x + _attention(h, h, P, f"{p}.self-attn", causal, cfg.d_model)
        h = _norm(x, P, f"{p}.cross-norm")
        x = x + _attention(h, memory, P, f"{p}.cross-attn", src_bias, cfg.d_model)
        h = _norm(x, P, f"{p}.layer-norm")
        h = nx.relu(_linear(h, P, f"{p}.fc1", lora))
        x = x + _linear(h, P, f"{p}.fc2", lora)
    x = _norm(x, P, "decoder.final-norm")
    return _linear(x, P, "final-projection", lora)


def forward_logits(model, batch: Batch, P, lora=None, doc_view=None, memory: Tensor | None = None) -> Tensor:
    if memory is None:
        memory = encode(model, batch, P, lora, doc_view)
    return decode(model, memory, batch.src_bias, batch.tgt_in, P, lora)


def per_example_nll(logits: np.ndarray, batch: Batch) -> np.ndarray:
    logp = nx.log_softmax_np(logits)
    picked = np.take_along_axis(logp, batch.tgt_out[..., None], axis=-1)[..., 0]
    return -(picked * batch.tgt_weight).sum(axis=-1)


def batch_loss(model, batch: Batch, P, lora=None, doc_view=None, memory=None) -> tuple[Tensor, np.ndarray]:
    """Summed teacher-forced answer NLL and its per-example split."""
    logits = forward_logits(model, batch, P, lora, doc_view, memory)
    total = nx.cross_entropy(logits, batch.tgt_out, batch.tgt_weight)
    return total, per_example_nll(logits.data, batch)


def forward_loss(model: Seq2SeqModel, document: Document, question, answer) -> float:
    """``-sum_k log p(a_k | a_<k, x, q)`` over the answer tokens and ``<eos>``."""
    return model.answer_loss(document, question, answer)


def token_logprobs(model, batch: Batch, P, lora=None, doc_view=None, memory=None) -> list[np.ndarray]:
    logits = forward_logits(model, batch, P, lora, doc_view, memory).data
    logp = nx.log_softmax_np(logits)
    picked = np.take_along_axis(logp, batch.tgt_out[..., None], axis=-1)[..., 0]
    return [picked[i, batch.tgt_weight[i] > 0] for i in range(len(batch))]


# ---------------------------------------------------------------------------
# greedy decoding


@dataclass
class Generation:
    tokens: list[str]  # answer tokens, <eos> excluded
    logprobs: np.ndarray  # log-prob of every emitted token, <eos> included when emitted
    distributions: np.ndarray  # (steps, V) next-token distributions

    @property
    def sequence_logprob(self) -> float:
        return float(self.logprobs.sum())


def greedy_ids(model, batch: Batch, P, lora=None, doc_view=None, memory=None, keep_distributions: bool = False):
    """Greedy decode a whole batch; returns per-example id lists (and extras)."""
    cfg = model.config
    if memory is None:
        memory = encode(model, batch, P, lora, doc_view)
    B = len(batch)
    bias = batch.src_bias
    prefix = np.full((B, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    ids: list[list[int]] = [[] for _ in range(B)]
    lps: list[list[float]] = [[] for _ in range(B)]
    dists: list[list[np.ndarray]] = [[] for _ in range(B)]
    for _ in range(cfg.max_answer_len + 1):
        logits = decode(model, memory, bias, prefix, P, lora).data[:, -1, :]
        logp = nx.log_softmax_np(logits)
        nxt = logp.argmax(axis=-1)
        for i in np.flatnonzero(~done):
            t = int(nxt[i])
            lps[i].append(float(logp[i, t]))
            if keep_distributions:
                dists[i].append(np.exp(logp[i]))
            if t == EOS_ID:
                done[i] = True
            else:
                ids[i].append(t)
        # answers are capped at max_answer_len tokens
        done |= np.array([len(s) >= cfg.max_answer_len for s in ids])
        if done.all():
            break
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return ids, lps, dists


def generate(model: Seq2SeqModel, queries: Sequence[tuple[Document, tuple]], P=None, lora=None) -> list[Generation]:
    batch = make_batch(model, [(d, q, None) for d, q in queries])
    P = P if P is not None else model.tensors()
    ids, lps, dists = greedy_ids(model, batch, P, lora, keep_distributions=True)
    out = []
    for i in range(len(queries)):
        out.append(Generation(model.vocab.decode(ids[i]), np.array(lps[i]), np.array(dists[i])))
    return out


# ---------------------------------------------------------------------------
# LoRA


@dataclass
class LoraAdapter:
    layer: str
    rank: int
    A: np.ndarray  # (d_in, r), Kaiming
    B: np.ndarray  # (r, d_out), zeros
    scaling: float = 1.0

    @property
    def n_params(self) -> int:
        return self.A.size + self.B.size


class LoraModel:
    """Frozen base model plus one trainable low-rank adapter."""

    def __init__(self, base: Seq2SeqModel, adapter: LoraAdapter):
        self.base = base
        self.adapter = adapter

    def lora_map(self) -> dict:
        a = self.adapter
        return {a.layer: (Tensor(a.A), Tensor(a.B), a.scaling)}

    def generate(self, document: Document, question) -> Generation:
        return generate(self.base, [(document, tuple(question))], lora=self.lora_map())[0]

    def answer_loss(self, document: Document, question, answer) -> float:
        batch = make_batch(self.base, [(document, tuple(question), tuple(answer))])
        _, per = batch_loss(self.base, batch, self.base.tensors(), self.lora_map())
        return float(per[0])

    def fit(self, examples, steps: int, lr: float = 1e-2) -> None:
        """Adapter-only Adam fine-tuning; the base parameters are never written."""
        batch = make_batch(self.base, examples)
        P = self.base.tensors()
        state = nx.AdamState(lr=lr)
        params = {"A": self.adapter.A, "B": self.adapter.B}
        for _ in range(steps):
            A, B = Tensor(params["A"], True), Tensor(params["B"], True)
            total, _ = batch_loss(self.base, batch, P, {self.adapter.layer: (A, B, self.adapter.scaling)})
            grads = nx.backward(total, {"A": A, "B": B})
            nx.adam_step(params, grads, state)


def lora_dims(model: Seq2SeqModel, layer: str) -> tuple[int, int]:
    names = model.layer_params(layer)
    w = f"{layer}.weight"
    if w not in names:
        raise ValueError(f"layer {layer!r} has no weight matrix to adapt")
    return model.params[w].shape


def attach_lora(model: Seq2SeqModel, layer: str, rank: int, seed: int = 0, scaling: float = 1.0) -> LoraModel:
    if rank < 1:
        raise ValueError("rank must be >= 1")
    d_in, d_out = lora_dims(model, layer)
    rng = nx.rng_stream(seed, f"lora/{layer}")
    A = nx.kaiming_init(d_in, (d_in, rank), rng)
    return LoraModel(model, LoraAdapter(layer, rank, A, np.zeros((rank, d_out)), scaling))


def document_input_view(model: Seq2SeqModel, document: Document) -> np.ndarray:
    """Continuous encoder input of the document: its token embeddings ``(T_doc, d)``."""
    ids = model.vocab.encode(document.linearization)
    return model.params["encoder.embedding.tokens"][ids].copy()


def place_document_views(batch: Batch, views: Sequence[np.ndarray]) -> np.ndarray:
    """Scatter per-example document views into a ``(B, Ts, d)`` array."""
    d = views[0].shape[-1]
    out = np.zeros(batch.src.shape + (d,))
    for i, v in enumerate(views):
        pos = np.flatnonzero(batch.doc_mask[i])
        out[i, pos] = v
    return out


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 3e-3
    seed: int = 0
    loss_floor: float | None = None  # stop once the epoch mean loss drops below this
    schedule: str = "constant"  # or "cosine": decay to lr * final_lr_fraction over all epochs
    final_lr_fraction: float = 0.05

    def lr_at(self, progress: float) -> float:
        if self.schedule == "constant":
            return self.lr
        if self.schedule == "cosine":
            f = self.final_lr_fraction
            return self.lr * (f + (1.0 - f) * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0))))
        raise ValueError(f"unknown learning-rate schedule {self.schedule!r}")


@dataclass
class TrainResult:
    model: Seq2SeqModel
    loss_curve: list[float] = field(default_factory=list)  # mean per-example loss, one per epoch
    epochs_run: int = 0
    dp: object = None  # the DPTrainer of a private run (noise level, steps, epsilon)


class TrainingDiverged(RuntimeError):
    pass


def train(model: Seq2SeqModel, examples: Sequence[tuple[Document, tuple, tuple]], cfg: TrainConfig, dp=None, callback=None) -> TrainResult:
    """Mini-batch Adam on the answer NLL, each (x, q, a) an independent example.

    ``dp`` switches to DP-SGD (see :mod:`docmia.dp`).  ``callback(epoch,
    model, mean_loss)`` runs after every epoch; returning True stops early.
    Trains ``model`` in place and returns it with the loss curve.
    """
    if not examples:
        raise ValueError("cannot train on an empty dataset")
    rng = nx.rng_stream(cfg.seed, "train-shuffle")
    state = nx.AdamState(lr=cfg.lr)
    result = TrainResult(model)
    dp_state = None
    if dp is not None:
        from .dp import DPTrainer

        dp_state = DPTrainer(dp, len(examples), cfg.seed, cfg.batch_size, cfg.epochs)
        result.dp = dp_state
    n = len(examples)
    per_epoch = math.ceil(n / cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for k, start in enumerate(range(0, n, cfg.batch_size)):
            state.lr = cfg.lr_at((epoch * per_epoch + k) / (cfg.epochs * per_epoch))
            chunk = [examples[i] for i in order[start : start + cfg.batch_size]]
            batch = make_batch(model, chunk)
            if dp_state is not None:
                per = dp_state.step(model, batch, state)
            else:
                leaves = {k: Tensor(v, True) for k, v in model.params.items()}
                loss, per = batch_loss(model, batch, leaves)
                scaled = loss * (1.0 / len(chunk))
                grads = nx.backward(scaled, leaves)
                nx.adam_step(model.params, grads, state)
            total += float(per.sum())
            count += len(chunk)
        mean = total / count
        if not math.isfinite(mean):
            raise TrainingDiverged(f"training loss became non-finite at epoch {epoch}")
        result.loss_curve.append(mean)
        result.epochs_run = epoch + 1
        log.debug("epoch %d loss %.5f", epoch, mean)
        if callback is not None and callback(epoch, model, mean):
            break
        if cfg.loss_floor is not None and mean < cfg.loss_floor:
            break
    return result


def qa_examples(docs: Sequence[Document], questions=None) -> list[tuple[Document, tuple, tuple]]:
    """``(document, question, gold answer)`` for every QA pair of every document."""
    out = []
    for d in docs:
        for qa in (questions(d) if questions else d.qa):
            out.append((d, qa.question, qa.answer))
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Seq2SeqModel, path) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "vocab": model.vocab.tokens,
        "metadata": model.metadata,
    }
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Seq2SeqModel:
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
        params = {k[len("param/") :]: np.array(data[k], dtype=np.float64) for k in data.files if k.startswith("param/")}
    return Seq2SeqModel(ModelConfig(**header["config"]), params, Vocabulary(header["vocab"]), header["metadata"])

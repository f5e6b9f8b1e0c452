"""Synthetic key-value documents with extractive question-answer pairs.

A document is an ordered record of ``(key, value-tokens)`` fields.  Each
question names one field key through a fixed surface template; the answer is
that field's value.  Training questions use the "train" templates; the
template-variant perturbation swaps in alternative phrasings so an attacker
that only approximates the training questions can be simulated.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import rng_stream

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
SPECIALS = (PAD, BOS, EOS, SEP)
PAD_ID, BOS_ID, EOS_ID, SEP_ID = 0, 1, 2, 3

KEY_NAMES = (
    "total", "date", "vendor", "invoice", "tax", "due", "account", "phone",
    "zip", "order", "client", "ref", "amount", "iban", "vat", "code",
    "sender", "room", "batch", "serial", "policy", "permit", "lot", "route",
)
QUESTION_WORDS = ("what", "is", "the", "?", "value", "of", "tell", "me", "give", "field", "for", "which")
VALUE_ALPHABET = tuple("0123456789ABCDEFGHJKLMNPRSTUVWXYZ")

# "K" marks where the key token goes.
TEMPLATES: dict[int, tuple[str, ...]] = {
    0: ("what", "is", "the", "K", "?"),
    1: ("give", "me", "the", "K"),
    2: ("tell", "me", "the", "K", "value"),
    3: ("which", "K", "?"),
    4: ("value", "of", "field", "K"),
}
TRAIN_TEMPLATES = (0, 1)
VARIANT_TEMPLATES = (2, 3, 4)
MAX_QUESTION_LEN = max(len(t) for t in TEMPLATES.values())


class Vocabulary:
    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")

    def __len__(self):
        return len(self.tokens)

    def encode(self, toks) -> list[int]:
        try:
            return [self.index[t] for t in toks]
        except KeyError as e:
            raise ValueError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(SPECIALS + QUESTION_WORDS + KEY_NAMES + VALUE_ALPHABET)


def detokenize(tokens) -> str:
    """Answers are runs of single-character value tokens."""
    return "".join(tokens)


@dataclass(frozen=True)
class QAPair:
    question: tuple[str, ...]
    answer: tuple[str, ...]
    template_id: int
    field_key: str


@dataclass(frozen=True)
class Document:
    doc_id: str
    fields: tuple[tuple[str, tuple[str, ...]], ...]
    qa: tuple[QAPair, ...] = ()

    @property
    def linearization(self) -> tuple[str, ...]:
        out: list[str] = []
        for i, (key, value) in enumerate(self.fields):
            if i:
                out.append(SEP)
            out.append(key)
            out.extend(value)
        return tuple(out)

    def value_of(self, key: str) -> tuple[str, ...]:
        for k, v in self.fields:
            if k == key:
                return v
        raise KeyError(key)


@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 200
    n_member: int = 50
    n_nonmember: int = 50
    n_pretrain: int = 200
    n_keys: int = 20
    min_fields: int = 3
    max_fields: int = 6
    max_value_len: int = 4
    max_questions: int = 10
    single_question_fraction: float = 0.25
    extra_question_p: float = 0.4  # geometric parameter for questions beyond the second

    def check(self) -> None:
        if self.n_train < self.n_member:
            raise ValueError("n_train must be >= n_member")
        if self.n_keys > len(KEY_NAMES):
            raise ValueError(f"at most {len(KEY_NAMES)} distinct keys are available, asked for {self.n_keys}")
        if self.max_questions > self.n_keys:
            raise ValueError("max_questions cannot exceed the number of distinct keys")
        if not 1 <= self.min_fields <= self.max_fields <= self.n_keys:
            raise ValueError("need 1 <= min_fields <= max_fields <= n_keys")
        if not 1 <= self.max_value_len:
            raise ValueError("max_value_len must be >= 1")
        if self.max_questions < 1:
            raise ValueError("max_questions must be >= 1")


@dataclass
class Corpus:
    config: CorpusConfig
    seed: int
    train: list[Document]
    members: list[Document]
    nonmembers: list[Document]
    pretrain: list[Document]
    vocab: Vocabulary = field(repr=False, default=None)

    def __post_init__(self):
        if self.vocab is None:
            self.vocab = Vocabulary.default()

    @property
    def attack_set(self) -> list[Document]:
        return self.members + self.nonmembers

    @property
    def attack_labels(self) -> np.ndarray:
        return np.array([1] * len(self.members) + [0] * len(self.nonmembers), dtype=np.int64)

    def training_examples(self) -> list[tuple[Document, QAPair]]:
        return [(d, qa) for d in self.train for qa in d.qa]

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(_corpus_lines(self)).encode()).hexdigest()


def _sample_question_count(cfg: CorpusConfig, rng: np.random.Generator) -> int:
    if cfg.max_questions == 1 or rng.random() < cfg.single_question_fraction:
        return 1
    return int(min(cfg.max_questions, 1 + rng.geometric(cfg.extra_question_p)))


def _make_document(doc_id: str, cfg: CorpusConfig, rng: np.random.Generator) -> Document:
    keys = KEY_NAMES[: cfg.n_keys]
    m = _sample_question_count(cfg, rng)
    n_fields = max(m, int(rng.integers(cfg.min_fields, cfg.max_fields + 1)))
    chosen = rng.choice(len(keys), size=n_fields, replace=False)
    fields = []
    for k in chosen:
        length = int(rng.integers(1, cfg.max_value_len + 1))
        value = tuple(VALUE_ALPHABET[j] for j in rng.integers(0, len(VALUE_ALPHABET), size=length))
        fields.append((keys[k], value))
    asked = rng.choice(n_fields, size=m, replace=False)
    qa = []
    for i in asked:
        key, value = fields[i]
        tid = int(TRAIN_TEMPLATES[rng.integers(0, len(TRAIN_TEMPLATES))])
        qa.append(QAPair(render_question(tid, key), value, tid, key))
    return Document(doc_id, tuple(fields), tuple(qa))


def render_question(template_id: int, key: str) -> tuple[str, ...]:
    try:
        template = TEMPLATES[template_id]
    except KeyError:
        raise ValueError(f"unknown template id {template_id}") from None
    return tuple(key if t == "K" else t for t in template)


def generate_corpus(config: CorpusConfig, seed: int) -> Corpus:
    """Draw the training set, member/non-member attack docs and pretrain pool.

    Members are a subset of the training set; non-members and the pretrain
    pool are fresh draws, so all three pools are disjoint by ``doc_id``.
    """
    config.check()
    rng = rng_stream(seed, "corpus")
    train = [_make_document(f"t{i:05d}", config, rng) for i in range(config.n_train)]
    nonmembers = [_make_document(f"n{i:05d}", config, rng) for i in range(config.n_nonmember)]
    pretrain = [_make_document(f"p{i:05d}", config, rng) for i in range(config.n_pretrain)]
    pick = np.sort(rng_stream(seed, "members").choice(config.n_train, size=config.n_member, replace=False))
    members = [train[i] for i in pick]
    return Corpus(config, seed, train, members, nonmembers, pretrain)


@dataclass(frozen=True)
class PerturbationSpec:
    mode: str = "exact"  # "exact" | "template-variant"
    seed: int = 0


def perturb_questions(doc: Document, spec: PerturbationSpec) -> list[QAPair]:
    """Questions an attacker would ask about ``doc``.

    ``exact`` returns the training questions verbatim; ``template-variant``
    rephrases each one with a template never used during training.
    """
    if not doc.qa:
        raise ValueError(f"document {doc.doc_id} has no question-answer pairs")
    for qa in doc.qa:
        if qa.template_id not in TEMPLATES:
            raise ValueError(f"unknown template id {qa.template_id}")
    if spec.mode == "exact":
        return list(doc.qa)
    if spec.mode != "template-variant":
        raise ValueError(f"unknown perturbation mode {spec.mode!r}")
    out = []
    for i, qa in enumerate(doc.qa):
        rng = rng_stream(spec.seed, f"perturb/{doc.doc_id}/{i}")
        tid = int(VARIANT_TEMPLATES[rng.integers(0, len(VARIANT_TEMPLATES))])
        out.append(QAPair(render_question(tid, qa.field_key), qa.answer, tid, qa.field_key))
    return out


def perturbed_documents(docs, spec: PerturbationSpec) -> list[Document]:
    return [Document(d.doc_id, d.fields, tuple(perturb_questions(d, spec))) for d in docs]


# ---------------------------------------------------------------------------
# line-delimited serialization

CORPUS_FORMAT = "docmia-corpus"
CORPUS_VERSION = 1


def document_to_record(doc: Document, split: str | None = None) -> dict:
    rec = {
        "doc_id": doc.doc_id,
        "fields": [[k, list(v)] for k, v in doc.fields],
        "qa": [
            {"question": list(q.question), "answer": list(q.answer), "template_id": q.template_id, "field_key": q.field_key}
            for q in doc.qa
        ],
    }
    if split is not None:
        rec["splits"] = split
    return rec


def document_from_record(rec: dict) -> Document:
    return Document(
        rec["doc_id"],
        tuple((k, tuple(v)) for k, v in rec["fields"]),
        tuple(QAPair(tuple(q["question"]), tuple(q["answer"]), int(q["template_id"]), q["field_key"]) for q in rec["qa"]),
    )


def _corpus_lines(corpus: Corpus) -> list[str]:
    member_ids = {d.doc_id for d in corpus.members}
    header = {"format": CORPUS_FORMAT, "version": CORPUS_VERSION, "seed": corpus.seed, "config": asdict(corpus.config)}
    lines = [json.dumps(header, sort_keys=True)]
    for d in corpus.train:
        lines.append(json.dumps(document_to_record(d, ["train", "member"] if d.doc_id in member_ids else ["train"]), sort_keys=True))
    for d in corpus.nonmembers:
        lines.append(json.dumps(document_to_record(d, ["nonmember"]), sort_keys=True))
    for d in corpus.pretrain:
        lines.append(json.dumps(document_to_record(d, ["pretrain"]), sort_keys=True))
    return lines


def save_corpus(corpus: Corpus, path) -> None:
    Path(path).write_text("\n".join(_corpus_lines(corpus)) + "\n")


def load_corpus(path) -> Corpus:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != CORPUS_FORMAT or header.get("version") != CORPUS_VERSION:
        raise ValueError(f"{path}: not a version-{CORPUS_VERSION} corpus file")
    train, members, nonmembers, pretrain = [], [], [], []
    for line in lines[1:]:
        rec = json.loads(line)
        doc = document_from_record(rec)
        splits = rec["splits"]
        if "train" in splits:
            train.append(doc)
        if "member" in splits:
            members.append(doc)
        if "nonmember" in splits:
            nonmembers.append(doc)
        if "pretrain" in splits:
            pretrain.append(doc)
    return Corpus(CorpusConfig(**header["config"]), int(header["seed"]), train, members, nonmembers, pretrain)

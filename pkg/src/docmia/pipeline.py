"""End-to-end runs: corpus -> target -> attacks -> reports, with a manifest.

Every stage runs inside :func:`stage`, which turns any exception into a
:class:`StageError` carrying the stage name, so the CLI can report where a
run broke.  Trained targets are cached on disk under a key built from the
corpus content hash and the model/training/DP settings.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import time
from collections.abc import Sequence
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import baselines as bl
from .attack import AttackHyperparams, AttackVariant, dump_traces, extract_corpus_traces
from .blackbox import ProxyConfig, blackbox_attack, model_oracle, pretrain_proxy
from .config import ExperimentConfig, stable_hash
from .dp import DPConfig
from .evaluation import EvalReport, classification_metrics, evaluate, mean_utility, write_reports
from .features import build_descriptors, cluster_descriptors, kmeans2, decide_membership, parse_feature_spec, trace_records, write_descriptor_csv, LOWER_IS_MEMBER
from .numerics import rng_stream
from .seqmodel import ModelConfig, Seq2SeqModel, TrainConfig, load_checkpoint, qa_examples, save_checkpoint, train
from .synthdata import Corpus, PerturbationSpec, generate_corpus, perturb_questions, save_corpus

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextmanager
def stage(name: str, times: dict | None = None):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001 - re-raised with the stage tag
        raise StageError(name, f"{type(e).__name__}: {e}") from e
    finally:
        if times is not None:
            times[name] = times.get(name, 0.0) + time.perf_counter() - t0


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class Workspace:
    """Output directory that records every file it writes in a manifest."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.files: list[str] = []
        self.times: dict[str, float] = {}
        self.info: dict = {}
        self.t0 = time.perf_counter()

    def path(self, name: str) -> Path:
        p = self.root / name
        if name not in self.files:
            self.files.append(name)
        return p

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "files": {name: sha256_file(self.root / name) for name in self.files},
            "inputs": self.info.pop("inputs", {}),
            "stage_seconds": {k: round(v, 3) for k, v in self.times.items()},
            "wall_seconds": round(time.perf_counter() - self.t0, 3),
            **self.info,
        }
        path = self.root / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


# ---------------------------------------------------------------------------
# building blocks


def make_corpus(cfg: ExperimentConfig) -> Corpus:
    return generate_corpus(cfg.corpus, cfg.seed)


def model_config(cfg: ExperimentConfig, vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size, **asdict(cfg.model))


def train_config(cfg: ExperimentConfig, epochs: int | None = None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=t.epochs if epochs is None else epochs, batch_size=t.batch_size, lr=t.lr, seed=cfg.seed, schedule=t.schedule, final_lr_fraction=t.final_lr_fraction)


def dp_config(cfg: ExperimentConfig) -> DPConfig | None:
    d = cfg.dp
    if not d.enabled:
        return None
    return DPConfig(clip_norm=d.clip_norm, noise_multiplier=d.noise_multiplier, delta=d.delta, target_epsilon=d.target_epsilon)


def variant_of(cfg: ExperimentConfig) -> AttackVariant:
    a = cfg.attack
    return AttackVariant(a.variant, a.layer, a.rank)


def hyperparams_of(cfg: ExperimentConfig) -> AttackHyperparams:
    a = cfg.attack
    return AttackHyperparams(lr=a.lr, max_steps=a.max_steps, tau=a.tau, utility=a.utility, max_questions=a.max_questions, seed=cfg.seed, chunk_size=a.chunk_size)


def attacker_questions(cfg: ExperimentConfig):
    """None for the training questions, else a ``doc -> [QAPair]`` function."""
    mode = cfg.attack.questions
    if mode == "exact":
        return None
    spec = PerturbationSpec(mode, cfg.seed)
    return lambda d: perturb_questions(d, spec)


@dataclass
class Target:
    model: Seq2SeqModel
    key: str
    loss_curve: list[float]
    epsilon: float | None = None
    noise_multiplier: float | None = None
    cached: bool = False
    snapshots: dict[int, Seq2SeqModel] = field(default_factory=dict)


def target_key(cfg: ExperimentConfig, corpus: Corpus) -> str:
    return stable_hash(
        {
            "corpus": corpus.content_hash(),
            "model": asdict(cfg.model),
            "train": asdict(cfg.train),
            "dp": asdict(cfg.dp) if cfg.dp.enabled else None,
            "seed": cfg.seed,
        }
    )[:20]


def cache_dir_of(cfg: ExperimentConfig) -> Path:
    if cfg.cache_dir:
        return Path(cfg.cache_dir)
    return Path(cfg.output_dir).resolve().parent / ".cache"


def get_target(cfg: ExperimentConfig, corpus: Corpus, snapshot_epochs: Sequence[int] = (), use_cache: bool = True) -> Target:
    """Train the target (or load it from the cache).

    ``snapshot_epochs`` keeps copies of the parameters after those epochs
    (1-based) of the same run, for checkpoint comparisons.
    """
    key = target_key(cfg, corpus)
    cache = cache_dir_of(cfg)
    main = cache / f"target-{key}.npz"
    snaps = {e: cache / f"target-{key}-epoch{e}.npz" for e in snapshot_epochs}
    if use_cache and main.exists() and all(p.exists() for p in snaps.values()):
        model = load_checkpoint(main)
        md = model.metadata
        return Target(model, key, md.get("loss_curve", []), md.get("epsilon"), md.get("noise_multiplier"), True, {e: load_checkpoint(p) for e, p in snaps.items()})

    model = Seq2SeqModel.initialize(model_config(cfg, len(corpus.vocab)), cfg.seed, corpus.vocab)
    kept: dict[int, Seq2SeqModel] = {}

    def keep(epoch, m, loss):
        if epoch + 1 in snaps:
            kept[epoch + 1] = m.clone()
        return False

    res = train(model, qa_examples(corpus.train), train_config(cfg), dp=dp_config(cfg), callback=keep)
    eps = sigma = None
    if res.dp is not None:
        eps, sigma = res.dp.epsilon(), res.dp.noise_multiplier
    model.metadata.update({"corpus_hash": corpus.content_hash(), "target_key": key, "epochs": res.epochs_run, "loss_curve": res.loss_curve, "epsilon": eps, "noise_multiplier": sigma, "seed": cfg.seed})
    if use_cache:
        cache.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, main)
        for e, m in kept.items():
            m.metadata.update({"target_key": key, "epochs": e})
            save_checkpoint(m, snaps[e])
    return Target(model, key, res.loss_curve, eps, sigma, False, kept)


def permuted_control(y_true, y_pred, seed: int, n: int = 200) -> float:
    """Mean balanced accuracy of the predictions against shuffled truth labels."""
    y = np.asarray(y_true)
    rng = rng_stream(seed, "permuted-control")
    return float(np.mean([classification_metrics(rng.permutation(y), y_pred).balanced_accuracy for _ in range(n)]))


def restart_spread(vector: np.ndarray, direction: np.ndarray, lower_is_member: bool, y, seed: int, restarts: int = 5) -> tuple[float, float]:
    """Mean and sd of balanced accuracy over single-restart clusterings."""
    vals = []
    for r in range(restarts):
        res = decide_membership(kmeans2(vector, seed * 1000 + r, restarts=1), direction, lower_is_member, vector)
        vals.append(classification_metrics(y, res.labels).balanced_accuracy)
    return float(np.mean(vals)), float(np.std(vals))


@dataclass
class AttackOutcome:
    report: EvalReport
    traces: dict
    descriptors: object
    clusters: object


def whitebox_attack(cfg: ExperimentConfig, model: Seq2SeqModel, corpus: Corpus, gap: float | None = None, jobs: int = 1, name: str | None = None) -> AttackOutcome:
    docs = corpus.attack_set
    variant = variant_of(cfg)
    traces = extract_corpus_traces(model, docs, variant, hyperparams_of(cfg), questions=attacker_questions(cfg), jobs=jobs)
    return _finish_attack(cfg, corpus, traces, name or variant.label, gap)


def _finish_attack(cfg, corpus, traces, name, gap, extra=None) -> AttackOutcome:
    y = corpus.attack_labels
    columns = parse_feature_spec(cfg.attack.features)
    desc = build_descriptors(trace_records(traces), columns, cfg.attack.normalization)
    clusters = cluster_descriptors(desc, cfg.seed, restarts=cfg.attack.kmeans_restarts)
    direction = ("avg", "delta") if ("avg", "delta") in desc.columns else desc.columns[0]
    mu, sd = restart_spread(desc.vector, desc.column(*direction), LOWER_IS_MEMBER[direction[1]], y, cfg.seed, cfg.attack.kmeans_restarts)
    ad = desc.raw[:, desc.columns.index(("avg", "delta"))] if ("avg", "delta") in desc.columns else None
    info = {
        "permuted_control": permuted_control(y, clusters.labels, cfg.seed, cfg.permutations),
        "restart_bacc_mean": mu,
        "restart_bacc_sd": sd,
        "failed_traces": sum(t.failed for ts in traces.values() for t in ts),
    }
    if ad is not None:
        info["avg_delta_members"] = float(ad[y == 1].mean())
        info["avg_delta_nonmembers"] = float(ad[y == 0].mean())
    info.update(extra or {})
    report = evaluate(name, y, clusters.labels, clusters.scores, desc.doc_ids, _question_counts(corpus), traintest_gap=gap, seed=cfg.seed, config_hash=cfg.hash(), extra=info)
    return AttackOutcome(report, traces, desc, clusters)


def _question_counts(corpus: Corpus) -> dict[str, int]:
    return {d.doc_id: len(d.qa) for d in corpus.attack_set}


def baseline_reports(cfg: ExperimentConfig, model: Seq2SeqModel, corpus: Corpus, gap: float | None = None, names: Sequence[str] | None = None) -> tuple[list[EvalReport], list[bl.BaselineResult]]:
    names = list(cfg.baselines if names is None else names)
    if not names:
        return [], []
    y = corpus.attack_labels
    stats = bl.collect_pair_stats(model, corpus.attack_set, cfg.attack.max_questions, cfg.attack.utility, "gradient-ua" in names, attacker_questions(cfg))
    reports, results = [], []
    qc = _question_counts(corpus)
    for name in names:
        grid = cfg.min_k_grid if name in ("min-k", "min-k++") else [1.0]
        best = None
        for k in grid:
            r = bl.run_baseline(name, stats, cfg.seed, k)
            ba = classification_metrics(y, r.labels).balanced_accuracy
            if best is None or ba > best[0]:
                best = (ba, r)
        r = best[1]
        extra = {"k": r.info["k"]} if "k" in r.info else {}
        reports.append(evaluate(name, y, r.labels, r.scores, r.doc_ids, qc, traintest_gap=gap, seed=cfg.seed, config_hash=cfg.hash(), extra=extra))
        results.append(r)
    return reports, results


def _write_scores(path, corpus: Corpus, rows: Sequence[tuple[str, Sequence[str], np.ndarray, np.ndarray]]) -> None:
    truth = dict(zip([d.doc_id for d in corpus.attack_set], corpus.attack_labels))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attack", "doc_id", "true_label", "membership_score", "predicted_label"])
        for name, ids, scores, labels in rows:
            for d, s, l in zip(ids, scores, labels):
                w.writerow([name, d, int(truth[d]), repr(float(s)), int(l)])


# ---------------------------------------------------------------------------
# commands


def run_gen_corpus(cfg: ExperimentConfig) -> Path:
    ws = Workspace(cfg, "gen-corpus")
    with stage("corpus", ws.times):
        corpus = make_corpus(cfg)
        save_corpus(corpus, ws.path("corpus.jsonl"))
    ws.info["inputs"] = {"corpus": corpus.content_hash()}
    return ws.finish()


def run_train_target(cfg: ExperimentConfig) -> Path:
    ws = Workspace(cfg, "train-target")
    with stage("corpus", ws.times):
        corpus = make_corpus(cfg)
        save_corpus(corpus, ws.path("corpus.jsonl"))
    with stage("train-target", ws.times):
        target = get_target(cfg, corpus)
        save_checkpoint(target.model, ws.path("target.npz"))
    with stage("evaluate-target", ws.times):
        gap = _gap(cfg, target.model, corpus)
    ws.info.update({"inputs": {"corpus": corpus.content_hash(), "target": target.model.fingerprint()}, "traintest_gap": gap, "epsilon": target.epsilon, "noise_multiplier": target.noise_multiplier, "target_cached": target.cached})
    return ws.finish()


def _gap(cfg, model, corpus) -> float:
    return mean_utility(model, corpus.members, cfg.attack.utility) - mean_utility(model, corpus.nonmembers, cfg.attack.utility)


@dataclass
class RunResult:
    reports: list[EvalReport]
    manifest: Path
    target: Target | None = None
    info: dict = field(default_factory=dict)

    def report(self, name: str) -> EvalReport:
        for r in self.reports:
            if r.attack == name:
                return r
        raise KeyError(name)


def run_whitebox(cfg: ExperimentConfig, jobs: int = 1, with_baselines: bool = True) -> RunResult:
    ws = Workspace(cfg, "attack-whitebox")
    with stage("corpus", ws.times):
        corpus = make_corpus(cfg)
        save_corpus(corpus, ws.path("corpus.jsonl"))
    with stage("train-target", ws.times):
        target = get_target(cfg, corpus)
    with stage("evaluate-target", ws.times):
        gap = _gap(cfg, target.model, corpus)
    with stage("attack", ws.times):
        out = whitebox_attack(cfg, target.model, corpus, gap, jobs)
        dump_traces(out.traces, ws.path("traces.jsonl"), variant_of(cfg))
        truth = dict(zip([d.doc_id for d in corpus.attack_set], corpus.attack_labels.tolist()))
        write_descriptor_csv(ws.path("descriptors.csv"), out.descriptors, out.clusters, truth, out.report.attack)
    reports = [out.report]
    score_rows = [(out.report.attack, out.descriptors.doc_ids, out.clusters.scores, out.clusters.labels)]
    if with_baselines and cfg.baselines:
        with stage("baselines", ws.times):
            b_reports, b_results = baseline_reports(cfg, target.model, corpus, gap)
            reports += b_reports
            score_rows += [(r.name, r.doc_ids, r.scores, r.labels) for r in b_results]
    with stage("report", ws.times):
        write_reports(reports, ws.path("report.json"), ws.path("report.csv"))
        _write_scores(ws.path("scores.csv"), corpus, score_rows)
    ws.info.update({"inputs": {"corpus": corpus.content_hash(), "target": target.model.fingerprint()}, "traintest_gap": gap, "epsilon": target.epsilon, "noise_multiplier": target.noise_multiplier, "target_cached": target.cached})
    return RunResult(reports, ws.finish(), target, {"gap": gap})


def proxy_config_of(cfg: ExperimentConfig, target_cfg: ModelConfig) -> ProxyConfig:
    b = cfg.blackbox
    pre = TrainConfig(epochs=b.pretrain_epochs, batch_size=cfg.train.batch_size, lr=b.pretrain_lr, seed=cfg.seed + 1)
    dis = TrainConfig(epochs=b.distill_epochs, batch_size=b.distill_batch_size, lr=b.distill_lr, seed=cfg.seed + 2, loss_floor=b.distill_loss_floor)
    if b.matched_proxy:
        return ProxyConfig.matching(target_cfg, pretrain=pre, distill=dis, seed=cfg.seed + 1)
    return ProxyConfig(b.d_model, b.d_ff, b.n_encoder_blocks, b.n_decoder_blocks, pre, dis, cfg.seed + 1)


def run_blackbox(cfg: ExperimentConfig, jobs: int = 1) -> RunResult:
    ws = Workspace(cfg, "attack-blackbox")
    with stage("corpus", ws.times):
        corpus = make_corpus(cfg)
        save_corpus(corpus, ws.path("corpus.jsonl"))
    with stage("train-target", ws.times):
        target = get_target(cfg, corpus)
    with stage("evaluate-target", ws.times):
        gap = _gap(cfg, target.model, corpus)
    # from here on only the oracle handle is used
    oracle = model_oracle(target.model, cfg.blackbox.query_budget)
    proxy_cfg = proxy_config_of(cfg, target.model.config)
    with stage("pretrain-proxy", ws.times):
        pre = pretrain_proxy(proxy_cfg, corpus.pretrain, corpus.vocab, exclude=corpus.train + corpus.nonmembers)
    with stage("blackbox-attack", ws.times):
        res = blackbox_attack(oracle, corpus.attack_set, variant_of(cfg), hyperparams_of(cfg), proxy_cfg, corpus.pretrain, parse_feature_spec(cfg.attack.features), cfg.seed, pretrained=pre, jobs=jobs)
    with stage("report", ws.times):
        name = f"blackbox-{variant_of(cfg).label}"
        extra = {"query_count": res.query_count, "distill_epochs": len(res.distill.loss_curve), "distill_final_loss": res.distill.loss_curve[-1], "matched_proxy": cfg.blackbox.matched_proxy}
        out = _finish_attack(cfg, corpus, res.traces, name, gap, extra)
        dump_traces(res.traces, ws.path("traces.jsonl"), variant_of(cfg))
        truth = dict(zip([d.doc_id for d in corpus.attack_set], corpus.attack_labels.tolist()))
        write_descriptor_csv(ws.path("descriptors.csv"), out.descriptors, out.clusters, truth, name)
        write_reports([out.report], ws.path("report.json"), ws.path("report.csv"))
        (ws.path("distill_curve.json")).write_text(json.dumps(res.distill.loss_curve) + "\n")
    ws.info.update({"inputs": {"corpus": corpus.content_hash(), "target": target.model.fingerprint()}, "oracle_queries": res.query_count, "traintest_gap": gap})
    return RunResult([out.report], ws.finish(), target, {"query_count": res.query_count, "gap": gap})


SWEEP_AXES = ("attack.lr", "attack.tau", "attack.layer", "attack.variant", "attack.max_steps", "attack.features", "min_k", "dp.target_epsilon", "train.epochs")


def _with(cfg: ExperimentConfig, key: str, value) -> ExperimentConfig:
    section, _, leaf = key.partition(".")
    if section == "dp":
        return replace(cfg, dp=replace(cfg.dp, enabled=value is not None, **{leaf: value}))
    return replace(cfg, **{section: replace(getattr(cfg, section), **{leaf: value})})


def run_sweep(cfg: ExperimentConfig, axes: dict[str, list], jobs: int = 1) -> Path:
    """One report row per grid point of the declared axes."""
    for a in axes:
        if a not in SWEEP_AXES:
            raise StageError("sweep", f"invalid sweep axis {a!r}; valid: {', '.join(SWEEP_AXES)}")
    ws = Workspace(cfg, "sweep")
    with stage("corpus", ws.times):
        corpus = make_corpus(cfg)
    names = list(axes)
    grid = list(itertools.product(*(axes[a] for a in names))) if names else [()]
    rows = []
    for point in grid:
        c = cfg
        min_k = None
        for a, v in zip(names, point):
            if a == "min_k":
                min_k = v
            else:
                c = _with(c, a, v)
        with stage("train-target", ws.times):
            target = get_target(c, corpus)
        with stage("evaluate-target", ws.times):
            gap = _gap(c, target.model, corpus)
        with stage("attack", ws.times):
            if min_k is not None:
                c = replace(c, min_k_grid=[min_k])
                reports, _ = baseline_reports(c, target.model, corpus, gap, ["min-k", "min-k++"])
            else:
                reports = [whitebox_attack(c, target.model, corpus, gap, jobs).report]
        for r in reports:
            row = dict(zip(names, point))
            row.update(r.row())
            if target.epsilon is not None:
                row["epsilon"] = target.epsilon
            rows.append(row)
    with stage("report", ws.times):
        keys: list[str] = []
        for r in rows:
            keys += [k for k in r if k not in keys]
        path = ws.path("sweep.csv")
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(rows)
    ws.info["inputs"] = {"corpus": corpus.content_hash()}
    ws.info["sweep_axes"] = {a: list(v) for a, v in axes.items()}
    ws.finish()
    return path


def summarize_reports(run_dirs: Sequence[str | Path], out_csv: str | Path) -> list[dict]:
    """Mean and sd per attack of the main metrics across runs (e.g. seeds)."""
    by_attack: dict[str, list[dict]] = {}
    for d in run_dirs:
        path = Path(d) / "report.json"
        if not path.exists():
            raise StageError("report", f"{path} not found")
        for rec in json.loads(path.read_text()):
            by_attack.setdefault(rec["attack"], []).append(rec)
    metrics = ("balanced_accuracy", "f1", "tpr_at_1_fpr", "tpr_at_3_fpr", "auc")
    rows = []
    for attack, recs in by_attack.items():
        row = {"attack": attack, "runs": len(recs)}
        for m in metrics:
            vals = np.array([r[m] for r in recs], dtype=np.float64)
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_sd"] = float(vals.std())
        rows.append(row)
    with open(out_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["attack"])
        w.writeheader()
        w.writerows(rows)
    return rows

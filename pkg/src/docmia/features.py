"""Per-document descriptors, 2-means clustering and the membership decision."""
from __future__ import annotations

import csv
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .numerics import rng_stream

log = logging.getLogger(__name__)

AGGREGATORS = ("avg", "min", "max", "med")
PHI_ALL = AGGREGATORS
# raw per-question features a trace (or baseline) can provide
FEATURES = ("delta", "steps", "utility", "loss", "grad_norm", "score")
ATTACK_FEATURES = ("delta", "steps", "utility")

# lower value means "more member-like" for these features
LOWER_IS_MEMBER = {"delta": True, "steps": True, "loss": True, "grad_norm": True, "utility": False, "score": False}


def aggregate(values: Sequence[float], aggs: Sequence[str] = PHI_ALL) -> dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot aggregate an empty list")
    out = {}
    for a in aggs:
        if a == "avg":
            out[a] = float(v.mean())
        elif a == "min":
            out[a] = float(v.min())
        elif a == "max":
            out[a] = float(v.max())
        elif a == "med":
            out[a] = float(np.median(v))
        else:
            raise ValueError(f"unknown aggregator {a!r}")
    return out


def parse_feature_spec(spec: str) -> list[tuple[str, str]]:
    """``"avg:delta,min:steps"`` or ``"all"`` -> list of (aggregator, feature).

    A bare feature name (``"delta"``) expands to all four aggregators.
    """
    spec = spec.strip()
    if spec in ("", "all"):
        return [(a, f) for f in ATTACK_FEATURES for a in AGGREGATORS]
    cols = []
    for part in spec.split(","):
        part = part.strip()
        if ":" in part:
            a, f = part.split(":", 1)
            aggs = AGGREGATORS if a == "all" else (a,)
        else:
            aggs, f = AGGREGATORS, part
        if f not in FEATURES:
            raise ValueError(f"unknown feature {f!r}")
        for a in aggs:
            if a not in AGGREGATORS:
                raise ValueError(f"unknown aggregator {a!r}")
            cols.append((a, f))
    if not cols:
        raise ValueError("empty feature selection")
    return cols


def column_name(agg: str, feat: str) -> str:
    return f"{agg}_{feat}"


@dataclass
class FeatureDescriptors:
    doc_ids: list[str]
    columns: list[tuple[str, str]]  # (aggregator, feature)
    raw: np.ndarray  # (n_docs, n_cols) aggregated values
    vector: np.ndarray  # normalized

    @property
    def names(self) -> list[str]:
        return [column_name(a, f) for a, f in self.columns]

    def column(self, agg: str, feat: str, normalized: bool = False) -> np.ndarray:
        j = self.columns.index((agg, feat))
        return (self.vector if normalized else self.raw)[:, j]


def normalize(x: np.ndarray, method: str = "zscore") -> np.ndarray:
    """Column-wise normalization; constant columns become zeros."""
    x = np.asarray(x, dtype=np.float64)
    if method == "zscore":
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        safe = np.where(sd > 0, sd, 1.0)
        return np.where(sd > 0, (x - mu) / safe, 0.0)
    if method == "minmax":
        lo, hi = x.min(axis=0), x.max(axis=0)
        span = hi - lo
        return np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.0)
    raise ValueError(f"unknown normalization {method!r}")


def build_descriptors(
    per_doc: Mapping[str, Sequence[Mapping[str, float]]],
    columns: Sequence[tuple[str, str]],
    normalization: str = "zscore",
) -> FeatureDescriptors:
    """Aggregate per-question feature dicts into normalized per-document vectors.

    ``per_doc`` maps doc_id to a list of ``{feature: value}`` records, one per
    successful question.  Normalization statistics come from these documents
    only.
    """
    doc_ids = list(per_doc)
    if len(columns) == 0:
        raise ValueError("no feature columns selected")
    raw = np.zeros((len(doc_ids), len(columns)))
    for i, doc_id in enumerate(doc_ids):
        recs = per_doc[doc_id]
        if not recs:
            raise ValueError(f"document {doc_id} has no successful traces")
        for j, (agg, feat) in enumerate(columns):
            raw[i, j] = aggregate([r[feat] for r in recs], (agg,))[agg]
    if not np.all(np.isfinite(raw)):
        raise ValueError("non-finite aggregated feature")
    return FeatureDescriptors(doc_ids, list(columns), raw, normalize(raw, normalization))


def trace_records(traces_by_doc) -> dict[str, list[dict[str, float]]]:
    """Feature records from attack traces, dropping failed ones."""
    out = {}
    for doc_id, traces in traces_by_doc.items():
        ok = [t for t in traces if not t.failed]
        if not ok:
            raise ValueError(f"every trace failed for document {doc_id}")
        out[doc_id] = [{"delta": t.delta, "steps": float(t.steps), "utility": t.utility, "loss": t.initial_loss} for t in ok]
    return out


# ---------------------------------------------------------------------------
# clustering


@dataclass
class ClusterResult:
    assignment: np.ndarray  # (n,) in {0, 1}
    centroids: np.ndarray  # (2, dim)
    inertia: float
    inertia_history: list[float]
    member_cluster: int = -1
    scores: np.ndarray | None = None  # higher = more member-like

    @property
    def labels(self) -> np.ndarray:
        """1 = predicted member."""
        return (self.assignment == self.member_cluster).astype(np.int64)


class DegenerateInput(ValueError):
    pass


def _sse(x: np.ndarray, assign: np.ndarray, centroids: np.ndarray) -> float:
    return float(np.sum((x - centroids[assign]) ** 2))


def _plus_plus(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    first = x[rng.integers(len(x))]
    d2 = np.sum((x - first) ** 2, axis=1)
    if d2.sum() <= 0:
        second = x[rng.integers(len(x))]
    else:
        second = x[rng.choice(len(x), p=d2 / d2.sum())]
    return np.stack([first, second])


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int) -> ClusterResult:
    history = []
    assign = None
    for _ in range(max_iter):
        d = ((x[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
        new = np.argmin(d, axis=1)
        for c in (0, 1):
            # keep both clusters populated
            if not np.any(new == c):
                far = int(np.argmax(d[np.arange(len(x)), new]))
                new[far] = c
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        centroids = np.stack([x[assign == c].mean(axis=0) for c in (0, 1)])
        history.append(_sse(x, assign, centroids))
    return ClusterResult(assign, centroids, history[-1], history)


def _exact_1d(x: np.ndarray) -> ClusterResult:
    """Optimal 2-means in one dimension: the best split of the sorted values."""
    v = x[:, 0]
    order = np.argsort(v, kind="stable")
    s = v[order]
    n = len(s)
    k = np.arange(1, n)
    c1, c2 = np.cumsum(s), np.cumsum(s * s)
    left = c2[:-1] - c1[:-1] ** 2 / k
    right = (c2[-1] - c2[:-1]) - (c1[-1] - c1[:-1]) ** 2 / (n - k)
    split = int(np.argmin(left + right)) + 1
    assign = np.zeros(n, dtype=np.int64)
    assign[order[split:]] = 1
    centroids = np.stack([x[assign == c].mean(axis=0) for c in (0, 1)])
    sse = _sse(x, assign, centroids)
    return ClusterResult(assign, centroids, sse, [sse])


def kmeans2(x: np.ndarray, seed: int, restarts: int = 5, max_iter: int = 300) -> ClusterResult:
    """2-means with k-means++ seeding; the lowest-inertia restart wins.

    One-dimensional inputs are solved exactly instead (Lloyd can stall in a
    local optimum even there).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) < 2:
        raise ValueError("need at least 2 points to form 2 clusters")
    if np.all(x == x[0]):
        raise DegenerateInput("all descriptors are identical; 2 clusters are undefined")
    best = None
    if x.shape[1] == 1:
        best = _exact_1d(x)
        restarts = 0
    for r in range(restarts):
        rng = rng_stream(seed, f"kmeans/{r}")
        res = _lloyd(x, _plus_plus(x, rng), max_iter)
        if best is None or res.inertia < best.inertia - 1e-12:
            best = res
    # canonical labelling so the partition does not depend on restart order:
    # cluster 0 holds the first point
    if best.assignment[0] == 1:
        best.assignment = 1 - best.assignment
        best.centroids = best.centroids[::-1].copy()
    return best


def decide_membership(result: ClusterResult, direction: np.ndarray, lower_is_member: bool, descriptors: np.ndarray) -> ClusterResult:
    """Pick the member cluster from the mean of a direction feature.

    The member cluster has the smaller mean (``lower_is_member``) or the
    larger one.  Scores are minus the distance to the member centroid.
    """
    direction = np.asarray(direction, dtype=np.float64)
    means = [direction[result.assignment == c].mean() for c in (0, 1)]
    if means[0] == means[1]:
        log.warning("cluster means tie on the direction feature; cluster 0 taken as member")
        member = 0
    elif lower_is_member:
        member = int(np.argmin(means))
    else:
        member = int(np.argmax(means))
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    result.member_cluster = member
    result.scores = -np.sqrt(((x - result.centroids[member]) ** 2).sum(axis=1))
    return result


def cluster_descriptors(desc: FeatureDescriptors, seed: int, direction: tuple[str, str] | None = None, restarts: int = 5) -> ClusterResult:
    """Cluster the normalized descriptors and label the member cluster.

    ``direction`` defaults to AVG delta when present, else the first column.
    """
    if direction is None:
        direction = ("avg", "delta") if ("avg", "delta") in desc.columns else desc.columns[0]
    res = kmeans2(desc.vector, seed, restarts)
    return decide_membership(res, desc.column(*direction), LOWER_IS_MEMBER[direction[1]], desc.vector)


def write_descriptor_csv(path, desc: FeatureDescriptors, result: ClusterResult, truth: Mapping[str, int] | None = None, attack: str = "") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attack", "doc_id", "true_label"] + desc.names + ["membership_score", "predicted_label"])
        for i, doc_id in enumerate(desc.doc_ids):
            t = "" if truth is None else truth.get(doc_id, "")
            w.writerow([attack, doc_id, t] + [repr(float(v)) for v in desc.raw[i]] + [repr(float(result.scores[i])), int(result.labels[i])])

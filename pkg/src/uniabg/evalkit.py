"""Retrieval metrics and diagnostics: R@K, AP, association accuracy, purity, view probe."""

from __future__ import annotations

from collections import Counter
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ShapeError
from .feature_store import EmbeddingSet
from .hgfc import AssociationMap, cosine_similarity_matrix
from .layers import init_affine
from .losses import cross_entropy


def rank_gallery(queries: EmbeddingSet | np.ndarray, gallery: EmbeddingSet | np.ndarray) -> np.ndarray:
    """Full ranking per query, descending similarity, ties by ascending index."""
    sim = cosine_similarity_matrix(queries, gallery)
    if sim.shape[1] == 0:
        raise ValueError("cannot rank an empty gallery")
    return np.argsort(-sim, axis=1, kind="stable")


def relevance_from_classes(query_classes: Sequence[int], gallery_classes: Sequence[int]) -> list[set[int]]:
    by_class: dict[int, set[int]] = {}
    for j, c in enumerate(gallery_classes):
        by_class.setdefault(int(c), set()).add(j)
    return [by_class.get(int(c), set()) for c in query_classes]


def recall_at_k(ranking: np.ndarray, relevance: Sequence[set[int]], k: int) -> float:
    """Fraction of queries with a relevant item within the top ``k``."""
    if k < 1:
        raise ValueError("K must be at least 1")
    if len(ranking) == 0:
        return 0.0
    hits = sum(1 for row, rel in zip(ranking, relevance) if rel.intersection(int(j) for j in row[:k]))
    return hits / len(ranking)


def average_precision(ranking: np.ndarray, relevance: Sequence[set[int]]) -> float:
    """Mean over queries of ``(1/R) * sum_hits (hits so far / rank)``."""
    aps = []
    for row, rel in zip(ranking, relevance):
        if not rel:
            raise ValueError("every evaluated query needs at least one relevant item")
        hits, total = 0, 0.0
        for rank, j in enumerate(row, start=1):
            if int(j) in rel:
                hits += 1
                total += hits / rank
                if hits == len(rel):
                    break
        aps.append(total / len(rel))
    return float(np.mean(aps)) if aps else 0.0


def retrieval_report(queries: np.ndarray, gallery: np.ndarray, q_classes, g_classes, task: str) -> dict:
    ranking = rank_gallery(queries, gallery)
    rel = relevance_from_classes(q_classes, g_classes)
    out = {"task": task}
    for k in (1, 5, 10):
        out[f"R@{k}"] = recall_at_k(ranking, rel, k)
    out["AP"] = average_precision(ranking, rel)
    return out


def _majority(values: Sequence[int]) -> int:
    counts = Counter(int(v) for v in values)
    best = max(counts.values())
    return min(c for c, n in counts.items() if n == best)


def association_accuracy(
    assoc: AssociationMap,
    drone_truth: Mapping[str, int],
    sat_labels: Sequence[int],
    sat_truth: Sequence[int],
) -> dict:
    """Accuracy over associated drones and coverage over all drones.

    A drone counts as correct when the majority true class of its winning
    satellite cluster equals its own class. Accuracy is ``None`` when nothing
    is associated.
    """
    sat_labels = np.asarray(sat_labels, dtype=np.int64)
    sat_truth = np.asarray(sat_truth, dtype=np.int64)
    if sat_labels.shape != sat_truth.shape:
        raise ShapeError("satellite labels and truth must align")
    members: dict[int, list[int]] = {}
    for lab, t in zip(sat_labels, sat_truth):
        if lab >= 0:
            members.setdefault(int(lab), []).append(int(t))
    majority = {c: _majority(v) for c, v in members.items()}
    all_ids = list(assoc.pairs) + list(assoc.unassociated)
    missing = [d for d in all_ids if d not in drone_truth]
    if missing:
        raise ValueError(f"no ground truth for drone(s) {missing[:3]}")
    total = len(all_ids)
    correct = sum(1 for d, a in assoc.pairs.items() if majority.get(a.sat_cluster) == drone_truth[d])
    n_assoc = len(assoc.pairs)
    return {
        "accuracy": correct / n_assoc if n_assoc else None,
        "coverage": n_assoc / total if total else 0.0,
    }


def cluster_purity(labels: Sequence[int], truth: Sequence[int]) -> Optional[float]:
    """``sum_k max_c |cluster k & class c| / #non-noise``; ``None`` if all noise."""
    labels = np.asarray(labels, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if labels.shape != truth.shape:
        raise ShapeError("labels and truth must align")
    keep = labels >= 0
    if not keep.any():
        return None
    total = 0
    for k in np.unique(labels[keep]):
        total += Counter(truth[labels == k].tolist()).most_common(1)[0][1]
    return total / int(keep.sum())


PROBE_STEPS = 300
PROBE_LR = 0.5


def view_probe(features: Sequence[EmbeddingSet], seed: int, steps: int = PROBE_STEPS, lr: float = PROBE_LR) -> float:
    """Held-out accuracy of a fresh affine softmax classifier predicting the view.

    Rows are split 80/20 (stratified per view, seeded); the classifier is fit
    by full-batch gradient descent on the cross-entropy.
    """
    if len(features) < 2:
        raise ValueError("the view probe needs at least two views")
    rng = np.random.default_rng(seed)
    train_x, train_y, test_x, test_y = [], [], [], []
    for v, s in enumerate(features):
        if s.count < 5:
            raise ValueError(f"view {s.view.value} has {s.count} samples; the probe needs at least 5")
        x = np.asarray(s.vectors, dtype=np.float64)
        perm = rng.permutation(s.count)
        n_test = max(1, int(round(0.2 * s.count)))
        test_x.append(x[perm[:n_test]])
        train_x.append(x[perm[n_test:]])
        test_y.append(np.full(n_test, v))
        train_y.append(np.full(s.count - n_test, v))
    xtr, ytr = np.vstack(train_x), np.concatenate(train_y)
    xte, yte = np.vstack(test_x), np.concatenate(test_y)
    layer = init_affine(rng, xtr.shape[1], len(features))
    for _ in range(steps):
        g = cross_entropy(layer.forward(xtr), ytr).gradients["logits"]
        layer.weight -= lr * (xtr.T @ g)
        layer.bias -= lr * g.sum(axis=0)
    pred = np.argmax(layer.forward(xte), axis=1)
    return float(np.mean(pred == yte))

"""Intra-view pseudo-labels (DBSCAN under cosine distance) and prototype memories."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from ._parallel import map_row_chunks
from .errors import EmptyMemoryError, ParameterError, ShapeError
from .feature_store import EmbeddingSet, ViewTag, normalize_rows

NOISE = -1


@dataclass(frozen=True)
class MemoryDictionary:
    """Unit-norm cluster prototypes of one view (row ``k`` belongs to cluster ``k``)."""

    prototypes: np.ndarray
    view: ViewTag
    member_counts: tuple[int, ...]

    @property
    def size(self) -> int:
        return self.prototypes.shape[0]


def _as_matrix(features: EmbeddingSet | np.ndarray) -> np.ndarray:
    if isinstance(features, EmbeddingSet):
        features = features.vectors
    return np.asarray(features, dtype=np.float64)


def _neighbor_lists(x: np.ndarray, eps: float) -> list[np.ndarray]:
    def chunk(a: int, b: int) -> list[np.ndarray]:
        dist = 1.0 - x[a:b] @ x.T
        return [np.flatnonzero(row <= eps) for row in dist]

    out: list[np.ndarray] = []
    for part in map_row_chunks(chunk, x.shape[0]):
        out.extend(part)
    return out


def dbscan(features: EmbeddingSet | np.ndarray, eps: float, min_samples: int) -> np.ndarray:
    """Cluster unit rows with DBSCAN under cosine distance ``1 - u.v``.

    Neighbourhoods are closed balls (``d <= eps``) and include the point itself.
    Clusters are numbered by their lowest-index core point; a border point joins
    the lowest-numbered cluster among its core neighbours. Noise is ``-1``.
    """
    if not 0.0 < eps <= 2.0:
        raise ParameterError(f"eps must lie in (0, 2], got {eps}")
    if min_samples < 1:
        raise ParameterError(f"min_samples must be positive, got {min_samples}")
    x = _as_matrix(features)
    n = x.shape[0]
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels

    neighbors = _neighbor_lists(x, eps)
    core = np.array([len(nb) >= min_samples for nb in neighbors])
    core_idx = np.flatnonzero(core)
    if core_idx.size == 0:
        return labels

    # Connected components of the core-core eps graph are the clusters.
    pos = np.full(n, -1, dtype=np.int64)
    pos[core_idx] = np.arange(core_idx.size)
    rows, cols = [], []
    for p, i in enumerate(core_idx):
        nb = neighbors[i]
        nb = pos[nb[core[nb]]]
        rows.append(np.full(nb.size, p))
        cols.append(nb)
    graph = csr_matrix(
        (np.ones(sum(r.size for r in rows)), (np.concatenate(rows), np.concatenate(cols))),
        shape=(core_idx.size, core_idx.size),
    )
    _, comp = connected_components(graph, directed=False)

    # Renumber components in order of first appearance (lowest core index).
    remap: dict[int, int] = {}
    for c in comp:
        if c not in remap:
            remap[c] = len(remap)
    labels[core_idx] = [remap[c] for c in comp]

    for i in np.flatnonzero(~core):
        nb = neighbors[i]
        nb = nb[core[nb]]
        if nb.size:
            labels[i] = labels[nb].min()
    return labels


def num_clusters(labels: Sequence[int]) -> int:
    labels = np.asarray(labels)
    return int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0


def compute_prototypes(
    features: EmbeddingSet | np.ndarray,
    labels: Sequence[int],
    view: ViewTag | str | None = None,
) -> MemoryDictionary:
    """Per-cluster arithmetic mean of member rows, re-normalized to unit length."""
    x = _as_matrix(features)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != x.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {x.shape[0]} rows")
    k = num_clusters(labels)
    if k == 0:
        raise EmptyMemoryError("every point is noise; no prototypes to build")
    if view is None:
        view = features.view if isinstance(features, EmbeddingSet) else ViewTag.DRONE
    sums = np.zeros((k, x.shape[1]))
    counts = np.zeros(k, dtype=np.int64)
    for row, lab in zip(x, labels):
        if lab >= 0:
            sums[lab] += row
            counts[lab] += 1
    if np.any(counts == 0):
        raise ShapeError("cluster labels are not contiguous from 0")
    means = sums / counts[:, None]
    return MemoryDictionary(normalize_rows(means), ViewTag(view), tuple(int(c) for c in counts))


def memory_update(
    memory: MemoryDictionary, query: np.ndarray, label: int, momentum: float
) -> MemoryDictionary:
    """``proto[label] <- normalize(m * proto[label] + (1 - m) * query)``."""
    if not 0 <= label < memory.size:
        raise IndexError(f"cluster {label} outside memory of size {memory.size}")
    if not 0.0 <= momentum <= 1.0:
        raise ParameterError(f"momentum must lie in [0, 1], got {momentum}")
    protos = memory.prototypes.copy()
    mixed = momentum * protos[label] + (1.0 - momentum) * np.asarray(query, dtype=np.float64)
    protos[label] = normalize_rows(mixed)
    return MemoryDictionary(protos, memory.view, memory.member_counts)


def memory_update_batch(
    memory: MemoryDictionary, queries: np.ndarray, labels: Sequence[int], momentum: float
) -> MemoryDictionary:
    """Apply :func:`memory_update` row by row in batch order, skipping noise."""
    protos = memory.prototypes.copy()
    for q, lab in zip(queries, labels):
        if lab < 0:
            continue
        if lab >= memory.size:
            raise IndexError(f"cluster {lab} outside memory of size {memory.size}")
        protos[lab] = normalize_rows(momentum * protos[lab] + (1.0 - momentum) * q)
    return MemoryDictionary(protos, memory.view, memory.member_counts)


def export_labels(ids: Sequence[str], labels: Sequence[int], path: str | os.PathLike) -> None:
    payload = {str(i): int(l) for i, l in zip(ids, labels)}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_labels(path: str | os.PathLike, ids: Sequence[str]) -> np.ndarray:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return np.array([payload[i] for i in ids], dtype=np.int64)

"""Heterogeneous graph filtering calibration of drone -> satellite associations.

Two bipartite top-k graphs are built toward the satellite gallery, one from the
drone features (real-to-real) and one from their APV counterparts
(pseudo-to-real). A satellite node scores the fraction of sources (shared by
index: APV ``i`` comes from drone ``i``) that reach it in both graphs; drone
candidates must be mutual neighbours in both graphs and land on a satellite
whose score exceeds a threshold. Surviving candidates vote, weighted by
``similarity * consistency``, for a satellite cluster.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._parallel import map_row_chunks
from .errors import ParameterError, ShapeError
from .feature_store import EmbeddingSet

INSTANCE, CLUSTER = "instance", "cluster"


@dataclass(frozen=True)
class NeighborGraph:
    """Per-query gallery neighbours, best first (ties by ascending index)."""

    k: int
    edges: np.ndarray  # n_queries x min(k, n_gallery) gallery indices
    sims: np.ndarray   # matching similarities

    @property
    def n_queries(self) -> int:
        return self.edges.shape[0]


@dataclass(frozen=True)
class Candidate:
    sat_index: int
    similarity: float
    consistency: float
    weight: float


@dataclass(frozen=True)
class Association:
    sat_cluster: int
    sat_rep_id: str
    weight: float


@dataclass
class AssociationMap:
    pairs: dict[str, Association] = field(default_factory=dict)
    unassociated: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "pairs": [
                {"drone_id": d, "sat_cluster": a.sat_cluster, "sat_rep_id": a.sat_rep_id, "weight": a.weight}
                for d, a in self.pairs.items()
            ],
            "unassociated": list(self.unassociated),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "AssociationMap":
        pairs = {
            p["drone_id"]: Association(int(p["sat_cluster"]), str(p["sat_rep_id"]), float(p["weight"]))
            for p in payload["pairs"]
        }
        return cls(pairs, [str(u) for u in payload["unassociated"]])


def save_association(assoc: AssociationMap, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(assoc.to_json(), indent=1) + "\n", encoding="utf-8")


def load_association(path: str | os.PathLike) -> AssociationMap:
    return AssociationMap.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _matrix(x: EmbeddingSet | np.ndarray) -> np.ndarray:
    return np.asarray(x.vectors if isinstance(x, EmbeddingSet) else x, dtype=np.float64)


def cosine_similarity_matrix(a: EmbeddingSet | np.ndarray, b: EmbeddingSet | np.ndarray) -> np.ndarray:
    """Dot products of (already unit-norm) rows, ``out[i, j] = a_i . b_j``."""
    a, b = _matrix(a), _matrix(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] == 0:
        return np.zeros((0, b.shape[0]))
    return np.vstack(map_row_chunks(lambda s, e: a[s:e] @ b.T, a.shape[0]))


def topk_neighbors(sim: np.ndarray, k: int) -> NeighborGraph:
    if k < 1:
        raise ParameterError("k must be at least 1")
    sim = np.asarray(sim, dtype=np.float64)
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    return NeighborGraph(k, order, np.take_along_axis(sim, order, axis=1))


def reverse_adjacency(graph: NeighborGraph, gallery_size: int) -> list[set[int]]:
    """``rev[j]`` is the set of query indices whose neighbour list contains ``j``."""
    rev: list[set[int]] = [set() for _ in range(gallery_size)]
    for i, row in enumerate(graph.edges):
        for j in row:
            if not 0 <= j < gallery_size:
                raise ShapeError(f"edge to gallery index {j} outside [0, {gallery_size})")
            rev[int(j)].add(i)
    return rev


def consistency_scores(g_ru: NeighborGraph, g_pu: NeighborGraph, k: int, gallery_size: int) -> np.ndarray:
    """Per-satellite ``|rev_RU[j] & rev_PU[j]| / k``, clipped to [0, 1]."""
    if g_ru.n_queries != g_pu.n_queries:
        raise ShapeError("drone and APV graphs must index the same sources")
    rev_ru = reverse_adjacency(g_ru, gallery_size)
    rev_pu = reverse_adjacency(g_pu, gallery_size)
    scores = np.array([len(a & b) / k for a, b in zip(rev_ru, rev_pu)], dtype=np.float64)
    return np.clip(scores, 0.0, 1.0)


def mutual_filter(
    g_ru: NeighborGraph, g_pu: NeighborGraph, scores: np.ndarray, threshold: float
) -> list[list[Candidate]]:
    """Keep ``(i, j)`` iff ``j`` neighbours drone ``i`` and APV ``i`` and ``scores[j] > threshold``."""
    if g_ru.n_queries != g_pu.n_queries:
        raise ShapeError("drone and APV graphs must index the same sources")
    out: list[list[Candidate]] = []
    for i in range(g_ru.n_queries):
        pu = set(int(j) for j in g_pu.edges[i])
        keep = []
        for j, s in zip(g_ru.edges[i], g_ru.sims[i]):
            j = int(j)
            c = float(scores[j])
            if j in pu and c > threshold:
                keep.append(Candidate(j, float(s), c, float(s) * c))
        out.append(keep)
    return out


def _argmax_cluster(votes: dict[int, float]) -> Optional[int]:
    if not votes:
        return None
    best = max(votes.values())
    return min(c for c, v in votes.items() if v == best)


def weighted_vote(
    candidates: Sequence[Sequence[Candidate]],
    sat_labels: Sequence[int],
    drone_labels: Sequence[int],
    mode: str = CLUSTER,
    drone_ids: Optional[Sequence[str]] = None,
    sat_ids: Optional[Sequence[str]] = None,
) -> AssociationMap:
    """Resolve candidates into one satellite cluster per drone.

    ``instance`` takes, per drone, the cluster with the largest summed weight;
    ``cluster`` pools the sums over every member of the drone's pseudo-label
    cluster so all members share one winner. Noise satellites never vote;
    drones without candidates (and, in ``cluster`` mode, noise drones) stay
    unassociated. Ties go to the lowest cluster id.
    """
    if mode not in (INSTANCE, CLUSTER):
        raise ParameterError(f"unknown vote mode {mode!r}")
    sat_labels = np.asarray(sat_labels, dtype=np.int64)
    drone_labels = np.asarray(drone_labels, dtype=np.int64)
    n = len(candidates)
    if drone_labels.shape[0] != n:
        raise ShapeError(f"{drone_labels.shape[0]} drone labels for {n} drones")
    drone_ids = [str(i) for i in range(n)] if drone_ids is None else list(drone_ids)
    sat_ids = [str(j) for j in range(len(sat_labels))] if sat_ids is None else list(sat_ids)

    # exact (order-independent) sums so pooled and per-drone votes tie consistently
    own_terms: list[dict[int, list[float]]] = []
    for cands in candidates:
        t: dict[int, list[float]] = {}
        for c in cands:
            lab = int(sat_labels[c.sat_index])
            if lab >= 0:
                t.setdefault(lab, []).append(c.weight)
        own_terms.append(t)
    own_votes = [{lab: math.fsum(ws) for lab, ws in t.items()} for t in own_terms]

    winners: list[Optional[int]] = [None] * n
    if mode == INSTANCE:
        winners = [_argmax_cluster(v) for v in own_votes]
    else:
        pooled: dict[int, dict[int, list[float]]] = {}
        for i, t in enumerate(own_terms):
            k = int(drone_labels[i])
            if k < 0:
                continue
            acc = pooled.setdefault(k, {})
            for lab, ws in t.items():
                acc.setdefault(lab, []).extend(ws)
        cluster_winner = {
            k: _argmax_cluster({lab: math.fsum(ws) for lab, ws in v.items()}) for k, v in pooled.items()
        }
        for i in range(n):
            k = int(drone_labels[i])
            if k >= 0 and candidates[i]:
                winners[i] = cluster_winner.get(k)

    # cluster-level fallback representative: best weight among all pooled candidates
    best_in_cluster: dict[int, tuple[float, int]] = {}
    for cands in candidates:
        for c in cands:
            lab = int(sat_labels[c.sat_index])
            if lab < 0:
                continue
            cur = best_in_cluster.get(lab)
            if cur is None or c.weight > cur[0] or (c.weight == cur[0] and c.sat_index < cur[1]):
                best_in_cluster[lab] = (c.weight, c.sat_index)

    assoc = AssociationMap()
    for i in range(n):
        win = winners[i]
        if win is None:
            assoc.unassociated.append(drone_ids[i])
            continue
        mine = [c for c in candidates[i] if sat_labels[c.sat_index] == win]
        if mine:
            rep = min(mine, key=lambda c: (-c.weight, c.sat_index)).sat_index
        else:
            rep = best_in_cluster[win][1]
        weight = own_votes[i].get(win, 0.0)
        assoc.pairs[drone_ids[i]] = Association(int(win), sat_ids[rep], float(weight))
    return assoc


def greedy_associate(
    sim: np.ndarray,
    sat_labels: Optional[Sequence[int]] = None,
    drone_ids: Optional[Sequence[str]] = None,
    sat_ids: Optional[Sequence[str]] = None,
) -> AssociationMap:
    """Nearest-satellite association: ``j* = argmax_j sim[i, j]`` (ties -> lowest ``j``).

    With ``sat_labels`` the drone takes ``j*``'s cluster (noise ``j*`` leaves
    it unassociated); without, the cluster id is ``j*`` itself.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[1] == 0:
        raise ValueError("greedy association needs a non-empty gallery")
    n, m = sim.shape
    drone_ids = [str(i) for i in range(n)] if drone_ids is None else list(drone_ids)
    sat_ids = [str(j) for j in range(m)] if sat_ids is None else list(sat_ids)
    best = np.argmax(sim, axis=1)  # first maximum on ties
    assoc = AssociationMap()
    for i, j in enumerate(best):
        lab = int(j) if sat_labels is None else int(sat_labels[j])
        if lab < 0:
            assoc.unassociated.append(drone_ids[i])
        else:
            assoc.pairs[drone_ids[i]] = Association(lab, sat_ids[j], float(sim[i, j]))
    return assoc


def hgfc_associate(
    drone: np.ndarray,
    apv: np.ndarray,
    sat: np.ndarray,
    drone_labels: Sequence[int],
    sat_labels: Sequence[int],
    k: int = 2,
    threshold: float = 0.5,
    mode: str = CLUSTER,
    drone_ids: Optional[Sequence[str]] = None,
    sat_ids: Optional[Sequence[str]] = None,
) -> AssociationMap:
    """Full calibration: both graphs, consistency, mutual filter, weighted vote."""
    g_ru = topk_neighbors(cosine_similarity_matrix(drone, sat), k)
    g_pu = topk_neighbors(cosine_similarity_matrix(apv, sat), k)
    m = _matrix(sat).shape[0]
    scores = consistency_scores(g_ru, g_pu, k, m)
    cands = mutual_filter(g_ru, g_pu, scores, threshold)
    return weighted_vote(cands, sat_labels, drone_labels, mode, drone_ids, sat_ids)

"""Stage 2: supervised refinement on calibrated drone-satellite pairs.

The shared encoder (warm-started from stage 1) feeds three affine heads: a
contrastive head trained with symmetric InfoNCE, a classifier over satellite
clusters trained with cross-entropy on both sides of each pair, and an
alignment head trained with MSE between the two sides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BatchError, DatasetError, ShapeError
from .feature_store import EmbeddingSet
from .hgfc import AssociationMap
from .layers import Affine, EncoderParams, init_affine, normalize_backward, normalize_forward
from .losses import LossResult, cross_entropy, info_nce, mse_align

PARAM_NAMES = ("enc_w", "enc_b", "ctr_w", "ctr_b", "cls_w", "cls_b", "dsa_w", "dsa_b")


@dataclass
class PairDataset:
    queries: np.ndarray     # drone rows
    references: np.ndarray  # satellite rows
    labels: np.ndarray      # satellite cluster ids
    drone_ids: tuple[str, ...]
    sat_ids: tuple[str, ...]
    num_classes: int

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class Stage2Config:
    epochs: int = 5
    lr: float = 1e-3
    batch: int = 24
    temperature: float = 0.05
    head_dim: int = 64
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)  # InfoNCE, MSE, CE


@dataclass
class Stage2Model:
    encoder: EncoderParams
    ctr: Affine
    cls: Affine
    dsa: Affine
    loss_trace: list[dict] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.cls.weight.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {
            "enc_w": self.encoder.weight, "enc_b": self.encoder.bias,
            "ctr_w": self.ctr.weight, "ctr_b": self.ctr.bias,
            "cls_w": self.cls.weight, "cls_b": self.cls.bias,
            "dsa_w": self.dsa.weight, "dsa_b": self.dsa.bias,
        }

    @classmethod
    def from_params(cls, p: dict[str, np.ndarray]) -> "Stage2Model":
        return cls(
            EncoderParams(p["enc_w"], p["enc_b"]),
            Affine(p["ctr_w"], p["ctr_b"]), Affine(p["cls_w"], p["cls_b"]), Affine(p["dsa_w"], p["dsa_b"]),
        )

    def copy(self) -> "Stage2Model":
        return Stage2Model.from_params({k: v.copy() for k, v in self.params().items()})

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Retrieval embedding: the shared encoder output."""
        return self.encoder.encode(x)


def init_stage2(encoder: EncoderParams, num_classes: int, head_dim: int, seed: int) -> Stage2Model:
    rng = np.random.default_rng(seed)
    d = encoder.weight.shape[1]
    return Stage2Model(
        encoder.copy(),
        init_affine(rng, d, head_dim), init_affine(rng, d, num_classes), init_affine(rng, d, head_dim),
    )


def build_pairs(
    assoc: AssociationMap,
    drone: EmbeddingSet,
    sat: EmbeddingSet,
    sat_labels,
) -> PairDataset:
    """One (drone, representative satellite, winning cluster) triple per associated drone."""
    sat_labels = np.asarray(sat_labels, dtype=np.int64)
    if sat_labels.shape[0] != sat.count:
        raise ShapeError(f"{sat_labels.shape[0]} satellite labels for {sat.count} satellites")
    k = int(sat_labels.max()) + 1 if sat_labels.size else 0
    drone_pos = {d: i for i, d in enumerate(drone.ids)}
    sat_pos = {s: j for j, s in enumerate(sat.ids)}
    qi, ri, ys = [], [], []
    for d in drone.ids:  # dataset order follows the drone set
        a = assoc.pairs.get(d)
        if a is None:
            continue
        if a.sat_rep_id not in sat_pos:
            raise DatasetError(f"association references unknown satellite {a.sat_rep_id!r}")
        if not 0 <= a.sat_cluster < k:
            raise DatasetError(f"cluster {a.sat_cluster} is not a satellite cluster id")
        qi.append(drone_pos[d])
        ri.append(sat_pos[a.sat_rep_id])
        ys.append(a.sat_cluster)
    unknown = set(assoc.pairs) - set(drone_pos)
    if unknown:
        raise DatasetError(f"association references unknown drone(s) {sorted(unknown)[:3]}")
    if not qi:
        raise DatasetError("association is empty; no training pairs")
    return PairDataset(
        np.asarray(drone.vectors, dtype=np.float64)[qi],
        np.asarray(sat.vectors, dtype=np.float64)[ri],
        np.array(ys, dtype=np.int64),
        tuple(drone.ids[i] for i in qi),
        tuple(sat.ids[j] for j in ri),
        k,
    )


def _head_unit(head: Affine, e: np.ndarray):
    out, norms = normalize_forward(head.forward(e))
    return out, norms


def stage2_loss(
    model: Stage2Model, q: np.ndarray, r: np.ndarray, y: np.ndarray, temperature: float,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> tuple[LossResult, dict]:
    """``L = InfoNCE(ctr(q), ctr(r)) + MSE(dsa(q), dsa(r)) + CE(cls(q), y) + CE(cls(r), y)``.

    Gradients are returned for every block in :data:`PARAM_NAMES`.
    """
    if q.shape[0] < 2:
        raise BatchError("stage-2 batches need at least 2 pairs")
    w_nce, w_mse, w_ce = weights
    b = q.shape[0]
    eq, cq = model.encoder.forward(q)
    er, cr = model.encoder.forward(r)
    e = np.vstack([eq, er])

    c_out, c_norm = _head_unit(model.ctr, e)
    nce = info_nce(c_out[:b], c_out[b:], temperature)
    d_out, d_norm = _head_unit(model.dsa, e)
    mse = mse_align(d_out[:b], d_out[b:])
    logits = model.cls.forward(e)
    ce_q = cross_entropy(logits[:b], y)
    ce_r = cross_entropy(logits[b:], y)

    g_c = normalize_backward(
        w_nce * np.vstack([nce.gradients["queries"], nce.gradients["references"]]), c_out, c_norm)
    g_d = normalize_backward(w_mse * np.vstack([mse.gradients["a"], mse.gradients["b"]]), d_out, d_norm)
    g_l = w_ce * np.vstack([ce_q.gradients["logits"], ce_r.gradients["logits"]])
    grads = {
        "ctr_w": e.T @ g_c, "ctr_b": g_c.sum(axis=0),
        "dsa_w": e.T @ g_d, "dsa_b": g_d.sum(axis=0),
        "cls_w": e.T @ g_l, "cls_b": g_l.sum(axis=0),
    }
    g_e = g_c @ model.ctr.weight.T + g_d @ model.dsa.weight.T + g_l @ model.cls.weight.T
    gw_q, gb_q, _ = EncoderParams.backward(g_e[:b], cq)
    gw_r, gb_r, _ = EncoderParams.backward(g_e[b:], cr)
    grads["enc_w"] = gw_q + gw_r
    grads["enc_b"] = gb_q + gb_r
    l_ce = ce_q.value + ce_r.value
    total = w_nce * nce.value + w_mse * mse.value + w_ce * l_ce
    record = {"L_InfoNCE": nce.value, "L_MSE": mse.value, "L_CE": l_ce, "total": total}
    return LossResult(total, grads), record


def stage2_step(
    model: Stage2Model, q: np.ndarray, r: np.ndarray, y: np.ndarray, lr: float, temperature: float,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> dict:
    """One gradient-descent step on encoder and heads (in place); returns the pre-step losses."""
    res, record = stage2_loss(model, q, r, y, temperature, weights)
    for name, p in model.params().items():
        p -= lr * res.gradients[name]
    return record


def run_stage2(
    pairs: PairDataset,
    encoder: EncoderParams,
    seed: int,
    config: Stage2Config = Stage2Config(),
) -> Stage2Model:
    """Shuffled mini-batch training; the shuffle stream is seeded by ``seed``.

    A trailing batch with a single pair is dropped (InfoNCE needs negatives).
    """
    if len(pairs) == 0:
        raise DatasetError("empty pair dataset")
    model = init_stage2(encoder, pairs.num_classes, config.head_dim, seed)
    rng = np.random.default_rng(seed + 7)
    n = len(pairs)
    bs = max(2, config.batch)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for it in range(math.ceil(n / bs)):
            idx = order[it * bs:(it + 1) * bs]
            if idx.size < 2:
                continue
            rec = stage2_step(
                model, pairs.queries[idx], pairs.references[idx], pairs.labels[idx],
                config.lr, config.temperature, config.weights,
            )
            rec.update(epoch=epoch, iter=it)
            model.loss_trace.append(rec)
    return model

"""Stage 1: intra-view memory contrast plus view-aware adversarial bridging.

The encoder is trained on ``L_sat + L_drone + lambda * L_adv`` while a view
discriminator is trained, in alternation, to tell drone / satellite / APV
features apart. The adversarial target for every view is the APV class, so the
pseudo view acts as the attractor domain. The first epoch is a warm-up with the
contrastive terms only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .cluster import MemoryDictionary, compute_prototypes, dbscan, memory_update_batch, num_clusters
from .errors import BatchError, ShapeError, StageError
from .feature_store import EmbeddingSet, ViewTag
from .layers import DiscriminatorParams, EncoderParams, init_models
from .losses import LossResult, cross_entropy, intra_view_loss

log = logging.getLogger(__name__)

DRONE, SATELLITE, APV = ViewTag.DRONE.index, ViewTag.SATELLITE.index, ViewTag.APV.index


@dataclass
class Stage1Config:
    epochs: int = 5
    lr: float = 1e-3
    disc_lr: float | None = None  # defaults to lr
    batch: int = 24
    lam: float = 0.1
    temperature: float = 0.05
    momentum: float = 0.2
    eps: float = 0.5
    min_samples: int = 4
    satellite_min_samples: int = 1
    dim_out: int = 64
    hidden: int = 32
    cosine_decay: bool = False
    seed: int = 0


@dataclass
class Stage1Output:
    encoder: EncoderParams
    discriminator: DiscriminatorParams
    drone_memory: MemoryDictionary
    satellite_memory: MemoryDictionary
    drone_labels: np.ndarray
    satellite_labels: np.ndarray
    loss_trace: list[dict] = field(default_factory=list)


def _per_view_ce(logits: np.ndarray, views: np.ndarray, targets: np.ndarray) -> LossResult:
    """Sum over present views of the per-view mean cross-entropy."""
    grad = np.zeros_like(logits)
    value = 0.0
    for v in np.unique(views):
        rows = np.flatnonzero(views == v)
        ce = cross_entropy(logits[rows], targets[rows])
        value += ce.value
        grad[rows] = ce.gradients["logits"]
    return LossResult(value, {"logits": grad})


def discriminator_loss(disc: DiscriminatorParams, features: np.ndarray, views) -> LossResult:
    """``sum_v CE(D(f^v), t^v)`` with gradients for the discriminator blocks."""
    features = np.asarray(features, dtype=np.float64)
    views = np.asarray(views, dtype=np.int64)
    if features.shape[0] == 0:
        raise BatchError("discriminator step on an empty batch")
    if views.shape[0] != features.shape[0]:
        raise ShapeError("one view tag per feature row is required")
    logits, cache = disc.forward(features)
    ce = _per_view_ce(logits, views, views)
    grads, grad_f = disc.backward(ce.gradients["logits"], cache)
    grads["features"] = grad_f
    return LossResult(ce.value, grads)


def discriminator_step(disc: DiscriminatorParams, features: np.ndarray, views, lr: float) -> float:
    """One gradient-descent step on the discriminator (features are constants).

    Updates ``disc`` in place and returns the pre-step loss.
    """
    res = discriminator_loss(disc, features, views)
    for name, p in disc.blocks().items():
        p -= lr * res.gradients[name]
    return res.value


def adversarial_loss(disc: DiscriminatorParams, features: np.ndarray, views) -> LossResult:
    """``sum_v CE(D(f^v), t^apv)``; gradient w.r.t. the features only."""
    views = np.asarray(views, dtype=np.int64)
    logits, cache = disc.forward(features)
    ce = _per_view_ce(logits, views, np.full(views.shape, APV))
    _, grad_f = disc.backward(ce.gradients["logits"], cache)
    return LossResult(ce.value, {"features": grad_f})


def _intra_terms(feats: np.ndarray, labels: np.ndarray, memory: MemoryDictionary, tau: float):
    keep = labels >= 0
    grad = np.zeros_like(feats)
    if not keep.any():
        return 0.0, grad
    res = intra_view_loss(feats[keep], memory, labels[keep], tau)
    grad[keep] = res.gradients["query"]
    return res.value, grad


def stage1_objective(
    enc: EncoderParams,
    disc: DiscriminatorParams,
    drone_x: np.ndarray,
    sat_x: np.ndarray,
    apv_x: np.ndarray | None,
    drone_labels: np.ndarray,
    sat_labels: np.ndarray,
    drone_memory: MemoryDictionary,
    sat_memory: MemoryDictionary,
    lam: float,
    temperature: float,
    adversarial: bool = True,
) -> tuple[LossResult, dict]:
    """Composite stage-1 loss and its gradient w.r.t. the encoder.

    Returns the loss (gradients keyed ``weight`` / ``bias``) and a record of
    the individual terms.
    """
    fd, cd = enc.forward(drone_x)
    fs, cs = enc.forward(sat_x)
    l_drone, gd = _intra_terms(fd, np.asarray(drone_labels), drone_memory, temperature)
    l_sat, gs = _intra_terms(fs, np.asarray(sat_labels), sat_memory, temperature)
    record = {"L_sat": l_sat, "L_drone": l_drone}
    if not ((np.asarray(drone_labels) >= 0).any() or (np.asarray(sat_labels) >= 0).any()):
        log.debug("all batch members are noise; only the adversarial term remains")
    total = l_sat + l_drone
    gp = None
    if adversarial:
        fp, cp = (None, None) if apv_x is None else enc.forward(apv_x)
        feats = np.vstack([fd, fs] + ([] if fp is None else [fp]))
        views = np.concatenate([
            np.full(len(fd), DRONE), np.full(len(fs), SATELLITE),
            np.full(0 if fp is None else len(fp), APV),
        ])
        adv = adversarial_loss(disc, feats, views)
        record["L_adv"] = adv.value
        total += lam * adv.value
        if lam:
            g = adv.gradients["features"]
            gd = gd + lam * g[:len(fd)]
            gs = gs + lam * g[len(fd):len(fd) + len(fs)]
            if fp is not None:
                gp = lam * g[len(fd) + len(fs):]
    gw_d, gb_d, _ = EncoderParams.backward(gd, cd)
    gw_s, gb_s, _ = EncoderParams.backward(gs, cs)
    gw, gb = gw_d + gw_s, gb_d + gb_s
    if gp is not None:
        gw_p, gb_p, _ = EncoderParams.backward(gp, cp)
        gw, gb = gw + gw_p, gb + gb_p
    record["total"] = total
    return LossResult(total, {"weight": gw, "bias": gb}), record


def adversarial_backbone_step(
    enc: EncoderParams,
    disc: DiscriminatorParams,
    drone_x: np.ndarray,
    sat_x: np.ndarray,
    apv_x: np.ndarray | None,
    drone_labels: np.ndarray,
    sat_labels: np.ndarray,
    drone_memory: MemoryDictionary,
    sat_memory: MemoryDictionary,
    lam: float,
    lr: float,
    temperature: float,
) -> dict:
    """One descent step on the encoder with the discriminator frozen; updates ``enc`` in place."""
    res, record = stage1_objective(
        enc, disc, drone_x, sat_x, apv_x, drone_labels, sat_labels,
        drone_memory, sat_memory, lam, temperature, adversarial=True,
    )
    enc.weight -= lr * res.gradients["weight"]
    enc.bias -= lr * res.gradients["bias"]
    return record


def intra_view_step(
    enc: EncoderParams,
    drone_x: np.ndarray,
    sat_x: np.ndarray,
    drone_labels: np.ndarray,
    sat_labels: np.ndarray,
    drone_memory: MemoryDictionary,
    sat_memory: MemoryDictionary,
    lr: float,
    temperature: float,
) -> dict:
    """Warm-up step: contrastive terms only."""
    res, record = stage1_objective(
        enc, None, drone_x, sat_x, None, drone_labels, sat_labels,
        drone_memory, sat_memory, 0.0, temperature, adversarial=False,
    )
    enc.weight -= lr * res.gradients["weight"]
    enc.bias -= lr * res.gradients["bias"]
    return record


def cluster_view(
    feats: np.ndarray, eps: float, min_samples: int, view: ViewTag
) -> tuple[np.ndarray, MemoryDictionary]:
    labels = dbscan(feats, eps, min_samples)
    if num_clusters(labels) == 0:
        raise StageError("stage1", f"clustering produced zero clusters in the {view.value} view")
    return labels, compute_prototypes(feats, labels, view)


class _Cycler:
    """Endless reshuffled stream of indices (a data loader's ``next()``)."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while len(out) < k:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            out.append(self.order[self.pos])
            self.pos += 1
        return np.array(out, dtype=np.intp)


def _lr_at(base: float, step: int, total: int, cosine: bool) -> float:
    if not cosine or total <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


def run_stage1(
    drone: EmbeddingSet,
    satellite: EmbeddingSet,
    apv: EmbeddingSet,
    config: Stage1Config = Stage1Config(),
    init: tuple[EncoderParams, DiscriminatorParams] | None = None,
) -> Stage1Output:
    """Train the encoder for ``config.epochs`` epochs.

    Both views are re-clustered and their memories rebuilt at the start of
    every epoch. APV row ``i`` must be the pseudo view of drone row ``i``.
    """
    if apv.count != drone.count:
        raise StageError("stage1", f"{apv.count} APV rows for {drone.count} drone rows")
    if drone.dim != satellite.dim or drone.dim != apv.dim:
        raise StageError("stage1", "drone, satellite and APV features must share one dimension")
    cfg = config
    if init is None:
        enc, disc = init_models(drone.dim, cfg.dim_out, cfg.hidden, cfg.seed)
    else:
        enc, disc = init[0].copy(), init[1].copy()
    xd = np.asarray(drone.vectors, dtype=np.float64)
    xs = np.asarray(satellite.vectors, dtype=np.float64)
    xp = np.asarray(apv.vectors, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed + 1)
    per_view = max(1, cfg.batch // 3)
    iters = math.ceil(drone.count / per_view)
    total_steps = cfg.epochs * iters
    disc_lr = cfg.lr if cfg.disc_lr is None else cfg.disc_lr
    sat_stream = _Cycler(satellite.count, rng)
    trace: list[dict] = []
    ld = ls = None
    mem_d = mem_s = None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        ld, mem_d = cluster_view(enc.encode(xd), cfg.eps, cfg.min_samples, ViewTag.DRONE)
        ls, mem_s = cluster_view(enc.encode(xs), cfg.eps, cfg.satellite_min_samples, ViewTag.SATELLITE)
        order = rng.permutation(drone.count)
        for it in range(iters):
            di = order[it * per_view:(it + 1) * per_view]
            si = sat_stream.take(len(di))
            lr = _lr_at(cfg.lr, step, total_steps, cfg.cosine_decay)
            fd = enc.encode(xd[di])
            fs = enc.encode(xs[si])
            if epoch <= 1:
                record = intra_view_step(enc, xd[di], xs[si], ld[di], ls[si], mem_d, mem_s, lr, cfg.temperature)
            else:
                fp = enc.encode(xp[di])
                feats = np.vstack([fd, fs, fp])
                views = np.repeat([DRONE, SATELLITE, APV], [len(fd), len(fs), len(fp)])
                l_view = discriminator_step(disc, feats, views, _lr_at(disc_lr, step, total_steps, cfg.cosine_decay))
                record = adversarial_backbone_step(
                    enc, disc, xd[di], xs[si], xp[di], ld[di], ls[si], mem_d, mem_s,
                    cfg.lam, lr, cfg.temperature,
                )
                record["L_view"] = l_view
            mem_d = memory_update_batch(mem_d, fd, ld[di], cfg.momentum)
            mem_s = memory_update_batch(mem_s, fs, ls[si], cfg.momentum)
            record.update(epoch=epoch, iter=it)
            trace.append(record)
            step += 1
        log.info("stage1 epoch %d: %d drone / %d satellite clusters", epoch, mem_d.size, mem_s.size)
    if mem_d is None:
        # zero epochs: report clusters of the initial embedding
        ld, mem_d = cluster_view(enc.encode(xd), cfg.eps, cfg.min_samples, ViewTag.DRONE)
        ls, mem_s = cluster_view(enc.encode(xs), cfg.eps, cfg.satellite_min_samples, ViewTag.SATELLITE)
    return Stage1Output(enc, disc, mem_d, mem_s, ld, ls, trace)

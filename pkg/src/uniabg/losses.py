"""Loss values with hand-derived gradients.

Every kernel returns a :class:`LossResult`; gradients are keyed by the name of
the argument they are taken with respect to. A central-difference checker is
included so each gradient can be verified against the value alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cluster import MemoryDictionary
from .errors import BatchError, DataError, EmptyMemoryError, ParameterError, ShapeError


@dataclass
class LossResult:
    value: float
    gradients: dict[str, np.ndarray] = field(default_factory=dict)


def _log_softmax_rows(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (log-softmax, softmax) for a 2-D array, stable for large logits."""
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    e = np.exp(shifted)
    top = np.argmax(logits, axis=1)
    rest = e.sum(axis=1) - e[np.arange(len(e)), top]
    # log(sum exp(shifted)) = log1p(sum over non-max), keeps tiny tails exact
    lse = np.log1p(np.maximum(rest, 0.0))[:, None]
    return shifted - lse, e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, target) -> LossResult:
    """Mean of ``-log softmax(logits)[target]`` over the batch.

    ``logits`` may be a C-vector (with a scalar target) or a B x C matrix.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if z.shape[0] == 0 or t.size == 0:
        raise BatchError("cross_entropy on an empty batch")
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"{t.shape[0]} targets for {z.shape[0]} rows")
    if np.any(t < 0) or np.any(t >= z.shape[1]):
        raise ParameterError(f"targets must lie in [0, {z.shape[1]})")
    logp, p = _log_softmax_rows(z)
    rows = np.arange(z.shape[0])
    value = float(-logp[rows, t].mean())
    grad = p.copy()
    grad[rows, t] -= 1.0
    grad /= z.shape[0]
    return LossResult(max(value, 0.0), {"logits": grad[0] if single else grad})


def intra_view_loss(
    query: np.ndarray,
    memory: MemoryDictionary | np.ndarray,
    positive,
    temperature: float,
) -> LossResult:
    """Memory contrastive loss ``-log softmax(q . phi_k / tau)[positive]``.

    ``query`` is one unit vector (scalar ``positive``) or a B x dim batch, in
    which case the value is the batch mean. Only the query receives a gradient;
    prototypes are constants here.
    """
    protos = memory.prototypes if isinstance(memory, MemoryDictionary) else np.asarray(memory)
    protos = np.asarray(protos, dtype=np.float64)
    if protos.ndim != 2 or protos.shape[0] == 0:
        raise EmptyMemoryError("intra-view loss needs at least one prototype")
    if temperature <= 0:
        raise ParameterError("temperature must be positive")
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    if single:
        q = q[None, :]
    logits = q @ protos.T / temperature
    ce = cross_entropy(logits, positive)
    grad_q = ce.gradients["logits"].reshape(q.shape[0], -1) @ protos / temperature
    return LossResult(ce.value, {"query": grad_q[0] if single else grad_q})


def info_nce(queries: np.ndarray, references: np.ndarray, temperature: float) -> LossResult:
    """Symmetric InfoNCE with in-batch negatives.

    Row ``i`` of ``references`` is the positive for query ``i``; the value is
    the mean of the query->reference and reference->query cross-entropies.
    """
    q = np.asarray(queries, dtype=np.float64)
    r = np.asarray(references, dtype=np.float64)
    if q.shape != r.shape:
        raise ShapeError(f"queries {q.shape} vs references {r.shape}")
    b = q.shape[0]
    if b < 2:
        raise BatchError("InfoNCE needs a batch of at least 2 (no negatives otherwise)")
    if temperature <= 0:
        raise ParameterError("temperature must be positive")
    s = q @ r.T / temperature
    diag = np.arange(b)
    fwd = cross_entropy(s, diag)
    bwd = cross_entropy(s.T, diag)
    gs = 0.5 * (fwd.gradients["logits"] + bwd.gradients["logits"].T) / temperature
    return LossResult(
        0.5 * (fwd.value + bwd.value),
        {"queries": gs @ r, "references": gs.T @ q},
    )


def mse_align(a: np.ndarray, b: np.ndarray) -> LossResult:
    """Mean over rows of the squared Euclidean distance ``||a_i - b_i||^2``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{a.shape} vs {b.shape}")
    if a.ndim == 1:
        a, b = a[None, :], b[None, :]
    if a.shape[0] == 0:
        raise BatchError("mse_align on an empty batch")
    diff = a - b
    n = a.shape[0]
    ga = 2.0 * diff / n
    return LossResult(float((diff * diff).sum() / n), {"a": ga, "b": -ga})


def finite_diff_check(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    step: float = 1e-6,
    order: int = 2,
) -> float:
    """Max component-wise relative error between ``fn``'s gradient and central differences.

    ``fn(x)`` returns ``(value, gradient)``. The relative error of a component
    is ``|a - n| / max(|a|, |n|, 1e-8)``. ``order=2`` is the two-point stencil
    ``(f(x+h) - f(x-h)) / 2h``; ``order=4`` the four-point stencil
    ``(f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h``, whose smaller
    truncation error allows a larger step and hence less cancellation.
    """
    if order == 2:
        offsets, coefs, scale = (1.0, -1.0), (1.0, -1.0), 2.0
    elif order == 4:
        offsets, coefs, scale = (-2.0, -1.0, 1.0, 2.0), (1.0, -8.0, 8.0, -1.0), 12.0
    else:
        raise ParameterError("order must be 2 or 4")
    x = np.array(x, dtype=np.float64)
    value, analytic = fn(x)
    if not np.isfinite(value):
        raise DataError("loss is not finite at the base point")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    numeric = np.empty_like(x)
    flat, nflat = x.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        acc = 0.0
        for off, c in zip(offsets, coefs):
            flat[i] = orig + off * step
            v = fn(x)[0]
            if not np.isfinite(v):
                flat[i] = orig
                raise DataError(f"loss is not finite when probing component {i}")
            acc += c * v
        flat[i] = orig
        nflat[i] = acc / (scale * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0


def flatten_blocks(blocks: dict[str, np.ndarray], names: Sequence[str]) -> np.ndarray:
    return np.concatenate([np.asarray(blocks[n], dtype=np.float64).ravel() for n in names])


def unflatten_blocks(
    x: np.ndarray, like: dict[str, np.ndarray], names: Sequence[str]
) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for n in names:
        size = like[n].size
        out[n] = x[pos:pos + size].reshape(like[n].shape)
        pos += size
    return out

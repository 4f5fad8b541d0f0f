"""Random finite-difference cases for every loss kernel.

Each builder takes a generator and returns ``(fn, x)`` where ``fn(x)`` yields
``(value, gradient)`` for the flattened parameter vector ``x``.
"""

from __future__ import annotations

import numpy as np

from uniabg.cluster import MemoryDictionary
from uniabg.layers import Affine, DiscriminatorParams, EncoderParams
from uniabg.losses import cross_entropy, flatten_blocks, info_nce, intra_view_loss, mse_align, unflatten_blocks
from uniabg.stage2 import PARAM_NAMES, Stage2Model, stage2_loss
from uniabg.vaab import stage1_objective

import oracles

# four-point central stencil: its O(h^4) truncation allows a step large enough
# that cancellation stays near 1e-13 absolute, under the 1e-8 floor of the
# relative-error denominator
FD_ORDER = 4
FD_STEP = 3e-4
KINK_MARGIN = 0.02  # ReLU pre-activations this close to 0 could flip sign under the probe steps


def _unit(rng, n, d):
    return oracles.unit_rows(rng, n, d)


def intra_view(rng):
    dim, k = 8, 5
    protos = _unit(rng, k, dim)
    pos = int(rng.integers(k))
    q0 = _unit(rng, 1, dim)[0]

    def fn(q):
        r = intra_view_loss(q, protos, pos, 0.05)
        return r.value, r.gradients["query"]

    return fn, q0


def info_nce_case(rng):
    b, dim = 8, 6
    q, r = _unit(rng, b, dim), _unit(rng, b, dim)
    x0 = np.concatenate([q.ravel(), r.ravel()])

    def fn(x):
        qq, rr = x[:b * dim].reshape(b, dim), x[b * dim:].reshape(b, dim)
        res = info_nce(qq, rr, 0.5)
        return res.value, np.concatenate([res.gradients["queries"].ravel(), res.gradients["references"].ravel()])

    return fn, x0


def cross_entropy_case(rng):
    b, c = 5, 4
    z0 = rng.standard_normal((b, c)) * 2
    t = rng.integers(c, size=b)

    def fn(z):
        res = cross_entropy(z.reshape(b, c), t)
        return res.value, res.gradients["logits"].ravel()

    return fn, z0.ravel()


def mse_case(rng):
    b, dim = 6, 5
    a, c = rng.standard_normal((b, dim)), rng.standard_normal((b, dim))
    x0 = np.concatenate([a.ravel(), c.ravel()])

    def fn(x):
        aa, cc = x[:b * dim].reshape(b, dim), x[b * dim:].reshape(b, dim)
        res = mse_align(aa, cc)
        return res.value, np.concatenate([res.gradients["a"].ravel(), res.gradients["b"].ravel()])

    return fn, x0


def stage2_case(rng):
    din, d, h, k, b = 6, 5, 4, 3, 4
    model = Stage2Model(
        EncoderParams(rng.standard_normal((din, d)) * 0.5, rng.standard_normal(d) * 0.1),
        Affine(rng.standard_normal((d, h)) * 0.5, rng.standard_normal(h) * 0.1),
        Affine(rng.standard_normal((d, k)) * 0.5, rng.standard_normal(k) * 0.1),
        Affine(rng.standard_normal((d, h)) * 0.5, rng.standard_normal(h) * 0.1),
    )
    q, r = _unit(rng, b, din), _unit(rng, b, din)
    y = rng.integers(k, size=b)
    like = model.params()
    x0 = flatten_blocks(like, PARAM_NAMES)

    def fn(x):
        m = Stage2Model.from_params(unflatten_blocks(x, like, PARAM_NAMES))
        res, _ = stage2_loss(m, q, r, y, 0.5)
        return res.value, flatten_blocks(res.gradients, PARAM_NAMES)

    return fn, x0


def vaab_case(rng, lam: float = 0.7):
    din, d, hidden, n = 6, 5, 7, 3
    while True:
        enc = EncoderParams(rng.standard_normal((din, d)) * 0.5, rng.standard_normal(d) * 0.1)
        disc = DiscriminatorParams(
            rng.standard_normal((d, hidden)), rng.standard_normal(hidden) * 0.1,
            rng.standard_normal((hidden, 3)), rng.standard_normal(3) * 0.1,
        )
        xd, xs, xp = (_unit(rng, n, din) for _ in range(3))
        feats = np.vstack([enc.encode(v) for v in (xd, xs, xp)])
        if np.abs(feats @ disc.w1 + disc.b1).min() > KINK_MARGIN:
            break
    mem_d = MemoryDictionary(_unit(rng, 2, d), None, (1, 1))
    mem_s = MemoryDictionary(_unit(rng, 3, d), None, (1, 1, 1))
    ld = np.array([0, 1, -1])
    ls = rng.integers(3, size=n)
    names = ("weight", "bias")
    like = {"weight": enc.weight, "bias": enc.bias}
    x0 = flatten_blocks(like, names)

    def fn(x):
        p = unflatten_blocks(x, like, names)
        e = EncoderParams(p["weight"], p["bias"])
        res, _ = stage1_objective(e, disc, xd, xs, xp, ld, ls, mem_d, mem_s, lam, 0.5)
        return res.value, flatten_blocks(res.gradients, names)

    return fn, x0


CASES = {
    "intra_view_loss": intra_view,
    "info_nce": info_nce_case,
    "cross_entropy": cross_entropy_case,
    "mse_align": mse_case,
    "stage2 composite": stage2_case,
    "VAAB composite (through encoder)": vaab_case,
}

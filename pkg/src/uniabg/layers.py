"""Affine encoder, view discriminator and their hand-written backward passes."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, ParameterError
from .feature_store import decode_vectors

NUM_VIEWS = 3


@dataclass
class Affine:
    weight: np.ndarray  # fan_in x fan_out
    bias: np.ndarray

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight + self.bias

    def copy(self) -> "Affine":
        return Affine(self.weight.copy(), self.bias.copy())


def init_affine(rng: np.random.Generator, fan_in: int, fan_out: int) -> Affine:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias."""
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=fan_out)
    return Affine(w, b)


def normalize_forward(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return z / norms, norms


def normalize_backward(grad_out: np.ndarray, out: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Gradient through ``z -> z / ||z||`` given the forward output and norms."""
    radial = (grad_out * out).sum(axis=1, keepdims=True)
    return (grad_out - out * radial) / norms


@dataclass
class EncoderParams:
    """One affine projection followed by projection onto the unit sphere."""

    weight: np.ndarray
    bias: np.ndarray

    @property
    def affine(self) -> Affine:
        return Affine(self.weight, self.bias)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.weight.copy(), self.bias.copy())

    def encode(self, x: np.ndarray) -> np.ndarray:
        return normalize_forward(np.asarray(x, dtype=np.float64) @ self.weight + self.bias)[0]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        x = np.asarray(x, dtype=np.float64)
        out, norms = normalize_forward(x @ self.weight + self.bias)
        return out, (x, out, norms)

    @staticmethod
    def backward(grad_out: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (d weight, d bias, d input)."""
        x, out, norms = cache
        dz = normalize_backward(grad_out, out, norms)
        return x.T @ dz, dz.sum(axis=0), dz


@dataclass
class DiscriminatorParams:
    """``logits = relu(f W1 + b1) W2 + b2`` over (drone, satellite, apv)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def copy(self) -> "DiscriminatorParams":
        return DiscriminatorParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    def forward(self, f: np.ndarray) -> tuple[np.ndarray, tuple]:
        pre = f @ self.w1 + self.b1
        h = np.maximum(pre, 0.0)
        return h @ self.w2 + self.b2, (f, pre, h)

    def backward(self, grad_logits: np.ndarray, cache: tuple) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Return (parameter gradients, gradient w.r.t. the input features)."""
        f, pre, h = cache
        grads = {"w2": h.T @ grad_logits, "b2": grad_logits.sum(axis=0)}
        dh = grad_logits @ self.w2.T
        dpre = dh * (pre > 0)
        grads["w1"] = f.T @ dpre
        grads["b1"] = dpre.sum(axis=0)
        return grads, dpre @ self.w1.T

    def blocks(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def init_models(dim_in: int, dim_out: int, hidden: int, seed: int) -> tuple[EncoderParams, DiscriminatorParams]:
    if min(dim_in, dim_out, hidden) <= 0:
        raise ParameterError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    enc = init_affine(rng, dim_in, dim_out)
    l1 = init_affine(rng, dim_out, hidden)
    l2 = init_affine(rng, hidden, NUM_VIEWS)
    return EncoderParams(enc.weight, enc.bias), DiscriminatorParams(l1.weight, l1.bias, l2.weight, l2.bias)


IDENTITY, RANDOM = "identity", "random"
ENCODER_INITS = (IDENTITY, RANDOM)


def identity_encoder(dim_in: int, dim_out: int) -> EncoderParams:
    """Pass-through start: ``W = I`` (truncated or zero-padded), zero bias.

    Stands in for a pretrained backbone whose features already carry the
    within-view structure that clustering relies on.
    """
    if min(dim_in, dim_out) <= 0:
        raise ParameterError("dimensions must be positive")
    return EncoderParams(np.eye(dim_in, dim_out), np.zeros(dim_out))


# -- checkpoints ---------------------------------------------------------------
#
# Layout: b"UCK1" | uint32 header length | UTF-8 JSON header | UVF1 blocks.
# The header lists tensor names and shapes in block order; 1-D tensors are
# stored as 1 x n blocks. Values are float32, so a reloaded model matches the
# in-memory float64 one only to single precision.

_CKPT_MAGIC = b"UCK1"


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    names = list(tensors)
    header = {
        "tensors": [{"name": n, "shape": list(np.shape(tensors[n]))} for n in names],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<I", len(head)) + head)
        for n in names:
            arr = np.asarray(tensors[n], dtype=np.float64)
            mat = arr.reshape(1, -1) if arr.ndim < 2 else arr.reshape(arr.shape[0], -1)
            fh.write(struct.pack("<4sII", b"UVF1", mat.shape[0], mat.shape[1]))
            fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    pos = 8 + hlen
    tensors = {}
    for spec in header["tensors"]:
        mat, pos = decode_vectors(buf, pos)
        tensors[spec["name"]] = mat.astype(np.float64).reshape(spec["shape"])
    return tensors, header["meta"]

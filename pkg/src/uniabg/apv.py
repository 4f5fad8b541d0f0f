"""Auxiliary pseudo view: global colour transfer in Reinhard's l-alpha-beta space.

The drone image's own per-channel statistics are mapped onto global satellite
statistics, channel by channel::

    l'_c = (sigma_sat_c / sigma_drone_c) * (l_c - mu_drone_c) + mu_sat_c
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ValidationError

# Reinhard et al. RGB->LMS, each row rescaled to sum to one so that achromatic
# RGB maps onto the achromatic l axis exactly.
_RGB2LMS_RAW = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
RGB2LMS = _RGB2LMS_RAW / _RGB2LMS_RAW.sum(axis=1, keepdims=True)
LMS2RGB = np.linalg.inv(RGB2LMS)

LOGLMS2LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -2.0],
    [1.0, -1.0, 0.0],
])
LAB2LOGLMS = np.linalg.inv(LOGLMS2LAB)

LMS_FLOOR = 1e-6
FLAT_STD = 1e-6


@dataclass(frozen=True)
class RasterImage:
    """8-bit RGB pixels, shape ``(height, width, 3)``."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] == 0 or px.shape[1] == 0:
            raise ValidationError(f"expected a non-empty (H, W, 3) array, got {px.shape}")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255) or np.any(px != np.round(px)):
                raise ValidationError("pixel values must be integers in [0, 255]")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        std = np.asarray(self.std, dtype=np.float64).reshape(3)
        if np.any(std < 0):
            raise ValidationError("standard deviations must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def rgb_to_lab(image: RasterImage) -> np.ndarray:
    """Map 8-bit RGB to l-alpha-beta (float64, same spatial shape).

    RGB is scaled to [0, 1], sent through the LMS cone matrix, floored at
    ``LMS_FLOOR``, log10'd, and rotated into the decorrelated opponent axes.
    """
    rgb = image.pixels.astype(np.float64) / 255.0
    lms = rgb @ RGB2LMS.T
    return np.log10(np.maximum(lms, LMS_FLOOR)) @ LOGLMS2LAB.T


def lab_to_rgb_float(lab: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_lab` before clipping/rounding, in 0..255 units."""
    lab = np.asarray(lab, dtype=np.float64)
    lms = 10.0 ** (lab @ LAB2LOGLMS.T)
    return 255.0 * (lms @ LMS2RGB.T)


def lab_to_rgb(lab: np.ndarray) -> RasterImage:
    rgb = lab_to_rgb_float(lab)
    if not np.all(np.isfinite(rgb)):
        # 10**x overflow yields inf; clipping handles +inf, nan only from inf-inf
        rgb = np.nan_to_num(rgb, nan=0.0, posinf=255.0, neginf=0.0)
    return RasterImage(np.clip(np.rint(rgb), 0, 255).astype(np.uint8))


def image_stats(lab: np.ndarray) -> ChannelStats:
    flat = np.asarray(lab, dtype=np.float64).reshape(-1, 3)
    mean = flat.sum(axis=0) / flat.shape[0]
    dev = flat - mean
    return ChannelStats(mean, np.sqrt((dev * dev).sum(axis=0) / flat.shape[0]))


def global_stats(images: Sequence[RasterImage]) -> ChannelStats:
    """Population mean/std per l-alpha-beta channel over all pixels of all images."""
    if len(images) == 0:
        raise ValueError("global_stats needs at least one image")
    labs = [rgb_to_lab(im).reshape(-1, 3) for im in images]
    n = sum(x.shape[0] for x in labs)
    total = np.zeros(3)
    for x in labs:
        total += x.sum(axis=0)
    mean = total / n
    sq = np.zeros(3)
    for x in labs:
        d = x - mean
        sq += (d * d).sum(axis=0)
    return ChannelStats(mean, np.sqrt(sq / n))


def transfer_lab(lab: np.ndarray, target: ChannelStats) -> np.ndarray:
    """Apply the channel-wise affine statistics transfer in l-alpha-beta space.

    Channels whose own std is below ``FLAT_STD`` are set to the target mean.
    """
    src = image_stats(lab)
    out = np.empty_like(np.asarray(lab, dtype=np.float64))
    for c in range(3):
        if src.std[c] < FLAT_STD:
            out[..., c] = target.mean[c]
        else:
            ratio = target.std[c] / src.std[c]
            out[..., c] = ratio * (lab[..., c] - src.mean[c]) + target.mean[c]
    return out


def color_transfer(drone: RasterImage, target: ChannelStats) -> RasterImage:
    return lab_to_rgb(transfer_lab(rgb_to_lab(drone), target))


# -- PPM (P6) ----------------------------------------------------------------


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos


def read_ppm(path: str | os.PathLike) -> RasterImage:
    buf = Path(path).read_bytes()
    tokens, pos = _ppm_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte before the raster
    need = width * height * 3
    if len(buf) - pos < need:
        raise FormatError(f"{path}: raster truncated ({len(buf) - pos} of {need} bytes)")
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3)
    return RasterImage(px.copy())


def write_ppm(image: RasterImage, path: str | os.PathLike) -> None:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(image.pixels, dtype=np.uint8).tobytes())

"""Synthetic multi-view benchmark with ground truth and a tunable view gap.

Each class ``c`` owns a latent unit vector ``z_c``. A view ``v`` distorts it
with its own linear map and offset::

    row = normalize(z_c + gap * (M_v z_c + b_v) + noise)

so for large ``gap`` rows of different classes within one view end up closer
than rows of the same class across views. APV rows use the drone noise draw
but sit halfway between the drone and satellite distortions.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .apv import RasterImage, write_ppm
from .errors import ValidationError
from .feature_store import (
    EmbeddingSet,
    Manifest,
    ManifestEntry,
    ViewTag,
    normalize_rows,
    write_manifest,
    write_vector_file,
)

APV_BRIDGE = 0.5
OFFSET_NORM = 0.6
IMAGE_SIZE = 32

_DRONE_CAST = (np.array([1.10, 0.95, 0.75]), np.array([18.0, 6.0, -4.0]))
_SAT_CAST = (np.array([0.80, 0.90, 1.10]), np.array([-6.0, 4.0, 14.0]))


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 40
    drones_per_class: int = 8
    sats_per_class: int = 1
    dim: int = 64
    gap_strength: float = 2.0
    noise_sigma: float = 0.05
    seed: int = 0
    emit_images: bool = False

    def __post_init__(self):
        for name in ("num_classes", "drones_per_class", "sats_per_class", "dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        if self.gap_strength < 0 or self.noise_sigma < 0:
            raise ValidationError("gap_strength and noise_sigma must be non-negative")


@dataclass
class SynthDataset:
    drone: EmbeddingSet
    satellite: EmbeddingSet
    apv: EmbeddingSet
    manifest: Manifest
    config: SynthConfig
    images: dict[str, RasterImage] = field(default_factory=dict)


def _view_map(rng: np.random.Generator, dim: int) -> tuple[np.ndarray, np.ndarray]:
    m = rng.standard_normal((dim, dim)) / np.sqrt(dim)
    b = rng.standard_normal(dim)
    return m, OFFSET_NORM * b / np.linalg.norm(b)


def _class_pattern(rng: np.random.Generator) -> np.ndarray:
    """A smooth 32x32 RGB base pattern in [0, 1]."""
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] / IMAGE_SIZE
    out = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3))
    for c in range(3):
        fx, fy = rng.uniform(0.5, 3.0, size=2)
        px, py = rng.uniform(0, 2 * np.pi, size=2)
        out[..., c] = 0.5 + 0.25 * np.sin(2 * np.pi * fx * xx + px) + 0.2 * np.cos(2 * np.pi * fy * yy + py)
    return np.clip(out, 0.0, 1.0)


def _render(pattern: np.ndarray, cast, rng: np.random.Generator) -> RasterImage:
    gain, offset = cast
    px = 255.0 * pattern * gain + offset + rng.normal(0.0, 3.0, size=pattern.shape)
    return RasterImage(np.clip(np.rint(px), 0, 255).astype(np.uint8))


def generate(config: SynthConfig = SynthConfig()) -> SynthDataset:
    """Deterministic dataset for ``config`` (the seed lives in the config)."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    z = normalize_rows(rng.standard_normal((cfg.num_classes, cfg.dim)))
    m_d, b_d = _view_map(rng, cfg.dim)
    m_s, b_s = _view_map(rng, cfg.dim)
    shift_d = z @ m_d.T + b_d
    shift_s = z @ m_s.T + b_s

    d_cls = np.repeat(np.arange(cfg.num_classes), cfg.drones_per_class)
    s_cls = np.repeat(np.arange(cfg.num_classes), cfg.sats_per_class)
    noise_d = cfg.noise_sigma * rng.standard_normal((d_cls.size, cfg.dim))
    noise_s = cfg.noise_sigma * rng.standard_normal((s_cls.size, cfg.dim))

    drone = normalize_rows(z[d_cls] + cfg.gap_strength * shift_d[d_cls] + noise_d)
    sat = normalize_rows(z[s_cls] + cfg.gap_strength * shift_s[s_cls] + noise_s)
    bridge = (1.0 - APV_BRIDGE) * shift_d + APV_BRIDGE * shift_s
    apv = normalize_rows(z[d_cls] + cfg.gap_strength * bridge[d_cls] + noise_d)

    d_ids = tuple(f"d{c:04d}_{i % cfg.drones_per_class:02d}" for i, c in enumerate(d_cls))
    s_ids = tuple(f"s{c:04d}_{i % cfg.sats_per_class:02d}" for i, c in enumerate(s_cls))
    p_ids = tuple(f"{d}#apv" for d in d_ids)

    images: dict[str, RasterImage] = {}
    if cfg.emit_images:
        img_rng = np.random.default_rng([cfg.seed, 1])
        patterns = [_class_pattern(img_rng) for _ in range(cfg.num_classes)]
        for i, c in zip(d_ids, d_cls):
            images[i] = _render(patterns[c], _DRONE_CAST, img_rng)
        for i, c in zip(s_ids, s_cls):
            images[i] = _render(patterns[c], _SAT_CAST, img_rng)

    def entry(i: str, view: ViewTag, c: int) -> ManifestEntry:
        path = f"images/{i}.ppm" if i in images else None
        return ManifestEntry(i, view, path, int(c))

    manifest = Manifest(
        [entry(i, ViewTag.DRONE, c) for i, c in zip(d_ids, d_cls)]
        + [entry(i, ViewTag.SATELLITE, c) for i, c in zip(s_ids, s_cls)]
        + [ManifestEntry(i, ViewTag.APV, None, int(c)) for i, c in zip(p_ids, d_cls)]
    )
    return SynthDataset(
        EmbeddingSet(drone, d_ids, ViewTag.DRONE),
        EmbeddingSet(sat, s_ids, ViewTag.SATELLITE),
        EmbeddingSet(apv, p_ids, ViewTag.APV),
        manifest,
        cfg,
        images,
    )


def _mean_cosine_distance(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    return float((1.0 - a @ b.T)[mask].mean())


def gap_metric(drone: EmbeddingSet, sat: EmbeddingSet, manifest: Manifest) -> float:
    """Same-class cross-view distance minus different-class same-view distance.

    The same-view term averages the drone-view and satellite-view means.
    Positive values mean a class is nearer to other classes of its own view
    than to itself in the other view.
    """
    cls_of = {e.id: e.class_id for e in manifest.entries}
    try:
        yd = np.array([cls_of[i] for i in drone.ids])
        ys = np.array([cls_of[i] for i in sat.ids])
    except KeyError as exc:
        raise ValueError(f"manifest has no entry for {exc}") from exc
    if any(v is None for v in yd) or any(v is None for v in ys):
        raise ValueError("gap_metric needs class ids for every row")
    a = np.asarray(drone.vectors, dtype=np.float64)
    b = np.asarray(sat.vectors, dtype=np.float64)
    same = yd[:, None] == ys[None, :]
    if not same.any():
        raise ValueError("no class is present in both views")
    cross = _mean_cosine_distance(a, b, same)
    within = []
    for x, y in ((a, yd), (b, ys)):
        diff = y[:, None] != y[None, :]
        if diff.any():
            within.append(_mean_cosine_distance(x, x, diff))
    if not within:
        raise ValueError("need at least two classes in one view")
    return cross - float(np.mean(within))


def write_dataset(ds: SynthDataset, out_dir: str | os.PathLike) -> dict[str, str]:
    """Write ``drone.uvf``, ``satellite.uvf``, ``apv.uvf``, ``manifest.json`` (+ images)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, s in (("drone", ds.drone), ("satellite", ds.satellite), ("apv", ds.apv)):
        p = out / f"{name}.uvf"
        write_vector_file(s, p)
        paths[name] = str(p)
    if ds.images:
        (out / "images").mkdir(exist_ok=True)
        for i, im in ds.images.items():
            write_ppm(im, out / "images" / f"{i}.ppm")
    write_manifest(ds.manifest, out / "manifest.json")
    paths["manifest"] = str(out / "manifest.json")
    return paths


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)

"""Multi-view feature sets, the ``UVF1`` vector file format and manifests.

A ``UVF1`` file is little-endian throughout::

    b"UVF1" | uint32 count | uint32 dim | count*dim float32 (row-major)

Identifiers and view tags are not part of the vector file; they live in the
JSON manifest that accompanies a dataset.
"""

from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError, DegenerateVectorError, FormatError, LengthError, ValidationError

MAGIC = b"UVF1"
_HEADER = struct.Struct("<4sII")


class ViewTag(str, enum.Enum):
    DRONE = "drone"
    SATELLITE = "satellite"
    APV = "apv"

    @property
    def index(self) -> int:
        """Class index used by the view discriminator."""
        return _VIEW_ORDER.index(self)


_VIEW_ORDER = (ViewTag.DRONE, ViewTag.SATELLITE, ViewTag.APV)


def view_from_index(i: int) -> ViewTag:
    return _VIEW_ORDER[i]


@dataclass(frozen=True)
class EmbeddingSet:
    """A ``count x dim`` matrix of feature rows with per-row ids, all of one view.

    Instances are treated as immutable once built.
    """

    vectors: np.ndarray
    ids: tuple[str, ...]
    view: ViewTag

    def __post_init__(self):
        vectors = np.asarray(self.vectors)
        if vectors.ndim != 2:
            raise ValidationError(f"vectors must be 2-D, got shape {vectors.shape}")
        if vectors.shape[1] == 0:
            raise ValidationError("dim must be positive")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "view", ViewTag(self.view))
        if len(self.ids) != vectors.shape[0]:
            raise ValidationError(f"{len(self.ids)} ids for {vectors.shape[0]} rows")
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("ids must be unique within a set")
        if not np.all(np.isfinite(vectors)):
            raise DataError("embedding rows must be finite")

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def with_vectors(self, vectors: np.ndarray) -> "EmbeddingSet":
        return replace(self, vectors=vectors)

    def subset(self, indices: Sequence[int]) -> "EmbeddingSet":
        idx = np.asarray(indices, dtype=np.intp)
        return EmbeddingSet(self.vectors[idx], tuple(self.ids[i] for i in idx), self.view)


def default_ids(view: ViewTag | str, count: int) -> tuple[str, ...]:
    prefix = ViewTag(view).value[0]
    return tuple(f"{prefix}{i:05d}" for i in range(count))


def write_vector_file(s: EmbeddingSet | np.ndarray, path: str | os.PathLike) -> None:
    """Write rows as float32 in ``UVF1`` layout.

    Accepts an :class:`EmbeddingSet` or a bare 2-D array.
    """
    vectors = s.vectors if isinstance(s, EmbeddingSet) else np.asarray(s)
    if vectors.ndim != 2 or vectors.shape[1] == 0:
        raise ValidationError(f"cannot write vectors of shape {vectors.shape}")
    if not np.all(np.isfinite(vectors)):
        raise DataError("refusing to write non-finite values")
    count, dim = vectors.shape
    payload = np.ascontiguousarray(vectors, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, count, dim))
        fh.write(payload)


def decode_vectors(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one ``UVF1`` block starting at ``offset``; return (matrix, end offset)."""
    if len(buf) - offset < _HEADER.size:
        if len(buf) - offset < 4 or buf[offset:offset + 4] != MAGIC:
            raise FormatError("missing UVF1 magic")
        raise LengthError("truncated UVF1 header")
    magic, count, dim = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if dim == 0:
        raise FormatError("UVF1 block declares dim=0")
    start = offset + _HEADER.size
    end = start + 4 * count * dim
    if len(buf) < end:
        raise LengthError(f"payload needs {end - start} bytes, found {len(buf) - start}")
    mat = np.frombuffer(buf, dtype="<f4", count=count * dim, offset=start).reshape(count, dim)
    mat = mat.astype(np.float32)
    if not np.all(np.isfinite(mat)):
        raise DataError("non-finite value in vector payload")
    return mat, end


def read_vector_file(
    path: str | os.PathLike,
    ids: Optional[Sequence[str]] = None,
    view: ViewTag | str = ViewTag.DRONE,
) -> EmbeddingSet:
    """Read a ``UVF1`` file.

    ``ids`` default to ``<v>00000, <v>00001, ...`` where ``<v>`` is the view's
    first letter. Trailing bytes after the payload are a format error.
    """
    buf = Path(path).read_bytes()
    mat, end = decode_vectors(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after payload")
    if ids is None:
        ids = default_ids(view, mat.shape[0])
    return EmbeddingSet(mat, tuple(ids), ViewTag(view))


def l2_normalize(s: EmbeddingSet) -> EmbeddingSet:
    """Divide every row by its Euclidean norm (computed in float64)."""
    vectors = np.asarray(s.vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise DegenerateVectorError(f"zero-norm row for id {s.ids[bad[0]]!r}")
    return s.with_vectors(vectors / norms[:, None])


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateVectorError("zero-norm row")
    return x / norms


# -- manifests ---------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    view: ViewTag
    image_path: Optional[str] = None
    class_id: Optional[int] = None

    def to_json(self) -> dict:
        out: dict = {"id": self.id, "view": self.view.value}
        if self.image_path is not None:
            out["image_path"] = self.image_path
        if self.class_id is not None:
            out["class_id"] = self.class_id
        return out


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise ValidationError(f"duplicate manifest id {e.id!r}")
            seen.add(e.id)

    def by_view(self, view: ViewTag | str) -> list[ManifestEntry]:
        view = ViewTag(view)
        return [e for e in self.entries if e.view == view]

    def ids(self, view: ViewTag | str) -> tuple[str, ...]:
        return tuple(e.id for e in self.by_view(view))

    def class_ids(self, view: ViewTag | str) -> np.ndarray:
        entries = self.by_view(view)
        if any(e.class_id is None for e in entries):
            raise ValidationError(f"manifest lacks class_id for some {ViewTag(view).value} entries")
        return np.array([e.class_id for e in entries], dtype=np.int64)

    def extended(self, extra: Iterable[ManifestEntry]) -> "Manifest":
        return Manifest(list(self.entries) + list(extra))


def read_manifest(path: str | os.PathLike) -> Manifest:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise FormatError("manifest must be a JSON array of entries")
    entries = []
    for rec in raw:
        unknown = set(rec) - {"id", "view", "image_path", "class_id"}
        if unknown:
            raise FormatError(f"unknown manifest field(s): {sorted(unknown)}")
        try:
            entries.append(ManifestEntry(
                id=str(rec["id"]),
                view=ViewTag(rec["view"]),
                image_path=rec.get("image_path"),
                class_id=None if rec.get("class_id") is None else int(rec["class_id"]),
            ))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad manifest entry {rec!r}: {exc}") from exc
    return Manifest(entries)


def write_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    text = json.dumps([e.to_json() for e in manifest.entries], indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8")

"""Frozen image embeddings behind a provider interface.

The synthetic provider hashes source bytes into a reproducible unit-norm
vector; the precomputed provider serves rows of an AEMB file. Nothing in this
module ever carries gradients -- consumers receive plain numpy arrays.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import ValidationError

AEMB_MAGIC = b"AEMB"
AEMB_VERSION = 1


@dataclass
class ImageEmbedding:
    image_id: str
    v: np.ndarray  # float32, shape (d_v,)
    provider_id: str

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.v.ndim != 1:
            raise ValidationError(f"embedding for {self.image_id!r} must be 1-D")
        if not np.all(np.isfinite(self.v)):
            raise ValidationError(f"non-finite embedding for {self.image_id!r}")


class EmbeddingProvider(Protocol):
    provider_id: str
    dim: int

    def embed(self, image_id: str, source: bytes | str | Path) -> ImageEmbedding: ...


class SyntheticProvider:
    """sha256(source bytes) seeds an RNG; output is L2-normalized."""

    def __init__(self, dim: int = 64):
        self.dim = dim
        self.provider_id = f"synthetic-d{dim}"

    def embed(self, image_id: str, source: bytes | str | Path) -> ImageEmbedding:
        if isinstance(source, (str, Path)):
            data = Path(source).read_bytes()
        else:
            data = source
        seed = int.from_bytes(hashlib.sha256(data).digest()[:8], "little")
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(self.dim).astype(np.float32)
        v /= np.linalg.norm(v)
        return ImageEmbedding(image_id, v, self.provider_id)


def write_aemb(path: str | Path, embeddings: list[ImageEmbedding], dim: int) -> None:
    """Serialize embeddings: header {magic, version u32, d_v u32, count u64},
    then per row {id_len u16, id bytes, d_v little-endian float32}."""
    with open(path, "wb") as fh:
        fh.write(AEMB_MAGIC)
        fh.write(struct.pack("<IIQ", AEMB_VERSION, dim, len(embeddings)))
        for emb in embeddings:
            if emb.v.shape[0] != dim:
                raise ValidationError(f"embedding {emb.image_id!r} has dim {emb.v.shape[0]} != {dim}")
            ident = emb.image_id.encode("utf-8")
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            fh.write(emb.v.astype("<f4").tobytes())


def read_aemb(path: str | Path) -> tuple[int, dict[str, np.ndarray]]:
    """Load an AEMB file into (dim, id -> float32 vector)."""
    data = Path(path).read_bytes()
    if data[:4] != AEMB_MAGIC:
        raise ValidationError(f"{path}: not an AEMB file")
    version, dim, count = struct.unpack_from("<IIQ", data, 4)
    if version != AEMB_VERSION:
        raise ValidationError(f"{path}: unsupported AEMB version {version}")
    off = 20
    rows: dict[str, np.ndarray] = {}
    for _ in range(count):
        (id_len,) = struct.unpack_from("<H", data, off)
        off += 2
        ident = data[off : off + id_len].decode("utf-8")
        off += id_len
        rows[ident] = np.frombuffer(data, dtype="<f4", count=dim, offset=off).copy()
        off += 4 * dim
    return dim, rows


class PrecomputedProvider:
    """Serves embeddings looked up by image_id from an AEMB file."""

    def __init__(self, path: str | Path):
        self.dim, self._rows = read_aemb(path)
        self.provider_id = f"precomputed-{Path(path).name}"

    def embed(self, image_id: str, source: bytes | str | Path = b"") -> ImageEmbedding:
        if image_id not in self._rows:
            raise ValidationError(f"embedding not found: {image_id!r}")
        return ImageEmbedding(image_id, self._rows[image_id], self.provider_id)


class EmbeddingCache:
    """On-disk cache keyed by (provider_id, image_id); lossless float32
    round-trip, atomic writes via temp-file replace."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, provider_id: str, image_id: str) -> Path:
        key = hashlib.sha256(f"{provider_id}\x00{image_id}".encode()).hexdigest()
        return self.root / f"{key}.f32"

    def get(self, provider_id: str, image_id: str) -> np.ndarray | None:
        p = self._path(provider_id, image_id)
        if not p.exists():
            return None
        return np.frombuffer(p.read_bytes(), dtype="<f4").copy()

    def put(self, provider_id: str, image_id: str, v: np.ndarray) -> None:
        p = self._path(provider_id, image_id)
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(np.asarray(v, dtype="<f4").tobytes())
            os.replace(tmp, p)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)


def batch_embed(
    ids: list[str],
    provider: EmbeddingProvider,
    cache: EmbeddingCache | None = None,
    sources: dict[str, bytes] | None = None,
) -> list[ImageEmbedding]:
    """Order-preserving batch lookup; cache hits bypass the provider.
    The first per-item failure is re-raised with its batch index."""
    out: list[ImageEmbedding] = []
    for i, image_id in enumerate(ids):
        if cache is not None:
            hit = cache.get(provider.provider_id, image_id)
            if hit is not None:
                out.append(ImageEmbedding(image_id, hit, provider.provider_id))
                continue
        source = (sources or {}).get(image_id, image_id.encode("utf-8"))
        try:
            emb = provider.embed(image_id, source)
        except Exception as e:
            raise type(e)(f"batch item {i} ({image_id!r}): {e}") from e
        if cache is not None:
            cache.put(provider.provider_id, image_id, emb.v)
        out.append(emb)
    return out

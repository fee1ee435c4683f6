"""Embedding vectors, similarity, providers and the on-disk store.

Vectors are 1-D float64 numpy arrays. Dot products are accumulated
sequentially over dimensions (one vectorised pass per dimension), which
keeps every score bit-reproducible regardless of BLAS or memory layout:
the same row always yields the same float, whether it is scored alone or
as part of a matrix.
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
import time
import zlib
from collections.abc import Iterator, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Protocol

import httpx
import numpy as np

logger = logging.getLogger(__name__)

STORE_MAGIC = b"EMBS"
STORE_VERSION = 1
_STORE_HEADER = struct.Struct("<4sIIQQ")  # magic, version, dim, count, seed


class EmbeddingError(ValueError):
    pass


class StoreFormatError(EmbeddingError):
    """Corrupt or incompatible embedding store file."""


def as_vector(values) -> np.ndarray:
    vec = np.array(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size < 1:
        raise EmbeddingError(f"expected a non-empty 1-D vector, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise EmbeddingError("vector contains NaN or Inf")
    return vec


def dot_rows(matrix: np.ndarray, vector: np.ndarray) -> np.ndarray:
    """Row-wise dot products with left-to-right accumulation over dimensions."""
    acc = np.zeros(matrix.shape[0], dtype=np.float64)
    for d in range(matrix.shape[1]):
        acc += matrix[:, d] * vector[d]
    return acc


def row_norms(matrix: np.ndarray) -> np.ndarray:
    acc = np.zeros(matrix.shape[0], dtype=np.float64)
    for d in range(matrix.shape[1]):
        col = matrix[:, d]
        acc += col * col
    return np.sqrt(acc)


def cosine_rows(matrix: np.ndarray, norms: np.ndarray, query: np.ndarray, query_norm: float) -> np.ndarray:
    """Cosine of each row of ``matrix`` against ``query``, clamped to [-1, 1]."""
    sims = dot_rows(matrix, query) / (norms * query_norm)
    return np.clip(sims, -1.0, 1.0)


def vector_norm(vec: np.ndarray) -> float:
    return float(row_norms(vec[None, :])[0])


def mean_pool(token_embeddings) -> np.ndarray:
    """Average T token embeddings (T x D) into one D-dimensional vector.

    The mean is taken relative to the first row, so T identical rows pool
    to exactly that row.
    """
    try:
        mat = np.array(token_embeddings, dtype=np.float64)
    except ValueError:
        raise EmbeddingError("ragged token embeddings") from None
    if mat.ndim != 2:
        raise EmbeddingError("token embeddings must be a rectangular T x D matrix")
    if mat.shape[0] == 0 or mat.shape[1] == 0:
        raise EmbeddingError("cannot pool an empty matrix")
    if not np.all(np.isfinite(mat)):
        raise EmbeddingError("token embeddings contain NaN or Inf")
    base = mat[0]
    return base + (mat - base).sum(axis=0) / mat.shape[0]


def cosine_similarity(a, b) -> float:
    a = as_vector(a)
    b = as_vector(b)
    if a.size != b.size:
        raise EmbeddingError(f"dimension mismatch: {a.size} vs {b.size}")
    na, nb = vector_norm(a), vector_norm(b)
    if na == 0.0 or nb == 0.0:
        raise EmbeddingError("cosine similarity is undefined for a zero vector")
    return float(cosine_rows(a[None, :], np.array([na]), b, nb)[0])


def to_unit_interval(cosine):
    """Map cosine in [-1, 1] monotonically onto [0, 1]."""
    return (1.0 + cosine) / 2.0


def normalized_score(a, b) -> float:
    return to_unit_interval(cosine_similarity(a, b))


class EmbeddingStore(Mapping):
    """Immutable id -> vector mapping with a fixed dimension."""

    def __init__(self, ids: Sequence[str], vectors, seed: int = 0):
        ids = tuple(ids)
        mat = np.array(vectors, dtype=np.float64)
        if mat.ndim == 1 and mat.size == 0:
            raise EmbeddingError("store dimension unknown for an empty vector list")
        if mat.ndim != 2 or mat.shape[1] < 1:
            raise EmbeddingError(f"vectors must form an N x D matrix, got shape {mat.shape}")
        if mat.shape[0] != len(ids):
            raise EmbeddingError(f"{len(ids)} ids but {mat.shape[0]} vectors")
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise EmbeddingError(f"duplicate ids in store: {dupes[:5]}")
        if not np.all(np.isfinite(mat)):
            raise EmbeddingError("store contains NaN or Inf")
        mat.setflags(write=False)
        self.ids = ids
        self.matrix = mat
        self.dim = mat.shape[1]
        self.seed = int(seed)
        self._pos = {eid: i for i, eid in enumerate(ids)}

    def __getitem__(self, entity_id: str) -> np.ndarray:
        return self.matrix[self._pos[entity_id]]

    def __iter__(self) -> Iterator[str]:
        return iter(self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.seed == other.seed
            and self.matrix.shape == other.matrix.shape
            and self.matrix.tobytes() == other.matrix.tobytes()
        )

    def __repr__(self) -> str:
        return f"EmbeddingStore(count={len(self)}, dim={self.dim})"

    def missing(self, ids) -> list[str]:
        return [i for i in ids if i not in self._pos]

    def subset(self, ids: Sequence[str]) -> tuple[list[str], np.ndarray]:
        missing = self.missing(ids)
        if missing:
            raise KeyError(f"no embedding for ids: {missing}")
        rows = [self._pos[i] for i in ids]
        return list(ids), self.matrix[rows]


def save_store(store: EmbeddingStore, path: str | Path) -> None:
    payload = bytearray(_STORE_HEADER.pack(STORE_MAGIC, STORE_VERSION, store.dim, len(store), store.seed))
    for eid, row in zip(store.ids, store.matrix):
        raw = eid.encode("utf-8")
        payload += struct.pack("<I", len(raw)) + raw
        payload += row.astype("<f8").tobytes()
    payload += struct.pack("<I", zlib.crc32(payload))
    Path(path).write_bytes(bytes(payload))


def load_store(path: str | Path, expected_dim: int | None = None) -> EmbeddingStore:
    data = Path(path).read_bytes()
    if len(data) < _STORE_HEADER.size + 4:
        raise StoreFormatError(f"{path}: file too short")
    magic, version, dim, count, seed = _STORE_HEADER.unpack_from(data, 0)
    if magic != STORE_MAGIC:
        raise StoreFormatError(f"{path}: bad magic {magic!r}")
    if version != STORE_VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise StoreFormatError(f"{path}: checksum mismatch")
    if expected_dim is not None and dim != expected_dim:
        raise EmbeddingError(f"{path}: store dim {dim}, expected {expected_dim}")
    offset = _STORE_HEADER.size
    end = len(data) - 4
    ids: list[str] = []
    rows = np.empty((count, dim), dtype=np.float64)
    try:
        for i in range(count):
            (n,) = struct.unpack_from("<I", data, offset)
            offset += 4
            if offset + n + 8 * dim > end:
                raise StoreFormatError(f"{path}: truncated record {i}")
            ids.append(data[offset : offset + n].decode("utf-8"))
            offset += n
            rows[i] = np.frombuffer(data, dtype="<f8", count=dim, offset=offset)
            offset += 8 * dim
    except struct.error:
        raise StoreFormatError(f"{path}: truncated record") from None
    if offset != end:
        raise StoreFormatError(f"{path}: {end - offset} trailing bytes")
    return EmbeddingStore(ids, rows.reshape(count, dim), seed=seed)


class EmbeddingProvider(Protocol):
    """Turns texts into vectors: one per text, same order, uniform dim.

    ``ids`` is passed through by :func:`embed_corpus`; providers that look
    vectors up by entity id (the file-backed one) need it, others ignore it.
    """

    def embed(self, texts: Sequence[str], ids: Sequence[str] | None = None) -> np.ndarray: ...


class HashEmbeddingProvider:
    """Deterministic test provider: seeded hash of the text -> unit vector."""

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 1:
            raise EmbeddingError("dim must be positive")
        self.dim = dim
        self.seed = seed

    def vector(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
        vec = rng.standard_normal(self.dim)
        return vec / np.linalg.norm(vec)

    def embed(self, texts, ids=None) -> np.ndarray:
        return np.array([self.vector(t) for t in texts], dtype=np.float64).reshape(len(texts), self.dim)


class FileEmbeddingProvider:
    """Serves precomputed vectors from an :class:`EmbeddingStore` by entity id."""

    def __init__(self, store: EmbeddingStore | str | Path):
        self.store = store if isinstance(store, EmbeddingStore) else load_store(store)
        self.dim = self.store.dim

    def embed(self, texts, ids=None) -> np.ndarray:
        if ids is None:
            raise EmbeddingError("file-backed provider needs entity ids")
        missing = self.store.missing(ids)
        if missing:
            raise EmbeddingError(f"store has no vector for ids: {', '.join(missing)}")
        return np.array([self.store[i] for i in ids], dtype=np.float64)


class RemoteEmbeddingProvider:
    """HTTP encoder service: POST {"texts": [...]} -> {"vectors": [[...], ...]}.

    The bearer token is read from ``token_env`` at call time; it is never
    taken from config files or arguments.
    """

    def __init__(
        self,
        url: str,
        token_env: str = "AUDITMATCH_EMBED_API_KEY",
        timeout: float = 30.0,
        attempts: int = 3,
        backoff: float = 1.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.url = url
        self.token_env = token_env
        self.attempts = attempts
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _headers(self) -> dict[str, str]:
        token = os.environ.get(self.token_env)
        return {"Authorization": f"Bearer {token}"} if token else {}

    def embed(self, texts, ids=None) -> np.ndarray:
        last_exc: Exception | None = None
        for attempt in range(self.attempts):
            try:
                resp = self._client.post(self.url, json={"texts": list(texts)}, headers=self._headers())
                resp.raise_for_status()
                vectors = resp.json()["vectors"]
                break
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                last_exc = exc
                if attempt + 1 < self.attempts:
                    delay = self.backoff * 2**attempt
                    logger.warning("embedding request failed (%s); retrying in %.1fs", exc, delay)
                    time.sleep(delay)
        else:
            raise EmbeddingError(f"embedding service failed after {self.attempts} attempts: {last_exc}")
        mat = np.array(vectors, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] != len(texts):
            raise EmbeddingError(f"service returned {len(vectors)} vectors for {len(texts)} texts")
        return mat


def embed_corpus(
    provider: EmbeddingProvider,
    items: Sequence[tuple[str, str]],
    batch_size: int = 32,
    max_workers: int = 4,
    seed: int = 0,
) -> EmbeddingStore:
    """Embed (id, text) pairs in batches; output order follows input order."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    items = list(items)
    for eid, text in items:
        if not text.strip():
            raise EmbeddingError(f"empty text for {eid!r}")
    batches = [items[i : i + batch_size] for i in range(0, len(items), batch_size)]

    def run(batch):
        ids = [eid for eid, _ in batch]
        try:
            out = np.asarray(provider.embed([t for _, t in batch], ids=ids), dtype=np.float64)
        except Exception as exc:
            raise EmbeddingError(f"provider failed on batch {ids}: {exc}") from exc
        if out.ndim != 2 or out.shape[0] != len(batch):
            raise EmbeddingError(f"provider returned shape {out.shape} for batch {ids}")
        return out

    if max_workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(run, batches))
    else:
        results = [run(b) for b in batches]
    dims = {r.shape[1] for r in results}
    if len(dims) > 1:
        raise EmbeddingError(f"provider returned inconsistent dims across batches: {sorted(dims)}")
    if not results:
        raise EmbeddingError("nothing to embed")
    return EmbeddingStore([eid for eid, _ in items], np.vstack(results), seed=seed)

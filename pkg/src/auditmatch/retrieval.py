"""Exact and k-means clustered (IVF-style) top-k cosine retrieval.

Indexes are scoped to a namespace: one report's segments, or ``"all"``.
Ranking is by normalized score descending, then segment id ascending, so
results are fully deterministic including ties.
"""
from __future__ import annotations

import math
import struct
import zlib
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import (
    EmbeddingError,
    EmbeddingStore,
    as_vector,
    cosine_rows,
    mean_pool,
    row_norms,
    to_unit_interval,
    vector_norm,
)

ALL = "all"
INDEX_MAGIC = b"RIDX"
INDEX_VERSION = 1
KIND_EXACT = 0
KIND_CLUSTERED = 1


class RetrievalError(ValueError):
    pass


class IndexFormatError(RetrievalError):
    pass


@dataclass(frozen=True)
class RankedList:
    requirement_id: str
    entries: tuple[tuple[str, float], ...]
    report_id: str = ALL

    @property
    def ids(self) -> list[str]:
        return [sid for sid, _ in self.entries]

    def prefix(self, k: int) -> RankedList:
        return RankedList(self.requirement_id, self.entries[:k], self.report_id)

    def __len__(self) -> int:
        return len(self.entries)


def rank_entries(ids: Sequence[str], scores: np.ndarray, k: int) -> tuple[tuple[str, float], ...]:
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return tuple((ids[i], float(scores[i])) for i in order[:k])


def select_namespace(
    store: EmbeddingStore, namespace: str = ALL, report_of: Mapping[str, str] | None = None
) -> list[str]:
    """Entity ids of ``store`` that fall into ``namespace``.

    ``report_of`` maps segment id -> report id. Without it only ``"all"``
    is meaningful and every stored entity is selected.
    """
    if report_of is None:
        if namespace != ALL:
            raise RetrievalError(f"namespace {namespace!r} needs a segment -> report mapping")
        ids = list(store.ids)
    elif namespace == ALL:
        ids = [eid for eid in store.ids if eid in report_of]
    else:
        ids = [eid for eid in store.ids if report_of.get(eid) == namespace]
    if not ids:
        raise RetrievalError(f"namespace {namespace!r} selects no entities")
    return ids


def _check_rows(ids: Sequence[str], vectors: np.ndarray) -> np.ndarray:
    norms = row_norms(vectors)
    zero = [ids[i] for i in np.flatnonzero(norms == 0.0)]
    if zero:
        raise RetrievalError(f"zero vectors cannot be indexed: {zero[:5]}")
    return norms


def _query(query, dim: int) -> tuple[np.ndarray, float]:
    q = as_vector(query)
    if q.size != dim:
        raise EmbeddingError(f"query dim {q.size} does not match index dim {dim}")
    qn = vector_norm(q)
    if qn == 0.0:
        raise EmbeddingError("zero query vector")
    return q, qn


@dataclass(frozen=True, eq=False)
class ExactIndex:
    namespace: str
    ids: tuple[str, ...]
    vectors: np.ndarray
    norms: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, ExactIndex):
            return NotImplemented
        return (
            self.namespace == other.namespace
            and self.ids == other.ids
            and self.vectors.tobytes() == other.vectors.tobytes()
        )


@dataclass(frozen=True, eq=False)
class ClusteredIndex:
    namespace: str
    ids: tuple[str, ...]
    vectors: np.ndarray
    norms: np.ndarray = field(repr=False)
    centroids: np.ndarray
    assignment: np.ndarray  # cluster index per entity, aligned with ids
    seed: int
    objective_history: tuple[float, ...] = field(default=(), repr=False)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[0]

    def members(self, cluster: int) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.assignment == cluster)]

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, ClusteredIndex):
            return NotImplemented
        return (
            self.namespace == other.namespace
            and self.ids == other.ids
            and self.seed == other.seed
            and self.vectors.tobytes() == other.vectors.tobytes()
            and self.centroids.tobytes() == other.centroids.tobytes()
            and np.array_equal(self.assignment, other.assignment)
        )


def build_exact_index(
    store: EmbeddingStore, namespace: str = ALL, report_of: Mapping[str, str] | None = None
) -> ExactIndex:
    ids, vectors = store.subset(select_namespace(store, namespace, report_of))
    vectors = np.ascontiguousarray(vectors)
    norms = _check_rows(ids, vectors)
    return ExactIndex(namespace, tuple(ids), vectors, norms)


def top_k(index: ExactIndex | ClusteredIndex, query, k: int, requirement_id: str = "") -> RankedList:
    if k < 1:
        raise RetrievalError("k must be >= 1")
    q, qn = _query(query, index.dim)
    scores = to_unit_interval(cosine_rows(index.vectors, index.norms, q, qn))
    return RankedList(requirement_id, rank_entries(index.ids, scores, k), index.namespace)


def kmeans_objective(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    diff = points - centroids[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def lloyd_kmeans(
    points: np.ndarray, num_clusters: int, seed: int, max_iters: int = 100
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Seeded Lloyd's k-means on Euclidean distance.

    Returns (centroids, labels, objective per iteration). Initial centroids
    are ``num_clusters`` distinct points drawn with ``default_rng(seed)``.
    A cluster left empty by an assignment step takes over the point farthest
    from its own centroid (among clusters that can spare one).
    """
    n = points.shape[0]
    if not 1 <= num_clusters <= n:
        raise RetrievalError(f"num_clusters must be in [1, {n}], got {num_clusters}")
    if max_iters < 1:
        raise RetrievalError("max_iters must be >= 1")
    rng = np.random.default_rng(seed)
    init = rng.choice(n, size=num_clusters, replace=False)
    centroids = points[np.sort(init)].copy()
    labels: np.ndarray | None = None
    history: list[float] = []
    for _ in range(max_iters):
        dist = _sq_distances(points, centroids)
        new = np.argmin(dist, axis=1)
        counts = np.bincount(new, minlength=num_clusters)
        for c in np.flatnonzero(counts == 0):
            own = dist[np.arange(n), new]
            own = np.where(counts[new] > 1, own, -1.0)
            p = int(np.argmax(own))
            counts[new[p]] -= 1
            new[p] = c
            counts[c] = 1
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centroids = np.array([mean_pool(points[labels == c]) for c in range(num_clusters)])
        history.append(kmeans_objective(points, centroids, labels))
    return centroids, labels, history


def default_num_clusters(population: int) -> int:
    return max(1, math.ceil(math.sqrt(population)))


def default_n_probe(num_clusters: int) -> int:
    return max(1, math.ceil(num_clusters / 4))


def build_clustered_index(
    store: EmbeddingStore,
    namespace: str = ALL,
    num_clusters: int | None = None,
    seed: int = 0,
    max_iters: int = 100,
    report_of: Mapping[str, str] | None = None,
) -> ClusteredIndex:
    ids, vectors = store.subset(select_namespace(store, namespace, report_of))
    vectors = np.ascontiguousarray(vectors)
    norms = _check_rows(ids, vectors)
    if num_clusters is None:
        num_clusters = default_num_clusters(len(ids))
    if num_clusters > len(ids):
        raise RetrievalError(
            f"num_clusters={num_clusters} exceeds namespace {namespace!r} population {len(ids)}"
        )
    centroids, labels, history = lloyd_kmeans(vectors, num_clusters, seed, max_iters)
    return ClusteredIndex(
        namespace, tuple(ids), vectors, norms, centroids, labels.astype(np.int64), int(seed), tuple(history)
    )


def top_k_clustered(
    index: ClusteredIndex, query, k: int, n_probe: int | None = None, requirement_id: str = ""
) -> RankedList:
    if k < 1:
        raise RetrievalError("k must be >= 1")
    if n_probe is None:
        n_probe = default_n_probe(index.num_clusters)
    if not 1 <= n_probe <= index.num_clusters:
        raise RetrievalError(f"n_probe must be in [1, {index.num_clusters}], got {n_probe}")
    q, qn = _query(query, index.dim)
    cnorms = row_norms(index.centroids)
    # a zero centroid (members cancel out) carries no direction; rank it neutral
    safe = np.where(cnorms == 0.0, 1.0, cnorms)
    csims = np.where(cnorms == 0.0, 0.0, cosine_rows(index.centroids, safe, q, qn))
    probe = sorted(range(index.num_clusters), key=lambda c: (-csims[c], c))[:n_probe]
    rows = np.flatnonzero(np.isin(index.assignment, probe))
    scores = to_unit_interval(cosine_rows(index.vectors[rows], index.norms[rows], q, qn))
    ids = [index.ids[i] for i in rows]
    return RankedList(requirement_id, rank_entries(ids, scores, k), index.namespace)


def search(index, query, k: int, n_probe: int | None = None, requirement_id: str = "") -> RankedList:
    if isinstance(index, ClusteredIndex):
        return top_k_clustered(index, query, k, n_probe, requirement_id)
    return top_k(index, query, k, requirement_id)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_index(index: ExactIndex | ClusteredIndex, path: str | Path) -> None:
    clustered = isinstance(index, ClusteredIndex)
    buf = bytearray(INDEX_MAGIC)
    buf += struct.pack("<IB", INDEX_VERSION, KIND_CLUSTERED if clustered else KIND_EXACT)
    buf += _pack_str(index.namespace)
    buf += struct.pack(
        "<IQIQ",
        index.dim,
        len(index),
        index.num_clusters if clustered else 0,
        index.seed if clustered else 0,
    )
    for eid in index.ids:
        buf += _pack_str(eid)
    buf += index.vectors.astype("<f8").tobytes()
    if clustered:
        buf += index.centroids.astype("<f8").tobytes()
        buf += index.assignment.astype("<u4").tobytes()
    buf += struct.pack("<I", zlib.crc32(buf))
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IndexFormatError(f"{self.path}: truncated index file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def floats(self, rows: int, cols: int) -> np.ndarray:
        raw = self.take(8 * rows * cols)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)


def load_index(path: str | Path) -> ExactIndex | ClusteredIndex:
    data = Path(path).read_bytes()
    if data[:4] != INDEX_MAGIC:
        raise IndexFormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise IndexFormatError(f"{path}: truncated index file")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise IndexFormatError(f"{path}: checksum mismatch")
    r = _Reader(data[:-4], path)
    r.take(4)
    version, kind = r.unpack("<IB")
    if version != INDEX_VERSION:
        raise IndexFormatError(f"{path}: unsupported version {version}")
    if kind not in (KIND_EXACT, KIND_CLUSTERED):
        raise IndexFormatError(f"{path}: unknown index kind {kind}")
    namespace = r.string()
    dim, count, num_clusters, seed = r.unpack("<IQIQ")
    ids = tuple(r.string() for _ in range(count))
    vectors = r.floats(count, dim)
    norms = row_norms(vectors)
    if kind == KIND_EXACT:
        index = ExactIndex(namespace, ids, vectors, norms)
    else:
        centroids = r.floats(num_clusters, dim)
        assignment = np.frombuffer(r.take(4 * count), dtype="<u4").astype(np.int64)
        index = ClusteredIndex(namespace, ids, vectors, norms, centroids, assignment, seed)
    if r.pos != len(r.data):
        raise IndexFormatError(f"{path}: trailing bytes")
    return index

"""Rotation-aware descriptor index, cosine ranking, and mAP evaluation.

References keep up to four orientation descriptors; the distance from a
query to a reference is the minimum cosine distance over those
orientations. The scan is exact and brute-force: one matrix-vector pass
over a packed row-major descriptor matrix, then a per-image min. Ties in
a ranking break lexicographically by image id so evaluation is
deterministic.
"""
from __future__ import annotations

import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_store
from .errors import DataError
from .pooling import Descriptor
from .util import chunk_ranges, resolve_threads

PRI_MAGIC = b"PRI1"
PRI_VERSION = 1
_PRI_HEADER = struct.Struct("<4sB3xIII")

METRICS = ("cosine", "euclidean")

_zero_lock = threading.Lock()
_zero_count = 0


def zero_vector_count() -> int:
    """Diagnostic: how many zero-vector distance computations happened."""
    return _zero_count


def reset_zero_vector_count() -> None:
    global _zero_count
    with _zero_lock:
        _zero_count = 0


def _note_zero(n: int = 1) -> None:
    global _zero_count
    if n:
        with _zero_lock:
            _zero_count += n


def cosine_distance(a, b) -> float:
    """1 - cos(a, b) in [0, 2]; zero vectors yield 1 (orthogonal convention)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DataError(f"dim mismatch: {a.shape[0]} vs {b.shape[0]}", code="dim_mismatch")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        _note_zero()
        return 1.0
    return float(min(max(1.0 - (a @ b) / (na * nb), 0.0), 2.0))


def euclidean_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DataError(f"dim mismatch: {a.shape[0]} vs {b.shape[0]}", code="dim_mismatch")
    return float(np.linalg.norm(a - b))


@dataclass(frozen=True)
class IndexEntry:
    image_id: str
    group_id: str | None
    views: tuple  # rotation tags, in packed row order


@dataclass(frozen=True)
class Ranking:
    """References ordered by ascending distance; the query itself excluded."""

    query_id: str
    items: tuple  # ((image_id, distance), ...)

    def position_of(self, image_id: str) -> int:
        """1-based rank of an image id."""
        for rank, (candidate, _) in enumerate(self.items, start=1):
            if candidate == image_id:
                return rank
        raise KeyError(image_id)


@dataclass(frozen=True)
class EvalResult:
    map: float
    per_query_ap: dict


class RetrievalIndex:
    """Immutable packed index over reference images.

    Rows are grouped per image (entry order equals packed segment order,
    sorted by image id); queries reduce row distances with a segment min.
    """

    def __init__(self, entries, matrix: np.ndarray, normalization: str = "none"):
        entries = tuple(entries)
        matrix = np.ascontiguousarray(matrix, dtype="<f4")
        if matrix.ndim != 2:
            raise DataError("index matrix must be 2-D", code="bad_dims")
        rows = sum(len(e.views) for e in entries)
        if rows != matrix.shape[0]:
            raise DataError(
                f"entry table declares {rows} rows, matrix has {matrix.shape[0]}",
                code="bad_dims",
            )
        matrix.flags.writeable = False
        self.entries = entries
        self.matrix = matrix
        self.normalization = normalization
        self.dim = matrix.shape[1]
        offsets = np.zeros(len(entries) + 1, dtype=np.int64)
        for i, e in enumerate(entries):
            offsets[i + 1] = offsets[i] + len(e.views)
        self._offsets = offsets
        self._ids = np.array([e.image_id for e in entries])
        self._id_pos = {e.image_id: i for i, e in enumerate(entries)}
        # Scan caches in float64: exactness of the ranking is worth the copy.
        self._scan = matrix.astype(np.float64)
        self._norms = np.linalg.norm(self._scan, axis=1)
        self._sq_norms = self._norms**2

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RetrievalIndex):
            return NotImplemented
        return (
            self.entries == other.entries
            and self.normalization == other.normalization
            and self.matrix.shape == other.matrix.shape
            and self.matrix.tobytes() == other.matrix.tobytes()
        )


def build_index(descriptors, manifest: tensor_store.DatasetManifest) -> RetrievalIndex:
    """Pack reference descriptors into an index.

    Every manifest reference entry must be covered; rot0 is mandatory,
    other rotations optional, one descriptor per rotation tag at most.
    All descriptors must share one dimension and (where recorded) one
    whitening-model provenance.
    """
    by_key = {}
    for d in descriptors:
        if not tensor_store.is_rotation(d.view):
            raise DataError(
                f"reference {d.image_id!r} has non-rotation view {d.view!r}",
                code="bad_view",
            )
        key = (d.image_id, d.view)
        if key in by_key:
            raise DataError(
                f"duplicate descriptor for {d.image_id!r} view {d.view!r}",
                code="duplicate_view",
            )
        by_key[key] = d

    references = sorted(manifest.references(), key=lambda e: e.image_id)
    if not references:
        raise DataError("manifest has no reference entries", code="no_references")

    dim = None
    normalization = None
    entries = []
    rows = []
    for ref in references:
        views = []
        for tag in tensor_store.ROTATION_TAGS:
            d = by_key.get((ref.image_id, tag))
            if d is None:
                continue
            if dim is None:
                dim = d.dim
            elif d.dim != dim:
                raise DataError(
                    f"descriptor dim {d.dim} for {ref.image_id!r} != index dim {dim}",
                    code="dim_mismatch",
                )
            if d.normalization != "none":
                if normalization is None:
                    normalization = d.normalization
                elif d.normalization != normalization:
                    raise DataError(
                        f"mixed whitening provenance: {normalization!r} vs {d.normalization!r}",
                        code="mixed_normalization",
                    )
            views.append(tag)
            rows.append(d.values)
        if "rot0" not in views:
            raise DataError(
                f"reference {ref.image_id!r} has no rot0 descriptor", code="missing_rot0"
            )
        entries.append(IndexEntry(ref.image_id, ref.group_id, tuple(views)))

    return RetrievalIndex(entries, np.stack(rows), normalization or "none")


def _row_distances(index: RetrievalIndex, values: np.ndarray, metric: str) -> np.ndarray:
    q = np.asarray(values, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise DataError(
            f"query dim {q.shape[0]} != index dim {index.dim}", code="dim_mismatch"
        )
    dots = index._scan @ q
    if metric == "cosine":
        qn = np.linalg.norm(q)
        zero_rows = index._norms == 0.0
        if qn == 0.0:
            _note_zero(index.matrix.shape[0])
            return np.ones(index.matrix.shape[0])
        _note_zero(int(zero_rows.sum()))
        denom = np.where(zero_rows, 1.0, index._norms) * qn
        dist = 1.0 - dots / denom
        dist[zero_rows] = 1.0
        return np.clip(dist, 0.0, 2.0)
    if metric == "euclidean":
        sq = index._sq_norms - 2.0 * dots + q @ q
        return np.sqrt(np.maximum(sq, 0.0))
    raise DataError(f"unknown metric {metric!r}", code="bad_metric")


def query(
    index: RetrievalIndex,
    q: Descriptor,
    metric: str = "cosine",
    include_self: bool = False,
) -> Ranking:
    """Rank all references by min-over-orientations distance, ascending.

    Ties break lexicographically by image id. The query's own image id is
    excluded from the result unless ``include_self`` is set.
    """
    row_dist = _row_distances(index, q.values, metric)
    per_image = np.minimum.reduceat(row_dist, index._offsets[:-1])
    keep = np.ones(len(index.entries), dtype=bool)
    if not include_self and q.image_id in index._id_pos:
        keep[index._id_pos[q.image_id]] = False
    ids = index._ids[keep]
    dists = per_image[keep]
    order = np.lexsort((ids, dists))
    items = tuple((str(ids[i]), float(dists[i])) for i in order)
    return Ranking(query_id=q.image_id, items=items)


def query_batch(
    index: RetrievalIndex,
    queries,
    metric: str = "cosine",
    include_self: bool = False,
    threads: int | None = None,
) -> list:
    """Element-wise equal to mapping ``query``; output order matches input."""
    queries = list(queries)
    workers = resolve_threads(threads)
    if workers <= 1 or len(queries) <= 1:
        return [query(index, q, metric, include_self) for q in queries]
    spans = chunk_ranges(len(queries), workers)
    out = [None] * len(queries)

    def run(span):
        lo, hi = span
        return lo, [query(index, queries[i], metric, include_self) for i in range(lo, hi)]

    with ThreadPoolExecutor(max_workers=workers) as executor:
        for lo, rankings in executor.map(run, spans):
            out[lo : lo + len(rankings)] = rankings
    return out


def average_precision(ranking: Ranking, relevant_ids) -> float:
    """Mean over relevant items of precision at each item's rank."""
    relevant = set(relevant_ids)
    if not relevant:
        raise DataError("query has no relevant references", code="no_relevant")
    hits = 0
    total = 0.0
    for rank, (image_id, _) in enumerate(ranking.items, start=1):
        if image_id in relevant:
            hits += 1
            total += hits / rank
    if hits != len(relevant):
        missing = relevant - {image_id for image_id, _ in ranking.items}
        raise DataError(
            f"relevant ids missing from ranking: {sorted(missing)}", code="no_relevant"
        )
    return total / len(relevant)


def evaluate_map(
    index: RetrievalIndex,
    queries,
    metric: str = "cosine",
    include_self: bool = False,
    threads: int | None = None,
) -> EvalResult:
    """mAP over (descriptor, group_id) queries against the index.

    Relevant items for a query are the index entries sharing its group id,
    the query's own image id excluded.
    """
    queries = list(queries)
    if not queries:
        raise DataError("no queries to evaluate", code="no_queries")
    rankings = query_batch(
        index, [d for d, _ in queries], metric=metric, include_self=include_self, threads=threads
    )
    per_query = {}
    for (descriptor, group_id), ranking in zip(queries, rankings):
        relevant = [
            e.image_id
            for e in index.entries
            if e.group_id == group_id and e.image_id != descriptor.image_id
        ]
        per_query[descriptor.image_id] = average_precision(ranking, relevant)
    mean_ap = float(np.mean(list(per_query.values())))
    return EvalResult(map=mean_ap, per_query_ap=per_query)


def save_index(index: RetrievalIndex, path) -> None:
    rows = index.matrix.shape[0]
    parts = [
        _PRI_HEADER.pack(PRI_MAGIC, PRI_VERSION, index.dim, len(index.entries), rows),
        _pack_str(index.normalization),
    ]
    for e in index.entries:
        parts.append(_pack_str(e.image_id))
        parts.append(_pack_str(e.group_id or ""))
        parts.append(struct.pack("<B", len(e.views)))
        for tag in e.views:
            parts.append(struct.pack("<B", tensor_store.ROTATION_TAGS.index(tag)))
    parts.append(index.matrix.tobytes(order="C"))
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}", code="io") from exc


def load_index(path) -> RetrievalIndex:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}", code="io") from exc
    if len(data) < _PRI_HEADER.size:
        raise DataError(f"{path}: truncated header", code="truncated")
    magic, version, dim, n_entries, rows = _PRI_HEADER.unpack_from(data)
    if magic != PRI_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}", code="bad_magic")
    if version != PRI_VERSION:
        raise DataError(f"{path}: unsupported version {version}", code="bad_version")
    cursor = _PRI_HEADER.size
    normalization, cursor = _unpack_str(data, cursor, path)
    entries = []
    for _ in range(n_entries):
        image_id, cursor = _unpack_str(data, cursor, path)
        group, cursor = _unpack_str(data, cursor, path)
        if cursor + 1 > len(data):
            raise DataError(f"{path}: truncated entry table", code="truncated")
        (n_views,) = struct.unpack_from("<B", data, cursor)
        cursor += 1
        if cursor + n_views > len(data):
            raise DataError(f"{path}: truncated entry table", code="truncated")
        views = []
        for code in data[cursor : cursor + n_views]:
            if code >= len(tensor_store.ROTATION_TAGS):
                raise DataError(f"{path}: bad rotation code {code}", code="bad_view")
            views.append(tensor_store.ROTATION_TAGS[code])
        cursor += n_views
        entries.append(IndexEntry(image_id, group or None, tuple(views)))
    expected = cursor + 4 * rows * dim
    if len(data) < expected:
        raise DataError(
            f"{path}: truncated matrix ({len(data)} of {expected} bytes)", code="truncated"
        )
    if len(data) > expected:
        raise DataError(f"{path}: {len(data) - expected} trailing bytes", code="trailing_bytes")
    matrix = np.frombuffer(data, "<f4", count=rows * dim, offset=cursor).reshape(rows, dim)
    return RetrievalIndex(entries, matrix.copy(), normalization)


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise DataError(f"string too long for index file ({len(raw)} bytes)", code="bad_name")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(data: bytes, cursor: int, path) -> tuple:
    if cursor + 2 > len(data):
        raise DataError(f"{path}: truncated string", code="truncated")
    (length,) = struct.unpack_from("<H", data, cursor)
    cursor += 2
    if cursor + length > len(data):
        raise DataError(f"{path}: truncated string", code="truncated")
    return data[cursor : cursor + length].decode("utf-8"), cursor + length

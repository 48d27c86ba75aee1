"""Serving paths and latency measurement.

The teacher serves a query by running the cross-encoder once per candidate
document. The student embeds documents ahead of time into an EmbeddingStore
(float32 on disk), so serving a query costs one encoder forward for the
query plus dot products against precomputed vectors. ``benchmark_latency``
runs both systems over the identical workload and reports the speedup.

Store files are written atomically and carry a content hash plus the
fingerprint of the checkpoint that produced them.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .dataset import Dataset
from .errors import (
    ConfigurationError,
    EmptyInputError,
    MissingIdError,
    StoreFormatError,
    StoreIntegrityError,
    ValidationError,
)
from .metrics import nearest_rank_percentile
from .tokenizer import Tokenizer
from .training import Checkpoint, checkpoint_fingerprint

STORE_MAGIC = b"LREMB001"
STORE_VERSION = 1
_HASH_BYTES = 8
_EMBED_CHUNK = 256


@dataclass
class EmbeddingStore:
    """Document embeddings plus the id table used to look them up."""

    dim: int
    fingerprint: str
    doc_ids: list
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.shape != (len(self.doc_ids), self.dim):
            raise ValidationError(
                f"vectors shape {self.vectors.shape} does not match "
                f"{len(self.doc_ids)} ids of dim {self.dim}"
            )
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise ValidationError("store doc ids must be unique")
        self._index = {doc_id: i for i, doc_id in enumerate(self.doc_ids)}

    def __len__(self) -> int:
        return len(self.doc_ids)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._index

    def vector(self, doc_id: str) -> np.ndarray:
        if doc_id not in self._index:
            raise MissingIdError(f"doc_id {doc_id!r} is not in the store", [doc_id])
        return self.vectors[self._index[doc_id]]

    def gather(self, doc_ids) -> np.ndarray:
        missing = sorted(d for d in set(doc_ids) if d not in self._index)
        if missing:
            raise MissingIdError(f"doc ids missing from the store: {', '.join(missing)}", missing)
        rows = [self._index[d] for d in doc_ids]
        return self.vectors[rows]


def precompute_embeddings(student: Checkpoint, catalog, tokenizer: Tokenizer) -> EmbeddingStore:
    """Embed every catalog document with the student encoder (float32)."""
    catalog = list(catalog)
    if not catalog:
        raise EmptyInputError("catalog is empty")
    ids_seen = set()
    for doc in catalog:
        if doc.doc_id in ids_seen:
            raise ValidationError(f"duplicate doc_id in catalog: {doc.doc_id!r}")
        ids_seen.add(doc.doc_id)
    vectors = np.empty((len(catalog), student.config.model_dim), dtype=np.float32)
    for start in range(0, len(catalog), _EMBED_CHUNK):
        chunk = catalog[start : start + _EMBED_CHUNK]
        rows = [tokenizer.encode_single(d.text, student.config.max_len).ids for d in chunk]
        ids, mask = enc.pad_token_rows(rows)
        emb, _ = enc.embed_batch(student.params, student.config, ids, mask)
        vectors[start : start + len(chunk)] = emb.astype(np.float32)
    return EmbeddingStore(
        dim=student.config.model_dim,
        fingerprint=checkpoint_fingerprint(student),
        doc_ids=[d.doc_id for d in catalog],
        vectors=vectors,
    )


def save_store(store: EmbeddingStore, path: str) -> None:
    """Write magic, version, dims, fingerprint, id table, float32 payload, hash."""
    payload = np.ascontiguousarray(store.vectors, dtype="<f4").tobytes()
    fp_raw = store.fingerprint.encode("utf-8")
    parts = [
        STORE_MAGIC,
        struct.pack("<I", STORE_VERSION),
        struct.pack("<I", store.dim),
        struct.pack("<I", len(store.doc_ids)),
        struct.pack("<B", len(fp_raw)),
        fp_raw,
    ]
    for doc_id in store.doc_ids:
        raw = doc_id.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    parts.append(payload)
    parts.append(hashlib.blake2b(payload, digest_size=_HASH_BYTES).digest())
    blob = b"".join(parts)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".store-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_store(path: str) -> EmbeddingStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(STORE_MAGIC) + 13 or blob[: len(STORE_MAGIC)] != STORE_MAGIC:
        raise StoreFormatError(f"{path}: not an embedding store (bad magic)")
    pos = len(STORE_MAGIC)
    version, dim, count = struct.unpack_from("<III", blob, pos)
    pos += 12
    if version != STORE_VERSION:
        raise StoreFormatError(
            f"{path}: unsupported store version {version} (reader supports {STORE_VERSION})"
        )
    try:
        (fp_len,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        fingerprint = blob[pos : pos + fp_len].decode("utf-8")
        pos += fp_len
        doc_ids = []
        for _ in range(count):
            (id_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            doc_ids.append(blob[pos : pos + id_len].decode("utf-8"))
            pos += id_len
    except (struct.error, UnicodeDecodeError) as exc:
        raise StoreFormatError(f"{path}: id table unreadable ({exc})") from exc
    payload_len = count * dim * 4
    if len(blob) < pos + payload_len + _HASH_BYTES:
        raise StoreFormatError(f"{path}: vector payload truncated")
    payload = blob[pos : pos + payload_len]
    stored_digest = blob[pos + payload_len : pos + payload_len + _HASH_BYTES]
    if hashlib.blake2b(payload, digest_size=_HASH_BYTES).digest() != stored_digest:
        raise StoreIntegrityError(f"{path}: content hash mismatch")
    vectors = np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()
    return EmbeddingStore(dim=dim, fingerprint=fingerprint, doc_ids=doc_ids, vectors=vectors)


# -- ranking ----------------------------------------------------------------


@dataclass
class RankResult:
    """Candidates ordered by descending score (ties by ascending doc_id)."""

    ranking: list
    latency_ms: float


def _sorted_ranking(doc_ids, scores):
    paired = sorted(zip(doc_ids, scores), key=lambda t: (-t[1], t[0]))
    return [(doc_id, float(score)) for doc_id, score in paired]


def _check_candidates(candidate_ids):
    if len(set(candidate_ids)) != len(candidate_ids):
        dupes = sorted({d for d in candidate_ids if candidate_ids.count(d) > 1})
        raise ValidationError(f"duplicate candidate ids: {dupes}")


def rank_with_student(
    student: Checkpoint,
    store: EmbeddingStore,
    query: str,
    candidate_ids,
    tokenizer: Tokenizer,
) -> RankResult:
    """Rank candidates by dot product of the query embedding with stored
    document vectors. The timed window covers query encoding, scoring, and
    the sort; it excludes store loading."""
    candidate_ids = list(candidate_ids)
    _check_candidates(candidate_ids)
    if not candidate_ids:
        return RankResult([], 0.0)
    doc_vecs = store.gather(candidate_ids).astype(np.float64)
    start = time.perf_counter()
    seq = tokenizer.encode_single(query, student.config.max_len)
    q_emb = enc.embed_text(student.params, student.config, seq)
    scores = doc_vecs @ q_emb
    ranking = _sorted_ranking(candidate_ids, scores)
    latency_ms = (time.perf_counter() - start) * 1000.0
    return RankResult(ranking, latency_ms)


def rank_with_teacher(
    teacher: Checkpoint,
    query: str,
    candidates,
    tokenizer: Tokenizer,
) -> RankResult:
    """Rank candidate documents with one cross-encoder forward per document.

    The timed window covers pair encoding, all forwards, and the sort.
    """
    candidates = list(candidates)
    _check_candidates([d.doc_id for d in candidates])
    if not candidates:
        return RankResult([], 0.0)
    start = time.perf_counter()
    rows = [
        tokenizer.encode_pair(query, d.text, teacher.config.max_len).ids for d in candidates
    ]
    ids, mask = enc.pad_token_rows(rows)
    scores, _ = enc.score_cls_batch(teacher.params, teacher.config, ids, mask)
    ranking = _sorted_ranking([d.doc_id for d in candidates], scores)
    latency_ms = (time.perf_counter() - start) * 1000.0
    return RankResult(ranking, latency_ms)


# -- benchmarking -----------------------------------------------------------


@dataclass
class LatencyStats:
    mean_ms: float
    median_ms: float
    p90_ms: float


@dataclass
class BenchmarkReport:
    teacher: LatencyStats
    student: LatencyStats
    speedup: float

    def to_csv(self) -> str:
        lines = ["system,mean_ms,median_ms,p90_ms,speedup_vs_teacher"]
        for name, stats, speedup in (
            ("teacher", self.teacher, 1.0),
            ("student", self.student, self.speedup),
        ):
            lines.append(
                f"{name},{stats.mean_ms:.6g},{stats.median_ms:.6g},{stats.p90_ms:.6g},{speedup:.6g}"
            )
        return "\n".join(lines) + "\n"


def _stats(latencies) -> LatencyStats:
    return LatencyStats(
        mean_ms=float(np.mean(latencies)),
        median_ms=nearest_rank_percentile(latencies, 50.0),
        p90_ms=nearest_rank_percentile(latencies, 90.0),
    )


def benchmark_workload(dataset: Dataset, n_queries: int, list_size: int, seed: int, warmup: int):
    """Deterministic query sample: (query_text, documents) tuples, warmup
    items first. Groups are drawn with replacement so any n_queries works."""
    if not dataset.groups:
        raise EmptyInputError("benchmark dataset has no query groups")
    rng = np.random.default_rng([seed, 4001])
    picks = rng.integers(0, len(dataset.groups), size=warmup + n_queries)
    workload = []
    for gi in picks:
        group = dataset.groups[int(gi)]
        docs = list(group.docs[:list_size])
        workload.append((group.query_text, docs))
    return workload


def benchmark_latency(
    teacher: Checkpoint,
    student: Checkpoint,
    store: EmbeddingStore,
    dataset: Dataset,
    tokenizer: Tokenizer,
    n_queries: int = 100,
    list_size: int = 30,
    seed: int = 0,
    warmup: int = 10,
) -> BenchmarkReport:
    """Measure per-query latency of both systems over the same workload.

    The first ``warmup`` queries are run but excluded from statistics.
    Speedup is teacher mean latency over student mean latency.
    """
    if n_queries < 30:
        raise ConfigurationError("n_queries must be >= 30 for stable statistics")
    if list_size < 1:
        raise ConfigurationError("list_size must be >= 1")
    workload = benchmark_workload(dataset, n_queries, list_size, seed, warmup)

    teacher_ms = []
    for i, (query, docs) in enumerate(workload):
        result = rank_with_teacher(teacher, query, docs, tokenizer)
        if i >= warmup:
            teacher_ms.append(result.latency_ms)
    student_ms = []
    for i, (query, docs) in enumerate(workload):
        result = rank_with_student(student, store, query, [d.doc_id for d in docs], tokenizer)
        if i >= warmup:
            student_ms.append(result.latency_ms)

    teacher_stats = _stats(teacher_ms)
    student_stats = _stats(student_ms)
    speedup = teacher_stats.mean_ms / student_stats.mean_ms
    return BenchmarkReport(teacher=teacher_stats, student=student_stats, speedup=speedup)

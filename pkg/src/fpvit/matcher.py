"""Embedding store, cosine scoring, score fusion and exact 1:N search."""

from __future__ import annotations

import os
import platform
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyResultError, FormatError, ShapeError, ValidationError

STORE_MAGIC = b"FPEM"
STORE_VERSION = 1
NORM_TOL = 1e-5
# rows scored per task; fixed so results never depend on the thread count
BLOCK_ROWS = 1 << 16


def score(a: np.ndarray, b: np.ndarray) -> float:
    """Inner product of two unit-norm embeddings."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def fuse(s1, s2, w1: float = 0.7, w2: float = 0.3):
    """Weighted sum ``w1 * s1 + w2 * s2`` (element-wise for arrays)."""
    if w1 < 0 or w2 < 0 or abs(w1 + w2 - 1.0) > 1e-9:
        raise ConfigError(f"fusion weights must be non-negative and sum to 1, got ({w1}, {w2})")
    return w1 * np.asarray(s1, dtype=np.float64) + w2 * np.asarray(s2, dtype=np.float64)


def minmax_normalize(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


def fuse_scores(s1, s2, w1: float = 0.7, w2: float = 0.3, normalize: bool = False):
    """Fuse two score arrays, optionally min-max normalising each source first."""
    if normalize:
        s1, s2 = minmax_normalize(s1), minmax_normalize(s2)
    return fuse(s1, s2, w1, w2)


class EmbeddingStore:
    """Unit-norm embeddings with ``(subject_id, impression_id)`` labels.

    Vectors live in one contiguous float32 row-major block.  Build the store,
    then share it: searches never mutate it.
    """

    def __init__(self, dim: int):
        if dim <= 0:
            raise ConfigError("dim must be positive")
        self.dim = int(dim)
        self._vectors = np.zeros((0, self.dim), np.float32)
        self._subjects = np.zeros(0, np.uint64)
        self._impressions = np.zeros(0, np.uint32)
        self._keys: set[tuple[int, int]] = set()
        self._pending: list[tuple[int, int, np.ndarray]] = []

    @classmethod
    def from_arrays(cls, subjects, impressions, vectors, check_norm=True) -> "EmbeddingStore":
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        if vectors.ndim != 2:
            raise ShapeError(f"vectors must be 2-D, got {vectors.shape}")
        subjects = np.asarray(subjects, dtype=np.uint64).reshape(-1)
        impressions = np.asarray(impressions, dtype=np.uint32).reshape(-1)
        if not (len(subjects) == len(impressions) == len(vectors)):
            raise ShapeError("subjects, impressions and vectors must have equal length")
        if check_norm and len(vectors):
            norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
            bad = np.nonzero(np.abs(norms - 1.0) > NORM_TOL)[0]
            if len(bad):
                raise ValidationError(f"record {bad[0]} has norm {norms[bad[0]]}, expected 1")
        keys = set(zip(subjects.tolist(), impressions.tolist()))
        if len(keys) != len(vectors):
            raise ValidationError("duplicate (subject_id, impression_id) pairs")
        store = cls(vectors.shape[1])
        store._vectors, store._subjects, store._impressions = vectors, subjects, impressions
        store._keys = keys
        return store

    def add(self, subject_id: int, impression_id: int, vector) -> None:
        v = np.asarray(vector, dtype=np.float32).reshape(-1)
        if v.shape[0] != self.dim:
            raise ShapeError(f"vector has dim {v.shape[0]}, store has dim {self.dim}")
        n = float(np.linalg.norm(v.astype(np.float64)))
        if abs(n - 1.0) > NORM_TOL:
            raise ValidationError(f"vector norm {n} is not 1 +/- {NORM_TOL}")
        key = (int(subject_id), int(impression_id))
        if key in self._keys:
            raise ValidationError(f"duplicate record {key}")
        self._keys.add(key)
        self._pending.append((key[0], key[1], v))

    def _flush(self):
        if self._pending:
            s, i, v = zip(*self._pending)
            self._vectors = np.ascontiguousarray(np.concatenate([self._vectors, np.stack(v)]))
            self._subjects = np.concatenate([self._subjects, np.asarray(s, np.uint64)])
            self._impressions = np.concatenate([self._impressions, np.asarray(i, np.uint32)])
            self._pending = []

    def __len__(self):
        return len(self._subjects) + len(self._pending)

    @property
    def vectors(self) -> np.ndarray:
        self._flush()
        return self._vectors

    @property
    def subjects(self) -> np.ndarray:
        self._flush()
        return self._subjects

    @property
    def impressions(self) -> np.ndarray:
        self._flush()
        return self._impressions

    # -- persistence

    def write(self, path) -> None:
        vec = self.vectors
        rec = np.zeros(len(self), dtype=[("subject", "<u8"), ("impression", "<u4"), ("v", "<f4", (self.dim,))])
        rec["subject"] = self.subjects
        rec["impression"] = self.impressions
        rec["v"] = vec
        with open(path, "wb") as f:
            f.write(STORE_MAGIC + struct.pack("<IIQ", STORE_VERSION, self.dim, len(self)))
            f.write(rec.tobytes())

    @classmethod
    def read(cls, path, expect_dim: int | None = None) -> "EmbeddingStore":
        buf = Path(path).read_bytes()
        if len(buf) < 20 or buf[:4] != STORE_MAGIC:
            raise FormatError(f"{path}: not an embedding store")
        version, dim, count = struct.unpack_from("<IIQ", buf, 4)
        if version != STORE_VERSION:
            raise FormatError(f"{path}: unsupported store version {version}")
        if expect_dim is not None and dim != expect_dim:
            raise FormatError(f"{path}: store dim {dim} != expected {expect_dim}")
        rt = np.dtype([("subject", "<u8"), ("impression", "<u4"), ("v", "<f4", (dim,))])
        if len(buf) - 20 != count * rt.itemsize:
            raise FormatError(
                f"{path}: expected {count} records ({count * rt.itemsize} bytes), found {len(buf) - 20} bytes"
            )
        rec = np.frombuffer(buf, dtype=rt, count=count, offset=20)
        return cls.from_arrays(rec["subject"].copy(), rec["impression"].copy(), rec["v"].copy(), check_norm=False)


@dataclass(frozen=True)
class Match:
    subject_id: int
    impression_id: int
    score: float


def _rank_order(scores: np.ndarray, subjects: np.ndarray, impressions: np.ndarray) -> np.ndarray:
    """Indices sorted by score desc, then subject asc, then impression asc."""
    return np.lexsort((impressions, subjects, -scores.astype(np.float64)))


def _block_topk(block, probe, subjects, impressions, offset, k):
    s = block @ probe
    if k < len(s):
        # keep every row tied with the k-th score so tie-breaking stays exact
        kth = np.partition(s, len(s) - k)[len(s) - k]
        idx = np.nonzero(s >= kth)[0]
    else:
        idx = np.arange(len(s))
    return s[idx], idx + offset


def search(store: EmbeddingStore, probe, top_k: int = 10, threads: int = 1) -> list[Match]:
    """Exact brute-force 1:N search.

    The gallery is scanned in fixed blocks which may be scored on several
    threads; per-block candidates are merged with a total tie-breaking order,
    so the result is independent of ``threads``.
    """
    if len(store) == 0:
        raise EmptyResultError("search against an empty store")
    probe = np.asarray(probe, dtype=np.float32).reshape(-1)
    if probe.shape[0] != store.dim:
        raise ShapeError(f"probe dim {probe.shape[0]} != store dim {store.dim}")
    if top_k <= 0:
        raise ConfigError("top_k must be positive")
    vec, subj, imp = store.vectors, store.subjects, store.impressions
    n = len(vec)
    k = min(top_k, n)
    starts = range(0, n, BLOCK_ROWS)

    def job(a):
        return _block_topk(vec[a : a + BLOCK_ROWS], probe, subj, imp, a, k)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(job, starts))
    else:
        parts = [job(a) for a in starts]
    sc = np.concatenate([p[0] for p in parts])
    ix = np.concatenate([p[1] for p in parts])
    order = _rank_order(sc, subj[ix], imp[ix])[:k]
    return [Match(int(subj[ix[o]]), int(imp[ix[o]]), float(sc[o])) for o in order]


def score_matrix(store: EmbeddingStore, probes: np.ndarray) -> np.ndarray:
    """All probe-vs-gallery scores, shape ``(num_probes, len(store))``."""
    probes = np.asarray(probes, dtype=np.float32)
    if probes.ndim != 2 or probes.shape[1] != store.dim:
        raise ShapeError(f"probes must be (n, {store.dim}), got {probes.shape}")
    return probes @ store.vectors.T


def naive_search(store: EmbeddingStore, probe, top_k: int) -> list[Match]:
    """Reference double loop used to cross-check :func:`search`."""
    vec, subj, imp = store.vectors, store.subjects, store.impressions
    p = [float(x) for x in np.asarray(probe, dtype=np.float32)]
    rows = []
    for i in range(len(vec)):
        s = 0.0
        for a, b in zip(vec[i].tolist(), p):
            s += a * b
        rows.append((-s, int(subj[i]), int(imp[i]), s))
    rows.sort()
    return [Match(r[1], r[2], r[3]) for r in rows[:top_k]]


def _cpu_description() -> str:
    name = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if line.startswith("model name"):
                    name = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return f"{name}; {os.cpu_count()} logical CPUs; numpy {np.__version__}"


def bench_throughput(dim: int = 384, gallery_size: int = 1_000_000, repetitions: int = 5,
                     top_k: int = 10, threads: int | None = None, seed: int = 0) -> dict:
    """Probe-vs-gallery comparisons per second, single- and multi-threaded."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((gallery_size, dim), dtype=np.float32)
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    store = EmbeddingStore.from_arrays(
        np.arange(gallery_size, dtype=np.uint64), np.zeros(gallery_size, np.uint32), g, check_norm=False
    )
    probes = g[rng.integers(0, gallery_size, size=repetitions)]
    threads = threads or os.cpu_count() or 1

    def run(nt):
        times = []
        for p in probes:
            t0 = time.perf_counter()
            res = search(store, p, top_k, threads=nt)
            times.append(time.perf_counter() - t0)
            assert res[0].score > 0.999
        rates = [gallery_size / t for t in times]
        return {"threads": nt, "mean_cps": float(np.mean(rates)), "best_cps": float(np.max(rates)),
                "seconds": times}

    single = run(1)
    multi = run(threads)
    smoke = EmbeddingStore.from_arrays([0, 1, 2], [0, 0, 0], np.ones((3, 1), np.float32))
    smoke_ok = all(m.score == 1.0 for m in search(smoke, np.ones(1, np.float32), 3))
    return {
        "dim": dim,
        "gallery_size": gallery_size,
        "repetitions": repetitions,
        "top_k": top_k,
        "single_thread": single,
        "multi_thread": multi,
        "reference_cps": 2.5e6,
        "meets_reference": multi["mean_cps"] >= 2.5e6,
        "hardware": _cpu_description(),
        "smoke_dim1_all_ones": smoke_ok,
    }

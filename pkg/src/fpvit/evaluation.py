"""Authentication and search evaluation protocols.

Covers genuine/imposter pair enumeration, TAR@FAR, closed-set CMC, open-set
FPIR/FNIR, gallery construction and identity-disjoint k-fold splits.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ProtocolError
from .matcher import score_matrix


@dataclass(frozen=True)
class Protocol:
    folds: int = 5
    enroll_impressions_per_finger: int = 2
    distractor_identities: int = 0
    unmated_fraction: float = 0.5

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.enroll_impressions_per_finger < 1:
            raise ConfigError("enroll_impressions_per_finger must be >= 1")
        if not 0.0 < self.unmated_fraction < 1.0:
            raise ConfigError("unmated_fraction must lie in (0, 1)")


@dataclass
class ScoreSet:
    genuine: np.ndarray
    imposter: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).reshape(-1)
        self.imposter = np.asarray(self.imposter, dtype=np.float64).reshape(-1)


# --------------------------------------------------------------------- pairs


def pair_counts(impressions_per_finger: Sequence[int]) -> tuple[int, int]:
    """(genuine, imposter) pair counts for the all-pairs protocol."""
    n = [int(v) for v in impressions_per_finger]
    total = sum(n)
    genuine = sum(v * (v - 1) // 2 for v in n)
    return genuine, total * (total - 1) // 2 - genuine


def enumerate_pairs(labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``(i, j), i < j`` split into genuine and imposter pairs.

    Every unordered pair of impressions appears exactly once.
    """
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ProtocolError("need at least two fingers to form imposter pairs")
    counts = np.unique(labels, return_counts=True)[1]
    if counts.max() < 2:
        raise ProtocolError("need at least one finger with two impressions")
    i, j = np.triu_indices(len(labels), k=1)
    same = labels[i] == labels[j]
    return np.stack([i[same], j[same]], 1), np.stack([i[~same], j[~same]], 1)


def authentication_scores(embeddings: np.ndarray, labels: Sequence[int]) -> ScoreSet:
    """All-pairs genuine/imposter cosine scores over a labelled embedding set."""
    e = np.asarray(embeddings, dtype=np.float32)
    gen, imp = enumerate_pairs(labels)
    s = e @ e.T
    return ScoreSet(s[gen[:, 0], gen[:, 1]], s[imp[:, 0], imp[:, 1]])


# ------------------------------------------------------------------- TAR@FAR


@dataclass(frozen=True)
class TarPoint:
    far_target: float
    tar: float
    threshold: float
    far: float
    resolution_warning: bool = False


def tar_at_far(scores: ScoreSet, far_targets: Sequence[float]) -> list[TarPoint]:
    """True accept rate at each false accept rate target.

    The threshold is the smallest value whose imposter accept fraction
    (``score >= threshold``) does not exceed the target.  That is one ulp
    above the ``(k+1)``-th highest imposter score, ``k = floor(target * n)``,
    so tied imposters are rejected together.
    """
    gen, imp = scores.genuine, scores.imposter
    if len(gen) == 0 or len(imp) == 0:
        raise ProtocolError("TAR@FAR needs non-empty genuine and imposter scores")
    imp_desc = np.sort(imp)[::-1]
    gen_sorted = np.sort(gen)
    n = len(imp_desc)
    out = []
    for t in far_targets:
        if not 0.0 < t < 1.0:
            raise ConfigError(f"FAR target must lie in (0, 1), got {t}")
        # floor with a guard against 0.1 * 10 = 0.9999...
        k = min(int(math.floor(t * n + 1e-9)), n - 1)
        warn = k == 0
        thr = float(np.nextafter(imp_desc[k], np.inf))
        if warn:
            warnings.warn(
                f"FAR target {t} is below the resolution 1/{n} of the imposter set", stacklevel=2
            )
        far = float(np.count_nonzero(imp_desc >= thr)) / n
        tar = float(len(gen_sorted) - np.searchsorted(gen_sorted, thr, side="left")) / len(gen_sorted)
        out.append(TarPoint(float(t), tar, thr, far, warn))
    return out


# ----------------------------------------------------------------- search


def subject_scores(scores: np.ndarray, gallery_subjects: np.ndarray):
    """Collapse a ``(probes, gallery)`` score matrix to per-subject maxima.

    Returns ``(subjects, (probes, subjects) matrix)`` with subjects sorted.
    """
    gallery_subjects = np.asarray(gallery_subjects)
    subjects, inv = np.unique(gallery_subjects, return_inverse=True)
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    out = np.full((scores.shape[0], len(subjects)), -np.inf)
    for col in range(len(subjects)):
        out[:, col] = scores[:, inv == col].max(axis=1)
    return subjects, out


def _ranked_subjects(subj_scores: np.ndarray) -> np.ndarray:
    """Column order per probe: score desc, subject asc (columns are subject-sorted)."""
    # stable sort on -score keeps ascending-subject order within ties
    return np.argsort(-subj_scores, axis=1, kind="stable")


@dataclass(frozen=True)
class CmcPoint:
    rank: int
    hit_rate: float


def cmc_from_scores(scores, gallery_subjects, probe_subjects, max_rank: int | None = None) -> list[CmcPoint]:
    """Closed-set CMC from a probe-by-gallery score matrix."""
    subjects, ss = subject_scores(scores, gallery_subjects)
    probe_subjects = np.asarray(probe_subjects)
    pos = np.searchsorted(subjects, probe_subjects)
    pos = np.minimum(pos, len(subjects) - 1)
    missing = subjects[pos] != probe_subjects
    if missing.any():
        raise ProtocolError(
            f"closed-set violation: probe subject {probe_subjects[missing][0]} has no gallery enrollment"
        )
    order = _ranked_subjects(ss)
    ranks = np.argmax(order == pos[:, None], axis=1) + 1
    max_rank = len(subjects) if max_rank is None else min(max_rank, len(subjects))
    return [CmcPoint(r, float(np.mean(ranks <= r))) for r in range(1, max_rank + 1)]


def closed_set_search_eval(gallery, probes: np.ndarray, probe_subjects, max_rank: int | None = None):
    """CMC for ``probes`` searched against an :class:`EmbeddingStore` gallery."""
    return cmc_from_scores(score_matrix(gallery, probes), gallery.subjects, probe_subjects, max_rank)


@dataclass(frozen=True)
class DetPoint:
    threshold: float
    fpir: float
    fnir: float


def det_from_scores(mated_scores, mated_subjects, unmated_scores, unmated_subjects,
                    gallery_subjects, thresholds: Sequence[float]) -> list[DetPoint]:
    """Open-set FPIR/FNIR at each threshold from probe-by-gallery score matrices.

    A mated probe is a hit at threshold ``t`` only when its rank-1 subject is
    the true one and scores at least ``t``.
    """
    gallery_subjects = np.asarray(gallery_subjects)
    present = set(gallery_subjects.tolist())
    for s in np.asarray(unmated_subjects).tolist():
        if s in present:
            raise ProtocolError(f"unmated probe subject {s} is enrolled in the gallery")
    mated_subjects = np.asarray(mated_subjects)
    for s in mated_subjects.tolist():
        if s not in present:
            raise ProtocolError(f"mated probe subject {s} has no gallery enrollment")
    subjects, ms = subject_scores(mated_scores, gallery_subjects) if len(mated_subjects) else (None, None)
    out_m_top, out_m_ok = np.zeros(0), np.zeros(0, bool)
    if ms is not None:
        top = _ranked_subjects(ms)[:, 0]
        out_m_top = ms[np.arange(len(ms)), top]
        out_m_ok = subjects[top] == mated_subjects
    if len(np.asarray(unmated_subjects)):
        _, us = subject_scores(unmated_scores, gallery_subjects)
        u_top = us.max(axis=1)
    else:
        u_top = np.zeros(0)
    res = []
    for t in thresholds:
        fpir = float(np.mean(u_top >= t)) if len(u_top) else 0.0
        fnir = float(np.mean(~(out_m_ok & (out_m_top >= t)))) if len(out_m_top) else 0.0
        res.append(DetPoint(float(t), fpir, fnir))
    return res


def open_set_search_eval(gallery, mated_probes, mated_subjects, unmated_probes, unmated_subjects,
                         thresholds: Sequence[float]) -> list[DetPoint]:
    d = gallery.dim
    mp = np.asarray(mated_probes, np.float32).reshape(-1, d)
    up = np.asarray(unmated_probes, np.float32).reshape(-1, d)
    return det_from_scores(
        score_matrix(gallery, mp), mated_subjects, score_matrix(gallery, up), unmated_subjects,
        gallery.subjects, thresholds,
    )


# ------------------------------------------------------------ gallery design


@dataclass
class Galleries:
    """Record keys are ``(subject_id, impression_id)`` tuples."""

    closed_gallery: list
    probes: list
    open_gallery: list
    mated_probes: list
    unmated_probes: list
    unmated_subjects: list


def build_galleries(test_identities: Mapping[int, Sequence[int]],
                    distractors: Mapping[int, Sequence[int]],
                    protocol: Protocol = Protocol(), seed: int = 0) -> Galleries:
    """Closed- and open-set search galleries.

    Every distractor and test finger enrols its first
    ``enroll_impressions_per_finger`` impressions; the remaining test
    impressions are probes.  The open gallery drops the enrollments of a
    seeded ``unmated_fraction`` of the test subjects, whose probes become
    unmated.
    """
    k = protocol.enroll_impressions_per_finger
    if set(test_identities) & set(distractors):
        raise ProtocolError("test and distractor identities overlap")
    gallery, probes = [], []
    for s in sorted(distractors):
        imps = list(distractors[s])
        if len(imps) < k:
            raise ProtocolError(f"distractor {s} has {len(imps)} impressions, needs {k}")
        gallery += [(s, i) for i in imps[:k]]
    test_subjects = sorted(test_identities)
    for s in test_subjects:
        imps = list(test_identities[s])
        if len(imps) < k + 1:
            raise ProtocolError(f"test identity {s} has {len(imps)} impressions, needs {k + 1}")
        gallery += [(s, i) for i in imps[:k]]
        probes += [(s, i) for i in imps[k:]]
    rng = np.random.default_rng(seed)
    n_unmated = int(round(protocol.unmated_fraction * len(test_subjects)))
    unmated = sorted(rng.permutation(test_subjects)[:n_unmated].tolist()) if test_subjects else []
    um = set(unmated)
    return Galleries(
        closed_gallery=gallery,
        probes=probes,
        open_gallery=[r for r in gallery if r[0] not in um],
        mated_probes=[r for r in probes if r[0] not in um],
        unmated_probes=[r for r in probes if r[0] in um],
        unmated_subjects=unmated,
    )


@dataclass(frozen=True)
class Fold:
    train: list
    val: list
    test: list


def kfold_split(identities: Sequence[int], folds: int = 5, seed: int = 0,
                val_fraction: float = 0.125) -> list[Fold]:
    """Identity-disjoint k-fold partitions.

    Test folds tile the shuffled identities; validation identities are a
    ``val_fraction`` slice of each fold's non-test identities.
    """
    ids = list(identities)
    if len(set(ids)) != len(ids):
        raise ProtocolError("identities must be unique")
    if folds < 2:
        raise ProtocolError("folds must be >= 2")
    if folds > len(ids):
        raise ProtocolError(f"{folds} folds requested for only {len(ids)} identities")
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError("val_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    chunks = np.array_split(np.arange(len(perm)), folds)
    out = []
    for f, idx in enumerate(chunks):
        test = [perm[i] for i in idx]
        rest = [perm[i] for c, ch in enumerate(chunks) if c != f for i in ch]
        n_val = int(round(val_fraction * len(rest)))
        out.append(Fold(train=rest[n_val:], val=rest[:n_val], test=test))
    return out


def run_folds(fn: Callable[[int], dict], n_folds: int, threads: int = 1) -> list[dict]:
    """Evaluate ``fn(fold_index)`` for every fold; results ordered by fold."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, range(n_folds)))
    return [fn(i) for i in range(n_folds)]


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1 denominator)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


# --------------------------------------------------------------------- report


@dataclass
class EvalReport:
    tar_at_far: list = field(default_factory=list)
    cmc: list = field(default_factory=list)
    det_open: list = field(default_factory=list)
    per_fold: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def plain(x):
            return asdict(x) if hasattr(x, "__dataclass_fields__") else x

        return {
            "tar_at_far": [plain(p) for p in self.tar_at_far],
            "cmc": [plain(p) for p in self.cmc],
            "det_open": [plain(p) for p in self.det_open],
            "per_fold": self.per_fold,
            "summary": self.summary,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def write_cmc_csv(points: Sequence[CmcPoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["rank", "hit_rate"])
        w.writerows((p.rank, repr(p.hit_rate)) for p in points)


def write_det_csv(points: Sequence[DetPoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "fpir", "fnir"])
        w.writerows((repr(p.threshold), repr(p.fpir), repr(p.fnir)) for p in points)


def write_tar_csv(points: Sequence[TarPoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["far", "tar"])
        w.writerows((repr(p.far_target), repr(p.tar)) for p in points)

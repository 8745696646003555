"""Slow, obviously-correct reference implementations of the metrics."""

import numpy as np

from fpvit.evaluation import CmcPoint, DetPoint


def brute_tar(genuine, imposter, target):
    """Scan candidate thresholds upward and keep the first admissible one."""
    cands = sorted(set(float(v) for v in imposter) | set(float(np.nextafter(v, np.inf)) for v in imposter))
    n = len(imposter)
    for t in cands:
        if sum(1 for v in imposter if v >= t) / n <= target:
            return t, sum(1 for v in genuine if v >= t) / len(genuine)
    raise AssertionError("no admissible threshold")


def _subject_best(row, gallery):
    best = {}
    for s, v in zip(gallery, row):
        s = int(s)
        best[s] = max(best.get(s, -np.inf), float(v))
    return best


def _rank_of(best, truth):
    mine = best[truth]
    return 1 + sum(1 for s, v in best.items() if v > mine or (v == mine and s < truth))


def brute_cmc(scores, gallery, probes, max_rank):
    ranks = [_rank_of(_subject_best(row, gallery), int(p)) for row, p in zip(scores, probes)]
    return [CmcPoint(r, float(np.mean([k <= r for k in ranks]))) for r in range(1, max_rank + 1)]


def _top1(best):
    return min(best.items(), key=lambda kv: (-kv[1], kv[0]))


def brute_det(mated, mated_subjects, unmated, unmated_subjects, gallery, thresholds):
    out = []
    for t in thresholds:
        fp = [_top1(_subject_best(row, gallery))[1] >= t for row in unmated]
        fn = []
        for row, s in zip(mated, mated_subjects):
            subj, v = _top1(_subject_best(row, gallery))
            fn.append(not (subj == int(s) and v >= t))
        out.append(DetPoint(float(t), float(np.mean(fp)), float(np.mean(fn))))
    return out


def counts_reproducing_split(total, genuine, cap=15):
    """Greedy impression-count vector with the given image and genuine-pair totals."""
    out = []
    g = genuine
    while g:
        n = max(k for k in range(2, cap + 1) if k * (k - 1) // 2 <= g)
        out.append(n)
        g -= n * (n - 1) // 2
    out += [1] * (total - sum(out))
    assert sum(out) == total
    return out

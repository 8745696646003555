"""Brute-force search and the three biometric reports on toy embeddings.

Random clusters stand in for trained embeddings so the script runs in a
couple of seconds.

    python3 demos/matcher_metrics.py
"""

import numpy as np

from fpvit.evaluation import ScoreSet, authentication_scores, cmc_from_scores, det_from_scores, tar_at_far
from fpvit.matcher import EmbeddingStore, fuse, score_matrix, search

rng = np.random.default_rng(0)
subjects, per = 40, 4
centres = rng.standard_normal((subjects, 32))
vec = np.repeat(centres, per, axis=0) + 0.8 * rng.standard_normal((subjects * per, 32))
vec = (vec / np.linalg.norm(vec, axis=1, keepdims=True)).astype(np.float32)
subj = np.repeat(np.arange(subjects), per)
imp = np.tile(np.arange(per), subjects)

# authentication: every pair of impressions
scores = authentication_scores(vec, subj)
print(f"{len(scores.genuine)} genuine / {len(scores.imposter)} imposter pairs")
for p in tar_at_far(scores, [0.001, 0.01, 0.1]):
    print(f"  TAR@{p.far_target:g}FAR = {p.tar:.3f}  (threshold {p.threshold:.4f})")

# closed set: impressions 0 and 1 enrolled, 2 and 3 searched
enrol = imp < 2
gallery = EmbeddingStore.from_arrays(subj[enrol], imp[enrol], vec[enrol])
top = search(gallery, vec[~enrol][0], 3)
print("top-3 for the first probe:", [(m.subject_id, round(m.score, 3)) for m in top])
cmc = cmc_from_scores(score_matrix(gallery, vec[~enrol]), subj[enrol], subj[~enrol], max_rank=5)
print("CMC ranks 1..5:", [round(c.hit_rate, 3) for c in cmc])

# open set: the last 10 subjects leave the gallery and probe as strangers
known = enrol & (subj < 30)
gallery = EmbeddingStore.from_arrays(subj[known], imp[known], vec[known])
mated = ~enrol & (subj < 30)
unmated = ~enrol & (subj >= 30)
det = det_from_scores(score_matrix(gallery, vec[mated]), subj[mated],
                      score_matrix(gallery, vec[unmated]), subj[unmated], gallery.subjects, [0.2, 0.4, 0.6])
for d in det:
    print(f"  threshold {d.threshold:.1f}: FPIR {d.fpir:.3f}  FNIR {d.fnir:.3f}")

print("fused score of 0.8 and 0.6:", round(fuse(0.8, 0.6), 3))

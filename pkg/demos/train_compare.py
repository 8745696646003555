"""Train an image-only and an image+minutiae model on a small synthetic corpus.

The desk preset in ``fpvit.pipeline`` does the same thing with more
identities and three seeds; this cut-down run finishes in under a minute and is noisy
enough that the ordering can flip between seeds.

    python3 demos/train_compare.py
"""

import tempfile

from fpvit.pipeline import (
    DESK_MODEL,
    desk_schedule,
    embed_corpus,
    evaluate_similarity,
    fused_similarity,
    load_corpus,
    similarity,
    train_on,
)
from fpvit.synthdata import generate_dataset

with tempfile.TemporaryDirectory() as root:
    generate_dataset(30, 8, 5, root)
    corpus = load_corpus(root)

train, test = corpus.subset(range(20)), corpus.subset(range(20, 30))
sims = {}
for mode in ("vanilla", "concat"):
    params, cfg, log = train_on(train, mode, dict(DESK_MODEL, seed=0), desk_schedule(0, epochs=15))
    print(f"{mode:>8}: final loss {log.epochs[-1]['loss']:.3f}")
    sims[mode] = similarity(embed_corpus(params, cfg, test, mode))
sims["fused"] = fused_similarity(sims["concat"], sims["vanilla"])

for name, S in sims.items():
    r = evaluate_similarity(S, test.subjects, test.impressions, (0.01,))
    print(f"{name:>8}: rank-1 {r['rank1']:.3f}  TAR@1%FAR {r['tar_at_far'][0].tar:.3f}")

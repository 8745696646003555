"""Glue between the corpus on disk, tokenisation, training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evaluation as ev
from .matcher import fuse_scores
from .minutiae import build_minutiae_map, read_minutiae_file, read_pgm, MinutiaeMap, MinutiaeSet
from .synthdata import read_manifest
from .tokenizer import preprocess, tokenize
from .vit import ModelConfig, Schedule, embed_batches, train

MODES = ("vanilla", "concat")


@dataclass
class Corpus:
    images: list  # uint8 arrays
    minutiae: list  # MinutiaeSet
    subjects: np.ndarray
    impressions: np.ndarray

    def __len__(self):
        return len(self.images)

    def subset(self, subjects: Sequence[int]) -> "Corpus":
        keep = np.isin(self.subjects, np.asarray(list(subjects)))
        idx = np.nonzero(keep)[0]
        return Corpus(
            [self.images[i] for i in idx], [self.minutiae[i] for i in idx],
            self.subjects[idx], self.impressions[idx],
        )


def load_corpus(root) -> Corpus:
    root = Path(root)
    rows = read_manifest(root / "manifest.csv")
    rows.sort(key=lambda r: (r["identity"], r["impression"]))
    return Corpus(
        [read_pgm(root / r["image_path"]) for r in rows],
        [read_minutiae_file(root / r["minutiae_path"]) for r in rows],
        np.array([r["identity"] for r in rows], dtype=np.int64),
        np.array([r["impression"] for r in rows], dtype=np.int64),
    )


def default_sigma(side: int) -> float:
    """Hot-spot spread scaled from 3 px at 224 px, floored at 0.75 px."""
    return max(0.75, 3.0 * side / 224.0)


def channels_for(mode: str) -> int:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return 2 if mode == "concat" else 0


def make_tokens(image: np.ndarray, mset: MinutiaeSet, mode: str, side: int, patch: int,
                sigma: float | None = None, zero_map: bool = False) -> np.ndarray:
    img = preprocess(image, side)
    ch = channels_for(mode)
    if ch == 0:
        mmap = None
    elif zero_map:
        mmap = MinutiaeMap.empty(side, side, ch)
    else:
        mmap = build_minutiae_map(mset.scaled(side, side), ch, sigma or default_sigma(side))
    return tokenize(img, mmap, patch).data


def corpus_tokens(corpus: Corpus, mode: str, side: int, patch: int, sigma: float | None = None) -> np.ndarray:
    return np.stack([make_tokens(i, m, mode, side, patch, sigma) for i, m in zip(corpus.images, corpus.minutiae)])


def label_map(subjects: np.ndarray):
    classes = np.unique(subjects)
    return classes, np.searchsorted(classes, subjects)


def train_on(corpus: Corpus, mode: str, cfg_kw: dict, sched: Schedule, val: Corpus | None = None,
             sigma: float | None = None, init=None, log_fn=None):
    side, patch = cfg_kw["image_side"], cfg_kw["patch_size"]
    classes, y = label_map(corpus.subjects)
    cfg = ModelConfig.create(channels_for(mode), num_classes=len(classes), **cfg_kw)
    x = corpus_tokens(corpus, mode, side, patch, sigma)
    v = None
    if val is not None and len(val):
        v = (corpus_tokens(val, mode, side, patch, sigma), val.subjects)
    params, log = train(cfg, x, y, sched, init=init, val=v, log_fn=log_fn)
    return params, cfg, log


def embed_corpus(params, cfg: ModelConfig, corpus: Corpus, mode: str, sigma: float | None = None) -> np.ndarray:
    x = corpus_tokens(corpus, mode, cfg.image_side, cfg.patch_size, sigma)
    return embed_batches(params, x, cfg)


# ----------------------------------------------------------------- evaluation


def similarity(emb: np.ndarray) -> np.ndarray:
    e = np.asarray(emb, dtype=np.float32)
    return e @ e.T


def evaluate_similarity(S: np.ndarray, subjects: np.ndarray, impressions: np.ndarray,
                        far_targets=(0.001, 0.01, 0.1), enroll: int = 2, max_rank: int | None = None) -> dict:
    """Authentication (all pairs) and closed-set search from a full similarity matrix."""
    S = np.asarray(S, dtype=np.float64)
    gen, imp = ev.enumerate_pairs(subjects)
    scores = ev.ScoreSet(S[gen[:, 0], gen[:, 1]], S[imp[:, 0], imp[:, 1]])
    tar = ev.tar_at_far(scores, far_targets)
    # enrol the `enroll` lowest impression indices of each subject
    order = np.lexsort((impressions, subjects))
    rank_in_subject = np.zeros(len(subjects), dtype=int)
    prev, k = None, 0
    for i in order:
        k = k + 1 if subjects[i] == prev else 0
        prev = subjects[i]
        rank_in_subject[i] = k
    gal = np.nonzero(rank_in_subject < enroll)[0]
    prb = np.nonzero(rank_in_subject >= enroll)[0]
    cmc = ev.cmc_from_scores(S[np.ix_(prb, gal)], subjects[gal], subjects[prb], max_rank)
    return {
        "tar_at_far": tar,
        "cmc": cmc,
        "rank1": cmc[0].hit_rate,
        "genuine_pairs": len(gen),
        "imposter_pairs": len(imp),
        "num_probes": len(prb),
        "gallery_size": len(gal),
    }


def fused_similarity(S1: np.ndarray, S2: np.ndarray, w1: float = 0.7, w2: float = 0.3,
                     normalize: bool = False) -> np.ndarray:
    return fuse_scores(S1, S2, w1, w2, normalize=normalize)


# ------------------------------------------------------------ desk-scale run

# seeded 50/10/20-identity corpus and the fixed schedule used for the
# directional vanilla / concat / fused comparison
DESK_CORPUS = {"identities": 80, "impressions": 10, "seed": 7}
DESK_SPLIT = {"train": range(0, 50), "val": range(50, 60), "test": range(60, 80)}
DESK_MODEL = {"image_side": 64, "patch_size": 8, "embed_width": 64, "depth": 2, "heads": 4,
              "mlp_ratio": 4.0, "embedding_dim": 32}
DESK_EPOCHS = 40
DESK_FUSION = (0.7, 0.3)  # (concat, vanilla)


def desk_schedule(seed: int, epochs: int = DESK_EPOCHS) -> Schedule:
    return Schedule(epochs=epochs, batch_size=32, peak_lr=1e-3, warmup_steps=30, weight_decay=0.05, seed=seed)


def directional_run(corpus: Corpus, seed: int, far: float = 0.01, epochs: int = DESK_EPOCHS,
                    log_fn=None) -> dict:
    """Train vanilla and concat models on the desk split and score the test identities.

    Returns rank-1 and TAR at ``far`` for vanilla, concat and their
    (0.7 concat, 0.3 vanilla) score fusion.
    """
    train_set = corpus.subset(DESK_SPLIT["train"])
    val_set = corpus.subset(DESK_SPLIT["val"])
    test_set = corpus.subset(DESK_SPLIT["test"])
    kw = dict(DESK_MODEL, seed=seed)
    sims, out = {}, {}
    for mode in ("vanilla", "concat"):
        params, cfg, _ = train_on(train_set, mode, kw, desk_schedule(seed, epochs), val=val_set, log_fn=log_fn)
        sims[mode] = similarity(embed_corpus(params, cfg, test_set, mode))
    sims["fused"] = fused_similarity(sims["concat"], sims["vanilla"], *DESK_FUSION)
    for name, S in sims.items():
        r = evaluate_similarity(S, test_set.subjects, test_set.impressions, (far,))
        out[name] = {"rank1": r["rank1"], "tar": r["tar_at_far"][0].tar}
    return out

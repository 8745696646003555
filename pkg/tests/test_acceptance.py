"""Acceptance checks, one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (criteria 7 and 8 take
several minutes).
"""

import json
import time

import numpy as np
import pytest

from fpvit.cli import run
from fpvit.evaluation import (
    Protocol,
    ScoreSet,
    build_galleries,
    cmc_from_scores,
    det_from_scores,
    pair_counts,
    tar_at_far,
)
from fpvit.matcher import EmbeddingStore, bench_throughput, naive_search, search
from fpvit.minutiae import MinutiaeSet, build_minutiae_map, orientation_channel, recover_minutiae
from fpvit.pipeline import DESK_CORPUS, directional_run, load_corpus
from fpvit.synthdata import generate_dataset
from fpvit.tokenizer import tokenize
from fpvit.vit import ModelConfig, cast_params, forward, init_params, load_checkpoint, save_checkpoint

from .helpers import finite_difference_check, gradient_verdict, toy_tokens
from .oracles import brute_cmc, brute_det, brute_tar, counts_reproducing_split


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line past pytest's capture, then assert."""

    def report(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))
        assert ok, f"criterion {number} failed: {detail}"

    return report


def test_criterion_1_token_math(verdict):
    t0 = time.perf_counter()
    img = np.random.default_rng(0).random((224, 224))
    mmap = build_minutiae_map(MinutiaeSet(224, 224), 2, 3.0)
    a = tokenize(img, mmap, 16).data.shape
    b = tokenize(img, None, 16).data.shape
    dt = time.perf_counter() - t0
    verdict(1, "token math", a == (196, 768) and b == (196, 256) and dt < 1.0,
            f"c=2 {a}, c=0 {b}, {dt:.3f}s")


def test_criterion_2_minutiae_map_invertibility(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    exact = 0
    for _ in range(100):
        pts = []
        while len(pts) < int(rng.integers(5, 40)):
            x, y = (float(v) for v in rng.integers(0, 224, 2))
            if all((x - p[0]) ** 2 + (y - p[1]) ** 2 > 13.0**2 for p in pts):
                pts.append((x, y, float(rng.uniform(0, 360))))
        s = MinutiaeSet.from_array(224, 224, pts)
        rec = recover_minutiae(build_minutiae_map(s, 2, 3.0), 0.5)
        want = sorted((p.x, p.y, orientation_channel(p.theta)) for p in s)
        got = sorted((p.x, p.y, orientation_channel(p.theta)) for p in rec)
        exact += want == got
    bins = [orientation_channel(t, 2) for t in (0.0, 179.99, 180.0, 359.99)]
    dt = time.perf_counter() - t0
    ok = exact == 100 and bins == [0, 0, 1, 1] and dt < 5.0
    verdict(2, "minutiae-map invertibility", ok, f"{exact}/100 exact, boundary bins {bins}, {dt:.2f}s")


def test_criterion_3_gradient_correctness(verdict):
    t0 = time.perf_counter()
    cfg = ModelConfig()  # tiny config
    stats = finite_difference_check(cfg, coords_per_tensor=200, seed=0)
    dt = time.perf_counter() - t0
    ok, top, worst = gradient_verdict(stats)
    ok = ok and "input_pixels" in stats and dt < 120
    verdict(3, "gradient correctness", ok,
            f"max rel err {worst:.2e} at {top} over {len(stats)} tensors incl. input pixels, "
            f"{sum(st.coords for st in stats.values())} coordinates; {dt:.1f}s")


def test_criterion_4_architectural_invariants(verdict, tmp_path):
    cfg = ModelConfig()
    p = init_params(cfg)
    x = toy_tokens(cfg, 3)
    _, _, cache = forward(p, x, cfg)
    row_err = max(float(np.abs(P.sum(-1) - 1).max()) for P in cache["attn"])

    p64 = cast_params(p, np.float64)
    p64["pos_embed"][:] = 0.0
    x64 = x[0].astype(np.float64)
    perm = np.random.default_rng(1).permutation(cfg.num_tokens)
    perm_err = float(np.abs(forward(p64, x64, cfg)[0] - forward(p64, x64[perm], cfg)[0]).max())

    save_checkpoint(tmp_path / "m.fpvt", p, cfg)
    q, cfg2, _ = load_checkpoint(tmp_path / "m.fpvt")
    same = forward(p, x, cfg)[0].tobytes() == forward(q, x, cfg2)[0].tobytes()

    ok = row_err <= 1e-6 and perm_err <= 1e-5 and same
    verdict(4, "architectural invariants", ok,
            f"row-sum err {row_err:.1e}, permutation err {perm_err:.1e}, checkpoint bit-identical {same}")


def test_criterion_5_metric_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    tar_ok = cmc_ok = det_ok = 0
    for _ in range(20):
        imp = rng.integers(-5, 6, int(rng.integers(20, 80))) / 5.0
        gen = rng.integers(-5, 6, int(rng.integers(5, 20))) / 5.0
        pts = tar_at_far(ScoreSet(gen, imp), [0.05, 0.1, 0.25])
        tar_ok += all((pt.threshold, pt.tar) == brute_tar(gen, imp, pt.far_target) for pt in pts)

        n_sub = int(rng.integers(2, 8))
        gal = np.concatenate([np.arange(n_sub), rng.integers(0, n_sub, int(rng.integers(0, 6)))])
        probes = rng.integers(0, n_sub, int(rng.integers(1, 8)))
        scores = rng.integers(0, 4, (len(probes), len(gal))) / 4.0
        cmc_ok += cmc_from_scores(scores, gal, probes) == brute_cmc(scores, gal, probes, n_sub)

        gal2 = np.repeat(np.arange(n_sub), 2)
        ms = rng.integers(-4, 5, (5, len(gal2))) / 4.0
        us = rng.integers(-4, 5, (5, len(gal2))) / 4.0
        m_sub, u_sub = rng.integers(0, n_sub, 5), 100 + np.arange(5)
        th = [-2.0, -0.25, 0.0, 0.5, 2.0]
        det_ok += det_from_scores(ms, m_sub, us, u_sub, gal2, th) == brute_det(ms, m_sub, us, u_sub, gal2, th)

    part_ok = 0
    for _ in range(49):
        n = rng.integers(1, 16, int(rng.integers(2, 40)))
        g, i = pair_counts(n)
        part_ok += g + i == int(n.sum()) * (int(n.sum()) - 1) // 2
    split = pair_counts(counts_reproducing_split(2548, 15143))
    part_ok += split == (15_143, 3_229_735)
    dt = time.perf_counter() - t0
    ok = (tar_ok, cmc_ok, det_ok, part_ok) == (20, 20, 20, 50) and dt < 30
    verdict(5, "metric oracles", ok,
            f"TAR {tar_ok}/20, CMC {cmc_ok}/20, DET {det_ok}/20, partition {part_ok}/50, split {split}, {dt:.1f}s")


def test_criterion_6_gallery_arithmetic(verdict):
    full = build_galleries({s: [0, 1, 2] for s in range(200)}, {10_000 + s: [0, 1] for s in range(3499)},
                            Protocol(), seed=0)
    toy = build_galleries({s: list(range(12)) for s in range(4)}, {100 + s: list(range(5)) for s in range(10)},
                          Protocol(), seed=0)
    got = (len(full.closed_gallery), len(full.open_gallery), len(full.unmated_subjects),
           len(toy.closed_gallery), len(toy.probes), len(toy.open_gallery))
    verdict(6, "gallery arithmetic", got == (7398, 7198, 100, 28, 40, 24),
            "closed/open/unmated {} {} {}; toy {} {} {}".format(*got))


@pytest.mark.slow
def test_criterion_7_directional_replication(verdict, tmp_path_factory):
    t0 = time.perf_counter()
    root = tmp_path_factory.mktemp("desk")
    generate_dataset(DESK_CORPUS["identities"], DESK_CORPUS["impressions"], DESK_CORPUS["seed"], root)
    corpus = load_corpus(root)
    runs = [directional_run(corpus, seed) for seed in (0, 1, 2)]
    med = {m: {k: float(np.median([r[m][k] for r in runs])) for k in ("rank1", "tar")}
           for m in ("vanilla", "concat", "fused")}
    dt = time.perf_counter() - t0
    checks = []
    for k in ("rank1", "tar"):
        checks.append(med["concat"][k] >= med["vanilla"][k])
        checks.append(med["fused"][k] >= max(med["vanilla"][k], med["concat"][k]) - 0.005)
    ok = all(checks) and dt <= 20 * 60
    snap = json.dumps({"median": med, "per_seed": runs, "seconds": round(dt, 1)})
    verdict(7, "directional replication", ok,
            "median rank-1 v/c/f {:.3f}/{:.3f}/{:.3f}, TAR@1%FAR v/c/f {:.3f}/{:.3f}/{:.3f}, {:.0f}s; snapshot {}".format(
                med["vanilla"]["rank1"], med["concat"]["rank1"], med["fused"]["rank1"],
                med["vanilla"]["tar"], med["concat"]["tar"], med["fused"]["tar"], dt, snap))


@pytest.mark.slow
def test_criterion_8_matcher_throughput(verdict):
    rng = np.random.default_rng(8)
    v = rng.standard_normal((1000, 384)).astype(np.float32)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    st = EmbeddingStore.from_arrays(np.arange(1000) // 4, np.arange(1000) % 4, v)
    exact = all(
        [(m.subject_id, m.impression_id) for m in search(st, p, 1000)]
        == [(m.subject_id, m.impression_id) for m in naive_search(st, p, 1000)]
        for p in v[:5]
    )
    rep = bench_throughput(dim=384, gallery_size=1_000_000, repetitions=5)
    multi, single = rep["multi_thread"]["mean_cps"], rep["single_thread"]["mean_cps"]
    verdict(8, "matcher throughput", exact and multi >= 2.5e6,
            f"{rep['multi_thread']['threads']} threads {multi / 1e6:.2f}M/s, single {single / 1e6:.2f}M/s, "
            f"naive rankings identical {exact}; {rep['hardware']}")


def test_criterion_9_determinism(verdict, tmp_path):
    tiny = ["--image-side", "32", "--patch-size", "8", "--width", "16", "--depth", "1", "--heads", "2",
            "--embedding-dim", "8", "--epochs", "2", "--batch-size", "8", "--warmup", "2", "--seed", "4"]

    def pipeline(d):
        steps = [
            ["generate", "--identities", "6", "--impressions", "4", "--seed", "4", "--out", str(d / "c")],
            ["train", "--corpus", str(d / "c"), "--mode", "concat", "--out", str(d / "m"), *tiny],
            ["embed", "--model", str(d / "m" / "model.fpvt"), "--corpus", str(d / "c"), "--out", str(d / "e")],
            ["authenticate", "--embeddings", str(d / "e" / "embeddings.fpem"), "--far", "0.05,0.1",
             "--out", str(d / "a")],
        ]
        assert all(run(s) == 0 for s in steps)
        return [(d / "m" / "model.fpvt").read_bytes(), (d / "e" / "embeddings.fpem").read_bytes(),
                (d / "a" / "authentication.json").read_bytes(), (d / "a" / "tar_table.csv").read_bytes()]

    a, b = pipeline(tmp_path / "r1"), pipeline(tmp_path / "r2")
    same = [x == y for x, y in zip(a, b)]
    verdict(9, "determinism", all(same), f"checkpoint/store/report/table identical: {same}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))

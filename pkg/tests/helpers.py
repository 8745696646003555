"""Shared fixtures-as-functions for the test suite."""

from typing import NamedTuple

import numpy as np

from fpvit.vit import ModelConfig, cast_params, cross_entropy, forward, init_params, loss_and_backward


def tiny_config(channels=2, **kw):
    base = dict(patch_size=8, image_side=32, embed_width=64, depth=2, heads=4, mlp_ratio=4.0,
                embedding_dim=32, num_classes=10, seed=0)
    base.update(kw)
    return ModelConfig.create(channels, **base)


def toy_tokens(cfg, batch, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((batch, cfg.num_tokens, cfg.in_dim_per_token)).astype(dtype)


# Float64 central differences carry roundoff near eps * |loss| / h (about
# 3e-11 here), so entries below the floor are compared absolutely at
# floor * tolerance = 1e-10 instead of relatively.
REL_FLOOR = 1e-5


def relative_error(analytic, numeric, floor=REL_FLOOR):
    """Element-wise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


class GradStat(NamedTuple):
    rel_err: float  # worst element-wise relative error
    max_analytic: float
    max_numeric: float
    coords: int


def gradient_verdict(stats, tol=1e-5):
    """``(ok, worst_name, worst_rel_err)`` over a :func:`finite_difference_check` result."""
    name = max(stats, key=lambda k: stats[k].rel_err)
    return stats[name].rel_err <= tol, name, stats[name].rel_err


def finite_difference_check(cfg, coords_per_tensor=200, seed=0, h=1e-4, batch=2, perturb=0.3,
                            include_inputs=True):
    """Per-tensor analytic vs central-difference gradient statistics (:class:`GradStat`).

    Runs in float64 with parameters pushed away from their initial scale so
    that every tensor carries a non-trivial gradient.  Tensors smaller than
    ``coords_per_tensor`` are checked exhaustively.
    """
    rng = np.random.default_rng(seed)
    p = cast_params(init_params(cfg), np.float64)
    for k in p:
        p[k] = p[k] + rng.standard_normal(p[k].shape) * perturb
    x = rng.standard_normal((batch, cfg.num_tokens, cfg.in_dim_per_token))
    y = rng.integers(0, cfg.num_classes, batch)
    _, grads = loss_and_backward(p, x, y, cfg)

    def loss():
        return cross_entropy(forward(p, x, cfg)[1], y)[0]

    def check(arr, grad):
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= coords_per_tensor else rng.choice(n, coords_per_tensor, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            lp = loss()
            flat[i] = old - h
            lm = loss()
            flat[i] = old
            num[j] = (lp - lm) / (2 * h)
        return GradStat(float(relative_error(gflat[idx], num).max()), float(np.abs(gflat[idx]).max()),
                        float(np.abs(num).max()), len(idx))

    worst = {k: check(p[k], grads[k]) for k in p}
    if include_inputs:
        from fpvit.vit import backward

        _, logits, cache = forward(p, x, cfg)
        _, d_logits = cross_entropy(logits, y)
        _, d_tok = backward(p, cfg, cache, d_logits=d_logits)
        # image channel only: the first patch_size^2 entries of every token
        img = x[..., : cfg.patch_size**2]
        mask = np.zeros_like(x, dtype=bool)
        mask[..., : cfg.patch_size**2] = True
        sel = np.flatnonzero(mask)
        pick = rng.choice(sel, min(coords_per_tensor, len(sel)), replace=False)
        flat, gflat = x.reshape(-1), d_tok.reshape(-1)
        num = np.empty(len(pick))
        for j, i in enumerate(pick):
            old = flat[i]
            flat[i] = old + h
            lp = loss()
            flat[i] = old - h
            lm = loss()
            flat[i] = old
            num[j] = (lp - lm) / (2 * h)
        worst["input_pixels"] = GradStat(float(relative_error(gflat[pick], num).max()),
                                         float(np.abs(gflat[pick]).max()), float(np.abs(num).max()), len(pick))
        assert img.shape[-1] == cfg.patch_size**2
    return worst

"""A small Vision Transformer in numpy with hand-written backward passes.

Parameters live in a plain ``dict[str, np.ndarray]``; every function is
dtype-generic so the same code runs in float32 for training and float64 for
gradient checks.  Tokens are batched as ``(B, N, token_dim)`` arrays.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, NumericalError, ShapeError, TrainingError
from .tokenizer import NORMALIZATION_CONTRACT, TokenSequence, token_count, token_dim

LN_EPS = 1e-6
_GELU_K = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 8
    image_side: int = 32
    in_dim_per_token: int = 192
    embed_width: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    embedding_dim: int = 32
    num_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.patch_size <= 0 or self.image_side <= 0 or self.image_side % self.patch_size:
            raise ConfigError(
                f"image_side {self.image_side} must be a positive multiple of patch_size {self.patch_size}"
            )
        if self.in_dim_per_token <= 0 or self.in_dim_per_token % (self.patch_size**2):
            raise ConfigError(
                f"in_dim_per_token {self.in_dim_per_token} must be a multiple of patch_size^2"
            )
        if self.embed_width <= 0 or self.heads <= 0 or self.embed_width % self.heads:
            raise ConfigError(f"embed_width {self.embed_width} not divisible by heads {self.heads}")
        if self.depth < 0 or self.mlp_ratio <= 0 or self.mlp_hidden < 1:
            raise ConfigError("depth must be >= 0 and mlp_ratio > 0")
        if self.embedding_dim <= 0:
            raise ConfigError("embedding_dim must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")

    @classmethod
    def create(cls, channels: int = 2, **kw) -> "ModelConfig":
        """Config whose token dimension is derived from ``channels``."""
        n = kw.get("patch_size", cls.patch_size)
        return cls(in_dim_per_token=token_dim(n, channels), **kw)

    @classmethod
    def full_scale(cls, channels: int = 2, num_classes: int = 1000, seed: int = 0) -> "ModelConfig":
        return cls.create(
            channels, patch_size=16, image_side=224, embed_width=384, depth=12, heads=6,
            mlp_ratio=4.0, embedding_dim=384, num_classes=num_classes, seed=seed,
        )

    @property
    def num_tokens(self) -> int:
        return token_count(self.image_side, self.patch_size)

    @property
    def channels(self) -> int:
        return self.in_dim_per_token // (self.patch_size**2) - 1

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_width * self.mlp_ratio))

    @property
    def head_dim(self) -> int:
        return self.embed_width // self.heads


# ------------------------------------------------------------------ parameters


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, Hd, E, K = cfg.embed_width, cfg.mlp_hidden, cfg.embedding_dim, cfg.num_classes
    shapes = {
        "patch_w": (cfg.in_dim_per_token, D),
        "patch_b": (D,),
        "cls_token": (D,),
        "pos_embed": (cfg.num_tokens + 1, D),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1_g": (D,), p + "ln1_b": (D,),
            p + "q_w": (D, D), p + "q_b": (D,),
            p + "k_w": (D, D), p + "k_b": (D,),
            p + "v_w": (D, D), p + "v_b": (D,),
            p + "o_w": (D, D), p + "o_b": (D,),
            p + "ln2_g": (D,), p + "ln2_b": (D,),
            p + "fc1_w": (D, Hd), p + "fc1_b": (Hd,),
            p + "fc2_w": (Hd, D), p + "fc2_b": (D,),
        })
    shapes.update({
        "norm_g": (D,), "norm_b": (D,),
        "head_w": (D, E), "head_b": (E,),
        "cls_w": (E, K), "cls_b": (K,),
    })
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of learnable scalars."""
    D, Hd, E, K, N = cfg.embed_width, cfg.mlp_hidden, cfg.embedding_dim, cfg.num_classes, cfg.num_tokens
    per_block = 4 * D + 4 * (D * D + D) + (D * Hd + Hd) + (Hd * D + D)
    return (
        cfg.in_dim_per_token * D + D + D + (N + 1) * D
        + cfg.depth * per_block + 2 * D + (D * E + E) + (E * K + K)
    )


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def init_params(cfg: ModelConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    """Truncated-normal(0.02) weights and tokens, zero biases, unit norm scales."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            v = np.ones(shape)
        elif leaf.endswith("_b"):
            v = np.zeros(shape)
        else:
            v = _trunc_normal(rng, shape, 0.02)
        params[name] = v.astype(dtype)
    return params


def cast_params(params: dict, dtype) -> dict[str, np.ndarray]:
    return {k: v.astype(dtype) for k, v in params.items()}


# -------------------------------------------------------------------- layers


def _layernorm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    red = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=red)
    db = dy.sum(axis=red)
    dxhat = dy * g
    dx = rstd * (
        dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True)
    )
    return dx, dg, db


def _gelu(u):
    t = np.tanh(_GELU_K * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(du_out, u, t):
    dt = (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * dt)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _as_batch(tokens) -> np.ndarray:
    x = tokens.data if isinstance(tokens, TokenSequence) else np.asarray(tokens)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"tokens must be (N, dim) or (B, N, dim), got {x.shape}")
    return x


# ------------------------------------------------------------------- forward


def forward(params: dict, tokens, cfg: ModelConfig):
    """Run the encoder.

    Returns ``(embedding_raw, logits, cache)`` with a leading batch axis.
    ``cache["attn"]`` holds every block's attention probabilities.
    """
    X = _as_batch(tokens)
    B, N, F = X.shape
    if F != cfg.in_dim_per_token or N != cfg.num_tokens:
        raise ShapeError(
            f"tokens are {N}x{F}, model expects {cfg.num_tokens}x{cfg.in_dim_per_token}"
        )
    dt = params["patch_w"].dtype
    X = X.astype(dt, copy=False)
    D, Hh, dh = cfg.embed_width, cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)

    z = X @ params["patch_w"] + params["patch_b"]
    cls = np.broadcast_to(params["cls_token"], (B, 1, D))
    h = np.concatenate([cls, z], axis=1) + params["pos_embed"]
    T = N + 1
    blocks = []
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        c = {"h_in": h}
        a, c["ln1"] = _layernorm(h, params[p + "ln1_g"], params[p + "ln1_b"])
        c["a"] = a

        def heads(w, b):
            return (a @ params[p + w] + params[p + b]).reshape(B, T, Hh, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("q_w", "q_b"), heads("k_w", "k_b"), heads("v_w", "v_b")
        P = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        o = (P @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        c.update(q=q, k=k, v=v, P=P, o=o)
        h = h + o @ params[p + "o_w"] + params[p + "o_b"]
        cn, c["ln2"] = _layernorm(h, params[p + "ln2_g"], params[p + "ln2_b"])
        u = cn @ params[p + "fc1_w"] + params[p + "fc1_b"]
        gu, t = _gelu(u)
        c.update(cn=cn, u=u, t=t, gu=gu)
        h = h + gu @ params[p + "fc2_w"] + params[p + "fc2_b"]
        blocks.append(c)

    hc, ln_f = _layernorm(h[:, 0], params["norm_g"], params["norm_b"])
    emb = hc @ params["head_w"] + params["head_b"]
    logits = emb @ params["cls_w"] + params["cls_b"]
    cache = {
        "X": X, "blocks": blocks, "ln_f": ln_f, "hc": hc, "emb": emb,
        "attn": [c["P"] for c in blocks], "shape": (B, N, T),
    }
    return emb, logits, cache


def backward(params: dict, cfg: ModelConfig, cache: dict, d_emb=None, d_logits=None):
    """Backpropagate upstream gradients on the embedding and/or logits.

    Returns ``(grads, d_tokens)``; ``d_tokens`` has the shape of the input batch.
    """
    B, N, T = cache["shape"]
    D, Hh, dh = cfg.embed_width, cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    emb = cache["emb"]
    g = {}
    if d_emb is None:
        d_emb = np.zeros_like(emb)
    if d_logits is not None:
        g["cls_w"] = emb.T @ d_logits
        g["cls_b"] = d_logits.sum(0)
        d_emb = d_emb + d_logits @ params["cls_w"].T
    else:
        g["cls_w"] = np.zeros_like(params["cls_w"])
        g["cls_b"] = np.zeros_like(params["cls_b"])
    g["head_w"] = cache["hc"].T @ d_emb
    g["head_b"] = d_emb.sum(0)
    d_hc = d_emb @ params["head_w"].T
    d_h0, g["norm_g"], g["norm_b"] = _layernorm_back(d_hc, params["norm_g"], cache["ln_f"])
    dh_ = np.zeros((B, T, D), dtype=emb.dtype)
    dh_[:, 0] = d_h0

    for i in reversed(range(cfg.depth)):
        p = f"blocks.{i}."
        c = cache["blocks"][i]
        # MLP branch
        g[p + "fc2_w"] = c["gu"].reshape(-1, c["gu"].shape[-1]).T @ dh_.reshape(-1, D)
        g[p + "fc2_b"] = dh_.sum((0, 1))
        d_gu = dh_ @ params[p + "fc2_w"].T
        d_u = _gelu_back(d_gu, c["u"], c["t"])
        g[p + "fc1_w"] = c["cn"].reshape(-1, D).T @ d_u.reshape(-1, d_u.shape[-1])
        g[p + "fc1_b"] = d_u.sum((0, 1))
        d_cn = d_u @ params[p + "fc1_w"].T
        d_x, g[p + "ln2_g"], g[p + "ln2_b"] = _layernorm_back(d_cn, params[p + "ln2_g"], c["ln2"])
        dh_ = dh_ + d_x
        # attention branch
        g[p + "o_w"] = c["o"].reshape(-1, D).T @ dh_.reshape(-1, D)
        g[p + "o_b"] = dh_.sum((0, 1))
        d_o = (dh_ @ params[p + "o_w"].T).reshape(B, T, Hh, dh).transpose(0, 2, 1, 3)
        P = c["P"]
        d_P = d_o @ c["v"].transpose(0, 1, 3, 2)
        d_v = P.transpose(0, 1, 3, 2) @ d_o
        d_s = P * (d_P - (d_P * P).sum(-1, keepdims=True)) * scale
        d_q = d_s @ c["k"]
        d_k = d_s.transpose(0, 1, 3, 2) @ c["q"]
        a2 = c["a"].reshape(-1, D)
        d_a = np.zeros((B, T, D), dtype=emb.dtype)
        for name, d_ in (("q", d_q), ("k", d_k), ("v", d_v)):
            d2 = d_.transpose(0, 2, 1, 3).reshape(B, T, D)
            g[p + name + "_w"] = a2.T @ d2.reshape(-1, D)
            g[p + name + "_b"] = d2.sum((0, 1))
            d_a += d2 @ params[p + name + "_w"].T
        d_x, g[p + "ln1_g"], g[p + "ln1_b"] = _layernorm_back(d_a, params[p + "ln1_g"], c["ln1"])
        dh_ = dh_ + d_x

    g["pos_embed"] = dh_.sum(0)
    g["cls_token"] = dh_[:, 0].sum(0)
    dz = dh_[:, 1:]
    X = cache["X"]
    g["patch_w"] = X.reshape(-1, X.shape[-1]).T @ dz.reshape(-1, D)
    g["patch_b"] = dz.sum((0, 1))
    d_tokens = dz @ params["patch_w"].T
    grads = {k: g[k] for k in params}
    return grads, d_tokens


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels).reshape(-1)
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    B = logits.shape[0]
    loss = -logp[np.arange(B), labels].mean()
    d = np.exp(logp)
    d[np.arange(B), labels] -= 1.0
    return float(loss), d / B


def loss_and_backward(params: dict, tokens, labels, cfg: ModelConfig):
    """Cross-entropy loss and analytic gradients for one sample or a batch."""
    labels = np.atleast_1d(np.asarray(labels))
    if labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise ConfigError(f"labels must lie in [0, {cfg.num_classes})")
    _, logits, cache = forward(params, tokens, cfg)
    loss, d_logits = cross_entropy(logits, labels)
    if not math.isfinite(loss):
        raise TrainingError("non-finite loss", {"loss": loss, "max_logit": float(np.abs(logits).max())})
    grads, _ = backward(params, cfg, cache, d_logits=d_logits)
    return loss, grads


def extract_embedding(params: dict, tokens, cfg: ModelConfig, eps: float = 1e-12) -> np.ndarray:
    """Unit-norm embeddings, shape ``(embedding_dim,)`` or ``(B, embedding_dim)``."""
    single = isinstance(tokens, TokenSequence) or np.asarray(tokens).ndim == 2
    emb, _, _ = forward(params, tokens, cfg)
    norms = np.linalg.norm(emb.astype(np.float64), axis=1, keepdims=True)
    if (norms <= eps).any():
        raise NumericalError("zero-norm embedding; cannot normalise")
    out = (emb / norms).astype(emb.dtype)
    return out[0] if single else out


def embed_batches(params: dict, tokens: np.ndarray, cfg: ModelConfig, batch_size: int = 64):
    out = [extract_embedding(params, tokens[i : i + batch_size], cfg) for i in range(0, len(tokens), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.embedding_dim), np.float32)


def saliency(params: dict, tokens, cfg: ModelConfig, target: str | int = "embedding-norm") -> np.ndarray:
    """Input-gradient saliency over the image channel, max-normalised to [0, 1].

    ``target`` is ``"embedding-norm"`` or an integer class index whose logit
    is differentiated.
    """
    scalar_grad, _ = target_gradient(params, tokens, cfg, target)
    x = np.abs(scalar_grad)
    m = x.max()
    return x / m if m > 0 else np.zeros_like(x)


def target_value(params, tokens, cfg, target="embedding-norm") -> float:
    emb, logits, _ = forward(params, tokens, cfg)
    if target == "embedding-norm":
        return float(np.linalg.norm(emb[0]))
    return float(logits[0, int(target)])


def target_gradient(params, tokens, cfg, target="embedding-norm"):
    """Gradient of the saliency target w.r.t. image pixels, as ``(side, side)``."""
    from .tokenizer import detokenize

    emb, logits, cache = forward(params, tokens, cfg)
    if target == "embedding-norm":
        n = np.linalg.norm(emb[0])
        d_emb = (emb / n) if n > 0 else np.zeros_like(emb)
        _, d_tok = backward(params, cfg, cache, d_emb=d_emb)
    else:
        d_logits = np.zeros_like(logits)
        d_logits[0, int(target)] = 1.0
        _, d_tok = backward(params, cfg, cache, d_logits=d_logits)
    img, _ = detokenize(d_tok[0], cfg.patch_size, cfg.image_side, cfg.image_side)
    return img, d_tok[0]


# ------------------------------------------------------------------ training


@dataclass
class Schedule:
    epochs: int = 30
    batch_size: int = 32
    peak_lr: float = 1e-3
    min_lr: float = 0.0
    warmup_steps: int = 20
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0


def lr_at(step: int, total_steps: int, sched: Schedule) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to ``min_lr``."""
    if sched.warmup_steps > 0 and step < sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps
    span = max(1, total_steps - sched.warmup_steps)
    frac = min(1.0, (step - sched.warmup_steps) / span)
    return sched.min_lr + 0.5 * (sched.peak_lr - sched.min_lr) * (1.0 + math.cos(math.pi * frac))


def _decays(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf.endswith("_w")


class AdamW:
    def __init__(self, params: dict, sched: Schedule):
        self.sched = sched
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        s = self.sched
        self.t += 1
        bc1 = 1.0 - s.beta1**self.t
        bc2 = 1.0 - s.beta2**self.t
        for k, p in params.items():
            gk = grads[k]
            m, v = self.m[k], self.v[k]
            m *= s.beta1
            m += (1.0 - s.beta1) * gk
            v *= s.beta2
            v += (1.0 - s.beta2) * gk * gk
            if _decays(k) and s.weight_decay:
                p -= (lr * s.weight_decay) * p
            p -= (lr / bc1) * m / (np.sqrt(v / bc2) + s.adam_eps)


def leave_one_out_rank1(emb: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of samples whose most similar other sample shares their label."""
    emb = np.asarray(emb, dtype=np.float64)
    s = emb @ emb.T
    np.fill_diagonal(s, -np.inf)
    return float((labels[np.argmax(s, axis=1)] == labels).mean())


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    def to_dict(self):
        return {"epochs": self.epochs}


def train(
    cfg: ModelConfig,
    tokens: np.ndarray,
    labels: np.ndarray,
    sched: Schedule,
    init: dict | None = None,
    val: tuple[np.ndarray, np.ndarray] | None = None,
    log_fn=None,
):
    """Mini-batch AdamW training with warmup + cosine learning rate.

    ``init`` warm-starts from existing parameters (pretrain then fine-tune);
    a classifier whose shape no longer matches is re-initialised.
    Returns ``(params, TrainLog)``.
    """
    tokens = np.asarray(tokens)
    labels = np.asarray(labels, dtype=np.int64)
    if cfg.num_classes < 2:
        raise ConfigError("training needs num_classes >= 2")
    if len(tokens) != len(labels) or len(tokens) == 0:
        raise ConfigError("tokens and labels must be non-empty and aligned")
    if labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise ConfigError(f"labels must lie in [0, {cfg.num_classes})")
    params = init_params(cfg)
    if init is not None:
        for k, v in init.items():
            if k in params and params[k].shape == v.shape:
                params[k] = v.astype(params[k].dtype).copy()
    opt = AdamW(params, sched)
    rng = np.random.default_rng(sched.seed)
    M = len(tokens)
    steps_per_epoch = math.ceil(M / sched.batch_size)
    total = steps_per_epoch * sched.epochs
    log = TrainLog()
    step = 0
    last_good = {k: v.copy() for k, v in params.items()}
    for epoch in range(sched.epochs):
        order = rng.permutation(M)
        losses, correct = [], 0
        for b in range(steps_per_epoch):
            idx = order[b * sched.batch_size : (b + 1) * sched.batch_size]
            _, logits, cache = forward(params, tokens[idx], cfg)
            loss, d_logits = cross_entropy(logits, labels[idx])
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}",
                    {"epoch": epoch, "step": step, "loss": loss, "last_good": last_good},
                )
            grads, _ = backward(params, cfg, cache, d_logits=d_logits)
            opt.step(params, grads, lr_at(step, total, sched))
            if not all(np.isfinite(v).all() for v in params.values()):
                raise TrainingError(
                    f"non-finite parameters after step {step}",
                    {"epoch": epoch, "step": step, "last_good": last_good},
                )
            step += 1
            losses.append(loss * len(idx))
            correct += int((logits.argmax(1) == labels[idx]).sum())
        last_good = {k: v.copy() for k, v in params.items()}
        entry = {
            "epoch": epoch,
            "loss": float(sum(losses) / M),
            "train_acc": correct / M,
            "lr": lr_at(step, total, sched),
        }
        if val is not None and len(val[0]) > 1:
            emb = embed_batches(params, val[0], cfg)
            entry["val_rank1"] = leave_one_out_rank1(emb, np.asarray(val[1]))
        log.epochs.append(entry)
        if log_fn is not None:
            log_fn(entry)
    return params, log


# ---------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"FPVT"
CKPT_VERSION = 1


def save_checkpoint(path, params: dict, cfg: ModelConfig, extra: dict | None = None) -> None:
    header = {
        "config": asdict(cfg),
        "normalization": NORMALIZATION_CONTRACT,
        "tensors": len(params),
    }
    if extra:
        header["extra"] = extra
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(hb)))
        f.write(hb)
        for name, arr in params.items():
            nb = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f4")
            f.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.tobytes())


def load_checkpoint(path):
    """Returns ``(params, cfg, header)``; params come back as float32."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {buf[:4]!r})")
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    try:
        header = json.loads(buf[pos : pos + hlen].decode("utf-8"))
        cfg = ModelConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: bad header: {e}") from e
    pos += hlen
    params = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(buf):
                raise FormatError(f"{path}: truncated tensor {name!r}")
            params[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except struct.error as e:
        raise FormatError(f"{path}: truncated checkpoint") from e
    expected = param_shapes(cfg)
    if header.get("tensors") != len(params) or set(expected) != set(params):
        raise FormatError(f"{path}: tensor set does not match config")
    for k, shp in expected.items():
        if params[k].shape != shp:
            raise FormatError(f"{path}: tensor {k} has shape {params[k].shape}, expected {shp}")
    return {k: params[k] for k in expected}, cfg, header

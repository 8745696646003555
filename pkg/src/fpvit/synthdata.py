"""Deterministic toy fingerprints with authored minutiae ground truth.

Ridges are ``cos(phase)`` where the phase is a tilted plane wave, bent by a
few low-frequency sinusoids and twisted by a phase vortex at every master
minutia.  Each impression applies a rigid transform, minutia dropout,
localisation jitter, contrast change, noise and rectangular occlusions.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GenerationError, ValidationError
from .minutiae import Minutia, MinutiaeSet, normalize_angle, write_minutiae_file, write_pgm

SIDE = 224
MIN_SEPARATION = 12.0
MANIFEST_FIELDS = ["identity", "impression", "image_path", "minutiae_path"]


@dataclass(frozen=True)
class IdentityTemplate:
    id: int
    seed: int
    master: MinutiaeSet
    vortex_sign: np.ndarray  # +1 / -1 per master minutia
    base_angle: float  # radians
    frequency: float  # cycles per pixel
    warp: np.ndarray  # rows of (amplitude, kx, ky, phase)


@dataclass(frozen=True)
class ImpressionParams:
    max_translation: float = 12.0
    max_rotation: float = 10.0
    dropout: float = 0.1
    jitter: float = 1.0
    contrast: tuple[float, float] = (0.6, 1.0)
    noise: float = 0.15
    max_occlusions: int = 2
    occlusion_size: tuple[int, int] = (20, 56)

    def __post_init__(self):
        if self.max_translation < 0 or self.max_rotation < 0 or self.jitter < 0 or self.noise < 0:
            raise ValidationError("impression maxima must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.max_occlusions < 0:
            raise ValidationError("max_occlusions must be non-negative")

    @classmethod
    def clean(cls) -> "ImpressionParams":
        """No transform, dropout, jitter, noise or occlusion."""
        return cls(0.0, 0.0, 0.0, 0.0, (1.0, 1.0), 0.0, 0, (0, 0))


def make_template(identity: int, seed: int = 0, side: int = SIDE) -> IdentityTemplate:
    """Identity template, a pure function of ``(seed, identity)``."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, int(identity) & 0xFFFFFFFFFFFFFFFF])
    m = int(rng.integers(20, 61))
    margin = 28.0
    pts: list[tuple[float, float]] = []
    tries = 0
    while len(pts) < m and tries < 20000:
        tries += 1
        x, y = rng.uniform(margin, side - margin, size=2)
        if all((x - a) ** 2 + (y - b) ** 2 >= MIN_SEPARATION**2 for a, b in pts):
            pts.append((float(x), float(y)))
    thetas = rng.uniform(0.0, 360.0, size=len(pts))
    master = MinutiaeSet(side, side, tuple(Minutia(x, y, t) for (x, y), t in zip(pts, thetas)))
    signs = rng.choice([-1.0, 1.0], size=len(pts))
    k = 3
    amp = rng.uniform(1.5, 5.0, size=k)
    period = rng.uniform(90.0, 260.0, size=k)
    ang = rng.uniform(0.0, 2 * math.pi, size=k)
    warp = np.stack(
        [amp, 2 * math.pi / period * np.cos(ang), 2 * math.pi / period * np.sin(ang),
         rng.uniform(0.0, 2 * math.pi, size=k)], axis=1,
    )
    return IdentityTemplate(
        id=int(identity), seed=int(seed), master=master, vortex_sign=signs,
        base_angle=float(rng.uniform(0.0, math.pi)), frequency=float(rng.uniform(1 / 18, 1 / 13)),
        warp=warp,
    )


def ridge_pattern(tpl: IdentityTemplate, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Ridge intensity in [0, 1] at template-frame coordinates."""
    ph = 2 * math.pi * tpl.frequency * (xs * math.cos(tpl.base_angle) + ys * math.sin(tpl.base_angle))
    for a, kx, ky, p in tpl.warp:
        ph = ph + a * np.sin(kx * xs + ky * ys + p)
    arr = tpl.master.to_array()
    for (mx, my, _), s in zip(arr, tpl.vortex_sign):
        ph = ph + s * np.arctan2(ys - my, xs - mx)
    return 0.5 + 0.5 * np.cos(ph)


def _sample_transform(rng, params: ImpressionParams, shrink: float):
    dx, dy = rng.uniform(-1.0, 1.0, size=2) * params.max_translation * shrink
    rot = rng.uniform(-1.0, 1.0) * params.max_rotation * shrink
    return float(dx), float(dy), float(rot)


def _move(x, y, dx, dy, rot, c):
    if rot == 0.0:
        return x + dx, y + dy
    r = math.radians(rot)
    cs, sn = math.cos(r), math.sin(r)
    u, v = x - c, y - c
    return cs * u - sn * v + c + dx, sn * u + cs * v + c + dy


def render_impression(tpl: IdentityTemplate, impression_index: int,
                      params: ImpressionParams = ImpressionParams(),
                      transform: tuple[float, float, float] | None = None, image: bool = True):
    """Render one impression: ``(image float in [0, 1], MinutiaeSet)``.

    ``transform=(dx, dy, rotation_degrees)`` overrides the sampled rigid
    transform; rotation is about the image centre.  With ``image=False`` the
    image is skipped (returned as ``None``) and the minutiae are unchanged.
    """
    side = tpl.master.width
    c = (side - 1) / 2.0
    rng = np.random.default_rng(
        [tpl.seed & 0xFFFFFFFF, tpl.id & 0xFFFFFFFFFFFFFFFF, int(impression_index) + 1]
    )
    master = tpl.master.to_array()
    moved = None
    for attempt in range(6):
        dx, dy, rot = transform if transform is not None else _sample_transform(rng, params, 0.5**attempt)
        moved = [(*_move(x, y, dx, dy, rot, c), normalize_angle(t + rot)) for x, y, t in master]
        inside = [0.0 <= x < side and 0.0 <= y < side for x, y, _ in moved]
        if any(inside) or len(master) == 0:
            break
        if transform is not None or attempt == 5:
            raise GenerationError(
                f"identity {tpl.id} impression {impression_index}: transform leaves no minutiae in frame"
            )
    # per-minutia draws are taken for every master point to keep streams aligned
    keep = rng.random(len(master)) >= params.dropout
    jit = rng.normal(0.0, 1.0, size=(len(master), 2)) * params.jitter
    lo, hi = params.contrast
    contrast = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    n_occ = int(rng.integers(0, params.max_occlusions + 1)) if params.max_occlusions else 0
    rects = []
    for _ in range(n_occ):
        w, h = rng.integers(params.occlusion_size[0], params.occlusion_size[1] + 1, size=2)
        x0, y0 = rng.integers(0, side - min(w, side) + 1, size=2)
        rects.append((int(x0), int(y0), int(w), int(h)))

    img = None
    if image:
        # sample the template at inverse-transformed pixel centres
        yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
        r = math.radians(rot)
        cs, sn = math.cos(r), math.sin(r)
        u, v = xx - c - dx, yy - c - dy
        tx = cs * u + sn * v + c
        ty = -sn * u + cs * v + c
        img = 0.5 + contrast * (ridge_pattern(tpl, tx, ty) - 0.5)
        if params.noise > 0:
            img = img + rng.normal(0.0, params.noise, size=img.shape)
        for x0, y0, w, h in rects:
            img[y0 : y0 + h, x0 : x0 + w] = 0.5
        img = np.clip(img, 0.0, 1.0)

    pts = []
    for i, (x, y, t) in enumerate(moved):
        if not keep[i]:
            continue
        if params.jitter > 0:
            x, y = x + jit[i, 0], y + jit[i, 1]
        if not (0.0 <= x < side and 0.0 <= y < side):
            continue
        if any(x0 <= x < x0 + w and y0 <= y < y0 + h for x0, y0, w, h in rects):
            continue
        pts.append(Minutia(x, y, t))
    return img, MinutiaeSet(side, side, tuple(pts))


def generate_dataset(num_identities: int, impressions_per_identity: int, seed: int, out_dir,
                     params: ImpressionParams = ImpressionParams(), first_id: int = 0) -> list[dict]:
    """Write PGM images, MNT minutiae files and ``manifest.csv`` under ``out_dir``.

    Returns the manifest rows.  Paths in the manifest are relative to ``out_dir``.
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "minutiae").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise GenerationError(f"{out}: cannot create output directories: {e}") from e
    rows = []
    for ident in range(first_id, first_id + num_identities):
        tpl = make_template(ident, seed)
        for k in range(impressions_per_identity):
            img, mset = render_impression(tpl, k, params)
            stem = f"{ident:06d}_{k:03d}"
            ip, mp = f"images/{stem}.pgm", f"minutiae/{stem}.mnt"
            try:
                write_pgm(img, out / ip)
                write_minutiae_file(mset, out / mp)
            except OSError as e:
                raise GenerationError(f"{out / stem}: write failed: {e}") from e
            rows.append({"identity": ident, "impression": k, "image_path": ip, "minutiae_path": mp})
    write_manifest(rows, out / "manifest.csv")
    return rows


def write_manifest(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_manifest(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if rows and set(rows[0]) != set(MANIFEST_FIELDS):
        raise ValidationError(f"{path}: manifest columns {list(rows[0])} != {MANIFEST_FIELDS}")
    for r in rows:
        r["identity"] = int(r["identity"])
        r["impression"] = int(r["impression"])
    return rows


def corpus_checksum(out_dir) -> str:
    """SHA-256 over every file of a generated corpus, in sorted path order."""
    h = hashlib.sha256()
    root = Path(out_dir)
    for p in sorted(q for q in root.rglob("*") if q.is_file() and q.name != "provenance.json"):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()

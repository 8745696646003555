"""Image preprocessing and minutiae-concatenated patch tokenization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .minutiae import MinutiaeMap

IMAGE_SIDE = 224
PATCH_SIZE = 16

# recorded in checkpoint headers so inference reproduces training inputs
NORMALIZATION_CONTRACT = {
    "resize": "bilinear, half-pixel centres, edge clamp",
    "image": "per-image standardisation: (x - mean) / max(std, 1e-6)",
    "minutiae_map": "untouched, values in [0, 1]",
}


@dataclass(frozen=True, eq=False)
class TokenSequence:
    data: np.ndarray  # (num_tokens, token_dim)
    patch_size: int

    @property
    def num_tokens(self) -> int:
        return self.data.shape[0]

    @property
    def token_dim(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        """Minutiae-map channels carried by each token (0 for vanilla)."""
        return self.token_dim // (self.patch_size * self.patch_size) - 1


def token_count(image_side: int, patch_size: int) -> int:
    if image_side % patch_size:
        raise ShapeError(f"image side {image_side} not divisible by patch size {patch_size}")
    return (image_side // patch_size) ** 2


def token_dim(patch_size: int, channels: int) -> int:
    return patch_size * patch_size * (1 + channels)


def _patchify(plane: np.ndarray, n: int) -> np.ndarray:
    """(h, w) -> (gh*gw, n*n) in raster order of the patch grid."""
    h, w = plane.shape
    return plane.reshape(h // n, n, w // n, n).transpose(0, 2, 1, 3).reshape(-1, n * n)


def _unpatchify(patches: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return patches.reshape(h // n, w // n, n, n).transpose(0, 2, 1, 3).reshape(h, w)


def tokenize(image: np.ndarray, mmap: MinutiaeMap | None, patch_size: int = PATCH_SIZE,
             dtype=np.float32) -> TokenSequence:
    """Cut ``image`` and its minutiae map into concatenated patch tokens.

    Each token is the flattened image patch followed by the flattened patch
    of every map channel in order.  ``mmap=None`` or a zero-channel map
    produces image-only tokens.
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise ShapeError(f"image must be 2-D, got shape {img.shape}")
    h, w = img.shape
    n = int(patch_size)
    if n <= 0 or h % n or w % n:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {n}")
    planes = [img]
    if mmap is not None:
        if (mmap.height, mmap.width) != (h, w):
            raise ShapeError(
                f"image is {h}x{w} but minutiae map is {mmap.height}x{mmap.width}"
            )
        planes += [mmap.data[:, :, c] for c in range(mmap.channels)]
    parts = [_patchify(np.asarray(p, dtype=dtype), n) for p in planes]
    return TokenSequence(np.concatenate(parts, axis=1), n)


def detokenize(tokens: TokenSequence | np.ndarray, patch_size: int, height: int, width: int):
    """Invert :func:`tokenize`: returns ``(image, map_planes)``."""
    data = tokens.data if isinstance(tokens, TokenSequence) else np.asarray(tokens)
    n2 = patch_size * patch_size
    if data.shape[1] % n2:
        raise ShapeError(f"token dim {data.shape[1]} not a multiple of {n2}")
    k = data.shape[1] // n2
    planes = [_unpatchify(data[:, i * n2 : (i + 1) * n2], patch_size, height, width) for i in range(k)]
    maps = np.stack(planes[1:], axis=-1) if k > 1 else np.zeros((height, width, 0), data.dtype)
    return planes[0], maps


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and clamped edges."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def preprocess(image: np.ndarray, side: int = IMAGE_SIDE) -> np.ndarray:
    """Resize to ``side x side`` and standardise to zero mean, unit variance.

    8-bit input is first scaled to [0, 1].
    """
    img = np.asarray(image)
    if img.ndim != 2 or img.size == 0:
        raise ValidationError(f"expected a non-empty 2-D image, got shape {img.shape}")
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    out = resize_bilinear(img, side, side)
    out = out - out.mean()
    return out / max(out.std(), 1e-6)

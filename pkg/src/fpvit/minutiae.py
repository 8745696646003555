"""Minutiae sets, minutiae-map heatmaps and their file formats.

Coordinates follow image raster order: ``x`` is the column, ``y`` the row,
origin at the top-left corner.  Orientations are degrees in ``[0, 360)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

DEFAULT_SIGMA = 3.0
DEFAULT_CHANNELS = 2


def normalize_angle(theta: float) -> float:
    t = math.fmod(float(theta), 360.0)
    if t < 0.0:
        t += 360.0
    # fmod of a tiny negative number can round back up to exactly 360
    if t >= 360.0:
        t = 0.0
    return t


def orientation_channel(theta: float, channels: int = DEFAULT_CHANNELS) -> int:
    """Channel index a minutia of orientation ``theta`` is deposited into.

    With two channels the circle is split hard at 180 degrees:
    ``[0, 180)`` goes to channel 0 and ``[180, 360)`` to channel 1.
    """
    if channels not in (1, 2):
        raise ConfigError(f"channels must be 1 or 2, got {channels}")
    if channels == 1:
        return 0
    return 0 if normalize_angle(theta) < 180.0 else 1


@dataclass(frozen=True)
class Minutia:
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


@dataclass(frozen=True, eq=False)
class MinutiaeSet:
    """An unordered, variable-length set of minutiae for one impression.

    Equality ignores the order of ``points``.
    """

    width: int
    height: int
    points: tuple[Minutia, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValidationError(f"image size must be positive, got {self.width}x{self.height}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        pts = tuple(p if isinstance(p, Minutia) else Minutia(*p) for p in self.points)
        for i, p in enumerate(pts):
            if not (0.0 <= p.x < self.width and 0.0 <= p.y < self.height):
                raise ValidationError(
                    f"minutia {i} at (x={p.x}, y={p.y}) outside {self.width}x{self.height} image"
                )
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_array(cls, width: int, height: int, arr) -> "MinutiaeSet":
        arr = np.asarray(arr, dtype=float).reshape(-1, 3)
        return cls(width, height, tuple(Minutia(*row) for row in arr))

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def to_array(self) -> np.ndarray:
        """(m, 3) array of ``x, y, theta`` rows."""
        if not self.points:
            return np.zeros((0, 3))
        return np.array([p.as_tuple() for p in self.points], dtype=float)

    def __eq__(self, other):
        if not isinstance(other, MinutiaeSet):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and sorted(p.as_tuple() for p in self.points)
            == sorted(p.as_tuple() for p in other.points)
        )

    def __hash__(self):
        return hash((self.width, self.height, tuple(sorted(p.as_tuple() for p in self.points))))

    def scaled(self, width: int, height: int) -> "MinutiaeSet":
        """Rescale coordinates into a ``width`` x ``height`` frame."""
        sx = width / self.width
        sy = height / self.height
        pts = []
        for p in self.points:
            x = min(p.x * sx, np.nextafter(width, 0))
            y = min(p.y * sy, np.nextafter(height, 0))
            pts.append(Minutia(x, y, p.theta))
        return MinutiaeSet(width, height, tuple(pts))


@dataclass(frozen=True, eq=False)
class MinutiaeMap:
    """Dense ``height x width x channels`` heatmap with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3:
            raise ValidationError(f"minutiae map must be 3-D (h, w, c), got shape {d.shape}")
        if d.size and (d.min() < 0.0 or d.max() > 1.0):
            raise ValidationError("minutiae map values must lie in [0, 1]")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def empty(cls, height: int, width: int, channels: int = 0) -> "MinutiaeMap":
        """A map with no content.  ``channels=0`` is the vanilla-ViT wrapper."""
        return cls(np.zeros((height, width, channels)))


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def build_minutiae_map(
    mset: MinutiaeSet, channels: int = DEFAULT_CHANNELS, sigma: float = DEFAULT_SIGMA
) -> MinutiaeMap:
    """Render ``mset`` as a heatmap of Gaussian hot-spots.

    Every minutia deposits a bump of peak 1.0 centred on its rounded pixel
    into the channel chosen by :func:`orientation_channel`.  Bumps combine by
    element-wise maximum.  Kernels are truncated at ``4 * sigma``.
    """
    if channels not in (1, 2):
        raise ConfigError(f"channels must be 1 or 2, got {channels}")
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    h, w = mset.height, mset.width
    out = np.zeros((h, w, channels))
    radius = max(1, int(math.ceil(4.0 * sigma)))
    offs = np.arange(-radius, radius + 1)
    for i, p in enumerate(mset.points):
        if not (0.0 <= p.x < w and 0.0 <= p.y < h):
            raise ValidationError(f"minutia {i} at (x={p.x}, y={p.y}) out of bounds")
        cx = min(_round_half_up(p.x), w - 1)
        cy = min(_round_half_up(p.y), h - 1)
        rows = cy + offs
        cols = cx + offs
        rmask = (rows >= 0) & (rows < h)
        cmask = (cols >= 0) & (cols < w)
        r, c = rows[rmask], cols[cmask]
        dy2 = (r - cy) ** 2
        dx2 = (c - cx) ** 2
        bump = np.exp(-(dy2[:, None] + dx2[None, :]) / (2.0 * sigma * sigma))
        ch = orientation_channel(p.theta, channels)
        win = out[r[0] : r[-1] + 1, c[0] : c[-1] + 1, ch]
        np.maximum(win, bump, out=win)
    np.clip(out, 0.0, 1.0, out=out)
    return MinutiaeMap(out)


def channel_midpoint(channel: int, channels: int) -> float:
    if channels == 1:
        return 0.0
    return 90.0 if channel == 0 else 270.0


def recover_minutiae(mmap: MinutiaeMap, peak_threshold: float = 0.5) -> MinutiaeSet:
    """Read minutiae back out of a heatmap as strict local maxima.

    Orientation is reported as the bin midpoint of the channel the peak was
    found in (90 or 270 degrees), or 0 for single-channel maps.
    """
    if not 0.0 < peak_threshold <= 1.0:
        raise ConfigError(f"peak_threshold must be in (0, 1], got {peak_threshold}")
    h, w, c = mmap.data.shape
    pts = []
    for ch in range(c):
        a = mmap.data[:, :, ch]
        padded = np.pad(a, 1, constant_values=-np.inf)
        strict = a >= peak_threshold
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                strict &= a > padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        ys, xs = np.nonzero(strict)
        theta = channel_midpoint(ch, c)
        pts.extend(Minutia(float(x), float(y), theta) for y, x in zip(ys, xs))
    return MinutiaeSet(w, h, tuple(pts))


# ---------------------------------------------------------------- file formats


def write_minutiae_file(mset: MinutiaeSet, path) -> None:
    lines = [f"MNT {mset.width} {mset.height} {len(mset)}"]
    lines += [f"{p.x!r} {p.y!r} {p.theta!r}" for p in mset.points]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_minutiae_file(path) -> MinutiaeSet:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read minutiae file: {e}", path) from e
    lines = [ln for ln in text.split("\n")]
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise ParseError("empty file", path, 1)
    head = lines[0].split()
    if len(head) != 4 or head[0] != "MNT":
        raise ParseError(f"malformed header {lines[0]!r}", path, 1)
    try:
        width, height, m = int(head[1]), int(head[2]), int(head[3])
    except ValueError as e:
        raise ParseError(f"malformed header {lines[0]!r}", path, 1) from e
    if width <= 0 or height <= 0 or m < 0:
        raise ParseError(f"invalid header values {lines[0]!r}", path, 1)
    body = lines[1:]
    if len(body) != m:
        raise ParseError(f"header declares {m} minutiae but file has {len(body)} rows", path, 1)
    pts = []
    for i, ln in enumerate(body, start=2):
        parts = ln.split()
        if len(parts) != 3:
            raise ParseError(f"expected 'x y theta', got {ln!r}", path, i)
        try:
            x, y, t = (float(v) for v in parts)
        except ValueError as e:
            raise ParseError(f"non-numeric value in {ln!r}", path, i) from e
        if not all(math.isfinite(v) for v in (x, y, t)):
            raise ParseError(f"non-finite value in {ln!r}", path, i)
        if not (0.0 <= x < width and 0.0 <= y < height):
            raise ParseError(f"minutia ({x}, {y}) outside {width}x{height}", path, i)
        pts.append(Minutia(x, y, t))
    return MinutiaeSet(width, height, tuple(pts))


def write_pgm(image: np.ndarray, path) -> None:
    """Write an 8-bit binary PGM (P5).  Float input is taken as [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValidationError(f"PGM image must be 2-D, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(np.asarray(img, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def _pgm_tokens(buf: bytes, count: int, path):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header", path)
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) file as a ``uint8`` array."""
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise ParseError(f"cannot read image: {e}", path) from e
    (magic, w, h, maxval), offset = _pgm_tokens(buf, 4, path)
    if magic != b"P5":
        raise ParseError(f"not a binary PGM (magic {magic!r})", path)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ParseError(f"only 8-bit PGM supported, maxval={maxval}", path)
    data = buf[offset : offset + w * h]
    if len(data) != w * h:
        raise ParseError(f"expected {w * h} pixel bytes, found {len(data)}", path)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def minutiae_overlap(
    a: Sequence[Sequence[float]] | MinutiaeSet,
    b: Sequence[Sequence[float]] | MinutiaeSet,
    dist_tol: float = 6.0,
    angle_tol: float = 20.0,
) -> int:
    """Number of one-to-one matched minutiae between two unaligned sets.

    Greedy nearest-neighbour pairing under a position and angle tolerance.
    """
    A = a.to_array() if isinstance(a, MinutiaeSet) else np.asarray(a, float).reshape(-1, 3)
    B = b.to_array() if isinstance(b, MinutiaeSet) else np.asarray(b, float).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        return 0
    d = np.hypot(A[:, None, 0] - B[None, :, 0], A[:, None, 1] - B[None, :, 1])
    da = np.abs(((A[:, None, 2] - B[None, :, 2]) + 180.0) % 360.0 - 180.0)
    ok = (d <= dist_tol) & (da <= angle_tol)
    ai, bi = np.nonzero(ok)
    order = np.lexsort((bi, ai, d[ai, bi]))
    used_a, used_b, n = set(), set(), 0
    for k in order:
        i, j = ai[k], bi[k]
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        n += 1
    return n


def aligned_overlap(
    a: MinutiaeSet | np.ndarray,
    b: MinutiaeSet | np.ndarray,
    dist_tol: float = 6.0,
    angle_tol: float = 20.0,
    candidates: int = 8,
) -> int:
    """Best one-to-one overlap over rigid alignments hypothesised from minutia pairs.

    Each pair (a_i, b_j) proposes the rotation ``theta_bj - theta_ai`` and the
    translation moving a_i onto b_j.  Hypotheses vote in a coarse
    (rotation, translation) grid; the ``candidates`` most voted cells are
    scored exactly and the best count is returned.
    """
    A = a.to_array() if isinstance(a, MinutiaeSet) else np.asarray(a, float).reshape(-1, 3)
    B = b.to_array() if isinstance(b, MinutiaeSet) else np.asarray(b, float).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        return 0
    rot = np.deg2rad(B[None, :, 2] - A[:, None, 2]).ravel()
    ai = np.repeat(np.arange(len(A)), len(B))
    bj = np.tile(np.arange(len(B)), len(A))
    c, s = np.cos(rot), np.sin(rot)
    # translation applied after rotating about the origin
    tx = B[bj, 0] - (c * A[ai, 0] - s * A[ai, 1])
    ty = B[bj, 1] - (s * A[ai, 0] + c * A[ai, 1])
    cells = np.stack([
        np.floor(np.rad2deg(rot) % 360.0 / angle_tol),
        np.floor(tx / (2 * dist_tol)),
        np.floor(ty / (2 * dist_tol)),
    ], axis=1).astype(np.int64)
    _, first, inv, votes = np.unique(cells, axis=0, return_index=True, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    best = 0
    for cell in np.lexsort((first, -votes))[:candidates]:
        members = np.nonzero(inv == cell)[0]
        # refine around the cell's median-rotation hypothesis
        h = members[np.argsort(rot[members], kind="stable")[len(members) // 2]]
        moved = np.stack([
            c[h] * A[:, 0] - s[h] * A[:, 1] + tx[h],
            s[h] * A[:, 0] + c[h] * A[:, 1] + ty[h],
            A[:, 2] + np.rad2deg(rot[h]),
        ], axis=1)
        best = max(best, minutiae_overlap(moved, B, dist_tol, angle_tol))
    return best


"""Image/mask I/O (binary PGM/PPM), manifests, synthetic data and resizing."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .rng import DATA, make_rng
from .tensor import bilinear_matrix

PathLike = Union[str, Path]


class PNMError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class SegSample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    mask: np.ndarray  # (1, H, W) in {0, 1}
    id: str

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"{self.id}: image must be (3, H, W), got {self.image.shape}")
        if self.mask.shape != (1,) + self.image.shape[1:]:
            raise ValueError(f"{self.id}: mask {self.mask.shape} does not match image {self.image.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"{self.id}: mask is not binary")


# ------------------------------------------------------------------ PNM
def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PNMError("truncated header")
    return buf[start:pos], pos


def read_pnm(path: PathLike) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) file as a (channels, H, W) grid in [0, 1], scaled by maxval."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"{path}: unsupported format {magic!r}; expected binary P5 or P6")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise PNMError(f"{path}: bad header field {tok!r}") from None
    width, height, maxval = fields
    if maxval > 255 or maxval < 1:
        raise PNMError(f"{path}: maxval {maxval} unsupported (must be 1..255)")
    if width < 1 or height < 1:
        raise PNMError(f"{path}: bad dimensions {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise PNMError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return arr.transpose(2, 0, 1).astype(np.float64) / maxval


def to_uint8(grid: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(grid, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pnm(grid: np.ndarray, path: PathLike) -> None:
    """Write a (1, H, W) or (3, H, W) grid in [0, 1] as P5/P6 (maxval 255)."""
    grid = np.asarray(grid)
    if grid.ndim == 2:
        grid = grid[None]
    if grid.ndim != 3 or grid.shape[0] not in (1, 3):
        raise PNMError(f"cannot write grid of shape {grid.shape} as PGM/PPM")
    c, h, w = grid.shape
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
    body = to_uint8(grid).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(header + body)


def read_mask(path: PathLike) -> np.ndarray:
    """Read a mask; pixels above 127 are foreground.  Colour masks use the first channel."""
    grid = read_pnm(path)
    return (to_uint8(grid[:1]) > 127).astype(np.float64)


def read_image(path: PathLike) -> np.ndarray:
    grid = read_pnm(path)
    return np.repeat(grid, 3, axis=0) if grid.shape[0] == 1 else grid


# ------------------------------------------------------------- overlays
def contour(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour in the background (or off-image)."""
    m = np.asarray(mask).reshape(mask.shape[-2:]) > 0.5
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


GREEN = np.array([0.0, 1.0, 0.0])
RED = np.array([1.0, 0.0, 0.0])


def overlay(image: np.ndarray, gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """RGB copy of ``image`` with the gt contour in green and prediction contour in red.

    Where the contours coincide the red prediction line is drawn on top.
    """
    out = np.array(image, dtype=np.float64, copy=True)
    for mask, colour in ((gt, GREEN), (pred, RED)):
        line = contour(mask)
        out[:, line] = colour[:, None]
    return out


def write_overlay(image: np.ndarray, gt: np.ndarray, pred: np.ndarray, path: PathLike) -> None:
    write_pnm(overlay(image, gt, pred), path)


# ------------------------------------------------------------- manifest
@dataclass
class ManifestEntry:
    image: Path
    mask: Path
    split: str

    @property
    def id(self) -> str:
        return self.image.stem


def read_manifest(path: PathLike) -> list[ManifestEntry]:
    """Parse ``<image>\\t<mask>\\t<split>`` lines; relative paths resolve against the manifest."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    entries = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        img, msk, split = (p.strip() for p in parts)
        entry = ManifestEntry(path.parent / img, path.parent / msk, split)
        for f in (entry.image, entry.mask):
            if not f.is_file():
                raise ManifestError(f"{path}:{lineno}: missing file {f}")
        if entry.id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate id {entry.id!r} (first on line {seen[entry.id]})")
        seen[entry.id] = lineno
        entries.append(entry)
    return entries


def write_manifest(entries: Sequence[ManifestEntry], path: PathLike) -> None:
    path = Path(path)
    lines = []
    for e in entries:
        img = os.path.relpath(e.image, path.parent)
        msk = os.path.relpath(e.mask, path.parent)
        lines.append(f"{img}\t{msk}\t{e.split}\n")
    path.write_text("".join(lines), encoding="utf-8")


def load_dataset(manifest: PathLike, split: Optional[str] = None, size: Optional[int] = None
                 ) -> list[SegSample]:
    """Load samples in manifest order, optionally filtered by split and resized."""
    out = []
    for e in read_manifest(manifest):
        if split is not None and e.split != split:
            continue
        sample = SegSample(read_image(e.image), read_mask(e.mask), e.id)
        if size is not None and sample.image.shape[1:] != (size, size):
            sample = resize_sample(sample, size)
        out.append(sample)
    return out


# ------------------------------------------------------------ transforms
def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = image.shape[-2:]
    if (h, w) == tuple(size):
        return image.copy()
    mh = bilinear_matrix(h, size[0])
    mw = bilinear_matrix(w, size[1])
    return mh @ image @ mw.T


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = mask.shape[-2:]
    rows = np.minimum((np.arange(size[0]) * h) // size[0], h - 1)
    cols = np.minimum((np.arange(size[1]) * w) // size[1], w - 1)
    return (mask[..., rows[:, None], cols[None, :]] > 0.5).astype(mask.dtype)


def resize_sample(sample: SegSample, target: int) -> SegSample:
    """Bilinear image / nearest-neighbour mask resize to ``target`` x ``target``."""
    if target < 16 or target % 16:
        raise ValueError(f"resize target must be a positive multiple of 16, got {target}")
    size = (target, target)
    return SegSample(resize_image(sample.image, size), resize_mask(sample.mask, size), sample.id)


def augment(sample: SegSample, rng: np.random.Generator, flip: bool = True, rotate: bool = True) -> SegSample:
    """Random flips / quarter-turn rotations applied identically to image and mask."""
    img, msk = sample.image, sample.mask
    if flip and rng.random() < 0.5:
        img, msk = img[:, :, ::-1], msk[:, :, ::-1]
    if rotate:
        k = int(rng.integers(4))
        img, msk = np.rot90(img, k, axes=(1, 2)), np.rot90(msk, k, axes=(1, 2))
    return SegSample(np.ascontiguousarray(img), np.ascontiguousarray(msk), sample.id)


# ------------------------------------------------------------- synthetic
@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    theta: float

    def inside(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        dy, dx = yy - self.cy, xx - self.cx
        c, s = np.cos(self.theta), np.sin(self.theta)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.rx) ** 2 + (v / self.ry) ** 2 <= 1.0


def pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates."""
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c, indexing="ij")


def _background(rng: np.random.Generator, size: int, yy, xx) -> np.ndarray:
    base = rng.uniform(0.15, 0.35, size=3)
    grad = rng.uniform(-0.1, 0.1, size=(3, 2))
    ramp = (grad[:, :1, None] * (yy / size - 0.5)[None] + grad[:, 1:, None] * (xx / size - 0.5)[None])
    return base[:, None, None] + ramp


def _sample_ellipses(rng: np.random.Generator, size: int, yy, xx) -> tuple[list[Ellipse], np.ndarray]:
    while True:
        shapes = []
        for _ in range(int(rng.integers(1, 4))):
            ry, rx = rng.uniform(0.08, 0.25, size=2) * size
            cy, cx = rng.uniform(0.2, 0.8, size=2) * size
            shapes.append(Ellipse(cy, cx, ry, rx, rng.uniform(0, np.pi)))
        mask = np.zeros((size, size), dtype=bool)
        for e in shapes:
            mask |= e.inside(yy, xx)
        frac = mask.mean()
        if 0.01 <= frac <= 0.60:
            return shapes, mask


def synthetic_sample(rng: np.random.Generator, size: int, idx: int, blank: bool = False,
                     noise: float = 0.03) -> tuple[SegSample, list[Ellipse]]:
    yy, xx = pixel_grid(size)
    image = _background(rng, size, yy, xx)
    shapes: list[Ellipse] = []
    mask = np.zeros((size, size), dtype=bool)
    if not blank:
        shapes, mask = _sample_ellipses(rng, size, yy, xx)
        for e in shapes:
            inside = e.inside(yy, xx)
            colour = rng.uniform(0.55, 0.9, size=3)
            colour[0] = rng.uniform(0.75, 0.95)
            # brighter towards the centre
            r2 = ((yy - e.cy) ** 2 + (xx - e.cx) ** 2) / max(e.ry, e.rx) ** 2
            shade = colour[:, None, None] * (1.0 - 0.25 * np.clip(r2, 0, 1))[None]
            image = np.where(inside[None], shade, image)
    image = np.clip(image + noise * rng.standard_normal(image.shape), 0.0, 1.0)
    sid = f"blank_{idx:04d}" if blank else f"synth_{idx:04d}"
    return SegSample(image, mask[None].astype(np.float64), sid), shapes


def check_size(size: int, window: int = 4) -> None:
    if size < 16 or size % 16:
        raise ValueError(f"size must be divisible by 16, got {size}")
    if size % (4 * window):
        raise ValueError(f"size must be divisible by 4*window={4 * window}, got {size}")


def gen_synthetic(n: int, size: int, seed: int, window: int = 4, with_shapes: bool = False):
    """``n`` deterministic samples with 1-3 filled ellipses each.

    Sample ``i`` depends only on (seed, i).  With ``with_shapes`` the analytic
    ellipses are returned alongside, for verification.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    check_size(size, window)
    samples, shapes = [], []
    for i in range(n):
        s, e = synthetic_sample(make_rng(seed, DATA, i), size, i)
        samples.append(s)
        shapes.append(e)
    return (samples, shapes) if with_shapes else samples


def gen_blank(size: int, seed: int, idx: int = 0) -> SegSample:
    """A background-only sample (empty mask) drawn from the same image model."""
    check_size(size)
    return synthetic_sample(make_rng(seed, DATA, 1_000_000 + idx), size, idx, blank=True)[0]


def batch_arrays(samples: Sequence[SegSample], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(dtype)
    masks = np.stack([s.mask for s in samples]).astype(dtype)
    return images, masks

"""Segmentation samples, a synthetic shapes benchmark, augmentation, and
PPM/PGM sample files."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .engine import Tensor
from .errors import FormatError, LabelError, ShapeError
from .ops import IGNORE_LABEL, resize_array
from .rng import SplitMix64

SHAPES = ("disk", "rectangle", "triangle", "cross", "ring")
MAX_CLASSES = len(SHAPES) + 1


@dataclass
class SegSample:
    """``image`` is float32 ``(3, h, w)`` in [0, 1]; ``mask`` is uint8
    ``(h, w)`` holding class indices or 255 (ignore)."""

    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ShapeError(f"image must be (3, h, w), got {self.image.shape}", dim="image")
        if self.mask.shape != self.image.shape[1:]:
            raise ShapeError(f"mask {self.mask.shape} does not match image {self.image.shape[1:]}",
                             dim="spatial")

    @property
    def size(self) -> Tuple[int, int]:
        return self.mask.shape

    def tensor(self) -> Tensor:
        return Tensor(self.image[None])

    def validate(self, num_classes: int):
        bad = (self.mask >= num_classes) & (self.mask != IGNORE_LABEL)
        if bad.any():
            y, x = (int(v[0]) for v in np.nonzero(bad))
            raise LabelError(f"mask label {self.mask[y, x]} at ({y}, {x}) outside [0, {num_classes})")


# ---------------------------------------------------------------- rasterization


def _raster(kind: str, h: int, w: int, cy: int, cx: int, r: int, rng: SplitMix64) -> np.ndarray:
    y, x = np.mgrid[0:h, 0:w]
    dy, dx = y - cy, x - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "rectangle":
        hy, hx = rng.randrange(r // 2, r), rng.randrange(r // 2, r)
        return (np.abs(dy) <= hy) & (np.abs(dx) <= hx)
    if kind == "triangle":
        off = rng.randrange(-(r // 2), r // 2)
        pts = [(cy - r, cx + off), (cy + r, cx - r), (cy + r, cx + r)]
        inside = np.ones((h, w), dtype=bool)
        for (ay, ax), (by, bx) in zip(pts, pts[1:] + pts[:1]):
            inside &= (bx - ax) * (y - ay) - (by - ay) * (x - ax) <= 0
        return inside
    if kind == "cross":
        t = max(2, r // 3)
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (r // 2) ** 2)
    raise ValueError(kind)


def _dilate(m: np.ndarray, k: int) -> np.ndarray:
    out = m.copy()
    for _ in range(k):
        g = out.copy()
        g[1:] |= out[:-1]
        g[:-1] |= out[1:]
        g[:, 1:] |= out[:, :-1]
        g[:, :-1] |= out[:, 1:]
        out = g
    return out


def _inner_boundary(m: np.ndarray) -> np.ndarray:
    interior = m.copy()
    interior[1:] &= m[:-1]
    interior[:-1] &= m[1:]
    interior[:, 1:] &= m[:, :-1]
    interior[:, :-1] &= m[:, 1:]
    return m & ~interior


# base colour per shape class; instances jitter around it
PALETTE = np.array([(230, 40, 40), (40, 200, 60), (50, 80, 230), (230, 210, 40), (200, 60, 220)],
                   dtype=np.int64)
JITTER = 40
MIN_BG_DISTANCE = 150


def gen_sample(seed: int, index: int, h: int, w: int, num_classes: int,
               noise: int = 16) -> SegSample:
    """Sample ``index`` of the dataset with ``seed``; a pure function."""
    rng = SplitMix64(seed).fork(index)
    mask = np.zeros((h, w), dtype=np.uint8)
    occupied = np.zeros((h, w), dtype=bool)
    placed = []
    lo_r, hi_r = max(3, min(h, w) // 8), max(4, min(h, w) // 4)
    for _ in range(rng.randrange(1, 4)):
        cls = rng.randrange(1, num_classes - 1)
        for _attempt in range(20):
            r = rng.randrange(lo_r, hi_r)
            cy, cx = rng.randrange(r, h - 1 - r), rng.randrange(r, w - 1 - r)
            shape = _raster(SHAPES[cls - 1], h, w, cy, cx, r, rng)
            if not (_dilate(shape, 2) & occupied).any():
                break
        else:
            continue
        jitter = np.array([rng.randrange(-JITTER, JITTER) for _ in range(3)], dtype=np.int64)
        color = np.clip(PALETTE[cls - 1] + jitter, 0, 255)
        placed.append((cls, shape, color))
        occupied |= shape
    while True:
        bg = np.array([rng.randint(256) for _ in range(3)], dtype=np.int64)
        if all(np.abs(c - bg).sum() >= MIN_BG_DISTANCE for _, _, c in placed):
            break
    img = np.broadcast_to(bg[:, None, None], (3, h, w)).copy()
    for cls, shape, color in placed:
        img[:, shape] = color[:, None]
        mask[shape] = cls
        mask[_inner_boundary(shape)] = IGNORE_LABEL
    if noise:
        u = rng.uniform_array(3 * h * w).reshape(3, h, w)
        img = img + np.floor(u * (2 * noise + 1)).astype(np.int64) - noise
    raw = np.clip(img, 0, 255).astype(np.uint8)
    return SegSample(raw.astype(np.float32) / 255.0, mask)


def gen_synthetic(n_samples: int, h: int, w: int, num_classes: int, seed: int) -> List[SegSample]:
    if num_classes < 2:
        raise ValueError("need at least 2 classes (background plus one shape)")
    if num_classes > MAX_CLASSES:
        raise ValueError(f"{num_classes} classes requested but only {len(SHAPES)} shape types "
                         f"exist (max {MAX_CLASSES} classes)")
    if h < 16 or w < 16:
        raise ValueError("synthetic images must be at least 16x16")
    return [gen_sample(seed, i, h, w, num_classes) for i in range(n_samples)]


def class_histogram(samples: Sequence[SegSample], num_classes: int) -> np.ndarray:
    hist = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        m = s.mask[s.mask != IGNORE_LABEL]
        hist += np.bincount(m, minlength=num_classes)[:num_classes]
    return hist


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentSpec:
    scale_range: Tuple[float, float] = (0.7, 1.3)
    crop: Tuple[int, int] = (64, 64)
    hflip_prob: float = 0.5

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid scale range {self.scale_range}")
        if min(self.crop) < 1 or not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("crop must be positive and hflip_prob in [0, 1]")


def resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize using the half-pixel convention."""
    h, w = mask.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return mask[ys[:, None], xs[None, :]]


def hflip(sample: SegSample) -> SegSample:
    return SegSample(sample.image[:, :, ::-1].copy(), sample.mask[:, ::-1].copy())


def apply_augment(sample: SegSample, scale: float, top: int, left: int, flip: bool,
                  crop: Tuple[int, int]) -> SegSample:
    """Deterministic scale -> pad -> crop -> flip with explicit parameters."""
    h, w = sample.size
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    if (nh, nw) == (h, w):
        img, mask = sample.image, sample.mask
    else:
        img = resize_array(sample.image, nh, nw)
        mask = resize_mask(sample.mask, nh, nw)
    ch, cw = crop
    ph, pw = max(0, ch - nh), max(0, cw - nw)
    if ph or pw:
        mode = "reflect" if min(nh, nw) > 1 and ph < nh and pw < nw else "edge"
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode=mode)
        mask = np.pad(mask, ((0, ph), (0, pw)), constant_values=IGNORE_LABEL)
    img = img[:, top:top + ch, left:left + cw]
    mask = mask[top:top + ch, left:left + cw]
    if flip:
        img, mask = img[:, :, ::-1], mask[:, ::-1]
    return SegSample(np.ascontiguousarray(img, dtype=np.float32), np.ascontiguousarray(mask))


def augment(sample: SegSample, spec: AugmentSpec, rng: SplitMix64) -> SegSample:
    """Random scaling, cropping and horizontal flipping drawn from ``rng``."""
    h, w = sample.size
    s = rng.uniform(*spec.scale_range)
    nh, nw = max(1, round(h * s)), max(1, round(w * s))
    ch, cw = spec.crop
    top = rng.randrange(0, max(nh, ch) - ch)
    left = rng.randrange(0, max(nw, cw) - cw)
    flip = rng.uniform() < spec.hflip_prob
    return apply_augment(sample, s, top, left, flip, spec.crop)


def collate(samples: Sequence[SegSample]):
    """Stack into ``(n, 3, H, W)`` images and ``(n, H, W)`` masks, padding
    smaller samples at the bottom/right (mask padding is ignore)."""
    H = max(s.size[0] for s in samples)
    W = max(s.size[1] for s in samples)
    images = np.zeros((len(samples), 3, H, W), dtype=np.float32)
    masks = np.full((len(samples), H, W), IGNORE_LABEL, dtype=np.uint8)
    for i, s in enumerate(samples):
        h, w = s.size
        images[i, :, :h, :w] = s.image
        masks[i, :h, :w] = s.mask
    return images, masks


# ---------------------------------------------------------------- PPM / PGM


def _write_pnm(path, magic: bytes, array: np.ndarray):
    h, w = array.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(array, dtype=np.uint8).tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} header")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric header field") from exc
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError(f"{path}: unsupported size/maxval {w}x{h}/{maxval}")
    need = w * h * channels
    if len(buf) - pos != need:
        raise FormatError(f"{path}: raster has {len(buf) - pos} bytes, header implies {need}")
    arr = np.frombuffer(buf, dtype=np.uint8, offset=pos).copy()
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def write_ppm(path, rgb: np.ndarray):
    """``rgb`` is uint8 ``(h, w, 3)``."""
    _write_pnm(path, b"P6", rgb)


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def write_pgm(path, gray: np.ndarray):
    _write_pnm(path, b"P5", gray)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def image_to_u8(image: np.ndarray) -> np.ndarray:
    """``(3, h, w)`` float in [0, 1] to ``(h, w, 3)`` uint8."""
    return np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def write_sample(sample: SegSample, image_path, mask_path):
    write_ppm(image_path, image_to_u8(sample.image))
    write_pgm(mask_path, sample.mask)


def read_image(path) -> np.ndarray:
    return read_ppm(path).transpose(2, 0, 1).astype(np.float32) / 255.0


def read_sample(image_path, mask_path) -> SegSample:
    img = read_ppm(image_path)
    mask = read_pgm(mask_path)
    if img.shape[:2] != mask.shape:
        raise FormatError(f"image {image_path} is {img.shape[1]}x{img.shape[0]} but mask "
                          f"{mask_path} is {mask.shape[1]}x{mask.shape[0]}")
    return SegSample(img.transpose(2, 0, 1).astype(np.float32) / 255.0, mask)


def write_dataset(samples: Sequence[SegSample], out_dir, manifest_name: str = "manifest.txt") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        img, msk = f"img_{i:05d}.ppm", f"mask_{i:05d}.pgm"
        write_sample(s, out / img, out / msk)
        lines.append(f"{img}\t{msk}\n")
    manifest = out / manifest_name
    manifest.write_text("".join(lines))
    return manifest


def read_manifest(path) -> List[Tuple[Path, Path]]:
    path = Path(path)
    base = path.parent
    pairs = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{n}: expected image<TAB>mask")
        pairs.append(tuple(p if os.path.isabs(p) else base / p for p in map(Path, parts)))
    return pairs


def load_dataset(manifest) -> List[SegSample]:
    return [read_sample(i, m) for i, m in read_manifest(manifest)]

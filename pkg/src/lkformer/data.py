"""Image I/O, bicubic degradation, synthetic infrared scenes and patch sampling.

Images are 2-D float64 arrays holding integer values in [0, 255].
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tensor import Rng

CUBIC_A = -0.5


class PgmError(ValueError):
    pass


# -- PGM ----------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def parse_pgm(buf: bytes) -> np.ndarray:
    if not buf.startswith(b"P5"):
        raise PgmError("not a binary PGM (missing P5 magic)")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise PgmError("truncated PGM header")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise PgmError(f"malformed PGM header field {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PgmError(f"bad PGM dimensions {width}x{height}")
    if maxval != 255:
        raise PgmError(f"only maxval 255 is supported, got {maxval}")
    if pos >= len(buf) or buf[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise PgmError("truncated PGM header")
    pos += 1
    n = width * height
    if len(buf) - pos < n:
        raise PgmError(f"truncated PGM data: need {n} bytes, have {len(buf) - pos}")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos)
    return pixels.reshape(height, width).astype(np.float64)


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def save_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM images are 2-D, got shape {img.shape}")
    if np.any(img < 0) or np.any(img > 255):
        raise ValueError("pixel values must lie in [0, 255]")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(to_u8(img).tobytes())


# -- bicubic resampling ---------------------------------------------------------

def cubic(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0
    far = a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a
    return np.where(ax <= 1.0, near, np.where(ax < 2.0, far, 0.0))


def resize_matrix(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """(n_out, n_in) interpolation matrix with edge-clamped taps.

    Pixel centres are aligned; when shrinking with ``antialias`` the kernel is
    stretched by 1/scale.
    """
    scale = n_out / n_in
    stretch = antialias and scale < 1.0
    width = 4.0 / scale if stretch else 4.0
    centres = (np.arange(n_out) + 0.5) / scale - 0.5
    left = np.floor(centres - width / 2.0).astype(int)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = centres[:, None] - idx
    weights = scale * cubic(scale * dist) if stretch else cubic(dist)
    weights = weights / weights.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, n_in - 1)
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), taps)
    np.add.at(mat, (rows, idx.ravel()), weights.ravel())
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Cubic (a = -0.5) resize, clamped to [0, 255] and rounded to integers."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    out = resize_matrix(h, out_h, antialias) @ img @ resize_matrix(w, out_w, antialias).T
    return np.rint(np.clip(out, 0.0, 255.0))


def downscale(hr: np.ndarray, scale: int) -> np.ndarray:
    h, w = hr.shape
    if h % scale or w % scale:
        raise ValueError(f"{h}x{w} image is not divisible by scale {scale}")
    return bicubic_resize(hr, h // scale, w // scale)


def upscale(lr: np.ndarray, scale: int) -> np.ndarray:
    h, w = lr.shape
    return bicubic_resize(lr, h * scale, w * scale)


def mod_crop(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape
    return img[: h - h % scale, : w - w % scale]


# -- synthetic scenes -------------------------------------------------------------

def synth_scene(rng: Rng, h: int, w: int) -> np.ndarray:
    """Thermal-looking scene: sky/ground gradient, warm buildings, thin
    railings and bright Gaussian heat sources."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    ramp = (np.cos(angle) * xx / w + np.sin(angle) * yy / h)
    img = rng.uniform(40.0, 110.0) + rng.uniform(20.0, 60.0) * ramp
    # low-frequency texture
    for _ in range(2):
        fy, fx = rng.uniform(0.5, 3.0, 2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        img = img + rng.uniform(3.0, 10.0) * np.sin(2 * np.pi * (fy * yy / h + fx * xx / w) + phase)

    for _ in range(int(rng.integers(2, 6))):
        y0, x0 = int(rng.integers(0, h - 4)), int(rng.integers(0, w - 4))
        bh, bw = int(rng.integers(4, max(5, h // 2))), int(rng.integers(4, max(5, w // 3)))
        img[y0:y0 + bh, x0:x0 + bw] = rng.uniform(90.0, 200.0)
        # windows: a regular grid of warmer cells inside the building
        if bh > 8 and bw > 8 and rng.uniform(0.0, 1.0) < 0.6:
            img[y0 + 2:y0 + bh - 1:4, x0 + 2:x0 + bw - 1:4] += rng.uniform(20.0, 50.0)

    for _ in range(int(rng.integers(1, 4))):
        level = rng.uniform(150.0, 240.0)
        if rng.uniform(0.0, 1.0) < 0.5:
            y = int(rng.integers(0, h))
            img[y, :] = level
            step = int(rng.integers(3, 7))
            img[max(0, y - step):y, ::step] = level  # railing posts
        else:
            x = int(rng.integers(0, w))
            img[:, x] = level

    for _ in range(int(rng.integers(1, 5))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sy, sx = rng.uniform(1.0, 4.0), rng.uniform(1.0, 3.0)
        img = img + rng.uniform(40.0, 120.0) * np.exp(
            -((yy - cy) ** 2 / (2 * sy * sy) + (xx - cx) ** 2 / (2 * sx * sx)))
    return np.rint(np.clip(img, 0.0, 255.0))


# -- pairs, splits, sampling ----------------------------------------------------------

@dataclass
class SrPair:
    hr: np.ndarray
    lr: np.ndarray
    scale: int
    name: str = ""

    def __post_init__(self) -> None:
        if self.hr.shape != (self.lr.shape[0] * self.scale, self.lr.shape[1] * self.scale):
            raise ValueError(f"HR {self.hr.shape} is not {self.scale}x LR {self.lr.shape}")


def make_pair(hr: np.ndarray, scale: int, name: str = "") -> SrPair:
    hr = mod_crop(np.asarray(hr, dtype=np.float64), scale)
    return SrPair(hr, downscale(hr, scale), scale, name)


def list_images(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.pgm"))


def make_pairs(hr_dir, scale: int) -> list[SrPair]:
    """LR/HR pairs for every ``*.pgm`` in ``hr_dir`` (lexicographic order)."""
    files = list_images(hr_dir)
    if not files:
        raise FileNotFoundError(f"no .pgm images in {hr_dir}")
    return [make_pair(load_pgm(f), scale, f.name) for f in files]


def split_train_test(items: Sequence, rng: Rng, train_fraction: float = 0.8) -> tuple[list, list]:
    n = len(items)
    order = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    return [items[i] for i in order[:n_train]], [items[i] for i in order[n_train:]]


def augment(img: np.ndarray, rot: int, flip: bool) -> np.ndarray:
    out = np.rot90(img, rot)
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


class PatchSampler:
    """Random co-located LR/HR patches with flip and 90-degree rotation."""

    def __init__(self, pairs: Sequence[SrPair], patch_size: int, flips: bool = True,
                 rotations: bool = True) -> None:
        if not pairs:
            raise ValueError("PatchSampler needs at least one pair")
        for pair in pairs:
            if min(pair.lr.shape) < patch_size:
                raise ValueError(f"{pair.name or 'image'} LR {pair.lr.shape} smaller than patch {patch_size}")
        self.pairs = list(pairs)
        self.patch_size = patch_size
        self.flips = flips
        self.rotations = rotations

    def sample(self, rng: Rng, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (LR, HR) batches of shape (B, 1, p, p) and (B, 1, s*p, s*p) in [0, 255]."""
        p = self.patch_size
        lrs, hrs = [], []
        for _ in range(batch_size):
            pair = self.pairs[int(rng.integers(0, len(self.pairs)))]
            s = pair.scale
            y = int(rng.integers(0, pair.lr.shape[0] - p + 1))
            x = int(rng.integers(0, pair.lr.shape[1] - p + 1))
            lr = pair.lr[y:y + p, x:x + p]
            hr = pair.hr[y * s:(y + p) * s, x * s:(x + p) * s]
            rot = int(rng.integers(0, 4)) if self.rotations else 0
            flip = bool(rng.integers(0, 2)) if self.flips else False
            lrs.append(augment(lr, rot, flip))
            hrs.append(augment(hr, rot, flip))
        return np.stack(lrs)[:, None], np.stack(hrs)[:, None]


def write_dataset(root, images: Sequence[np.ndarray], scales: Sequence[int], rng: Rng,
                  train_fraction: float = 0.8,
                  names: Optional[Sequence[str]] = None) -> tuple[list[str], list[str]]:
    """Write ``hr/``, ``lr_x{s}/`` and the ``train.txt`` / ``test.txt`` split lists.

    Files are named ``scene_XXXX.pgm`` unless ``names`` is given.
    """
    root = Path(root)
    (root / "hr").mkdir(parents=True, exist_ok=True)
    if names is None:
        names = [f"scene_{i:04d}.pgm" for i in range(len(images))]
    if len(names) != len(images) or len(set(names)) != len(names):
        raise ValueError("need one distinct file name per image")
    for name, img in zip(names, images):
        save_pgm(root / "hr" / name, img)
    for s in scales:
        lr_dir = root / f"lr_x{s}"
        lr_dir.mkdir(exist_ok=True)
        for name, img in zip(names, images):
            save_pgm(lr_dir / name, make_pair(img, s).lr)
    train, test = split_train_test(names, rng, train_fraction)
    (root / "train.txt").write_text("".join(n + os.linesep for n in sorted(train)))
    (root / "test.txt").write_text("".join(n + os.linesep for n in sorted(test)))
    return sorted(train), sorted(test)


def read_split(root, which: str) -> list[str] | None:
    path = Path(root) / f"{which}.txt"
    if not path.exists():
        return None
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def load_split_pairs(root, scale: int, which: str) -> list[SrPair]:
    """Pairs for one split of a dataset root (all HR images if no split list exists)."""
    root = Path(root)
    hr_dir = root / "hr" if (root / "hr").is_dir() else root
    names = read_split(root, which)
    if names is None:
        return make_pairs(hr_dir, scale)
    if not names:
        raise ValueError(f"{which} split of {root} is empty")
    return [make_pair(load_pgm(hr_dir / n), scale, n) for n in names]

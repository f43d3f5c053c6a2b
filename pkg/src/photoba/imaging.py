"""Grayscale images, box-filter pyramids and bilinear sampling.

Coordinates follow the pixel-center convention: integer coordinates sit on
pixel centers, so pixel ``(0, 0)`` covers ``[-0.5, 0.5]^2``. Moving one
pyramid level up maps ``x -> (x + 0.5) / 2 - 0.5``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Dual, mark_one_sided

LUMA = np.array([0.299, 0.587, 0.114])
MIN_LEVEL_SIZE = 8
MIN_PYRAMID_INPUT = 16


class ImageError(ValueError):
    pass


@dataclass(frozen=True)
class GrayImage:
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        if d.ndim != 2 or min(d.shape) < 1:
            raise ImageError(f"expected a 2-D image, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ImageError("image contains non-finite values")
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class ImagePyramid:
    levels: tuple

    @property
    def max_level(self) -> int:
        return len(self.levels) - 1

    def __getitem__(self, level: int) -> GrayImage:
        return self.levels[level]


def load_image(path) -> np.ndarray:
    """Read an image file into a float array (``.npy`` or any Pillow format)."""
    path = Path(path)
    try:
        if path.suffix == ".npy":
            return np.load(path)
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("RGB") if im.mode not in ("L", "F", "I") else im,
                              dtype=float)
    except (OSError, ValueError) as exc:
        raise ImageError(f"cannot decode image {path}: {exc}") from exc


def to_grayscale(image) -> GrayImage:
    if isinstance(image, (str, Path)):
        image = load_image(image)
    arr = np.asarray(image, dtype=float)
    if arr.ndim == 3:
        if arr.shape[2] == 4:
            arr = arr[..., :3]
        if arr.shape[2] != 3:
            raise ImageError(f"unsupported channel count {arr.shape[2]}")
        arr = arr @ LUMA
    return GrayImage(arr)


def downsample(img: GrayImage) -> GrayImage:
    """2x2 box filter; an odd trailing row/column is dropped."""
    d = img.data
    h, w = d.shape[0] // 2, d.shape[1] // 2
    if h < 1 or w < 1:
        raise ImageError("image too small to downsample")
    d = d[: 2 * h, : 2 * w]
    return GrayImage(0.25 * (d[0::2, 0::2] + d[1::2, 0::2] + d[0::2, 1::2] + d[1::2, 1::2]))


def build_pyramid(img: GrayImage, max_levels: int | None = None) -> ImagePyramid:
    if min(img.data.shape) < MIN_PYRAMID_INPUT:
        raise ImageError(
            f"image {img.width}x{img.height} too small for a pyramid "
            f"(min dimension {MIN_PYRAMID_INPUT})"
        )
    levels = [img]
    while min(levels[-1].data.shape) >= MIN_LEVEL_SIZE:
        if max_levels is not None and len(levels) >= max_levels:
            break
        levels.append(downsample(levels[-1]))
    return ImagePyramid(tuple(levels))


def to_level(x, level):
    """Level-0 pixel coordinate to pyramid level ``level``."""
    scale = 0.5 ** np.asarray(level, dtype=float)
    return (x + 0.5) * scale - 0.5


def from_level(x, level):
    return (x + 0.5) * 2.0 ** np.asarray(level, dtype=float) - 0.5


def sample_bilinear(img: GrayImage, xy):
    """Sample at pixel-center coordinates; returns ``(value, in_bounds)``.

    Out-of-bounds points (whose 2x2 support leaves the image) get value 0
    and flag False.
    """
    xy = np.asarray(xy, dtype=float)
    val, _, _, ok = _bilinear(img.data, xy[..., 0], xy[..., 1])
    if val.ndim == 0:
        return float(val), bool(ok)
    return val, ok


def _bilinear(data, x, y):
    h, w = data.shape
    ok = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1) & np.isfinite(x) & np.isfinite(y)
    xs = np.where(ok, x, 0.0)
    ys = np.where(ok, y, 0.0)
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    i00 = data[y0, x0]
    i01 = data[y0, x1]
    i10 = data[y1, x0]
    i11 = data[y1, x1]
    top = i00 + fx * (i01 - i00)
    bot = i10 + fx * (i11 - i10)
    val = top + fy * (bot - top)
    gx = (1 - fy) * (i01 - i00) + fy * (i11 - i10)
    gy = bot - top
    val = np.where(ok, val, 0.0)
    return val, gx, gy, ok


def select_target_level(warped, max_level: int) -> np.ndarray | int:
    """Pyramid level whose sample spacing is closest to one pixel.

    ``warped`` holds the 4x4 grid warped into the target at level 0, shape
    ``(..., 16, 2)`` (or ``(2, 16)`` for a single patch). The mean spacing
    ``d`` over the 24 grid-adjacent pairs gives ``round(log2 d)``, clamped to
    ``[0, max_level]``.
    """
    w = np.asarray(warped, dtype=float)
    single = w.shape == (2, 16)
    if single:
        w = w.T
    d = mean_grid_spacing(w)
    if np.any(~(d > 0)):
        raise ImageError("degenerate warped patch (zero spacing)")
    level = np.clip(np.round(np.log2(d)), 0, max_level).astype(int)
    return int(level) if single or level.ndim == 0 else level


def mean_grid_spacing(w: np.ndarray) -> np.ndarray:
    g = w.reshape(w.shape[:-2] + (4, 4, 2))
    dx = np.linalg.norm(np.diff(g, axis=-2), axis=-1)
    dy = np.linalg.norm(np.diff(g, axis=-3), axis=-1)
    n = dx.shape[-1] * dx.shape[-2] + dy.shape[-1] * dy.shape[-2]
    return (dx.sum((-1, -2)) + dy.sum((-1, -2))) / n


class PyramidAtlas:
    """All pyramid levels of all images packed into one flat buffer.

    Lets a batch of points spread over many images and levels be sampled with
    a single gather.
    """

    def __init__(self, pyramids):
        self.pyramids = list(pyramids)
        n_img = len(self.pyramids)
        self.max_level = np.array([p.max_level for p in self.pyramids], dtype=int)
        L = int(self.max_level.max()) + 1 if n_img else 1
        self.offset = np.zeros((n_img, L), dtype=np.int64)
        self.width = np.ones((n_img, L), dtype=np.int64)
        self.height = np.ones((n_img, L), dtype=np.int64)
        chunks = []
        pos = 0
        for i, p in enumerate(self.pyramids):
            for lvl in range(L):
                im = p.levels[min(lvl, p.max_level)].data
                self.offset[i, lvl] = pos
                self.height[i, lvl], self.width[i, lvl] = im.shape
                chunks.append(im.ravel())
                pos += im.size
        self.buffer = np.concatenate(chunks) if chunks else np.zeros(1)

    def __len__(self) -> int:
        return len(self.pyramids)

    def size(self, image: int, level: int = 0) -> tuple[int, int]:
        return int(self.width[image, level]), int(self.height[image, level])

    def sample(self, image, level, x0, y0):
        """Sample level-0 coordinates ``(x0, y0)`` in ``image`` at ``level``.

        ``image`` and ``level`` broadcast against the coordinates. Returns the
        values, their gradient w.r.t. the *level-0* coordinates, a validity
        mask and a mask of points lying exactly on a lattice line.
        """
        image = np.asarray(image)
        level = np.minimum(np.asarray(level), self.max_level[image])
        scale = 0.5 ** level.astype(float)
        x = (x0 + 0.5) * scale - 0.5
        y = (y0 + 0.5) * scale - 0.5
        w = self.width[image, level]
        h = self.height[image, level]
        off = self.offset[image, level]
        ok = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1) & np.isfinite(x) & np.isfinite(y)
        xs = np.where(ok, x, 0.0)
        ys = np.where(ok, y, 0.0)
        xi = np.minimum(np.floor(xs).astype(np.int64), w - 2)
        yi = np.minimum(np.floor(ys).astype(np.int64), h - 2)
        fx = xs - xi
        fy = ys - yi
        base = off + yi * w + xi
        buf = self.buffer
        i00 = buf[base]
        i01 = buf[base + 1]
        i10 = buf[base + w]
        i11 = buf[base + w + 1]
        top = i00 + fx * (i01 - i00)
        bot = i10 + fx * (i11 - i10)
        val = np.where(ok, top + fy * (bot - top), 0.0)
        gx = ((1 - fy) * (i01 - i00) + fy * (i11 - i10)) * scale
        gy = (bot - top) * scale
        lattice = ok & ((fx == 0.0) | (fy == 0.0))
        return val, gx, gy, ok, lattice

    def sample_dual(self, image, level, x0, y0):
        """Like :meth:`sample` but ``x0``/``y0`` may be duals; returns ``(value, ok)``."""
        xv = x0.val if isinstance(x0, Dual) else x0
        yv = y0.val if isinstance(y0, Dual) else y0
        val, gx, gy, ok, lattice = self.sample(image, level, xv, yv)
        if not isinstance(x0, Dual) and not isinstance(y0, Dual):
            return val, ok
        if np.any(lattice):
            mark_one_sided()
        der = 0.0
        if isinstance(x0, Dual):
            der = x0.der * gx[..., None]
        if isinstance(y0, Dual):
            der = der + y0.der * gy[..., None]
        return Dual(val, der), ok

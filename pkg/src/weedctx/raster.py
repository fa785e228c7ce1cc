"""Pixel-level primitives: images, cropping, pasting, resampling, PNG I/O.

An image is a numpy array of shape (height, width, 3), dtype uint8, origin at
the top-left, x rightward, y downward. All rectangle math is half-open:
[x0, x0+w) x [y0, y0+h). Every operation is a pure function returning a new
array; inputs are never mutated.

Resampling semantics (fixed so downstream geometry is exactly testable):
integer-factor downscales use the block mean (box filter); everything else is
separable bilinear sampling at ((i+0.5)*src/dst - 0.5) with clamp-to-edge.
Intermediate arithmetic is float64; the result rounds half-up to 8 bits.
"""

import io
from typing import NamedTuple

import numpy as np
from PIL import Image, UnidentifiedImageError


class BoundsError(ValueError):
    """A rectangle or placement does not fit inside the image."""


class DegenerateRectError(ValueError):
    """A zero-extent rectangle where a positive area is required."""


class DecodeError(ValueError):
    """Byte stream is not a well-formed lossless raster file."""


class PixelRect(NamedTuple):
    x0: int
    y0: int
    w: int
    h: int

    @property
    def x1(self) -> int:
        return self.x0 + self.w

    @property
    def y1(self) -> int:
        return self.y0 + self.h

    def intersect(self, other: "PixelRect") -> "PixelRect":
        x0 = max(self.x0, other.x0)
        y0 = max(self.y0, other.y0)
        x1 = min(self.x1, other.x1)
        y1 = min(self.y1, other.y1)
        return PixelRect(x0, y0, max(0, x1 - x0), max(0, y1 - y0))

    def contains_point(self, x: float, y: float) -> bool:
        # Half-open: right/bottom edges excluded.
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def overlap_area(self, other: "PixelRect") -> int:
        r = self.intersect(other)
        return r.w * r.h


def validate_image(img: np.ndarray) -> np.ndarray:
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8 array, got {getattr(img, 'shape', type(img))}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {img.dtype}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    return img


def image_size(img: np.ndarray) -> tuple[int, int]:
    """(width, height) of an image array."""
    return img.shape[1], img.shape[0]


def new_image(width: int, height: int, fill=(0, 0, 0)) -> np.ndarray:
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[:] = np.asarray(fill, dtype=np.uint8)
    return img


def round_half_up_u8(values: np.ndarray) -> np.ndarray:
    """Round nonnegative float samples half-up and clip into uint8 range."""
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def crop(img: np.ndarray, r: PixelRect) -> np.ndarray:
    validate_image(img)
    r = PixelRect(*r)
    if r.w == 0 or r.h == 0:
        raise DegenerateRectError(f"cannot crop zero-extent rect {r}")
    if r.w < 0 or r.h < 0:
        raise DegenerateRectError(f"negative-extent rect {r}")
    w, h = image_size(img)
    if r.x0 < 0 or r.y0 < 0 or r.x1 > w or r.y1 > h:
        raise BoundsError(f"rect {r} outside {w}x{h} image")
    return img[r.y0:r.y1, r.x0:r.x1].copy()


def paste(dst: np.ndarray, src: np.ndarray, x: int, y: int) -> np.ndarray:
    """Return dst with src written at (x, y); dst itself is untouched."""
    validate_image(dst)
    validate_image(src)
    dw, dh = image_size(dst)
    sw, sh = image_size(src)
    if x < 0 or y < 0 or x + sw > dw or y + sh > dh:
        raise BoundsError(f"{sw}x{sh} source at ({x}, {y}) overflows {dw}x{dh} destination")
    out = dst.copy()
    out[y:y + sh, x:x + sw] = src
    return out


def resample(img: np.ndarray, tw: int, th: int) -> np.ndarray:
    validate_image(img)
    if tw < 1 or th < 1:
        raise ValueError(f"target size {tw}x{th} must be positive")
    w, h = image_size(img)
    if tw == w and th == h:
        return img.copy()
    if w % tw == 0 and h % th == 0:
        return _block_mean(img, tw, th)
    return _bilinear(img, tw, th)


def _block_mean(img: np.ndarray, tw: int, th: int) -> np.ndarray:
    h, w = img.shape[:2]
    kx = w // tw
    ky = h // th
    blocks = img.reshape(th, ky, tw, kx, 3).astype(np.float64)
    means = blocks.mean(axis=(1, 3))
    return round_half_up_u8(means)


def _axis_coords(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = (np.arange(dst) + 0.5) * src / dst - 0.5
    s = np.clip(s, 0.0, src - 1.0)
    i0 = np.floor(s).astype(np.intp)
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, s - i0


def _bilinear(img: np.ndarray, tw: int, th: int) -> np.ndarray:
    h, w = img.shape[:2]
    x0, x1, fx = _axis_coords(w, tw)
    y0, y1, fy = _axis_coords(h, th)
    pix = img.astype(np.float64)
    top = pix[y0][:, x0] * (1.0 - fx)[None, :, None] + pix[y0][:, x1] * fx[None, :, None]
    bot = pix[y1][:, x0] * (1.0 - fx)[None, :, None] + pix[y1][:, x1] * fx[None, :, None]
    out = top * (1.0 - fy)[:, None, None] + bot * fy[:, None, None]
    return round_half_up_u8(out)


def encode_image(img: np.ndarray) -> bytes:
    validate_image(img)
    buf = io.BytesIO()
    Image.fromarray(img, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_image(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            rgb = im.convert("RGB")
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"not a decodable image: {exc}") from exc
    return np.asarray(rgb, dtype=np.uint8)


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def write_image(path, img: np.ndarray) -> None:
    data = encode_image(img)
    with open(path, "wb") as fh:
        fh.write(data)

import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weedctx import raster
from weedctx.raster import (
    BoundsError,
    DecodeError,
    DegenerateRectError,
    PixelRect,
    crop,
    decode_image,
    encode_image,
    new_image,
    paste,
    resample,
)


def random_image(rng, w, h):
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


# ---------------------------------------------------------------- crop

def test_crop_full_rect_is_identity():
    rng = np.random.default_rng(0)
    img = random_image(rng, 17, 11)
    out = crop(img, PixelRect(0, 0, 17, 11))
    assert np.array_equal(out, img)
    assert out is not img


def test_crop_top_left_tile_of_large_image():
    # 4000x6000 source, 300x300 grid cell at the origin.
    rng = np.random.default_rng(1)
    img = random_image(rng, 4000, 6000)
    tile = crop(img, PixelRect(0, 0, 300, 300))
    assert tile.shape == (300, 300, 3)
    assert np.array_equal(tile, img[:300, :300])


def test_crop_checkerboard_subpattern_pixelwise():
    # Index-arithmetic oracle: out(x, y) == img(x0+x, y0+y), checked per pixel.
    board = np.zeros((6, 6, 3), dtype=np.uint8)
    for y in range(6):
        for x in range(6):
            board[y, x] = 255 if (x + y) % 2 == 0 else 0
    out = crop(board, PixelRect(2, 2, 2, 2))
    for y in range(2):
        for x in range(2):
            assert tuple(out[y, x]) == tuple(board[2 + y, 2 + x])


def test_crop_rejects_out_of_bounds_and_degenerate():
    img = new_image(10, 10)
    with pytest.raises(BoundsError):
        crop(img, PixelRect(5, 5, 6, 6))
    with pytest.raises(BoundsError):
        crop(img, PixelRect(-1, 0, 2, 2))
    with pytest.raises(DegenerateRectError):
        crop(img, PixelRect(0, 0, 0, 3))


@settings(max_examples=60, deadline=None)
@given(data=st.data())
def test_crop_composition(data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    img = random_image(rng, 24, 18)
    ax = data.draw(st.integers(0, 20))
    ay = data.draw(st.integers(0, 14))
    aw = data.draw(st.integers(1, 24 - ax))
    ah = data.draw(st.integers(1, 18 - ay))
    bx = data.draw(st.integers(0, aw - 1))
    by = data.draw(st.integers(0, ah - 1))
    bw = data.draw(st.integers(1, aw - bx))
    bh = data.draw(st.integers(1, ah - by))
    inner = crop(crop(img, PixelRect(ax, ay, aw, ah)), PixelRect(bx, by, bw, bh))
    direct = crop(img, PixelRect(ax + bx, ay + by, bw, bh))
    assert np.array_equal(inner, direct)


# ---------------------------------------------------------------- paste

def test_paste_self_overwrite():
    rng = np.random.default_rng(2)
    img = random_image(rng, 9, 9)
    assert np.array_equal(paste(img, img, 0, 0), img)


def test_paste_center_block_pixel_scan():
    white = new_image(300, 300, (255, 255, 255))
    black = new_image(100, 100, (0, 0, 0))
    out = paste(white, black, 100, 100)
    for y, x in [(0, 0), (99, 150), (150, 99), (200, 150), (150, 200), (299, 299)]:
        assert tuple(out[y, x]) == (255, 255, 255)
    for y, x in [(100, 100), (150, 150), (199, 199)]:
        assert tuple(out[y, x]) == (0, 0, 0)
    assert (out == 0).all(axis=2).sum() == 100 * 100
    assert np.array_equal(white, new_image(300, 300, (255, 255, 255)))  # input untouched


def test_paste_overflow_rejected():
    dst = new_image(300, 300)
    src = new_image(100, 100)
    with pytest.raises(BoundsError):
        paste(dst, src, 250, 250)


# ---------------------------------------------------------------- resample

def block_mean_oracle(img, tw, th):
    """Brute-force per-output-pixel block average, rounded half-up."""
    h, w = img.shape[:2]
    kx, ky = w // tw, h // th
    out = np.zeros((th, tw, 3), dtype=np.uint8)
    for j in range(th):
        for i in range(tw):
            for c in range(3):
                total = 0
                for dy in range(ky):
                    for dx in range(kx):
                        total += int(img[j * ky + dy, i * kx + dx, c])
                out[j, i, c] = int(total / (kx * ky) + 0.5)
    return out


def test_resample_identity():
    rng = np.random.default_rng(3)
    img = random_image(rng, 300, 300)
    assert np.array_equal(resample(img, 300, 300), img)


def test_resample_6x6_to_2x2_block_mean():
    rng = np.random.default_rng(4)
    img = random_image(rng, 6, 6)
    assert np.array_equal(resample(img, 2, 2), block_mean_oracle(img, 2, 2))


def test_resample_non_square_integer_factors():
    rng = np.random.default_rng(5)
    img = random_image(rng, 12, 6)  # kx=4, ky=2
    assert np.array_equal(resample(img, 3, 3), block_mean_oracle(img, 3, 3))


def test_resample_1x1_to_constant():
    img = new_image(1, 1, (37, 201, 95))
    out = resample(img, 300, 300)
    assert out.shape == (300, 300, 3)
    assert (out == np.array([37, 201, 95], dtype=np.uint8)).all()


def test_resample_upscale_matches_pointwise_bilinear_oracle():
    rng = np.random.default_rng(6)
    img = random_image(rng, 4, 3)
    tw, th = 9, 7
    out = resample(img, tw, th)
    pix = img.astype(np.float64)
    for j in range(th):
        for i in range(tw):
            sx = min(max((i + 0.5) * 4 / tw - 0.5, 0.0), 3.0)
            sy = min(max((j + 0.5) * 3 / th - 0.5, 0.0), 2.0)
            x0, y0 = int(np.floor(sx)), int(np.floor(sy))
            x1, y1 = min(x0 + 1, 3), min(y0 + 1, 2)
            fx, fy = sx - x0, sy - y0
            top = pix[y0, x0] * (1 - fx) + pix[y0, x1] * fx
            bot = pix[y1, x0] * (1 - fx) + pix[y1, x1] * fx
            val = top * (1 - fy) + bot * fy
            assert np.array_equal(out[j, i], np.floor(val + 0.5).astype(np.uint8))


def test_resample_deterministic():
    rng = np.random.default_rng(7)
    img = random_image(rng, 31, 17)
    a = resample(img, 13, 9)
    b = resample(img.copy(), 13, 9)
    assert np.array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), factor=st.integers(1, 5),
       value=st.integers(0, 255), tw=st.integers(1, 8), th=st.integers(1, 8))
def test_integer_downscale_preserves_constants(seed, factor, value, tw, th):
    img = new_image(tw * factor, th * factor, (value, value, value))
    out = resample(img, tw, th)
    assert (out == value).all()


def test_resample_rejects_bad_target():
    img = new_image(4, 4)
    with pytest.raises(ValueError):
        resample(img, 0, 3)


# ---------------------------------------------------------------- PNG I/O

def reference_png(pixels):
    """Independent minimal PNG encoder: raw zlib IDAT, no filtering."""
    h = len(pixels)
    w = len(pixels[0])
    raw = b""
    for row in pixels:
        raw += b"\x00" + b"".join(struct.pack("BBB", *px) for px in row)

    def chunk(tag, payload):
        return (struct.pack(">I", len(payload)) + tag + payload
                + struct.pack(">I", zlib.crc32(tag + payload)))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b""))


def test_encode_decode_round_trip():
    rng = np.random.default_rng(8)
    img = random_image(rng, 64, 64)
    assert np.array_equal(decode_image(encode_image(img)), img)


def test_decode_reference_file():
    pixels = [[(255, 0, 0), (0, 255, 0)], [(0, 0, 255), (10, 20, 30)]]
    img = decode_image(reference_png(pixels))
    assert img.shape == (2, 2, 3)
    for y in range(2):
        for x in range(2):
            assert tuple(img[y, x]) == pixels[y][x]


def test_decode_truncated_stream():
    data = encode_image(new_image(8, 8))
    with pytest.raises(DecodeError):
        decode_image(data[: len(data) // 2])
    with pytest.raises(DecodeError):
        decode_image(b"definitely not a png")


def test_file_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    img = random_image(rng, 12, 5)
    path = tmp_path / "img.png"
    raster.write_image(path, img)
    assert np.array_equal(raster.read_image(path), img)

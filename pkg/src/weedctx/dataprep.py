"""Dataset preparation: leak-free splits, grid tiling, context windows, jitter.

The unit of labeling is a square grid tile cut from a full aerial image. A
tile can be classified bare (``ContextMode.NONE``) or with a surrounding
border attached first. ``FULL_STRETCHED`` crops whatever border pixels exist
(a non-square rectangle near image edges) and resizes the whole thing to the
output square, distorting the center. ``EDGE_STRETCHED`` instead stretches
each truncated border strip to its nominal width, so the assembled window is
always square and the central tile survives undistorted.

Splits are assigned per source image, never per tile, so tiles (including
jitter-augmented copies) from one image can never straddle train/val/test.
"""

import csv
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from ._rng import make_rng
from .raster import BoundsError, PixelRect, crop, image_size, resample, validate_image

SPLIT_NAMES = ("train", "val", "test")


class DataError(ValueError):
    """Inconsistent or unusable dataset inputs."""


class ContextMode(Enum):
    NONE = "none"
    FULL_STRETCHED = "full"
    EDGE_STRETCHED = "edge"

    @classmethod
    def from_string(cls, s: str) -> "ContextMode":
        for mode in cls:
            if mode.value == s:
                return mode
        raise DataError(f"unknown context mode {s!r}; expected none|full|edge")


@dataclass(frozen=True)
class ContextSpec:
    tile_size: int = 300
    border: int = 300
    output_size: int = 300

    def __post_init__(self):
        if self.tile_size < 1 or self.border < 0 or self.output_size < 1:
            raise DataError(f"invalid context spec {self}")


@dataclass(frozen=True)
class TileRecord:
    image_id: str
    grid_row: int
    grid_col: int
    origin_x: int
    origin_y: int
    label: Optional[int] = None
    jittered: bool = False
    jitter_index: Optional[int] = None

    @property
    def tile_id(self) -> str:
        base = f"{self.image_id}_r{self.grid_row}_c{self.grid_col}"
        if self.jittered:
            return f"{base}_j{self.jitter_index}"
        return base


@dataclass(frozen=True)
class SplitAssignment:
    assignment: Mapping[str, str]
    seed: int
    ratios: tuple[float, float, float]
    sizes: Optional[tuple[int, int, int]] = None

    def split_of(self, image_id: str) -> str:
        try:
            return self.assignment[image_id]
        except KeyError:
            raise DataError(f"image {image_id!r} has no split assignment") from None

    def ids_in(self, split: str) -> list[str]:
        return [i for i, s in self.assignment.items() if s == split]


def assign_splits(image_ids: Iterable[str], ratios=(0.70, 0.15, 0.15), seed: int = 0,
                  sizes: Optional[Sequence[int]] = None) -> SplitAssignment:
    """Shuffle image ids with a seeded generator and cut train/val/test.

    Sizes follow the floor rule (first floor(n*train) ids to train, next
    floor(n*val) to val, remainder to test) unless an explicit ``sizes``
    triple overrides the arithmetic.
    """
    ids = sorted(set(image_ids))
    n = len(ids)
    if n == 0:
        raise DataError("cannot split an empty image set")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios {ratios} must be three positive fractions summing to 1")
    if sizes is not None:
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) != 3 or any(s < 0 for s in sizes) or sum(sizes) != n:
            raise DataError(f"size override {sizes} must sum to {n}")
        n_train, n_val, _ = sizes
    else:
        n_train = int(np.floor(n * ratios[0]))
        n_val = int(np.floor(n * ratios[1]))

    order = [str(x) for x in make_rng(seed, "image-split").permutation(ids)]
    assignment = {}
    for idx, image_id in enumerate(order):
        if idx < n_train:
            assignment[image_id] = "train"
        elif idx < n_train + n_val:
            assignment[image_id] = "val"
        else:
            assignment[image_id] = "test"
    return SplitAssignment(assignment=assignment, seed=seed, ratios=ratios, sizes=sizes)


def _dims(image) -> tuple[int, int]:
    """(width, height) of an image array or a plain (w, h) pair."""
    if isinstance(image, np.ndarray):
        return image_size(image)
    w, h = image
    return int(w), int(h)


def grid_tiles(image, tile_size: int = 300, image_id: str = "") -> list[TileRecord]:
    """One record per full grid cell; partial right/bottom remainders drop."""
    w, h = _dims(image)
    if tile_size < 1:
        raise DataError("tile size must be positive")
    cols = w // tile_size
    rows = h // tile_size
    if cols == 0 or rows == 0:
        raise DataError(f"{w}x{h} image smaller than one {tile_size}px tile")
    return [
        TileRecord(image_id=image_id, grid_row=r, grid_col=c,
                   origin_x=c * tile_size, origin_y=r * tile_size)
        for r in range(rows) for c in range(cols)
    ]


def extract_context(img: np.ndarray, tile, mode: ContextMode,
                    spec: ContextSpec = ContextSpec()) -> np.ndarray:
    """Cut the context window for one tile under the given policy.

    ``tile`` is a TileRecord or an (origin_x, origin_y) pair. The tile rect
    must lie inside the image; the border may hang over the edge and is
    handled per the mode.
    """
    validate_image(img)
    if isinstance(tile, TileRecord):
        x0, y0 = tile.origin_x, tile.origin_y
    else:
        x0, y0 = int(tile[0]), int(tile[1])
    t, b, out = spec.tile_size, spec.border, spec.output_size
    w, h = image_size(img)
    if x0 < 0 or y0 < 0 or x0 + t > w or y0 + t > h:
        raise BoundsError(f"{t}px tile at ({x0}, {y0}) outside {w}x{h} image")

    tile_rect = PixelRect(x0, y0, t, t)
    if mode is ContextMode.NONE:
        return crop(img, tile_rect)

    bounds = PixelRect(0, 0, w, h)
    window = PixelRect(x0 - b, y0 - b, t + 2 * b, t + 2 * b)
    if mode is ContextMode.FULL_STRETCHED:
        avail = window.intersect(bounds)
        return resample(crop(img, avail), out, out)

    # Edge-stretched: 3x3 band canvas, center verbatim, truncated border
    # strips stretched to nominal size, zero-width strips clamp-replicated.
    canvas = np.empty((t + 2 * b, t + 2 * b, 3), dtype=np.uint8)
    center = crop(img, tile_rect)
    canvas[b:b + t, b:b + t] = center

    left = min(b, x0)
    right = min(b, w - (x0 + t))
    top = min(b, y0)
    bottom = min(b, h - (y0 + t))

    def stretched(rect, nominal_w, nominal_h):
        return resample(crop(img, rect), nominal_w, nominal_h)

    # Side bands adjoin the tile, so the cross dimension is always available.
    if left > 0:
        canvas[b:b + t, 0:b] = stretched(PixelRect(x0 - left, y0, left, t), b, t)
    else:
        canvas[b:b + t, 0:b] = center[:, :1]
    if right > 0:
        canvas[b:b + t, b + t:] = stretched(PixelRect(x0 + t, y0, right, t), b, t)
    else:
        canvas[b:b + t, b + t:] = center[:, -1:]
    if top > 0:
        canvas[0:b, b:b + t] = stretched(PixelRect(x0, y0 - top, t, top), b, b)
    else:
        canvas[0:b, b:b + t] = center[:1, :]
    if bottom > 0:
        canvas[b + t:, b:b + t] = stretched(PixelRect(x0, y0 + t, t, bottom), b, b)
    else:
        canvas[b + t:, b:b + t] = center[-1:, :]

    # Corners: both strips available -> stretch the clamped corner rect; one
    # side flush -> replicate the adjacent band edge (clamp-to-edge); both
    # flush -> the tile's corner pixel.
    corners = (
        (slice(0, b), slice(0, b), left, top, x0 - left, y0 - top, (0, 0)),
        (slice(0, b), slice(b + t, None), right, top, x0 + t, y0 - top, (0, -1)),
        (slice(b + t, None), slice(0, b), left, bottom, x0 - left, y0 + t, (-1, 0)),
        (slice(b + t, None), slice(b + t, None), right, bottom, x0 + t, y0 + t, (-1, -1)),
    )
    for ys, xs, avail_w, avail_h, rx, ry, (cy, cx) in corners:
        if avail_w > 0 and avail_h > 0:
            canvas[ys, xs] = stretched(PixelRect(rx, ry, avail_w, avail_h), b, b)
        elif avail_w == 0 and avail_h > 0:
            # flush side: replicate the adjacent band's edge column
            edge_col = b if xs.start == 0 else b + t - 1
            canvas[ys, xs] = canvas[ys, edge_col:edge_col + 1]
        elif avail_h == 0 and avail_w > 0:
            edge_row = b if ys.start == 0 else b + t - 1
            canvas[ys, xs] = canvas[edge_row:edge_row + 1, xs]
        else:
            canvas[ys, xs] = center[cy, cx]
    return resample(canvas, out, out)


def jitter_balance(tiles: Sequence[TileRecord], images: Mapping[str, object], seed: int = 0,
                   max_offset: int = 100, target_ratio: float = 0.95,
                   tile_size: int = 300) -> list[TileRecord]:
    """Append randomly offset copies of minority-class tiles until balanced.

    Offsets are drawn uniformly in [-max_offset, +max_offset] per axis and
    clamped so the tile rect stays inside its source image. Stops once
    minority/majority >= target_ratio. Returns the input records plus the
    appended jittered ones; deterministic for a given seed.
    """
    tiles = list(tiles)
    if any(t.label is None for t in tiles):
        raise DataError("jitter balancing requires fully labeled tiles")
    for t in tiles:
        if t.image_id not in images:
            raise DataError(f"tile {t.tile_id} references unknown image {t.image_id!r}")

    counts = {0: sum(1 for t in tiles if t.label == 0),
              1: sum(1 for t in tiles if t.label == 1)}
    minority = min(counts, key=lambda k: (counts[k], k))
    majority = 1 - minority
    if counts[majority] and counts[minority] / counts[majority] >= target_ratio:
        return tiles
    pool = [t for t in tiles if t.label == minority]
    if not pool:
        raise DataError("no minority-class tiles available to jitter")

    rng = make_rng(seed, "jitter")
    out = list(tiles)
    n_minority = counts[minority]
    jitter_counts: dict[str, int] = {}
    while n_minority / counts[majority] < target_ratio:
        src = pool[int(rng.integers(len(pool)))]
        dx = int(rng.integers(-max_offset, max_offset + 1))
        dy = int(rng.integers(-max_offset, max_offset + 1))
        w, h = _dims(images[src.image_id])
        ox = int(np.clip(src.origin_x + dx, 0, w - tile_size))
        oy = int(np.clip(src.origin_y + dy, 0, h - tile_size))
        base = f"{src.image_id}_r{src.grid_row}_c{src.grid_col}"
        idx = jitter_counts.get(base, 0)
        jitter_counts[base] = idx + 1
        out.append(replace(src, origin_x=ox, origin_y=oy, jittered=True, jitter_index=idx))
        n_minority += 1
    return out


@dataclass
class DatasetSplit:
    records: list[TileRecord]
    pixels: np.ndarray  # (N, out, out, 3) uint8
    labels: np.ndarray  # (N,) int8


def split_records(tiles: Sequence[TileRecord], split: SplitAssignment,
                  images: Mapping[str, object], seed: int = 0, max_offset: int = 100,
                  target_ratio: float = 0.95, tile_size: int = 300,
                  balance: bool = True) -> dict[str, list[TileRecord]]:
    """Split tiles by image, then jitter-balance each split independently.

    Pure record bookkeeping; no pixel access. The result is identical for
    every context mode since modes only differ at materialization time.
    """
    if any(t.label is None for t in tiles):
        raise DataError("dataset assembly requires fully labeled tiles")
    by_split: dict[str, list[TileRecord]] = {name: [] for name in SPLIT_NAMES}
    for t in tiles:
        by_split[split.split_of(t.image_id)].append(t)
    out = {}
    for name in SPLIT_NAMES:
        part = by_split[name]
        if balance and part:
            part = jitter_balance(part, images, seed=make_rng(seed, "balance", name).integers(2**63),
                                  max_offset=max_offset, target_ratio=target_ratio,
                                  tile_size=tile_size)
        out[name] = part
    return out


def materialize(records: Sequence[TileRecord], images: Mapping[str, np.ndarray],
                mode: ContextMode, spec: ContextSpec = ContextSpec()) -> DatasetSplit:
    """Extract the context window for every record and stack the results."""
    n = len(records)
    dim = spec.tile_size if mode is ContextMode.NONE else spec.output_size
    pixels = np.empty((n, dim, dim, 3), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int8)
    for i, rec in enumerate(records):
        try:
            img = images[rec.image_id]
        except KeyError:
            raise DataError(f"tile {rec.tile_id} references unknown image {rec.image_id!r}")
        pixels[i] = extract_context(img, rec, mode, spec)
        labels[i] = -1 if rec.label is None else rec.label
    return DatasetSplit(records=list(records), pixels=pixels, labels=labels)


def build_dataset(images: Mapping[str, np.ndarray], tiles: Sequence[TileRecord],
                  mode: ContextMode, spec: ContextSpec, split: SplitAssignment,
                  seed: int = 0, max_offset: int = 100, target_ratio: float = 0.95,
                  balance: bool = True) -> dict[str, DatasetSplit]:
    """Split, jitter-balance, and materialize context tiles for one mode."""
    parts = split_records(tiles, split, images, seed=seed, max_offset=max_offset,
                          target_ratio=target_ratio, tile_size=spec.tile_size,
                          balance=balance)
    return {name: materialize(recs, images, mode, spec) for name, recs in parts.items()}


# ------------------------------------------------------------------ file formats

LABELS_HEADER = ["tile_id", "image_id", "grid_row", "grid_col",
                 "origin_x", "origin_y", "label", "jittered"]


def write_labels_csv(path, records: Sequence[TileRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABELS_HEADER)
        for r in records:
            writer.writerow([r.tile_id, r.image_id, r.grid_row, r.grid_col,
                             r.origin_x, r.origin_y,
                             "" if r.label is None else int(r.label),
                             int(r.jittered)])


def read_labels_csv(path) -> list[TileRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LABELS_HEADER:
            raise DataError(f"unexpected labels.csv header {reader.fieldnames}")
        for row in reader:
            jittered = bool(int(row["jittered"]))
            jitter_index = None
            if jittered:
                tail = row["tile_id"].rsplit("_j", 1)
                jitter_index = int(tail[1]) if len(tail) == 2 else 0
            records.append(TileRecord(
                image_id=row["image_id"], grid_row=int(row["grid_row"]),
                grid_col=int(row["grid_col"]), origin_x=int(row["origin_x"]),
                origin_y=int(row["origin_y"]),
                label=None if row["label"] == "" else int(row["label"]),
                jittered=jittered, jitter_index=jitter_index))
    return records


def write_splits_json(path, split: SplitAssignment) -> None:
    payload = {
        "seed": split.seed,
        "ratios": list(split.ratios),
        "overrides": {"sizes": list(split.sizes)} if split.sizes else {},
        "assignment": dict(sorted(split.assignment.items())),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def read_splits_json(path) -> SplitAssignment:
    with open(path) as fh:
        payload = json.load(fh)
    sizes = payload.get("overrides", {}).get("sizes")
    return SplitAssignment(assignment=payload["assignment"], seed=payload["seed"],
                           ratios=tuple(payload["ratios"]),
                           sizes=tuple(sizes) if sizes else None)


def context_tile_filename(record: TileRecord, mode: ContextMode) -> str:
    return f"{record.tile_id}_{mode.value}.png"

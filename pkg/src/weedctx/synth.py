"""Deterministic synthetic aerial-field corpus with context-only class signal.

Each image is a soil-noise background with crop foliage laid out as tufts
along parallel rows, plus weed tufts rendered by the exact same routine (same
texture fields, same wobble) but placed in the inter-row gaps. A weed also
suppresses the crop tufts around it, the way a competing patch clears its
neighborhood. Locally a weed tuft and a crop tuft are therefore statistically
identical; what distinguishes them is geometry and density visible only in
the surrounding window: alignment with the row pattern and the thinned-out
neighborhood. Row spacing is 1.5x the tile size, so a single tile usually
shows at most a fragment of one row and cannot reveal the row phase, while
the 3x context window always spans exactly two rows.

All randomness is keyed from the master seed per image, so corpora are
bit-reproducible and per-image generation is order independent.
"""

import math
from dataclasses import dataclass, replace
from typing import Mapping, Optional

import numpy as np

from ._rng import make_rng
from .dataprep import DataError, TileRecord, grid_tiles
from .pipeline import AnnotationBox
from .raster import PixelRect, round_half_up_u8


@dataclass(frozen=True)
class SynthConfig:
    image_w: int = 1500
    image_h: int = 1500
    row_period: int = 450
    n_weeds: int = 3
    weed_radius: int = 70
    corpus_size: int = 20
    master_seed: int = 0
    leaf_texture_seed: int = 0
    tile_size: int = 300
    plant_spacing: int = 160
    plant_radius: int = 70
    plant_presence: float = 0.85
    suppression_radius: int = 300

    def __post_init__(self):
        if self.weed_radius >= self.row_period / 2:
            raise DataError("weed radius must fit between rows (< row_period/2)")
        if self.image_w < 3 * self.tile_size or self.image_h < 3 * self.tile_size:
            raise DataError("image must be at least 3 tiles wide so interior "
                            "tiles have a full context border")
        if self.corpus_size < 1 or self.n_weeds < 0:
            raise DataError("corpus_size must be >= 1 and n_weeds >= 0")
        if not 0 < self.plant_presence <= 1:
            raise DataError("plant_presence must be in (0, 1]")

    @classmethod
    def scaled(cls, factor: float, **overrides) -> "SynthConfig":
        """Defaults with every pixel dimension scaled by ``factor``."""
        base = cls()
        scaled_fields = {}
        for name in ("image_w", "image_h", "row_period", "weed_radius",
                     "tile_size", "plant_spacing", "plant_radius",
                     "suppression_radius"):
            scaled_fields[name] = max(1, round(getattr(base, name) * factor))
        scaled_fields.update(overrides)
        return replace(base, **scaled_fields)

    def image_ids(self) -> list[str]:
        return [f"img{i:04d}" for i in range(self.corpus_size)]


@dataclass
class ImageLayout:
    image_id: str
    crop_plants: np.ndarray  # (n, 3): x, y, radius
    weeds: np.ndarray        # (m, 3): x, y, radius


@dataclass
class SynthGroundTruth:
    boxes: dict[str, list[AnnotationBox]]
    weed_centers: dict[str, list[tuple[float, float]]]

    def total_boxes(self) -> int:
        return sum(len(v) for v in self.boxes.values())


def _image_layout(cfg: SynthConfig, index: int) -> ImageLayout:
    rng = make_rng(cfg.master_seed, "layout", index)
    image_id = cfg.image_ids()[index]
    w, h, period = cfg.image_w, cfg.image_h, cfg.row_period

    phase = float(rng.uniform(0, period))
    row_ys = np.arange(phase - period, h + period, period)

    plants = []
    for row_y in row_ys:
        x_phase = float(rng.uniform(0, cfg.plant_spacing))
        xs = np.arange(x_phase - cfg.plant_spacing, w + cfg.plant_spacing, cfg.plant_spacing)
        for x in xs:
            if rng.random() > cfg.plant_presence:
                continue
            px = x + rng.normal(0, cfg.plant_spacing * 0.10)
            py = row_y + rng.normal(0, period * 0.05)
            pr = cfg.plant_radius * rng.uniform(0.8, 1.25)
            plants.append((px, py, pr))
    plants = np.array(plants, dtype=np.float64) if plants else np.zeros((0, 3))

    box_half = _box_half(cfg)
    margin = box_half + 1
    gap_ys = row_ys[:-1] + period / 2.0
    gap_ys = gap_ys[(gap_ys > margin) & (gap_ys < h - margin)]
    weeds = []
    attempts = 0
    while len(weeds) < cfg.n_weeds and attempts < cfg.n_weeds * 50 and len(gap_ys):
        attempts += 1
        gy = float(gap_ys[int(rng.integers(len(gap_ys)))])
        wx = float(rng.uniform(margin, w - margin))
        wy = gy + float(rng.normal(0, period * 0.06))
        wy = float(np.clip(wy, margin, h - margin))
        wr = cfg.weed_radius * float(rng.uniform(0.8, 1.25))
        if any((wx - ox) ** 2 + (wy - oy) ** 2 < (3 * cfg.weed_radius) ** 2
               for ox, oy, _ in weeds):
            continue
        weeds.append((wx, wy, wr))
    weeds = np.array(weeds, dtype=np.float64) if weeds else np.zeros((0, 3))

    if len(weeds) and len(plants):
        d2 = ((plants[:, None, 0] - weeds[None, :, 0]) ** 2
              + (plants[:, None, 1] - weeds[None, :, 1]) ** 2)
        keep = (d2 > cfg.suppression_radius ** 2).all(axis=1)
        plants = plants[keep]
    return ImageLayout(image_id=image_id, crop_plants=plants, weeds=weeds)


def _box_half(cfg: SynthConfig) -> int:
    return int(math.ceil(cfg.weed_radius * 1.35))


def _layout_truth(cfg: SynthConfig, layouts: list[ImageLayout]) -> SynthGroundTruth:
    boxes = {}
    centers = {}
    half = _box_half(cfg)
    for lay in layouts:
        blist = []
        clist = []
        for x, y, _ in lay.weeds:
            rect = PixelRect(int(round(x)) - half, int(round(y)) - half, 2 * half, 2 * half)
            blist.append(AnnotationBox(image_id=lay.image_id, rect=rect, source="ground-truth"))
            clist.append((float(x), float(y)))
        boxes[lay.image_id] = blist
        centers[lay.image_id] = clist
    return SynthGroundTruth(boxes=boxes, weed_centers=centers)


def generate_layouts(config: SynthConfig) -> tuple[dict[str, tuple[int, int]], SynthGroundTruth]:
    """Placement-only path: image sizes plus ground truth, no rasterization."""
    layouts = [_image_layout(config, i) for i in range(config.corpus_size)]
    sizes = {lay.image_id: (config.image_w, config.image_h) for lay in layouts}
    return sizes, _layout_truth(config, layouts)


# ------------------------------------------------------------------ rendering

def _noise_field(rng, h, w, cell):
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.uniform(-1.0, 1.0, size=(gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(np.intp)
    x0 = xs.astype(np.intp)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x0 + 1] * fx
    bot = grid[y0 + 1][:, x0] * (1 - fx) + grid[y0 + 1][:, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def _render_blobs(mask, wobble, blobs):
    h, w = mask.shape
    for x, y, r in blobs:
        reach = int(math.ceil(r * 1.45)) + 1
        x0, x1 = max(0, int(x) - reach), min(w, int(x) + reach + 1)
        y0, y1 = max(0, int(y) - reach), min(h, int(y) + reach + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dist = np.sqrt((xx - x) ** 2 + (yy - y) ** 2)
        local_r = r * (1.0 + 0.35 * wobble[y0:y1, x0:x1])
        mask[y0:y1, x0:x1] |= dist <= local_r


def render_image(config: SynthConfig, layout: ImageLayout) -> np.ndarray:
    """Rasterize one layout; crop and weeds share every texture field."""
    h, w = config.image_h, config.image_w
    idx = int(layout.image_id[3:])
    rng = make_rng(config.master_seed, "texture", config.leaf_texture_seed, idx)

    coarse_cell = max(4, config.tile_size // 12)
    fine_cell = max(2, config.tile_size // 60)
    soil_base = np.array([106, 83, 59], dtype=np.float64) + rng.uniform(-8, 8, 3)
    fol_base = np.array([52, 112, 44], dtype=np.float64) + rng.uniform(-8, 8, 3)

    soil_lum = 1.0 + 0.10 * _noise_field(rng, h, w, coarse_cell) \
        + 0.05 * rng.uniform(-1, 1, (h, w))
    fol_lum = 1.0 + 0.13 * _noise_field(rng, h, w, coarse_cell) \
        + 0.07 * _noise_field(rng, h, w, fine_cell)

    wobble = _noise_field(rng, h, w, max(3, config.plant_radius // 3))
    mask = np.zeros((h, w), dtype=bool)
    _render_blobs(mask, wobble, layout.crop_plants)
    _render_blobs(mask, wobble, layout.weeds)

    img = soil_base[None, None, :] * soil_lum[:, :, None]
    foliage = fol_base[None, None, :] * fol_lum[:, :, None]
    img[mask] = foliage[mask]
    return round_half_up_u8(img)


def generate_corpus(config: SynthConfig) -> tuple[dict[str, np.ndarray], SynthGroundTruth]:
    """Render the full corpus; deterministic per master seed."""
    layouts = [_image_layout(config, i) for i in range(config.corpus_size)]
    images = {lay.image_id: render_image(config, lay) for lay in layouts}
    return images, _layout_truth(config, layouts)


# ------------------------------------------------------------------ labeling

def label_tiles(images: Mapping[str, object], truth: SynthGroundTruth,
                tile_size: int = 300) -> list[TileRecord]:
    """Grid every image; a tile is weed iff a weed center falls inside it."""
    records = []
    for image_id in sorted(images):
        if image_id not in truth.weed_centers:
            raise DataError(f"ground truth missing for image {image_id!r}")
        centers = truth.weed_centers[image_id]
        for rec in grid_tiles(images[image_id], tile_size, image_id=image_id):
            rect = PixelRect(rec.origin_x, rec.origin_y, tile_size, tile_size)
            label = int(any(rect.contains_point(cx, cy) for cx, cy in centers))
            records.append(replace(rec, label=label))
    return records


def write_corpus(out_dir, images: Mapping[str, np.ndarray], truth: SynthGroundTruth,
                 tile_size: int = 300) -> None:
    """PNG per image plus boxes.csv and labels.csv next to them."""
    from pathlib import Path

    from .pipeline import write_boxes_csv
    from .dataprep import write_labels_csv
    from .raster import write_image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for image_id, img in images.items():
        write_image(out / f"{image_id}.png", img)
    all_boxes = [b for image_id in sorted(images) for b in truth.boxes[image_id]]
    write_boxes_csv(out / "boxes.csv", all_boxes)
    write_labels_csv(out / "labels.csv", label_tiles(images, truth, tile_size))

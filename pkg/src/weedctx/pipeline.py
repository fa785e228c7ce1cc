"""Evaluation machinery: metrics, sliding-window heat maps, patch matching.

A heat map slides the classifier's input window across a full image, applying
the configured context policy dynamically at each position, and records the
weed probability per cell. Cells at or above threshold can be rendered as a
purple overlay, grouped into connected patches, and matched against
annotation boxes.
"""

import csv
import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

from .dataprep import ContextMode, ContextSpec, DataError, extract_context
from .net import ModelParams, forward
from .raster import PixelRect, round_half_up_u8, validate_image

# Reference scores reported for the original drone-imagery field study this
# pipeline reproduces at desk scale. The source imagery is not distributable,
# so these are documentation fixtures, not reproduction targets.
REPORTED_TEST_METRICS = {
    "none": {"accuracy": 0.929, "precision": 0.619, "recall": 0.885},
    "edge": {"accuracy": 0.957, "precision": 0.755, "recall": 0.886},
}
REPORTED_BEST_VAL_ACCURACY = {"none": 0.946, "full": 0.963, "edge": 0.971}


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    @property
    def precision(self) -> Optional[float]:
        denom = self.tp + self.fp
        return self.tp / denom if denom else None

    @property
    def recall(self) -> Optional[float]:
        denom = self.tp + self.fn
        return self.tp / denom if denom else None

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall}


def confusion_counts(predictions: np.ndarray, labels: np.ndarray) -> Metrics:
    """Counts with weed (1) as the positive class."""
    pred = np.asarray(predictions).astype(bool)
    truth = np.asarray(labels).astype(bool)
    if pred.shape != truth.shape:
        raise DataError("prediction/label length mismatch")
    return Metrics(tp=int(np.sum(pred & truth)), fp=int(np.sum(pred & ~truth)),
                   tn=int(np.sum(~pred & ~truth)), fn=int(np.sum(~pred & truth)))


def evaluate(params: ModelParams, pixels: np.ndarray, labels: np.ndarray,
             threshold: float = 0.5, batch_size: int = 256) -> Metrics:
    """Tile-level confusion metrics for a labeled context-tile set."""
    from .net import predict_probs

    if len(pixels) == 0:
        raise DataError("cannot evaluate an empty tile set")
    probs = predict_probs(params, pixels, batch_size=batch_size)
    return confusion_counts(probs >= threshold, labels)


# ------------------------------------------------------------------ heat maps

@dataclass
class HeatMap:
    image_id: str
    cell_size: int
    stride: int
    mode: ContextMode
    probs: np.ndarray  # (rows, cols) float

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise DataError("heat map grid must be 2-D")

    def cell_rect(self, row: int, col: int) -> PixelRect:
        return PixelRect(col * self.stride, row * self.stride,
                         self.cell_size, self.cell_size)

    def to_json(self) -> str:
        return json.dumps({
            "image_id": self.image_id,
            "cell_size": self.cell_size,
            "stride": self.stride,
            "mode": self.mode.value,
            "rows": self.probs.shape[0],
            "cols": self.probs.shape[1],
            "probs": [float(p) for p in self.probs.ravel()],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "HeatMap":
        data = json.loads(text)
        probs = np.array(data["probs"], dtype=np.float64).reshape(data["rows"], data["cols"])
        return cls(image_id=data["image_id"], cell_size=data["cell_size"],
                   stride=data["stride"], mode=ContextMode.from_string(data["mode"]),
                   probs=probs)


def heatmap_grid_dims(width: int, height: int, cell_size: int, stride: int) -> tuple[int, int]:
    return ((height - cell_size) // stride + 1, (width - cell_size) // stride + 1)


def heatmap(params: ModelParams, img: np.ndarray, mode: ContextMode,
            spec: ContextSpec = ContextSpec(), stride: int = 300,
            image_id: str = "") -> HeatMap:
    """Slide the input window across the image and score every position.

    Each window is treated as the central tile for context extraction, then
    forwarded individually, so a cell is bit-identical to the standalone
    prediction for that window.
    """
    validate_image(img)
    if stride < 1:
        raise DataError("stride must be positive")
    h, w = img.shape[:2]
    t = spec.tile_size
    if w < t or h < t:
        raise DataError(f"{w}x{h} image smaller than the {t}px window")
    rows, cols = heatmap_grid_dims(w, h, t, stride)
    probs = np.empty((rows, cols), dtype=np.float64)
    dtype = params.dtype
    for r in range(rows):
        for c in range(cols):
            window = extract_context(img, (c * stride, r * stride), mode, spec)
            x = window.astype(dtype) / 255.0
            probs[r, c] = forward(params, x[None])[0]
    return HeatMap(image_id=image_id, cell_size=t, stride=stride, mode=mode, probs=probs)


def render_overlay(hm: HeatMap, base: np.ndarray, threshold: float = 0.5,
                   alpha: float = 0.5, color=(128, 0, 128)) -> np.ndarray:
    """Tint every at-or-above-threshold cell over the base image."""
    validate_image(base)
    h, w = base.shape[:2]
    rows, cols = heatmap_grid_dims(w, h, hm.cell_size, hm.stride)
    if (rows, cols) != hm.probs.shape:
        raise DataError(f"heat map grid {hm.probs.shape} does not match "
                        f"{w}x{h} base image at stride {hm.stride}")
    mask = np.zeros((h, w), dtype=bool)
    for r, c in zip(*np.nonzero(hm.probs >= threshold)):
        rect = hm.cell_rect(int(r), int(c))
        mask[rect.y0:rect.y1, rect.x0:rect.x1] = True
    out = base.copy()
    if mask.any():
        blended = (1.0 - alpha) * base[mask].astype(np.float64) \
            + alpha * np.asarray(color, dtype=np.float64)
        out[mask] = round_half_up_u8(blended)
    return out


def detect_patches(hm: HeatMap, threshold: float = 0.5) -> list[PixelRect]:
    """4-connected components of hot cells as image-space bounding rects."""
    hot = hm.probs >= threshold
    labeled, count = ndimage.label(hot)  # default structure = 4-connectivity
    patches = []
    for comp in range(1, count + 1):
        rows, cols = np.nonzero(labeled == comp)
        x0 = int(cols.min()) * hm.stride
        y0 = int(rows.min()) * hm.stride
        x1 = int(cols.max()) * hm.stride + hm.cell_size
        y1 = int(rows.max()) * hm.stride + hm.cell_size
        patches.append(PixelRect(x0, y0, x1 - x0, y1 - y0))
    patches.sort(key=lambda r: (r.y0, r.x0))
    return patches


def match_patches(detections: Sequence[PixelRect], boxes: Sequence["AnnotationBox"]) -> dict:
    """Any-overlap matching: one detection may cover several boxes."""
    ids = {b.image_id for b in boxes}
    if len(ids) > 1:
        raise DataError(f"annotation boxes span multiple images: {sorted(ids)}")
    found = 0
    missed = 0
    used = [False] * len(detections)
    for box in boxes:
        hit = False
        for i, det in enumerate(detections):
            if det.overlap_area(box.rect) > 0:
                used[i] = True
                hit = True
        if hit:
            found += 1
        else:
            missed += 1
    false_patches = used.count(False)
    return {"found": found, "missed": missed, "false_patches": false_patches}


# ------------------------------------------------------------------ annotations

@dataclass(frozen=True)
class AnnotationBox:
    image_id: str
    rect: PixelRect
    source: str = "ground-truth"


BOXES_HEADER = ["image_id", "x0", "y0", "w", "h", "source"]


def write_boxes_csv(path, boxes: Sequence[AnnotationBox]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BOXES_HEADER)
        for b in boxes:
            writer.writerow([b.image_id, b.rect.x0, b.rect.y0, b.rect.w, b.rect.h, b.source])


def read_boxes_csv(path) -> list[AnnotationBox]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != BOXES_HEADER:
            raise DataError(f"unexpected boxes.csv header {reader.fieldnames}")
        for row in reader:
            rect = PixelRect(int(row["x0"]), int(row["y0"]), int(row["w"]), int(row["h"]))
            out.append(AnnotationBox(image_id=row["image_id"], rect=rect, source=row["source"]))
    return out


# ------------------------------------------------------------------ run comparison

HISTORY_HEADER = ["epoch", "mode", "run", "train_loss", "train_acc", "val_loss", "val_acc"]


def write_history_csv(path, histories: Mapping[tuple[str, int], Sequence[dict]]) -> None:
    """Rows keyed by (mode, run index)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_HEADER)
        for (mode, run), history in sorted(histories.items()):
            for entry in history:
                writer.writerow([entry["epoch"], mode, run,
                                 f"{entry['train_loss']:.8f}", f"{entry['train_acc']:.8f}",
                                 f"{entry['val_loss']:.8f}", f"{entry['val_acc']:.8f}"])


def read_history_csv(path) -> dict[tuple[str, int], list[dict]]:
    out: dict[tuple[str, int], list[dict]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != HISTORY_HEADER:
            raise DataError(f"unexpected history.csv header {reader.fieldnames}")
        for row in reader:
            key = (row["mode"], int(row["run"]))
            out.setdefault(key, []).append({
                "epoch": int(row["epoch"]),
                "train_loss": float(row["train_loss"]),
                "train_acc": float(row["train_acc"]),
                "val_loss": float(row["val_loss"]),
                "val_acc": float(row["val_acc"]),
            })
    return out


def compare_runs(histories: Mapping[str, Sequence[Sequence[dict]]]) -> dict:
    """Average validation-accuracy curves per mode and pick the best epoch.

    ``histories`` maps mode name to a list of per-run history lists (equal
    epoch counts required). Returns per-mode mean curves plus best-epoch mean
    accuracy and its error (1 - accuracy).
    """
    if not histories:
        raise DataError("no histories to compare")
    lengths = {len(h) for runs in histories.values() for h in runs}
    if len(lengths) != 1:
        raise DataError(f"ragged histories: epoch counts {sorted(lengths)}")
    report = {"epochs": lengths.pop(), "modes": {}}
    for mode, runs in histories.items():
        if not runs:
            raise DataError(f"mode {mode!r} has no runs")
        curves = np.array([[e["val_acc"] for e in run] for run in runs], dtype=np.float64)
        mean_curve = curves.mean(axis=0)
        best_epoch = int(np.argmax(mean_curve))
        report["modes"][mode] = {
            "runs": len(runs),
            "mean_val_acc": [float(v) for v in mean_curve],
            "best_epoch": best_epoch + 1,
            "best_val_acc": float(mean_curve[best_epoch]),
            "best_val_error": float(1.0 - mean_curve[best_epoch]),
        }
    return report


def comparison_table(report: dict) -> str:
    lines = [f"{'mode':<8} {'runs':>4} {'best epoch':>10} {'best val acc':>13} {'error':>8}"]
    for mode, stats in report["modes"].items():
        lines.append(f"{mode:<8} {stats['runs']:>4} {stats['best_epoch']:>10} "
                     f"{stats['best_val_acc']:>13.4f} {stats['best_val_error']:>8.4f}")
    return "\n".join(lines)

"""Confusion counts, the three segmentation metrics, FPS benchmarking, and
report emission."""

from __future__ import annotations

import csv
import json
import platform
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ContractError, RoieNetError, ShapeError
from .tensor_core import Tensor

CSV_SCHEMA = "metrics-csv v1"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Per-pixel tally of TP/FP/TN/FN between two strictly binary masks."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"confusion: shape mismatch {pred.shape} vs {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if not np.all((arr == 0) | (arr == 1)):
            raise ContractError(f"confusion: {name} mask is not strictly binary")
    p = pred.astype(bool)
    g = gt.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        tn=int(np.count_nonzero(~p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
    )


def dice(c: ConfusionCounts) -> float:
    """2*TP / (2*TP + FP + FN); both-empty masks score 1 by convention."""
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else 1.0


def foreground_iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    return c.tp / denom if denom else 1.0


def background_iou(c: ConfusionCounts) -> float:
    denom = c.tn + c.fn + c.fp
    return c.tn / denom if denom else 1.0


def miou(c: ConfusionCounts) -> float:
    """Two-class mean of foreground and background IoU; empty classes on
    both sides count as 1."""
    return 0.5 * (foreground_iou(c) + background_iou(c))


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ContractError("accuracy: empty confusion counts")
    return (c.tp + c.tn) / c.total


# ---------------------------------------------------------------------------
# reports


@dataclass
class ImageMetrics:
    id: str
    dice: float
    miou: float
    accuracy: float
    fg_iou: float


@dataclass
class MetricsReport:
    per_image: list = field(default_factory=list)
    mean_dice: float = 0.0
    mean_miou: float = 0.0
    mean_accuracy: float = 0.0
    mean_fg_iou: float = 0.0
    pooled_dice: float = 0.0
    pooled_miou: float = 0.0
    pooled_accuracy: float = 0.0
    pooled_fg_iou: float = 0.0
    threshold: float = 0.5
    param_count: Optional[int] = None
    flops: Optional[int] = None
    fps: Optional[float] = None
    config: Optional[dict] = None


def build_report(
    ids: Sequence[str],
    counts: Sequence[ConfusionCounts],
    threshold: float,
    param_count: Optional[int] = None,
    flops: Optional[int] = None,
    fps: Optional[float] = None,
    config: Optional[dict] = None,
) -> MetricsReport:
    """Aggregate per-image confusion counts two ways: the mean of per-image
    metrics, and metrics of the pooled counts."""
    per_image = [
        ImageMetrics(i, dice(c), miou(c), accuracy(c), foreground_iou(c))
        for i, c in zip(ids, counts)
    ]
    pooled = ConfusionCounts(
        tp=sum(c.tp for c in counts),
        fp=sum(c.fp for c in counts),
        tn=sum(c.tn for c in counts),
        fn=sum(c.fn for c in counts),
    )
    n = max(len(per_image), 1)
    return MetricsReport(
        per_image=per_image,
        mean_dice=sum(m.dice for m in per_image) / n,
        mean_miou=sum(m.miou for m in per_image) / n,
        mean_accuracy=sum(m.accuracy for m in per_image) / n,
        mean_fg_iou=sum(m.fg_iou for m in per_image) / n,
        pooled_dice=dice(pooled) if counts else 0.0,
        pooled_miou=miou(pooled) if counts else 0.0,
        pooled_accuracy=accuracy(pooled) if counts else 0.0,
        pooled_fg_iou=foreground_iou(pooled) if counts else 0.0,
        threshold=threshold,
        param_count=param_count,
        flops=flops,
        fps=fps,
        config=config,
    )


# ---------------------------------------------------------------------------
# FPS benchmark


@dataclass
class FpsResult:
    fps: float
    median_latency_s: float
    iters: int
    hardware: str


def fps_benchmark(model, input_shape=(1, 3, 256, 256), warmup: int = 2, iters: int = 10, seed: int = 0) -> FpsResult:
    """Median single-image forward latency in eval mode, reported as 1/latency."""
    if iters < 1:
        raise ContractError(f"fps_benchmark: iters must be >= 1, got {iters}")
    rng = np.random.default_rng(seed)
    x = Tensor(rng.random(input_shape, dtype=np.float32))
    for _ in range(warmup):
        model.forward(x, mode="eval")
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        model.forward(x, mode="eval")
        times.append(time.perf_counter() - t0)
    med = statistics.median(times)
    hw = f"{platform.platform()} / {platform.processor() or 'unknown cpu'}"
    return FpsResult(fps=1.0 / med, median_latency_s=med, iters=iters, hardware=hw)


# ---------------------------------------------------------------------------
# emission


def _to_uint8_rgb(image: np.ndarray) -> np.ndarray:
    arr = np.clip(image, 0.0, 1.0)
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    return (arr.transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)


def render_panel(image: np.ndarray, gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Side-by-side uint8 panel: image | ground truth | prediction."""
    sep = np.full((image.shape[1], 2, 3), 255, dtype=np.uint8)
    cells = [_to_uint8_rgb(image), sep, _to_uint8_rgb(gt), sep, _to_uint8_rgb(pred)]
    return np.concatenate(cells, axis=1)


def emit_report(report: MetricsReport, out_dir, panels=None) -> dict:
    """Write metrics.csv, summary.json, and optional side-by-side panels.

    `panels` is an iterable of (id, image, gt, pred) arrays. Returns the
    written paths.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "metrics.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# {CSV_SCHEMA}\n")
            writer = csv.writer(fh)
            writer.writerow(["id", "dice", "miou", "accuracy", "fg_iou"])
            for m in report.per_image:
                writer.writerow(
                    [m.id, f"{m.dice:.6f}", f"{m.miou:.6f}", f"{m.accuracy:.6f}", f"{m.fg_iou:.6f}"]
                )
            writer.writerow(
                [
                    "aggregate_mean",
                    f"{report.mean_dice:.6f}",
                    f"{report.mean_miou:.6f}",
                    f"{report.mean_accuracy:.6f}",
                    f"{report.mean_fg_iou:.6f}",
                ]
            )
            if report.per_image:
                writer.writerow(
                    [
                        "aggregate_pooled",
                        f"{report.pooled_dice:.6f}",
                        f"{report.pooled_miou:.6f}",
                        f"{report.pooled_accuracy:.6f}",
                        f"{report.pooled_fg_iou:.6f}",
                    ]
                )
        summary_path = out_dir / "summary.json"
        summary = {
            "schema": CSV_SCHEMA,
            "images": len(report.per_image),
            "threshold": report.threshold,
            "mean": {
                "dice": report.mean_dice,
                "miou": report.mean_miou,
                "accuracy": report.mean_accuracy,
                "fg_iou": report.mean_fg_iou,
            },
            "pooled": {
                "dice": report.pooled_dice,
                "miou": report.pooled_miou,
                "accuracy": report.pooled_accuracy,
                "fg_iou": report.pooled_fg_iou,
            },
            "param_count": report.param_count,
            "flops": report.flops,
            "fps": report.fps,
            "config": report.config,
        }
        with open(summary_path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
            fh.write("\n")
        panel_paths = []
        if panels is not None:
            panel_dir = out_dir / "panels"
            panel_dir.mkdir(exist_ok=True)
            for pid, image, gt, pred in panels:
                path = panel_dir / f"{pid}.png"
                Image.fromarray(render_panel(image, gt, pred)).save(path)
                panel_paths.append(path)
    except OSError as e:
        raise RoieNetError(f"cannot write report under {out_dir}: {e}") from e
    return {"csv": csv_path, "summary": summary_path, "panels": panel_paths}


def read_metrics_csv(path) -> list:
    """Parse a metrics.csv back into row dicts (schema comment skipped)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    for row in reader:
        rows.append(
            {
                "id": row["id"],
                "dice": float(row["dice"]),
                "miou": float(row["miou"]),
                "accuracy": float(row["accuracy"]),
                "fg_iou": float(row["fg_iou"]),
            }
        )
    return rows

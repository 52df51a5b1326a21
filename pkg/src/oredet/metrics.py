"""Detection metrics and the inference benchmark.

COCO-style average precision: greedy score-ordered matching per IoU
threshold, 101-point interpolated AP, averaged over the 0.50:0.95:0.05
sweep, with box-area buckets (small <= 32^2 < medium <= 96^2 < large).
Ore scenes carry only medium and large targets, so AP_s is reported but
expected absent.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T

IOU_SWEEP = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
AREA_RANGES = {
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, float("inf")),
}


def iou(a, b):
    """Intersection over union of two (x1,y1,x2,y2) boxes."""
    if a[2] <= a[0] or a[3] <= a[1] or b[2] <= b[0] or b[3] <= b[1]:
        raise ValueError(f"degenerate box: {a} / {b}")
    ix1 = max(a[0], b[0])
    iy1 = max(a[1], b[1])
    ix2 = min(a[2], b[2])
    iy2 = min(a[3], b[3])
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    union = ((a[2] - a[0]) * (a[3] - a[1])
             + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    return inter / union


def nms(boxes, scores, iou_thr=0.5):
    """Greedy suppression; returns kept indices, score-descending, ties
    broken by input index. Pairs with IoU strictly above the threshold
    are suppressed."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= iou_thr for j in kept):
            kept.append(i)
    return kept


def _box_area(box):
    return (box[2] - box[0]) * (box[3] - box[1])


def _ap_single(dets_per_image, gts_per_image, iou_thr, area_range=None):
    """AP at one threshold; None when no ground truth lies in range."""
    if area_range is not None:
        lo, hi = area_range
        gts = [[g for g in gs if lo < _box_area(g) <= hi] for gs in gts_per_image]
    else:
        gts = [list(gs) for gs in gts_per_image]
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        return None

    flat = []
    for img, dets in enumerate(dets_per_image):
        for di, (box, score) in enumerate(dets):
            flat.append((-score, img, di, box))
    flat.sort(key=lambda r: r[:3])

    matched = [np.zeros(len(g), dtype=bool) for g in gts]
    tp_flags = []
    for _, img, _, box in flat:
        cand = gts[img]
        best_iou, best = 0.0, -1
        for gi, gt in enumerate(cand):
            if matched[img][gi]:
                continue
            v = iou(box, gt)
            if v > best_iou:
                best_iou, best = v, gi
        if best >= 0 and best_iou >= iou_thr:
            matched[img][best] = True
            tp_flags.append(True)
        elif area_range is not None and not (area_range[0] < _box_area(box) <= area_range[1]):
            tp_flags.append(None)   # unmatched out-of-range detection: ignored
        else:
            tp_flags.append(False)

    tp = fp = 0
    precisions, recalls = [], []
    for flag in tp_flags:
        if flag is None:
            continue
        tp += flag
        fp += not flag
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_gt)
    if not precisions:
        return 0.0
    precisions = np.asarray(precisions)
    recalls = np.asarray(recalls)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recalls >= r - 1e-12
        ap += precisions[mask].max() if mask.any() else 0.0
    return ap / 101.0


def compute_ap(dets_per_image, gts_per_image, iou_thrs, area_range=None):
    """Mean AP over the given thresholds (None when no gt is in range)."""
    if isinstance(iou_thrs, float):
        iou_thrs = (iou_thrs,)
    vals = [_ap_single(dets_per_image, gts_per_image, t, area_range) for t in iou_thrs]
    if any(v is None for v in vals):
        return None
    return float(np.mean(vals))


@dataclass
class MetricsReport:
    """The eight reported indicators plus the parameter count; AP fields are
    None when no ground truth falls in the bucket (reported as absent)."""
    ap: float = None
    ap50: float = None
    ap75: float = None
    ap_s: float = None
    ap_m: float = None
    ap_l: float = None
    fps: float = None
    mem_bytes: int = None
    model_size_bytes: int = None
    params: int = None

    def to_dict(self):
        return {
            "ap": self.ap, "ap50": self.ap50, "ap75": self.ap75,
            "ap_s": self.ap_s, "ap_m": self.ap_m, "ap_l": self.ap_l,
            "fps": self.fps, "mem_bytes": self.mem_bytes,
            "model_size_bytes": self.model_size_bytes, "params": self.params,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def table(self):
        def fmt(v, scale=100.0):
            return "absent" if v is None else f"{v * scale:.1f}"

        rows = [
            ("AP", fmt(self.ap)), ("AP50", fmt(self.ap50)), ("AP75", fmt(self.ap75)),
            ("AP_s", fmt(self.ap_s)), ("AP_m", fmt(self.ap_m)), ("AP_l", fmt(self.ap_l)),
            ("FPS", "absent" if self.fps is None else f"{self.fps:.2f}"),
            ("Inf.Memory(MB)", "absent" if self.mem_bytes is None
             else f"{self.mem_bytes / 2**20:.1f}"),
            ("ModelSize(MB)", "absent" if self.model_size_bytes is None
             else f"{self.model_size_bytes / 2**20:.1f}"),
            ("Params", "absent" if self.params is None else str(self.params)),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def summarize(dets_per_image, gts_per_image, iou_thrs=IOU_SWEEP):
    """Fill the AP family of a MetricsReport from per-image detections
    [(box, score), ...] and ground truths [box, ...]."""
    report = MetricsReport()
    report.ap = compute_ap(dets_per_image, gts_per_image, iou_thrs)
    report.ap50 = compute_ap(dets_per_image, gts_per_image, 0.5)
    report.ap75 = compute_ap(dets_per_image, gts_per_image, 0.75)
    report.ap_s = compute_ap(dets_per_image, gts_per_image, iou_thrs, AREA_RANGES["small"])
    report.ap_m = compute_ap(dets_per_image, gts_per_image, iou_thrs, AREA_RANGES["medium"])
    report.ap_l = compute_ap(dets_per_image, gts_per_image, iou_thrs, AREA_RANGES["large"])
    return report


@dataclass
class BenchResult:
    fps: float
    params: int
    ckpt_bytes: int
    peak_alloc_estimate: int


def bench(model, scenes, warmup=5, iters=50):
    """Wall-clock inference benchmark, pinned single-threaded.

    ``model`` is a bound detector exposing ``infer(image) -> detections``,
    ``param_count`` and ``ckpt_bytes``. Reports the median-latency FPS over
    ``iters`` full passes, the parameter count, checkpoint size, and a peak
    allocation estimate from the engine's accounting (forward temporaries
    plus parameter storage).
    """
    from threadpoolctl import threadpool_limits

    images = [scenes[i % len(scenes)] for i in range(max(iters, 1))]
    times = []
    peak = 0
    with threadpool_limits(limits=1):
        for i in range(min(warmup, len(images))):
            model.infer(images[i])
        for img in images:
            T.reset_alloc_bytes()
            t0 = time.perf_counter()
            model.infer(img)
            times.append(time.perf_counter() - t0)
            peak = max(peak, T.alloc_bytes())
    fps = 1.0 / float(np.median(times))
    return BenchResult(fps=fps, params=model.param_count,
                       ckpt_bytes=model.ckpt_bytes,
                       peak_alloc_estimate=int(peak) + 4 * model.param_count)

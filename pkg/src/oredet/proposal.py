"""First-stage proposal network over the attention pyramid.

A shared pair of small conv towers predicts a single-channel center
likelihood heatmap and a 2-channel log-size map per pyramid level.
Targets are Gaussian-splatted centers; decoding takes 3x3 local maxima
above a score floor, maps them to image-space boxes, and keeps at most
``max_proposals`` of them ordered by likelihood (one foreground class,
so the heatmap has one channel).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid

STRIDES = FeaturePyramid.STRIDES
# a box goes to the finest level whose bound its longer side fits under
LEVEL_BOUNDS = (64.0, 128.0)
FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
SIZE_LOSS_WEIGHT = 0.1
_EPS = 1e-4


@dataclass
class Proposal:
    box: tuple          # (x1, y1, x2, y2) image pixels, clipped
    p1: float           # first-stage likelihood in [0, 1]
    level: int          # pyramid index 0..2 (P3..P5)


@dataclass
class Stage1Targets:
    heatmaps: list      # per level, (1,H,W) float arrays in [0,1]
    size_maps: list     # per level, (2,H,W) log width/height at stride scale
    pos_masks: list     # per level, (1,H,W) binary center-cell masks
    num_pos: int


class Stage1Head(T.Module):
    """Two towers (3x3 conv + ReLU + 1x1 head) shared across levels."""

    def __init__(self, cfg, rng, width=64):
        c = cfg.channels
        self.hm_conv = _conv_init(rng, width, c, 3)
        self.hm_head = _conv_init(rng, 1, width, 1)
        self.size_conv = _conv_init(rng, width, c, 3)
        self.size_head = _conv_init(rng, 2, width, 1)

    def predict(self, attn):
        """Per level: (heatmap logits (1,H,W), size logits (2,H,W))."""
        out = []
        for level in attn.levels:
            h = T.relu(T.conv2d(level, self.hm_conv[0], self.hm_conv[1], padding=1))
            hm = T.conv2d(h, self.hm_head[0], self.hm_head[1])
            s = T.relu(T.conv2d(level, self.size_conv[0], self.size_conv[1], padding=1))
            size = T.conv2d(s, self.size_head[0], self.size_head[1])
            out.append((hm, size))
        return out


class _TowerParams(T.Module):
    def __init__(self, w, b):
        self.weight = w
        self.bias = b

    def __iter__(self):
        return iter((self.weight, self.bias))

    def __getitem__(self, i):
        return (self.weight, self.bias)[i]


def _conv_init(rng, cout, cin, k):
    w = T.Parameter(T.kaiming_uniform(rng, (cout, cin, k, k), cin * k * k))
    b = T.Parameter(np.zeros(cout, dtype=T.default_dtype()))
    return _TowerParams(w, b)


def assign_level(w, h):
    longer = max(w, h)
    for i, bound in enumerate(LEVEL_BOUNDS):
        if longer <= bound:
            return i
    return len(LEVEL_BOUNDS)


def gaussian_radius(height, width, min_overlap=0.7):
    """CenterNet radius rule (three quadratic overlap cases, take the min)."""
    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 * b1 - 4 * a1 * c1)) / 2
    a2 = 4.0
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 * b2 - 4 * a2 * c2)) / 2
    a3 = 4.0 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 * b3 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def _level_shapes(image_size):
    h, w = image_size
    return [(math.ceil(h / s), math.ceil(w / s)) for s in STRIDES]


def assign_targets(gt_boxes, image_size):
    """Gaussian-splatted heatmaps and log-size maps for one image.

    Each box is routed to one level by its longer side; the splat is
    max-combined so the assigned center cell carries an exact 1.0 peak.
    Zero-area boxes are rejected.
    """
    shapes = _level_shapes(image_size)
    heatmaps = [np.zeros((1, hh, ww), dtype=np.float32) for hh, ww in shapes]
    size_maps = [np.zeros((2, hh, ww), dtype=np.float32) for hh, ww in shapes]
    pos_masks = [np.zeros((1, hh, ww), dtype=np.float32) for hh, ww in shapes]
    num_pos = 0
    for box in gt_boxes:
        x1, y1, x2, y2 = box
        bw, bh = x2 - x1, y2 - y1
        if bw <= 0 or bh <= 0:
            raise ValueError(f"degenerate box {box}")
        lvl = assign_level(bw, bh)
        stride = STRIDES[lvl]
        hh, ww = shapes[lvl]
        cx = (x1 + x2) / 2.0 / stride
        cy = (y1 + y2) / 2.0 / stride
        col = min(int(cx), ww - 1)
        row = min(int(cy), hh - 1)
        radius = max(0, int(gaussian_radius(bh / stride, bw / stride)))
        _splat(heatmaps[lvl][0], row, col, radius)
        heatmaps[lvl][0, row, col] = 1.0
        size_maps[lvl][0, row, col] = math.log(bw / stride)
        size_maps[lvl][1, row, col] = math.log(bh / stride)
        pos_masks[lvl][0, row, col] = 1.0
        num_pos += 1
    num_pos = int(sum(m.sum() for m in pos_masks))  # coincident centers collapse
    return Stage1Targets(heatmaps, size_maps, pos_masks, num_pos)


def _splat(heatmap, row, col, radius):
    sigma = (2 * radius + 1) / 6.0
    h, w = heatmap.shape
    r0, r1 = max(0, row - radius), min(h, row + radius + 1)
    c0, c1 = max(0, col - radius), min(w, col + radius + 1)
    ys = np.arange(r0, r1) - row
    xs = np.arange(c0, c1) - col
    g = np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2 * sigma * sigma))
    np.maximum(heatmap[r0:r1, c0:c1], g, out=heatmap[r0:r1, c0:c1])


def decode(preds, image_size, max_proposals=256, score_floor=0.01):
    """Likelihood-scored proposals from stage-1 predictions.

    3x3 local maxima of the sigmoid heatmap above ``score_floor`` become
    boxes centered on their cell with exp(size)*stride extents, clipped to
    the image. Sorted by likelihood descending (ties: level, then row-major
    cell); never more than ``max_proposals``.
    """
    img_h, img_w = image_size
    candidates = []
    for lvl, (hm_logits, size) in enumerate(preds):
        stride = STRIDES[lvl]
        hm = _np_sigmoid(hm_logits.data[0])
        size_d = size.data
        hh, ww = hm.shape
        padded = np.pad(hm, 1, constant_values=-np.inf)
        win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
        is_peak = hm >= win.max(axis=(2, 3))
        rows, cols = np.nonzero(is_peak & (hm > score_floor))
        for r, c in zip(rows, cols):
            p1 = float(hm[r, c])
            cx = (c + 0.5) * stride
            cy = (r + 0.5) * stride
            bw = math.exp(float(size_d[0, r, c])) * stride
            bh = math.exp(float(size_d[1, r, c])) * stride
            x1 = max(0.0, cx - bw / 2)
            y1 = max(0.0, cy - bh / 2)
            x2 = min(float(img_w), cx + bw / 2)
            y2 = min(float(img_h), cy + bh / 2)
            if x2 <= x1 or y2 <= y1:
                continue
            candidates.append((-p1, lvl, int(r) * ww + int(c),
                               Proposal((x1, y1, x2, y2), p1, lvl)))
    candidates.sort(key=lambda t: t[:3])
    return [c[3] for c in candidates[:max_proposals]]


def _np_sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def stage1_loss(preds, targets):
    """Penalty-reduced focal loss on the sigmoid heatmaps plus weighted L1
    on positive-cell sizes, both normalized by the number of centers
    (floor 1); returns their sum as a scalar Tensor."""
    n_pos = max(targets.num_pos, 1)
    total = None
    for lvl, (hm_logits, size) in enumerate(preds):
        t = targets.heatmaps[lvl]
        pos = targets.pos_masks[lvl]
        p = T.clip(T.sigmoid(hm_logits), _EPS, 1.0 - _EPS)
        one_minus_p = T.sub(1.0, p)
        pos_term = T.mul(T.mul(T.power(one_minus_p, FOCAL_ALPHA), T.log(p)), pos)
        neg_weight = np.power(1.0 - t, FOCAL_BETA) * (1.0 - pos)
        neg_term = T.mul(T.mul(T.power(p, FOCAL_ALPHA), T.log(one_minus_p)), neg_weight)
        hm_loss = T.mul(T.add(T.tsum(pos_term), T.tsum(neg_term)), -1.0 / n_pos)

        diff = T.absolute(T.sub(size, targets.size_maps[lvl]))
        size_loss = T.mul(T.tsum(T.mul(diff, pos)), SIZE_LOSS_WEIGHT / n_pos)

        term = T.add(hm_loss, size_loss)
        total = term if total is None else T.add(total, term)
    return total

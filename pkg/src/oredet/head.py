"""Second stage: dual-resolution RoI features, support matching, 128-wide head.

Each proposal is RoI-aligned from the query pyramid at resolutions 4 and
8, fused with the level's mined support prototype (a 3x3 conv over the
channel concat plus the concat of two channel-halving 1x1 convs), the
two resolutions are aggregated by upsample-and-add, and a two-layer
128-wide head emits a foreground likelihood and box deltas. Detection
score is exactly the product of the two stage likelihoods.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid
from .metrics import nms

SMOOTH_L1_BETA = 1.0
_EPS = 1e-6


@dataclass
class Detection:
    box: tuple
    score: float        # p1 * p2, exactly
    cls: int = 1        # single foreground class


class DsaParams(T.Module):
    """Conv1/Conv2 halve channels (1x1) so their concat matches Conv3's
    3x3 same-pad output width."""

    def __init__(self, cfg, rng):
        c = cfg.channels
        half = c // 2
        self.conv1_w = T.Parameter(T.kaiming_uniform(rng, (half, c, 1, 1), c))
        self.conv1_b = T.Parameter(np.zeros(half, dtype=T.default_dtype()))
        self.conv2_w = T.Parameter(T.kaiming_uniform(rng, (half, c, 1, 1), c))
        self.conv2_b = T.Parameter(np.zeros(half, dtype=T.default_dtype()))
        self.conv3_w = T.Parameter(T.kaiming_uniform(rng, (c, 2 * c, 3, 3), 2 * c * 9))
        self.conv3_b = T.Parameter(np.zeros(c, dtype=T.default_dtype()))


class HeadParams(T.Module):
    """Two FC layers at the fixed 128 hidden width, then a 1-logit
    classifier and a 4-delta regressor."""

    def __init__(self, cfg, rng):
        c = cfg.channels
        w = cfg.head_width
        flat = c * 8 * 8
        self.fc1_w = T.Parameter(T.kaiming_uniform(rng, (flat, w), flat))
        self.fc1_b = T.Parameter(np.zeros(w, dtype=T.default_dtype()))
        self.fc2_w = T.Parameter(T.kaiming_uniform(rng, (w, w), w))
        self.fc2_b = T.Parameter(np.zeros(w, dtype=T.default_dtype()))
        self.cls_w = T.Parameter(T.kaiming_uniform(rng, (w, 1), w))
        self.cls_b = T.Parameter(np.zeros(1, dtype=T.default_dtype()))
        self.reg_w = T.Parameter(T.kaiming_uniform(rng, (w, 4), w))
        self.reg_b = T.Parameter(np.zeros(4, dtype=T.default_dtype()))


def roi_level(box):
    """FPN level heuristic: floor(4 + log2(sqrt(area)/224)) clamped to [3,5],
    returned as pyramid index 0..2."""
    x1, y1, x2, y2 = box
    area = max((x2 - x1) * (y2 - y1), 1e-8)
    lvl = math.floor(4 + math.log2(math.sqrt(area) / 224.0))
    return int(min(max(lvl, 3), 5)) - 3


def roi_align(level_feature, box, out_res, stride):
    """Bilinear RoI align with 2x2 sampling points per cell, averaged.

    ``box`` is in image pixels; it is mapped to feature coordinates by the
    level stride. Sampling points are clamped to the feature extent.
    """
    x1, y1, x2, y2 = box
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"degenerate box {box}")
    c, fh, fw = level_feature.shape
    fx1, fy1, fx2, fy2 = x1 / stride, y1 / stride, x2 / stride, y2 / stride
    n_samp = 2
    # sample grid: out_res*n_samp points per axis, centered in equal sub-bins
    ys = fy1 + (np.arange(out_res * n_samp) + 0.5) * (fy2 - fy1) / (out_res * n_samp)
    xs = fx1 + (np.arange(out_res * n_samp) + 0.5) * (fx2 - fx1) / (out_res * n_samp)
    ys = np.clip(ys, 0.0, fh - 1.0)
    xs = np.clip(xs, 0.0, fw - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1i = np.minimum(y0 + 1, fh - 1)
    x1i = np.minimum(x0 + 1, fw - 1)
    wy = (ys - y0).astype(level_feature.dtype)
    wx = (xs - x0).astype(level_feature.dtype)

    fd = level_feature.data
    rows0 = fd[:, y0, :]
    rows1 = fd[:, y1i, :]
    rows = rows0 * (1 - wy)[None, :, None] + rows1 * wy[None, :, None]
    cols = rows[:, :, x0] * (1 - wx) + rows[:, :, x1i] * wx
    # average the n_samp x n_samp sample points per output cell
    grid = cols.reshape(c, out_res, n_samp, out_res, n_samp)
    out_data = grid.mean(axis=(2, 4))

    def backward(g):
        gg = np.repeat(np.repeat(g, n_samp, axis=1), n_samp, axis=2) / (n_samp * n_samp)
        dcols_rows = np.zeros_like(rows)
        np.add.at(dcols_rows, (slice(None), slice(None), x0), gg * (1 - wx))
        np.add.at(dcols_rows, (slice(None), slice(None), x1i), gg * wx)
        dfd = np.zeros_like(fd)
        np.add.at(dfd, (slice(None), y0), dcols_rows * (1 - wy)[None, :, None])
        np.add.at(dfd, (slice(None), y1i), dcols_rows * wy[None, :, None])
        level_feature._accumulate(dfd)

    return T._make(np.ascontiguousarray(out_data), (level_feature,), backward)


def dsa_fuse(x, y, params):
    """Global matching of support RoI-scale features against query RoI
    features: Conv3(concat(x, y)) + concat(Conv1(x), Conv2(y))."""
    if x.shape != y.shape:
        raise ValueError(f"dsa_fuse shape mismatch: {x.shape} vs {y.shape}")
    axis = 0 if x.ndim == 3 else 1
    cat = T.concat([x, y], axis=axis)
    path_a = T.conv2d(cat, params.conv3_w, params.conv3_b, padding=1)
    path_b = T.concat([
        T.conv2d(x, params.conv1_w, params.conv1_b),
        T.conv2d(y, params.conv2_w, params.conv2_b),
    ], axis=axis)
    return T.add(path_a, path_b)


def dual_scale_aggregate(g4, g8):
    """Upsample the coarse fused map to 8x8 and add the fine one."""
    return T.add(T.bilinear_resize(g4, 8, 8), g8)


def head_forward(agg, params):
    """(p2, deltas) from an aggregated (C,8,8) map or a (N,C,8,8) batch."""
    batched = agg.ndim == 4
    n = agg.shape[0] if batched else 1
    flat = T.reshape(agg, (n, int(np.prod(agg.shape[-3:]))))
    h = T.relu(T.linear(flat, params.fc1_w, params.fc1_b))
    h = T.relu(T.linear(h, params.fc2_w, params.fc2_b))
    p2 = T.sigmoid(T.linear(h, params.cls_w, params.cls_b))
    deltas = T.linear(h, params.reg_w, params.reg_b)
    if not batched:
        p2 = T.reshape(p2, (1,))
        deltas = T.reshape(deltas, (4,))
    return p2, deltas


def apply_deltas(box, deltas):
    """Standard box-delta parameterization: shift the center by (dx,dy)
    scaled by the box extent, scale the extent by exp(dw,dh)."""
    x1, y1, x2, y2 = box
    w = x2 - x1
    h = y2 - y1
    cx = x1 + w / 2
    cy = y1 + h / 2
    dx, dy, dw, dh = [float(v) for v in deltas]
    dw = min(dw, 8.0)
    dh = min(dh, 8.0)
    ncx = cx + dx * w
    ncy = cy + dy * h
    nw = w * math.exp(dw)
    nh = h * math.exp(dh)
    return (ncx - nw / 2, ncy - nh / 2, ncx + nw / 2, ncy + nh / 2)


def delta_targets(proposal_box, gt_box):
    px1, py1, px2, py2 = proposal_box
    gx1, gy1, gx2, gy2 = gt_box
    pw, ph = px2 - px1, py2 - py1
    gw, gh = gx2 - gx1, gy2 - gy1
    return np.array([
        ((gx1 + gx2) / 2 - (px1 + px2) / 2) / pw,
        ((gy1 + gy2) / 2 - (py1 + py2) / 2) / ph,
        math.log(gw / pw),
        math.log(gh / ph),
    ], dtype=np.float32)


def _box_iou_matrix(boxes_a, boxes_b):
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / union, 0.0)


def label_proposals(proposal_boxes, gt_boxes, iou_thr):
    """Per proposal: (is_positive, matched gt index) at the cascade IoU."""
    if not gt_boxes or not proposal_boxes:
        return [(False, -1)] * len(proposal_boxes)
    ious = _box_iou_matrix(proposal_boxes, gt_boxes)
    out = []
    for i in range(len(proposal_boxes)):
        j = int(np.argmax(ious[i]))
        out.append((bool(ious[i, j] >= iou_thr), j))
    return out


def sample_proposals(labels, max_samples, pos_fraction, rng):
    """Subsample proposal indices: positives capped at ``pos_fraction`` of
    the budget, negatives fill the rest. Deterministic given the rng."""
    pos_idx = [i for i, (p, _) in enumerate(labels) if p]
    neg_idx = [i for i, (p, _) in enumerate(labels) if not p]
    n_pos = min(len(pos_idx), int(max_samples * pos_fraction))
    if len(pos_idx) > n_pos:
        pos_idx = list(rng.choice(pos_idx, size=n_pos, replace=False))
    n_neg = min(len(neg_idx), max_samples - n_pos)
    if len(neg_idx) > n_neg:
        neg_idx = list(rng.choice(neg_idx, size=n_neg, replace=False))
    return sorted(int(i) for i in pos_idx) + sorted(int(i) for i in neg_idx)


def smooth_l1(pred, target, beta=SMOOTH_L1_BETA):
    """Huber-style loss, elementwise; quadratic inside ``beta``."""
    diff = T.sub(pred, target)
    ad = T.absolute(diff)
    inside = (ad.data < beta).astype(ad.dtype)
    quad = T.mul(T.mul(diff, diff), 0.5 / beta)
    lin = T.sub(ad, 0.5 * beta)
    return T.add(T.mul(quad, inside), T.mul(lin, 1.0 - inside))


def stage2_loss(p2, deltas, labels, proposal_boxes, gt_boxes):
    """BCE over all sampled proposals plus smooth-L1 on positives' deltas.

    ``p2``: (N,1) likelihoods; ``deltas``: (N,4); ``labels``: output of
    :func:`label_proposals` for the sampled set. No positives -> the
    regression term is 0.
    """
    n = len(labels)
    y = np.array([[1.0 if p else 0.0] for p, _ in labels], dtype=np.float32)
    p = T.clip(p2, _EPS, 1.0 - _EPS)
    bce = T.neg(T.add(T.mul(T.log(p), y), T.mul(T.log(T.sub(1.0, p)), 1.0 - y)))
    cls_loss = T.tmean(bce)
    pos = [(i, j) for i, (flag, j) in enumerate(labels) if flag]
    if not pos:
        return cls_loss
    idx = [i for i, _ in pos]
    tgt = np.stack([delta_targets(proposal_boxes[i], gt_boxes[j]) for i, j in pos])
    pred = T.take_rows(deltas, idx)
    reg_loss = T.tmean(T.tsum(smooth_l1(pred, tgt), axis=1))
    return T.add(cls_loss, reg_loss)


def roi_features(pyramid, proposals, resolutions):
    """Batched RoI features per resolution: {res: (N, C, res, res)}."""
    feats = {res: [] for res in resolutions}
    for prop in proposals:
        lvl = roi_level(prop.box)
        feat = pyramid.levels[lvl]
        for res in resolutions:
            feats[res].append(roi_align(feat, prop.box, res, FeaturePyramid.STRIDES[lvl]))
    return {res: T.stack(feats[res]) for res in resolutions}


def head_scores(pyramid, support_prototypes, proposals, dsa_params, head_params,
                resolutions=(4, 8)):
    """p2 and deltas for every proposal (batched through the head).

    ``support_prototypes``: per pyramid level, the mined support map; it is
    adaptively pooled to each RoI resolution and broadcast over proposals.
    """
    if not proposals:
        return None, None
    feats = roi_features(pyramid, proposals, resolutions)
    levels = [roi_level(p.box) for p in proposals]
    fused = {}
    for res in resolutions:
        pooled = [T.adaptive_avg_pool(support_prototypes[l], res, res) for l in range(3)]
        support = T.stack([pooled[l] for l in levels])
        fused[res] = dsa_fuse(support, feats[res], dsa_params)
    agg = dual_scale_aggregate(fused[resolutions[0]], fused[resolutions[1]])
    return head_forward(agg, head_params)


def detect(pyramid, support_prototypes, proposals, dsa_params, head_params,
           image_size, nms_thr=0.5, max_detections=100, resolutions=(4, 8)):
    """Final detections: refine each proposal with its deltas, score it with
    p1*p2 exactly, then NMS and keep the top ``max_detections``."""
    if not proposals:
        return []
    p2, deltas = head_scores(pyramid, support_prototypes, proposals,
                             dsa_params, head_params, resolutions)
    img_h, img_w = image_size
    dets = []
    for i, prop in enumerate(proposals):
        box = apply_deltas(prop.box, deltas.data[i])
        x1 = min(max(box[0], 0.0), float(img_w))
        y1 = min(max(box[1], 0.0), float(img_h))
        x2 = min(max(box[2], 0.0), float(img_w))
        y2 = min(max(box[3], 0.0), float(img_h))
        if x2 <= x1 or y2 <= y1:
            continue
        score = prop.p1 * float(p2.data[i, 0])
        dets.append(Detection((x1, y1, x2, y2), score))
    keep = nms([d.box for d in dets], [d.score for d in dets], nms_thr)
    return [dets[i] for i in keep[:max_detections]]

"""Support feature mining block.

Support maps are encoded along the height and width axes by a
permute-FC-unpermute pass (channels are split into segments whose size
equals the spatial extent, the in-segment channel index is swapped with
that spatial index, a shared fully connected layer mixes the permuted
channel axis, and the swap is undone), then the two branch outputs are
fused with per-channel softmax weights derived from a small two-layer
MLP over the spatially pooled branch sum.

The permutation is only shape-preserving when C == extent * segments,
so the detector pools every support pyramid level to the calibration
resolution (cfg.support_pool, default 8x8 with C=64) before calling
:func:`sm_block`.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


class SMParams(T.Module):
    """Two axial FC encoders plus the branch-reweighting MLP (two branches)."""

    BRANCHES = 2

    def __init__(self, cfg, rng):
        c = cfg.channels
        c_hat = cfg.bottleneck
        if cfg.channels % cfg.segments != 0:
            raise ValueError(f"channels {c} not divisible by segments {cfg.segments}")
        if c_hat < 1:
            raise ValueError("bottleneck width must be >= 1")
        self.segments = cfg.segments
        self.w_h = T.Parameter(T.kaiming_uniform(rng, (c, c), c))
        self.w_w = T.Parameter(T.kaiming_uniform(rng, (c, c), c))
        self.r1 = T.Parameter(T.kaiming_uniform(rng, (c, c_hat), c))
        self.r2 = T.Parameter(T.kaiming_uniform(rng, (c_hat, self.BRANCHES * c), c_hat))


def _axial_encode(x, weight, segments, axis):
    """Permute-FC-unpermute along one spatial axis.

    ``axis`` 0 encodes height, 1 encodes width. Requires the axis extent to
    equal the segment size C // segments so the swap preserves shape.
    """
    c, h, w = x.shape
    ext = (h, w)[axis]
    seg = c // segments
    if seg * segments != c or seg != ext:
        raise ValueError(
            f"axial encode needs C == extent*segments; got C={c}, extent={ext}, segments={segments}")
    # (C,H,W) -> (S, seg, H, W), swap seg with the spatial axis, re-flatten
    x4 = T.reshape(x, (segments, seg, h, w))
    order = (0, 2, 1, 3) if axis == 0 else (0, 3, 2, 1)
    perm = T.reshape(T.transpose(x4, order), (c, h, w))
    # FC over the permuted channel axis at every spatial position
    mixed = T.linear(T.transpose(perm, (1, 2, 0)), weight)
    mixed = T.transpose(mixed, (2, 0, 1))
    # inverse permutation (the swap is an involution)
    m4 = T.reshape(mixed, (segments, seg, h, w))
    return T.reshape(T.transpose(m4, order), (c, h, w))


def encode_height(x, w_h, segments):
    """Height-axis encoder: mixes height information into channels via the
    segment/height swap, then the shared FC."""
    return _axial_encode(x, w_h, segments, axis=0)


def encode_width(x, w_w, segments):
    """Width-axis mirror of :func:`encode_height`."""
    return _axial_encode(x, w_w, segments, axis=1)


def fuse(x_h, x_w, r1, r2):
    """Adaptive branch fusion.

    Pools the branch sum over space, projects it through r1/ReLU/r2 to one
    logit pair per channel, softmaxes over the branch axis, and mixes the
    branches channel-wise. Output lies in the channel-wise convex hull of
    the two inputs.
    """
    if x_h.shape != x_w.shape:
        raise ValueError(f"branch shapes differ: {x_h.shape} vs {x_w.shape}")
    c = x_h.shape[0]
    pooled = T.tmean(T.add(x_h, x_w), axis=(1, 2))            # (C,)
    z = T.linear(T.relu(T.linear(T.reshape(pooled, (1, c)), r1)), r2)
    weights = T.softmax(T.reshape(z, (SMParams.BRANCHES, c)), axis=0)
    parts = T.split(weights, [1, 1], axis=0)
    wh = T.reshape(parts[0], (c, 1, 1))
    ww = T.reshape(parts[1], (c, 1, 1))
    return T.add(T.mul(x_h, wh), T.mul(x_w, ww))


def sm_block(x, params):
    """Full mining block: encode both axes, then fuse adaptively."""
    xh = encode_height(x, params.w_h, params.segments)
    xw = encode_width(x, params.w_w, params.segments)
    return fuse(xh, xw, params.r1, params.r2)


def branch_weights(x_h, x_w, r1, r2):
    """The (2, C) softmax weights used by :func:`fuse` (diagnostics/tests)."""
    c = x_h.shape[0]
    pooled = T.tmean(T.add(x_h, x_w), axis=(1, 2))
    z = T.linear(T.relu(T.linear(T.reshape(pooled, (1, c)), r1)), r2)
    return T.softmax(T.reshape(z, (SMParams.BRANCHES, c)), axis=0)

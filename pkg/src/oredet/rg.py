"""Relationship guidance between mined support features and the query pyramid.

Spatial-scale correlation slides pooled views of the support map over the
query as depthwise kernels: a 1x1 prototype plus a 3x1-then-1x3 strip pair
(the strip pair replaces a dense 3x3 at 6/9 of its multiply-accumulate
cost), and both responses are superimposed onto the original query map.
Channel correlation then concatenates the globally pooled support with the
attended query and mixes channels with a 1x1 conv. One attention map per
pyramid level feeds the first stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid


class RGParams(T.Module):
    """1x1 channel-correlation conv: 2*C_f concat channels -> C_f."""

    def __init__(self, cfg, rng):
        c = cfg.channels
        self.chan_corr_weight = T.Parameter(
            T.kaiming_uniform(rng, (c, 2 * c, 1, 1), 2 * c))
        self.chan_corr_bias = T.Parameter(np.zeros(c, dtype=T.default_dtype()))


@dataclass
class SupportKernels:
    """Adaptive-average-pooled views of one mined support map; channel c of
    each kernel averages support activations of channel c only."""
    k1: T.Tensor    # C x 1 x 1
    k31: T.Tensor   # C x 3 x 1
    k13: T.Tensor   # C x 1 x 3


def build_kernels(support_feat):
    """Pool a mined support map (C,Hs,Ws), Hs,Ws >= 3, into the three kernels."""
    c, hs, ws = support_feat.shape
    if hs < 3 or ws < 3:
        raise ValueError(f"support map {hs}x{ws} too small to pool 3-kernels")
    return SupportKernels(
        k1=T.adaptive_avg_pool(support_feat, 1, 1),
        k31=T.adaptive_avg_pool(support_feat, 3, 1),
        k13=T.adaptive_avg_pool(support_feat, 1, 3),
    )


def spatial_scale_correlation(kernels, query):
    """query + 1x1 response + sequential strip response (same shapes)."""
    q1 = T.depthwise_xcorr(query, kernels.k1)
    qs = T.depthwise_xcorr(T.depthwise_xcorr(query, kernels.k31), kernels.k13)
    return T.add(T.add(query, q1), qs)


def channel_correlation(support_feat, attended, params):
    """Concat globally pooled support (broadcast over space) with the attended
    query along channels, then 1x1-conv back to C_f channels."""
    c, h, w = attended.shape
    pooled = T.adaptive_avg_pool(support_feat, 1, 1)
    s_map = T.broadcast_to(pooled, (c, h, w))
    cat = T.concat([s_map, attended], axis=0)
    return T.conv2d(cat, params.chan_corr_weight, params.chan_corr_bias)


def _xcorr1x1_only(support_feat, query):
    # AttentionRPN-style ablation: global-pooled 1x1 depthwise response alone
    return T.depthwise_xcorr(query, T.adaptive_avg_pool(support_feat, 1, 1))


def guide(support_levels, query_pyramid, params, fusion="rg"):
    """Attention pyramid from mined supports and the query pyramid.

    ``support_levels``: per level, a list of K mined support maps (one per
    shot); they are averaged into the level prototype before correlation.
    """
    if len(support_levels) != len(query_pyramid.levels):
        raise ValueError("support and query pyramids are not level-aligned")
    attn = []
    for shots, q in zip(support_levels, query_pyramid.levels):
        proto = shots[0]
        if len(shots) > 1:
            for s in shots[1:]:
                proto = T.add(proto, s)
            proto = T.mul(proto, 1.0 / len(shots))
        if fusion == "xcorr1x1":
            attn.append(_xcorr1x1_only(proto, q))
        else:
            spatial = spatial_scale_correlation(build_kernels(proto), q)
            attn.append(channel_correlation(proto, spatial, params))
    return FeaturePyramid(*attn)

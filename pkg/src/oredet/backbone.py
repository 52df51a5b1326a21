"""Shared feature extractor: small VoV-style backbone plus FPN.

Produces the three pyramid levels P3/P4/P5 (strides 8/16/32, one shared
channel width) for query and support images alike. The stage layout is a
budget-conscious stand-in for a slim one-shot-aggregation network: each
stage downsamples with a strided 3x3 conv, then runs one VoV block
(three successive 3x3 convs whose outputs are concatenated with the
block input and reduced by a 1x1 conv).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class FeaturePyramid:
    """P3/P4/P5 feature maps; level i has spatial extent ceil(input / stride_i)."""
    p3: T.Tensor
    p4: T.Tensor
    p5: T.Tensor

    STRIDES = (8, 16, 32)

    @property
    def levels(self):
        return [self.p3, self.p4, self.p5]


class Conv(T.Module):
    """3x3 or 1x1 conv with optional ReLU; Kaiming-uniform weights, zero bias."""

    def __init__(self, rng, cin, cout, kernel=3, stride=1, act=True):
        fan_in = cin * kernel * kernel
        self.weight = T.Parameter(T.kaiming_uniform(rng, (cout, cin, kernel, kernel), fan_in))
        self.bias = T.Parameter(np.zeros(cout, dtype=T.default_dtype()))
        self._stride = stride
        self._pad = kernel // 2
        self._act = act

    def __call__(self, x):
        y = T.conv2d(x, self.weight, self.bias, stride=self._stride, padding=self._pad)
        return T.relu(y) if self._act else y


class VoVBlock(T.Module):
    """Concatenate the input with three chained 3x3 convs, then 1x1-reduce."""

    def __init__(self, rng, cin, width, cout):
        self.conv1 = Conv(rng, cin, width)
        self.conv2 = Conv(rng, width, width)
        self.conv3 = Conv(rng, width, width)
        self.reduce = Conv(rng, cin + 3 * width, cout, kernel=1)

    def __call__(self, x):
        c1 = self.conv1(x)
        c2 = self.conv2(c1)
        c3 = self.conv3(c2)
        axis = 0 if x.ndim == 3 else 1
        return self.reduce(T.concat([x, c1, c2, c3], axis=axis))


class BackboneFPN(T.Module):
    """VoV-style trunk with three stages (strides 8/16/32) and a standard FPN
    (1x1 laterals, top-down bilinear upsample + add, 3x3 smoothing)."""

    def __init__(self, cfg, rng):
        w = cfg.stem_width
        s3, s4, s5 = cfg.stage_widths
        v3, v4, v5 = cfg.vov_widths
        self.out_channels = cfg.channels
        self.stem = Conv(rng, 3, w, stride=2)
        self.down1 = Conv(rng, w, w, stride=2)
        self.down3 = Conv(rng, w, w, stride=2)
        self.stage3 = VoVBlock(rng, w, v3, s3)
        self.down4 = Conv(rng, s3, s3, stride=2)
        self.stage4 = VoVBlock(rng, s3, v4, s4)
        self.down5 = Conv(rng, s4, s4, stride=2)
        self.stage5 = VoVBlock(rng, s4, v5, s5)
        self.lat3 = Conv(rng, s3, cfg.channels, kernel=1, act=False)
        self.lat4 = Conv(rng, s4, cfg.channels, kernel=1, act=False)
        self.lat5 = Conv(rng, s5, cfg.channels, kernel=1, act=False)
        self.smooth3 = Conv(rng, cfg.channels, cfg.channels, act=False)
        self.smooth4 = Conv(rng, cfg.channels, cfg.channels, act=False)
        self.smooth5 = Conv(rng, cfg.channels, cfg.channels, act=False)

    def _trunk(self, x):
        x = self.down1(self.stem(x))
        c3 = self.stage3(self.down3(x))
        c4 = self.stage4(self.down4(c3))
        c5 = self.stage5(self.down5(c4))
        return c3, c4, c5

    def _pyramid(self, x):
        c3, c4, c5 = self._trunk(x)
        l5 = self.lat5(c5)
        l4 = self.lat4(c4)
        l3 = self.lat3(c3)
        # upsample to the lateral's exact shape (x2 when sizes are even)
        up5 = T.bilinear_resize(l5, l4.shape[-2], l4.shape[-1])
        m4 = T.add(l4, up5)
        up4 = T.bilinear_resize(m4, l3.shape[-2], l3.shape[-1])
        m3 = T.add(l3, up4)
        return self.smooth3(m3), self.smooth4(m4), self.smooth5(l5)

    def extract(self, image):
        """image: (3,H,W) with H,W >= 32 -> FeaturePyramid."""
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValueError(f"expected (3,H,W) image, got {image.shape}")
        h, w = image.shape[1], image.shape[2]
        if h < 32 or w < 32:
            raise ValueError(f"image {h}x{w} smaller than the backbone stride chain")
        p3, p4, p5 = self._pyramid(image)
        return FeaturePyramid(p3, p4, p5)

    def extract_batch(self, images):
        """images: (N,3,H,W) -> list of per-image FeaturePyramids."""
        n = images.shape[0]
        p3, p4, p5 = self._pyramid(images)
        pyramids = []
        p3s = T.split(p3, [1] * n, axis=0)
        p4s = T.split(p4, [1] * n, axis=0)
        p5s = T.split(p5, [1] * n, axis=0)
        for i in range(n):
            pyramids.append(FeaturePyramid(
                T.reshape(p3s[i], p3.shape[1:]),
                T.reshape(p4s[i], p4.shape[1:]),
                T.reshape(p5s[i], p5.shape[1:]),
            ))
        return pyramids

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False


def count_parameters(module):
    """Exact element count over all named parameters."""
    return sum(int(p.size) for _, p in module.named_parameters())

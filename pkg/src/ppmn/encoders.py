"""Siamese encoders mapping one image (or its CTM stack) to a Cx10x5 representation.

Both images of a pair are stacked along the batch axis and pushed through
the same layer objects, so the two views literally share parameters.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, conv_output_size, max_pool, pool_output_size, relu
from .ctm import CTM_CHANNELS, IMAGE_HEIGHT, IMAGE_WIDTH, MAP_HEIGHT, MAP_WIDTH
from .layers import Conv
from .params import ParamStore

REP_SIZE = (10, 5)


class SCEncoder:
    """Plain strided convnet standing in for the pretrained backbone.

    Four stride-2 3x3 stages then one stride-1 stage:
    160x80 -> 80x40 -> 40x20 -> 20x10 -> 10x5 -> 10x5.
    """

    def __init__(self, store: ParamStore, prefix: str, widths, out_channels: int,
                 rng: np.random.Generator):
        specs = [(w, 2) for w in widths] + [(out_channels, 1)]
        self.layers = []
        h, w, c = IMAGE_HEIGHT, IMAGE_WIDTH, 3
        for i, (width, stride) in enumerate(specs):
            conv = Conv(store, f"{prefix}.conv{i + 1}", c, width, 3, rng, stride=stride, pad=1)
            self.layers.append(conv)
            h = conv_output_size(h, 3, 1, stride, 1)
            w = conv_output_size(w, 3, 1, stride, 1)
            c = width
        if (h, w) != REP_SIZE:
            raise ValueError(f"SC encoder with widths {tuple(widths)} yields {h}x{w}, expected 10x5")
        self.out_channels = out_channels

    def __call__(self, images: Tensor) -> Tensor:
        if images.shape[1:] != (3, IMAGE_HEIGHT, IMAGE_WIDTH):
            raise ValueError(f"SC encoder expects (N, 3, 160, 80) input, got {images.shape}")
        x = images
        for conv in self.layers:
            x = relu(conv(x))
        return x


class CTMEncoder:
    """conv -> pool -> conv -> pool -> conv over 64x40x20 CTM stacks (3x3 convs, 2x2 pools)."""

    def __init__(self, store: ParamStore, prefix: str, widths, out_channels: int,
                 rng: np.random.Generator):
        widths = tuple(widths)
        if len(widths) != 2:
            raise ValueError(f"CTM encoder needs exactly two hidden widths, got {widths}")
        chans = (CTM_CHANNELS,) + widths + (out_channels,)
        self.convs = [
            Conv(store, f"{prefix}.conv{i + 1}", chans[i], chans[i + 1], 3, rng, pad=1)
            for i in range(3)
        ]
        h, w = MAP_HEIGHT, MAP_WIDTH
        for _ in range(2):
            h, w = pool_output_size(h, 2, 2), pool_output_size(w, 2, 2)
        if (h, w) != REP_SIZE:
            raise ValueError(f"CTM encoder yields {h}x{w}, expected 10x5")
        self.out_channels = out_channels

    def __call__(self, ctm: Tensor) -> Tensor:
        if ctm.shape[1:] != (CTM_CHANNELS, MAP_HEIGHT, MAP_WIDTH):
            raise ValueError(f"CTM encoder expects (N, 64, 40, 20) input, got {ctm.shape}")
        x = relu(self.convs[0](ctm))
        x = max_pool(x, 2, 2)
        x = relu(self.convs[1](x))
        x = max_pool(x, 2, 2)
        return relu(self.convs[2](x))

"""Multi-scale convolutional feature extractor with sliding pyramid pooling.

Each input scale runs through a shared convolutional trunk and a scale-specific
head; every per-scale map is augmented with stride-1 max-pooled copies of
itself, and the smaller maps are bilinearly upscaled to the largest one and
concatenated along channels.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn


@dataclass
class FeatMapConfig:
    scales: tuple = (1.2, 0.8, 0.4)
    trunk_blocks: tuple = ((2, 8), (2, 16), (2, 16))   # (conv layers, channels) per block
    head_layers: int = 2
    base_channels: int = 16
    pyramid_windows: tuple = (5, 9)
    downsample_factor: int = 4
    in_channels: int = 3
    input_mean: float = 0.5      # subtracted from pixel values before the first layer

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        self.trunk_blocks = tuple((int(a), int(b)) for a, b in self.trunk_blocks)
        self.pyramid_windows = tuple(int(w) for w in self.pyramid_windows)
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be a nonempty sequence of positive numbers")
        if any(w < 3 or w % 2 == 0 for w in self.pyramid_windows):
            raise ValueError("pyramid windows must be odd and >= 3")
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ValueError("downsample_factor must be a power of two")
        if self.n_down > len(self.trunk_blocks):
            raise ValueError("need one trunk block per stride-2 pooling stage")
        if self.head_layers < 1 or self.base_channels < 1:
            raise ValueError("head_layers and base_channels must be >= 1")
        if any(n < 1 or c < 1 for n, c in self.trunk_blocks):
            raise ValueError("trunk blocks need >= 1 layer and >= 1 channel")

    @property
    def n_down(self) -> int:
        return int(self.downsample_factor).bit_length() - 1

    @property
    def feature_dim(self) -> int:
        return self.base_channels * (len(self.pyramid_windows) + 1) * len(self.scales)

    def to_dict(self):
        d = asdict(self)
        d["scales"] = list(self.scales)
        d["trunk_blocks"] = [list(b) for b in self.trunk_blocks]
        d["pyramid_windows"] = list(self.pyramid_windows)
        return d


# Full-size layout: VGG-16-shaped trunk, 512-channel heads, stride 16.
FULL_SCALE = FeatMapConfig(
    scales=(1.2, 0.8, 0.4),
    trunk_blocks=((2, 64), (2, 128), (3, 256), (3, 512), (3, 512)),
    head_layers=2, base_channels=512, pyramid_windows=(5, 9), downsample_factor=16)


def scaled_size(n: int, scale: float) -> int:
    return max(1, int(round(n * scale)))


def output_size(height: int, width: int, config: FeatMapConfig):
    """Spatial extent of the fused feature map for an image of the given size."""
    s = max(config.scales)
    f = config.downsample_factor
    return -(-scaled_size(height, s) // f), -(-scaled_size(width, s) // f)


def sliding_pyramid_pool(fm, windows):
    """Concatenate ``fm`` with a stride-1 max-pooled copy per window: d -> d * (len(windows) + 1)."""
    fm = np.asarray(fm, dtype=np.float64)
    pooled = [nn.maxpool_forward(fm, w, 1)[0] for w in windows]
    return nn.concat_forward([fm] + pooled)


def init_featmap(config: FeatMapConfig, rng) -> dict:
    layers = {}
    c_in = config.in_channels
    for b, (n_layers, ch) in enumerate(config.trunk_blocks):
        for l in range(n_layers):
            layers[f"trunk{b}.conv{l}"] = nn.init_conv3x3(c_in, ch, rng, nn.GROUP_PRETRAINED)
            c_in = ch
    for i in range(len(config.scales)):
        c = c_in
        for l in range(config.head_layers):
            layers[f"head{i}.conv{l}"] = nn.init_conv3x3(c, config.base_channels, rng, nn.GROUP_NEW)
            c = config.base_channels
    return layers


class FeatMapNet:
    """Parameters plus forward/backward for one feature extractor."""

    def __init__(self, config: FeatMapConfig, layers: dict):
        self.config = config
        self.layers = layers

    @classmethod
    def init(cls, config: FeatMapConfig, rng):
        return cls(config, init_featmap(config, rng))

    def _plan(self, scale_idx):
        cfg = self.config
        for b, (n_layers, _) in enumerate(cfg.trunk_blocks):
            for l in range(n_layers):
                yield ("conv", f"trunk{b}.conv{l}")
                yield ("relu", None)
            if b < cfg.n_down:
                yield ("pool", None)
        for l in range(cfg.head_layers):
            yield ("conv", f"head{scale_idx}.conv{l}")
            yield ("relu", None)

    def _check_image(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != self.config.in_channels:
            raise nn.ShapeError(f"expected (H, W, {self.config.in_channels}) image, got {image.shape}")
        h, w = image.shape[:2]
        f = self.config.downsample_factor
        smallest = min(scaled_size(h, min(self.config.scales)), scaled_size(w, min(self.config.scales)))
        if min(h, w) < f or smallest < f:
            raise ValueError(
                f"image {h}x{w} too small for downsample factor {f} at scale {min(self.config.scales)}")
        return image - self.config.input_mean

    def forward(self, image):
        """Return ``(features (h, w, d), cache)``."""
        image = self._check_image(image)
        cfg = self.config
        h, w = image.shape[:2]
        out_h, out_w = output_size(h, w, cfg)
        per_scale, caches = [], []
        for i, s in enumerate(cfg.scales):
            x = nn.bilinear_resize(image, scaled_size(h, s), scaled_size(w, s))
            tape = []
            for op, name in self._plan(i):
                if op == "conv":
                    tape.append(("conv", name, x))
                    x = nn.conv3x3_forward(x, self.layers[name])
                elif op == "relu":
                    tape.append(("relu", None, x))
                    x = nn.relu_forward(x)
                else:
                    x, pc = nn.maxpool_forward(x, 2, 2)
                    tape.append(("pool", None, pc))
            pool_caches = [nn.maxpool_forward(x, win, 1) for win in cfg.pyramid_windows]
            x_pyr = nn.concat_forward([x] + [p for p, _ in pool_caches])
            pre_shape = x_pyr.shape[:2]
            per_scale.append(nn.bilinear_resize(x_pyr, out_h, out_w))
            caches.append((tape, [c for _, c in pool_caches], pre_shape))
        return nn.concat_forward(per_scale), caches

    def __call__(self, image):
        return self.forward(image)[0]

    def backward(self, caches, upstream) -> nn.GradBuffer:
        cfg = self.config
        grads = nn.GradBuffer()
        d_scale = cfg.base_channels * (len(cfg.pyramid_windows) + 1)
        chunks = nn.concat_backward(upstream, [d_scale] * len(cfg.scales))
        for (tape, pool_caches, pre_shape), g in zip(caches, chunks):
            g = nn.bilinear_resize_backward(g, *pre_shape)
            parts = nn.concat_backward(g, [cfg.base_channels] * (len(pool_caches) + 1))
            g = parts[0]
            for pc, gp in zip(pool_caches, parts[1:]):
                g = g + nn.maxpool_backward(pc, gp)
            for op, name, saved in reversed(tape):
                if op == "conv":
                    g, gw, gb = nn.conv3x3_backward(saved, self.layers[name], g)
                    grads.add(name, gw, gb)
                elif op == "relu":
                    g = nn.relu_backward(saved, g)
                else:
                    g = nn.maxpool_backward(saved, g)
        grads.count = 1
        return grads


def extract_features(image, params, config: FeatMapConfig | None = None):
    """Feature map (h, w, d) for ``image``; ``params`` is a FeatMapNet or its layer dict."""
    net = params if isinstance(params, FeatMapNet) else FeatMapNet(config, params)
    return net(image)

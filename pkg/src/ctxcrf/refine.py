"""Upsampling of coarse marginals and windowed color-contrast Potts refinement."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .nn import bilinear_resize, softmax


@dataclass
class RefineConfig:
    window_radius: int = 5
    color_bandwidth: float = 10.0     # in 0-255 color units
    spatial_bandwidth: float = 3.0    # pixels
    potts_weight: float = 3.0
    iterations: int = 5
    enabled: bool = True

    def __post_init__(self):
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")
        if self.color_bandwidth <= 0 or self.spatial_bandwidth <= 0:
            raise ValueError("bandwidths must be positive")
        if self.potts_weight < 0:
            raise ValueError("potts_weight must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def to_dict(self):
        return asdict(self)


def upsample_scores(coarse, image_h: int, image_w: int, floor=1e-12):
    """Log of coarse marginals (h, w, K), bilinearly resized to (image_h, image_w, K)."""
    coarse = np.asarray(coarse, dtype=np.float64)
    return bilinear_resize(np.log(np.maximum(coarse, floor)), image_h, image_w)


def _shift(a, dr, dc):
    """``out[i, j] = a[i + dr, j + dc]`` where defined, plus a validity mask."""
    h, w = a.shape[:2]
    out = np.zeros_like(a)
    valid = np.zeros((h, w), dtype=bool)
    rs, re_ = max(0, -dr), min(h, h - dr)
    cs, ce = max(0, -dc), min(w, w - dc)
    if rs < re_ and cs < ce:
        out[rs:re_, cs:ce] = a[rs + dr:re_ + dr, cs + dc:ce + dc]
        valid[rs:re_, cs:ce] = True
    return out, valid


def affinities(image, config: RefineConfig):
    """``[(dr, dc, w)]`` with ``w[i]`` the Potts weight between pixel i and pixel i + (dr, dc)."""
    rgb = np.asarray(image, dtype=np.float64) * 255.0
    r = config.window_radius
    out = []
    for dr in range(-r, r + 1):
        for dc in range(-r, r + 1):
            if dr == 0 and dc == 0:
                continue
            other, valid = _shift(rgb, dr, dc)
            d2 = ((rgb - other) ** 2).sum(axis=-1)
            w = config.potts_weight * np.exp(-(dr * dr + dc * dc) / (2 * config.spatial_bandwidth ** 2)
                                             - d2 / (2 * config.color_bandwidth ** 2))
            out.append((dr, dc, np.where(valid, w, 0.0)))
    return out


def refine_marginals(scores, image, config: RefineConfig, callback=None):
    """Synchronous mean-field sweeps of the windowed Potts model; returns (H, W, K) marginals."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[:2] != np.asarray(image).shape[:2]:
        raise ValueError(f"scores {scores.shape[:2]} and image {np.asarray(image).shape[:2]} differ in size")
    q = softmax(scores)
    if not config.enabled or config.potts_weight == 0:
        return q
    aff = affinities(image, config)
    for it in range(config.iterations):
        msg = np.zeros_like(q)
        for dr, dc, w in aff:
            msg += w[..., None] * _shift(q, dr, dc)[0]
        # Potts penalty w * [l_i != l_j] gives exp(score + sum_j w_ij Q_j(l)) up to a constant
        q = softmax(scores + msg)
        if callback is not None:
            callback(it, q)
    return q


def local_refine(scores, image, config: RefineConfig):
    """Per-pixel labels after refinement (plain argmax when disabled)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[:2] != np.asarray(image).shape[:2]:
        raise ValueError(f"scores {scores.shape[:2]} and image {np.asarray(image).shape[:2]} differ in size")
    if not config.enabled or config.potts_weight == 0:
        return scores.argmax(axis=-1)
    return refine_marginals(scores, image, config).argmax(axis=-1)

"""Deterministic differentiable image embedding and feature-space helpers.

The extractor pools per-cell means of R, G, B and an edge-strength channel
over a pyramid of grids, then applies a fixed seeded random projection and
normalizes. Anything with the same ``image -> unit vector`` interface can be
dropped in for it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DomainError
from .field import DTYPE

# keeps sqrt differentiable on flat regions
_EDGE_EPS = 1e-6


@dataclass(frozen=True)
class ExtractorConfig:
    grid_levels: tuple = (1, 2, 4)
    projection_seed: int = 0
    output_dim: int = 64
    # grids finer than 1x1 describe layout relative to the image mean
    center_layout: bool = True

    @property
    def raw_dim(self):
        return sum(g * g for g in self.grid_levels) * 4


def edge_strength(gray):
    """Forward-difference gradient magnitude of an ``(H, W)`` image, edges clamped."""
    gx = torch.cat([gray[:, 1:] - gray[:, :-1], torch.zeros_like(gray[:, :1])], dim=1)
    gy = torch.cat([gray[1:, :] - gray[:-1, :], torch.zeros_like(gray[:1, :])], dim=0)
    return torch.sqrt(gx * gx + gy * gy + _EDGE_EPS)


class FeatureExtractor:
    def __init__(self, cfg=None):
        self.cfg = cfg or ExtractorConfig()
        rng = np.random.default_rng(self.cfg.projection_seed)
        raw = self.cfg.raw_dim
        proj = rng.standard_normal((self.cfg.output_dim, raw)) / np.sqrt(raw)
        self.projection = torch.tensor(proj, dtype=DTYPE)

    def descriptor(self, image):
        """Raw pooled descriptor of an ``(H, W, 3)`` image."""
        image = torch.as_tensor(image, dtype=DTYPE)
        if image.ndim != 3 or image.shape[-1] != 3:
            raise DomainError(f"expected an (H, W, 3) image, got shape {tuple(image.shape)}")
        finest = max(self.cfg.grid_levels)
        if image.shape[0] < finest or image.shape[1] < finest:
            raise DomainError(f"image {image.shape[0]}x{image.shape[1]} smaller than the {finest}x{finest} grid")
        edges = edge_strength(image.mean(dim=-1))
        chans = torch.cat([image.permute(2, 0, 1), edges[None]], dim=0)
        mean = chans.mean(dim=(1, 2), keepdim=True)
        pooled = []
        for g in self.cfg.grid_levels:
            cells = F.adaptive_avg_pool2d(chans, g)
            if self.cfg.center_layout and g > 1:
                cells = cells - mean
            pooled.append(cells.reshape(-1))
        return torch.cat(pooled)

    def __call__(self, image):
        v = self.projection @ self.descriptor(image)
        # floor rather than offset the norm so outputs are unit length to rounding
        return v / torch.clamp(torch.linalg.norm(v), min=1e-8)

    extract = __call__


def extract(image, cfg=None):
    return FeatureExtractor(cfg)(image)


def lerp_features(v1, v2, s):
    """``(1 - s) v1 + s v2`` without renormalization."""
    v1 = torch.as_tensor(v1, dtype=DTYPE)
    v2 = torch.as_tensor(v2, dtype=DTYPE)
    if v1.shape != v2.shape:
        raise DomainError(f"feature dimensions differ: {tuple(v1.shape)} vs {tuple(v2.shape)}")
    if not 0.0 <= s <= 1.0:
        raise DomainError(f"interpolation coefficient must lie in [0, 1], got {s}")
    if s == 0.0:
        return v1.clone()
    if s == 1.0:
        return v2.clone()
    return (1.0 - s) * v1 + s * v2


def cosine_similarity(a, b):
    a = torch.as_tensor(a, dtype=DTYPE)
    b = torch.as_tensor(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise DomainError(f"feature dimensions differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    na, nb = torch.linalg.norm(a), torch.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("cosine similarity of a zero vector is undefined")
    return torch.clamp(torch.dot(a, b) / (na * nb), -1.0, 1.0)

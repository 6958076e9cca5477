"""Pinhole ray generation and differentiable volume-rendering quadrature."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DomainError
from .field import DTYPE


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float


@dataclass
class RayBundle:
    """Batched rays: ``origins`` and unit ``directions`` are ``(N, 3)`` tensors."""

    origins: torch.Tensor
    directions: torch.Tensor
    near: float
    far: float

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, i):
        return Ray(self.origins[i].numpy(), self.directions[i].numpy(), self.near, self.far)

    def select(self, index):
        return RayBundle(self.origins[index], self.directions[index], self.near, self.far)

    @staticmethod
    def cat(bundles):
        return RayBundle(
            torch.cat([b.origins for b in bundles]),
            torch.cat([b.directions for b in bundles]),
            bundles[0].near,
            bundles[0].far,
        )


@dataclass(frozen=True)
class SamplingConfig:
    samples_per_ray: int = 64
    stratified: bool = False
    background: tuple = (1.0, 1.0, 1.0)
    near: float = 2.0
    far: float = 6.0

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise DomainError(f"samples_per_ray must be at least 2, got {self.samples_per_ray}")
        if not 0 <= self.near < self.far:
            raise DomainError(f"need 0 <= near < far, got near={self.near} far={self.far}")


def pixel_grid(intr):
    """All ``(row, col)`` pairs of an image in row-major order."""
    rows, cols = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
    return np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1)


def generate_rays(pose, intr, pixels=None, near=2.0, far=6.0):
    """One ray through the center of each ``(row, col)`` pixel."""
    px = pixel_grid(intr) if pixels is None else np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    rows, cols = px[:, 0], px[:, 1]
    if np.any((rows < 0) | (rows >= intr.height) | (cols < 0) | (cols >= intr.width)):
        raise DomainError(f"pixel outside {intr.height}x{intr.width} image")
    cam = np.stack(
        [
            (cols + 0.5 - 0.5 * intr.width) / intr.focal,
            -(rows + 0.5 - 0.5 * intr.height) / intr.focal,
            -np.ones(len(px)),
        ],
        axis=1,
    )
    dirs = cam @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return RayBundle(torch.from_numpy(origins), torch.from_numpy(dirs), float(near), float(far))


def composite(densities, colors, deltas, background=(1.0, 1.0, 1.0)):
    """Alpha-composite samples front to back.

    ``densities`` is ``(..., N)``, ``colors`` ``(..., N, 3)``, ``deltas``
    broadcastable to ``densities``. Returns the pixel color ``(..., 3)`` and
    the transmittance left after the last sample ``(...)``.
    """
    densities = torch.as_tensor(densities, dtype=DTYPE)
    colors = torch.as_tensor(colors, dtype=DTYPE)
    deltas = torch.as_tensor(deltas, dtype=DTYPE)
    background = torch.as_tensor(background, dtype=DTYPE)
    if densities.shape[-1] < 1 or colors.shape[:-1] != densities.shape:
        raise DomainError(f"mismatched sample shapes {tuple(densities.shape)} and {tuple(colors.shape)}")
    if torch.any(densities.detach() < 0):
        raise DomainError("densities must be non-negative")
    if torch.any(deltas.detach() <= 0):
        raise DomainError("sample spacings must be positive")
    optical = densities * deltas
    alpha = 1.0 - torch.exp(-optical)
    # transmittance before sample i: exp(-sum_{j<i} sigma_j delta_j) == prod_{j<i}(1 - alpha_j)
    before = torch.cumsum(optical, dim=-1) - optical
    weights = torch.exp(-before) * alpha
    t_final = torch.exp(-optical.sum(dim=-1))
    rgb = (weights[..., None] * colors).sum(dim=-2) + t_final[..., None] * background
    return rgb, t_final


def sample_depths(n_rays, cfg, rng=None):
    """``(n_rays, N)`` depths at stratum midpoints, or jittered within strata."""
    n = cfg.samples_per_ray
    width = (cfg.far - cfg.near) / n
    if cfg.stratified:
        if rng is None:
            raise DomainError("stratified sampling needs the trainer's random generator")
        offsets = torch.from_numpy(rng.random((n_rays, n)))
    else:
        offsets = torch.full((n_rays, n), 0.5, dtype=DTYPE)
    t = cfg.near + (torch.arange(n, dtype=DTYPE) + offsets) * width
    return t, width


def render_rays(field_fn, rays, cfg, rng=None):
    """Render a ray bundle through ``field_fn(x, d) -> (color, density)``."""
    t, width = sample_depths(len(rays), cfg, rng)
    points = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    dirs = rays.directions[:, None, :].expand_as(points)
    color, density = field_fn(points.reshape(-1, 3), dirs.reshape(-1, 3))
    n = cfg.samples_per_ray
    rgb, _ = composite(density.reshape(-1, n), color.reshape(-1, n, 3), width, cfg.background)
    return rgb


def render_image(field_fn, pose, intr, cfg, record_gradients=False, rng=None, chunk=8192):
    """Render a full ``(H, W, 3)`` image.

    With ``record_gradients`` the whole image stays on the autograd graph;
    otherwise rendering runs in chunks without graph construction.
    """
    rays = generate_rays(pose, intr, near=cfg.near, far=cfg.far)
    ctx = contextlib.nullcontext() if record_gradients else torch.no_grad()
    with ctx:
        if record_gradients:
            rgb = render_rays(field_fn, rays, cfg, rng)
        else:
            rgb = torch.cat(
                [render_rays(field_fn, rays.select(slice(i, i + chunk)), cfg, rng) for i in range(0, len(rays), chunk)]
            )
    return rgb.reshape(intr.height, intr.width, 3)

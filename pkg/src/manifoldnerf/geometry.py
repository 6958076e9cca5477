"""Camera poses, spherical interpolation of viewpoints and pair selection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, DomainError, InsufficientViewsError

WORLD_UP = np.array([0.0, 0.0, 1.0])

# Below this angle two directions are treated as coincident.
_SMALL_ANGLE = 1e-6


def _vec3(v, name="vector"):
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != (3,):
        raise DomainError(f"{name} must have 3 components, got shape {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Camera-to-world pose.

    ``rotation`` columns are the camera's right, up and backward axes in world
    coordinates, so the camera looks down its local ``-z``.
    """

    position: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        position = _vec3(self.position, "position")
        rotation = np.asarray(self.rotation, dtype=np.float64)
        if rotation.shape != (3, 3):
            raise DomainError(f"rotation must be 3x3, got {rotation.shape}")
        if not np.all(np.isfinite(position)) or not np.all(np.isfinite(rotation)):
            raise DomainError("pose contains non-finite values")
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "rotation", rotation)

    @property
    def right(self):
        return self.rotation[:, 0]

    @property
    def up(self):
        return self.rotation[:, 1]

    @property
    def backward(self):
        return self.rotation[:, 2]

    def is_orthonormal(self, tol=1e-9):
        r = self.rotation
        return bool(
            np.allclose(r.T @ r, np.eye(3), rtol=0.0, atol=tol)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def matrix(self):
        """4x4 camera-to-world transform."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.position
        return m

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape not in ((4, 4), (3, 4)):
            raise DomainError(f"transform must be 4x4 or 3x4, got {m.shape}")
        return cls(position=m[:3, 3].copy(), rotation=m[:3, :3].copy())


@dataclass(frozen=True)
class ViewpointPair:
    index_a: int
    index_b: int
    distance: float


@dataclass(frozen=True)
class Intrinsics:
    width: int
    height: int
    focal: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DomainError(f"image size must be positive, got {self.width}x{self.height}")
        if not self.focal > 0:
            raise DomainError(f"focal must be positive, got {self.focal}")

    @classmethod
    def from_fov(cls, width, height, camera_angle_x):
        """Pinhole intrinsics from the horizontal field of view in radians."""
        if not 0 < camera_angle_x < math.pi:
            raise DomainError(f"camera_angle_x must lie in (0, pi), got {camera_angle_x}")
        return cls(int(width), int(height), 0.5 * width / math.tan(0.5 * camera_angle_x))

    @property
    def camera_angle_x(self):
        return 2.0 * math.atan(0.5 * self.width / self.focal)

    def scaled(self, factor):
        """Same field of view at ``factor`` times the resolution."""
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        return Intrinsics(w, h, self.focal * w / self.width)


def angle_between(p1, p2):
    """Angle in radians between two nonzero vectors, in [0, pi]."""
    a, b = _vec3(p1), _vec3(p2)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateGeometryError("angle_between needs nonzero vectors")
    a, b = a / na, b / nb
    # atan2 stays accurate near 0 and pi where acos of the dot product does not
    return math.atan2(float(np.linalg.norm(np.cross(a, b))), float(np.dot(a, b)))


def slerp_position(p1, p2, s):
    """Interpolate two camera positions along the arc between them.

    Direction moves at constant angular speed; the radius is interpolated
    linearly so non-unit positions stay on a sphere-like shell.
    """
    if not 0.0 <= s <= 1.0:
        raise DomainError(f"interpolation coefficient must lie in [0, 1], got {s}")
    a, b = _vec3(p1), _vec3(p2)
    if s == 0.0:
        return a.copy()
    if s == 1.0:
        return b.copy()
    ra, rb = np.linalg.norm(a), np.linalg.norm(b)
    theta = angle_between(a, b)
    if theta > math.pi - _SMALL_ANGLE:
        raise DegenerateGeometryError("cannot interpolate between antipodal positions")
    ua, ub = a / ra, b / rb
    if theta < _SMALL_ANGLE:
        direction = (1.0 - s) * ua + s * ub
        direction /= np.linalg.norm(direction)
    else:
        sin_t = math.sin(theta)
        direction = (math.sin((1.0 - s) * theta) / sin_t) * ua + (math.sin(s * theta) / sin_t) * ub
    return direction * ((1.0 - s) * ra + s * rb)


def look_at(position, target, up_hint=WORLD_UP):
    position, target, up_hint = _vec3(position), _vec3(target), _vec3(up_hint)
    backward = position - target
    n = np.linalg.norm(backward)
    if n == 0.0:
        raise DegenerateGeometryError("camera position coincides with its target")
    backward = backward / n
    right = np.cross(up_hint, backward)
    rn = np.linalg.norm(right)
    if rn < 1e-12 * max(1.0, np.linalg.norm(up_hint)):
        raise DegenerateGeometryError("up hint is parallel to the viewing direction")
    right = right / rn
    up = np.cross(backward, right)
    return CameraPose(position, np.stack([right, up, backward], axis=1))


def select_pairs(positions, epsilon):
    """All index pairs i < j whose positions are closer than ``epsilon``."""
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 2:
        raise InsufficientViewsError(f"pair selection needs at least 2 views, got {len(pts)}")
    if epsilon < 0:
        raise DomainError(f"pair threshold must be non-negative, got {epsilon}")
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    ia, ib = np.nonzero(np.triu(dist < epsilon, k=1))
    # np.nonzero walks row-major, which is already (index_a, index_b) order
    return [ViewpointPair(int(i), int(j), float(dist[i, j])) for i, j in zip(ia, ib)]


def neighbor_threshold(positions, slack=1.05):
    """Smallest-ish threshold that gives every view at least one partner.

    Returns ``slack`` times the largest nearest-neighbour distance.
    """
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 2:
        raise InsufficientViewsError(f"need at least 2 views, got {len(pts)}")
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    np.fill_diagonal(dist, np.inf)
    return float(slack * dist.min(axis=1).max())


def sample_unknown_viewpoint(pair, s, scene_center=(0.0, 0.0, 0.0), up_hint=WORLD_UP):
    """Pose at coefficient ``s`` on the arc between two known poses, aimed at the center."""
    first, second = pair
    position = slerp_position(first.position, second.position, s)
    return look_at(position, scene_center, up_hint)


def pose_from_spherical(azimuth_deg, elevation_deg, radius, target=(0.0, 0.0, 0.0)):
    """Pose on a sphere around ``target`` looking at it (z-up world)."""
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    offset = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    return look_at(_vec3(target) + offset, target, WORLD_UP)

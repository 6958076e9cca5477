"""Analytic blob scenes, their ground-truth renderer, view layouts and dataset I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DatasetParseError, DomainError, ManifoldNerfError
from .field import DTYPE
from .geometry import CameraPose, Intrinsics, pose_from_spherical
from .render import SamplingConfig, render_image

FALLOFFS = ("hard", "gaussian")
PATTERNS = ("uniform_hemisphere", "horizontal_ring", "diagonal_ring", "alternating")

DEFAULT_RADIUS = 4.0
DEFAULT_FOV = 0.6


class DatasetIOError(ManifoldNerfError, OSError):
    exit_code = 2


@dataclass(frozen=True)
class Primitive:
    center: tuple
    radius: float
    color: tuple
    density: float
    falloff: str = "gaussian"

    def __post_init__(self):
        if not self.radius > 0:
            raise DomainError(f"primitive radius must be positive, got {self.radius}")
        if self.density < 0:
            raise DomainError(f"primitive density must be non-negative, got {self.density}")
        if self.falloff not in FALLOFFS:
            raise DomainError(f"falloff must be one of {FALLOFFS}, got {self.falloff!r}")
        if any(not 0.0 <= c <= 1.0 for c in self.color):
            raise DomainError(f"primitive color must lie in [0, 1], got {self.color}")


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple = ()
    near: float = 2.0
    far: float = 6.0
    background: tuple = (1.0, 1.0, 1.0)

    def sampling(self, samples, stratified=False):
        return SamplingConfig(samples, stratified, tuple(self.background), self.near, self.far)

    # -- key = value text format ------------------------------------------------

    def dumps(self):
        def fmt(values):
            return " ".join(repr(float(v)) for v in values)

        lines = [
            "# manifoldnerf scene",
            f"near = {float(self.near)!r}",
            f"far = {float(self.far)!r}",
            f"background = {fmt(self.background)}",
        ]
        for p in self.primitives:
            lines += [
                "",
                "[primitive]",
                f"center = {fmt(p.center)}",
                f"radius = {float(p.radius)!r}",
                f"color = {fmt(p.color)}",
                f"density = {float(p.density)!r}",
                f"falloff = {p.falloff}",
            ]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text, source="<scene>"):
        header, prims, current = {}, [], None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line == "[primitive]":
                current = {}
                prims.append(current)
                continue
            if "=" not in line:
                raise DatasetParseError(source, f"line {lineno}", "expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            (header if current is None else current)[key] = value

        def floats(d, key, n=None):
            try:
                vals = tuple(float(v) for v in d[key].split())
            except KeyError:
                raise DatasetParseError(source, key, "missing") from None
            except ValueError:
                raise DatasetParseError(source, key, f"not numeric: {d[key]!r}") from None
            if n is not None and len(vals) != n:
                raise DatasetParseError(source, key, f"expected {n} numbers, got {len(vals)}")
            return vals

        try:
            primitives = tuple(
                Primitive(
                    center=floats(p, "center", 3),
                    radius=floats(p, "radius", 1)[0],
                    color=floats(p, "color", 3),
                    density=floats(p, "density", 1)[0],
                    falloff=p.get("falloff", "gaussian"),
                )
                for p in prims
            )
            return cls(
                primitives,
                near=floats(header, "near", 1)[0] if "near" in header else 2.0,
                far=floats(header, "far", 1)[0] if "far" in header else 6.0,
                background=floats(header, "background", 3) if "background" in header else (1.0, 1.0, 1.0),
            )
        except DomainError as exc:
            raise DatasetParseError(source, "primitive", str(exc)) from None

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise DatasetIOError(f"cannot read scene file {path}: {exc}") from exc
        return cls.loads(text, source=path)


def make_preset(name, seed=None):
    """Built-in scenes. A seed jitters blob centers by up to 0.1 deterministically."""
    if name == "blobs3":
        prims = [
            Primitive((0.35, 0.0, 0.0), 0.45, (0.9, 0.15, 0.1), 20.0),
            Primitive((-0.25, 0.35, 0.1), 0.4, (0.1, 0.75, 0.2), 20.0),
            Primitive((-0.15, -0.35, -0.1), 0.4, (0.15, 0.25, 0.9), 20.0),
        ]
    elif name == "blobs5":
        prims = [
            Primitive((0.4, 0.0, 0.0), 0.35, (0.9, 0.15, 0.1), 20.0),
            Primitive((0.0, 0.45, 0.15), 0.35, (0.1, 0.75, 0.2), 20.0),
            Primitive((-0.4, 0.0, -0.1), 0.35, (0.15, 0.25, 0.9), 20.0),
            Primitive((0.0, -0.45, 0.0), 0.35, (0.95, 0.8, 0.1), 20.0),
            Primitive((0.0, 0.0, 0.45), 0.3, (0.7, 0.2, 0.8), 20.0),
        ]
    elif name == "asym":
        prims = [
            Primitive((0.45, 0.2, -0.15), 0.5, (0.9, 0.2, 0.1), 18.0),
            Primitive((-0.3, 0.45, 0.3), 0.3, (0.1, 0.7, 0.25), 25.0),
            Primitive((-0.2, -0.4, -0.2), 0.38, (0.2, 0.3, 0.9), 20.0),
            Primitive((0.1, -0.1, 0.55), 0.22, (0.95, 0.85, 0.1), 30.0),
        ]
    else:
        raise DomainError(f"unknown scene preset {name!r}; choose blobs3, blobs5 or asym")
    if seed is not None:
        rng = np.random.default_rng(seed)
        prims = [
            replace(p, center=tuple(float(c) for c in np.asarray(p.center) + rng.uniform(-0.1, 0.1, 3)))
            for p in prims
        ]
    return SceneSpec(tuple(prims))


class OracleField:
    """Closed-form color/density of a scene, usable wherever a learned field is."""

    def __init__(self, scene):
        self.scene = scene
        prims = scene.primitives
        self.centers = torch.tensor([p.center for p in prims], dtype=DTYPE).reshape(-1, 3)
        self.radii = torch.tensor([p.radius for p in prims], dtype=DTYPE)
        self.colors = torch.tensor([p.color for p in prims], dtype=DTYPE).reshape(-1, 3)
        self.densities = torch.tensor([p.density for p in prims], dtype=DTYPE)
        self.hard = torch.tensor([p.falloff == "hard" for p in prims], dtype=torch.bool)
        self.background = torch.tensor(scene.background, dtype=DTYPE)

    def __call__(self, x, d=None):
        x = torch.as_tensor(x, dtype=DTYPE)
        single = x.ndim == 1
        x = x.reshape(-1, 3)
        r = torch.linalg.norm(x[:, None, :] - self.centers[None], dim=-1) / self.radii
        falloff = torch.where(self.hard, (r < 1.0).to(DTYPE), torch.exp(-4.0 * r * r))
        contrib = falloff * self.densities
        density = contrib.sum(dim=-1)
        weighted = contrib @ self.colors
        safe = torch.where(density > 0, density, torch.ones_like(density))
        color = torch.where((density > 0)[:, None], weighted / safe[:, None], self.background)
        if single:
            return color[0], density[0]
        return color, density


def oracle_field(scene, x):
    return OracleField(scene)(x)


def oracle_render(scene, pose, intr, samples=256):
    """Ground-truth image by midpoint quadrature of the analytic scene."""
    if samples < 64:
        raise DomainError(f"oracle renders need at least 64 samples per ray, got {samples}")
    img = render_image(OracleField(scene), pose, intr, scene.sampling(samples))
    return img.numpy()


def default_elevations(pattern):
    return {
        "uniform_hemisphere": (20.0, 55.0),
        "horizontal_ring": (0.0,),
        "diagonal_ring": (45.0,),
        "alternating": (0.0, 45.0),
    }[pattern]


def view_angles(pattern, n, elevations=None, azimuth_offset=0.0):
    """(azimuth, elevation) in degrees for each view of a layout."""
    if n < 1:
        raise DomainError(f"need at least one view, got {n}")
    if pattern not in PATTERNS:
        raise DomainError(f"unknown view pattern {pattern!r}; choose from {PATTERNS}")
    elev = tuple(elevations) if elevations else default_elevations(pattern)
    if pattern == "horizontal_ring":
        return [(azimuth_offset + 360.0 * k / n, 0.0) for k in range(n)]
    if pattern == "diagonal_ring":
        return [(azimuth_offset + 360.0 * k / n, elev[0]) for k in range(n)]
    if pattern == "alternating":
        lo, hi = (elev + elev)[:2] if len(elev) == 1 else elev[:2]
        return [(azimuth_offset + 360.0 * k / n, lo if k % 2 == 0 else hi) for k in range(n)]
    lo, hi = (elev[0], elev[0]) if len(elev) == 1 else elev[:2]
    n_low = (n + 1) // 2
    n_high = n - n_low
    angles = [(azimuth_offset + 360.0 * k / n_low, lo) for k in range(n_low)]
    angles += [(azimuth_offset + 360.0 * (k + 0.5) / n_high, hi) for k in range(n_high)]
    return angles


def make_views(pattern, n, radius=DEFAULT_RADIUS, elevations=None, azimuth_offset=0.0):
    """Camera poses on a sphere of ``radius`` around the origin, all aimed at it."""
    return [pose_from_spherical(az, el, radius) for az, el in view_angles(pattern, n, elevations, azimuth_offset)]


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) in [0, 1]
    poses: list
    intrinsics: Intrinsics
    file_paths: list = field(default_factory=list)
    root: Path | None = None

    def __len__(self):
        return len(self.poses)

    def subset(self, indices):
        indices = list(indices)
        return Dataset(
            self.images[indices],
            [self.poses[i] for i in indices],
            self.intrinsics,
            [self.file_paths[i] for i in indices] if self.file_paths else [],
            self.root,
        )

    @property
    def positions(self):
        return np.stack([p.position for p in self.poses]) if self.poses else np.zeros((0, 3))

    @property
    def manifest(self):
        return {
            "camera_angle_x": self.intrinsics.camera_angle_x,
            "frames": [
                {"file_path": fp, "transform_matrix": pose.matrix().tolist()}
                for fp, pose in zip(self.file_paths, self.poses)
            ],
        }


def render_dataset(scene, poses, intr, samples=256):
    images = np.stack([oracle_render(scene, pose, intr, samples) for pose in poses]) if poses else np.zeros(
        (0, intr.height, intr.width, 3)
    )
    return Dataset(images, list(poses), intr)


def write_dataset(scene, poses, intr, out_dir, samples=256, split="train", images=None):
    """Render (unless ``images`` are given) and write PNGs plus ``transforms.json``."""
    out_dir = Path(out_dir)
    if images is None:
        images = render_dataset(scene, poses, intr, samples).images
    try:
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        file_paths = []
        for i, img in enumerate(images):
            rel = f"./{split}/r_{i}"
            pixels = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(pixels, mode="RGB").save(out_dir / f"{rel}.png")
            file_paths.append(rel)
        ds = Dataset(np.asarray(images), list(poses), intr, file_paths, out_dir)
        (out_dir / "transforms.json").write_text(json.dumps(ds.manifest, indent=2) + "\n")
    except OSError as exc:
        raise DatasetIOError(f"cannot write dataset to {out_dir}: {exc}") from exc
    return ds.manifest


def _read_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA") if im.mode in ("RGBA", "LA", "P") else im.convert("RGB"))
    arr = arr.astype(np.float64) / 255.0
    if arr.shape[-1] == 4:
        # NeRF-synthetic PNGs are premultiplied onto white by convention
        arr = arr[..., :3] * arr[..., 3:] + (1.0 - arr[..., 3:])
    return arr


def _manifest_path(root, split):
    root = Path(root)
    if root.is_file():
        return root
    for name in ("transforms.json", f"transforms_{split}.json"):
        if (root / name).exists():
            return root / name
    raise DatasetIOError(f"no transforms.json or transforms_{split}.json in {root}")


def load_dataset(path, split="train"):
    """Parse a NeRF-synthetic style manifest and its images."""
    manifest_path = _manifest_path(path, split)
    root = manifest_path.parent
    try:
        meta = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise DatasetIOError(f"cannot read {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetParseError(manifest_path, "<document>", f"invalid JSON: {exc}") from None
    if not isinstance(meta, dict):
        raise DatasetParseError(manifest_path, "<document>", "top level must be an object")
    try:
        angle = float(meta["camera_angle_x"])
    except KeyError:
        raise DatasetParseError(manifest_path, "camera_angle_x", "missing") from None
    except (TypeError, ValueError):
        raise DatasetParseError(manifest_path, "camera_angle_x", "not a number") from None
    frames = meta.get("frames")
    if not isinstance(frames, list):
        raise DatasetParseError(manifest_path, "frames", "missing or not a list")

    poses, images, file_paths = [], [], []
    for i, frame in enumerate(frames):
        where = f"frames[{i}]"
        if not isinstance(frame, dict) or "file_path" not in frame:
            raise DatasetParseError(manifest_path, f"{where}.file_path", "missing")
        if "transform_matrix" not in frame:
            raise DatasetParseError(manifest_path, f"{where}.transform_matrix", "missing")
        try:
            m = np.asarray(frame["transform_matrix"], dtype=np.float64)
        except (TypeError, ValueError):
            raise DatasetParseError(manifest_path, f"{where}.transform_matrix", "not numeric") from None
        if m.shape != (4, 4) or not np.all(np.isfinite(m)):
            raise DatasetParseError(manifest_path, f"{where}.transform_matrix", f"expected finite 4x4, got {m.shape}")
        pose = CameraPose.from_matrix(m)
        if not pose.is_orthonormal(1e-6):
            raise DatasetParseError(manifest_path, f"{where}.transform_matrix", "rotation block is not orthonormal")
        rel = frame["file_path"]
        img_path = root / rel
        if img_path.suffix.lower() not in (".png", ".jpg", ".jpeg"):
            img_path = img_path.with_name(img_path.name + ".png")
        if not img_path.exists():
            raise DatasetIOError(f"{manifest_path}: {where} image {img_path} does not exist")
        poses.append(pose)
        images.append(_read_image(img_path))
        file_paths.append(rel)

    if images:
        shapes = {im.shape for im in images}
        if len(shapes) != 1:
            raise DatasetParseError(manifest_path, "frames", f"images differ in size: {sorted(shapes)}")
        h, w = images[0].shape[:2]
        stack = np.stack(images)
    else:
        h = w = int(meta.get("w", 1)) or 1
        stack = np.zeros((0, h, w, 3))
    intr = Intrinsics.from_fov(w, h, angle)
    return Dataset(stack, poses, intr, file_paths, root)


def default_intrinsics(size=64, camera_angle_x=DEFAULT_FOV):
    return Intrinsics.from_fov(size, size, camera_angle_x)


def elevation_range(poses):
    """Min and max camera elevation in degrees."""
    elevs = [math.degrees(math.asin(np.clip(p.position[2] / np.linalg.norm(p.position), -1, 1))) for p in poses]
    return min(elevs), max(elevs)

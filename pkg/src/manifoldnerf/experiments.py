"""Desk-scale experiment recipes: controlled train + held-out evaluation grids.

Each recipe expands into jobs ``(method, condition, seed)``. All jobs of a
recipe share the same scene, held-out views and seeds, so rows differ only
in the factor under study.
"""

from __future__ import annotations

import csv
import logging
import statistics
from dataclasses import dataclass, field

import numpy as np

from .data import DEFAULT_RADIUS, default_intrinsics, make_preset, make_views, render_dataset
from .errors import ManifoldNerfError
from .geometry import pose_from_spherical
from .metrics import evaluate
from .training import TrainConfig, train

log = logging.getLogger(__name__)

METHODS = {"nerf": "vanilla", "dietnerf": "dietnerf", "manifoldnerf": "manifoldnerf"}
RECIPES = ("uniform8", "patterns", "viewcount")

HELD_OUT_SEED = 99
HELD_OUT_VIEWS = 12
HELD_OUT_ELEVATIONS = (5.0, 70.0)

PATTERN_LAYOUTS = {
    "Pattern1": "horizontal_ring",
    "Pattern2": "diagonal_ring",
    "Pattern3": "alternating",
}

# desk-scale training settings shared by every recipe
RECIPE_CONFIG = dict(iterations=3000, batch_rays=256, pair_threshold="auto")


def method_mode(method):
    try:
        return METHODS[method]
    except KeyError:
        raise ManifoldNerfError(f"unknown method {method!r}; choose from {sorted(METHODS)}") from None


def held_out_poses(n=HELD_OUT_VIEWS, radius=DEFAULT_RADIUS, elevations=HELD_OUT_ELEVATIONS, seed=HELD_OUT_SEED):
    """Fixed random hemisphere poses; none coincides with a layout view."""
    rng = np.random.default_rng(seed)
    return [pose_from_spherical(rng.uniform(0.0, 360.0), rng.uniform(*elevations), radius) for _ in range(n)]


@dataclass(frozen=True)
class Condition:
    label: str
    scene: str
    pattern: str
    n_views: int


@dataclass
class JobResult:
    method: str
    condition: Condition
    seed: int
    psnr: float = float("nan")
    ssim: float = float("nan")
    train_psnr: float = float("nan")
    error: str | None = None


@dataclass
class SummaryRow:
    recipe: str
    method: str
    condition: Condition
    results: list = field(default_factory=list)

    def _ok(self):
        return [r for r in self.results if r.error is None]

    @property
    def failures(self):
        return sum(r.error is not None for r in self.results)

    def _stat(self, fn, key):
        vals = [getattr(r, key) for r in self._ok()]
        return fn(vals) if vals else float("nan")

    @property
    def mean_psnr(self):
        return self._stat(statistics.fmean, "psnr")

    @property
    def mean_ssim(self):
        return self._stat(statistics.fmean, "ssim")

    @property
    def median_psnr(self):
        return self._stat(statistics.median, "psnr")

    @property
    def median_ssim(self):
        return self._stat(statistics.median, "ssim")


def recipe_grid(recipe, methods=None):
    """``[(method, Condition)]`` making up a recipe."""
    if recipe == "uniform8":
        cond = Condition("uniform8", "blobs3", "uniform_hemisphere", 8)
        return [(m, cond) for m in (methods or ("nerf", "dietnerf", "manifoldnerf"))]
    if recipe == "patterns":
        return [
            (m, Condition(label, "asym", layout, 8))
            for m in (methods or ("manifoldnerf",))
            for label, layout in PATTERN_LAYOUTS.items()
        ]
    if recipe == "viewcount":
        return [
            (m, Condition(f"views{n}", "blobs3", "uniform_hemisphere", n))
            for m in (methods or ("nerf", "dietnerf", "manifoldnerf"))
            for n in (4, 8, 12, 16)
        ]
    raise ManifoldNerfError(f"unknown recipe {recipe!r}; choose from {RECIPES}")


class DatasetCache:
    """Oracle renders shared between jobs with the same scene and layout."""

    def __init__(self, size=64, samples=256):
        self.intr = default_intrinsics(size)
        self.samples = samples
        self._train = {}
        self._held = {}

    def train_set(self, cond):
        key = (cond.scene, cond.pattern, cond.n_views)
        if key not in self._train:
            poses = make_views(cond.pattern, cond.n_views)
            self._train[key] = render_dataset(make_preset(cond.scene), poses, self.intr, self.samples)
        return self._train[key]

    def held_out(self, scene):
        if scene not in self._held:
            self._held[scene] = render_dataset(make_preset(scene), held_out_poses(), self.intr, self.samples)
        return self._held[scene]


def run_job(method, cond, seed, cache, base_config=None, progress=None):
    cfg = (base_config or TrainConfig(**RECIPE_CONFIG)).replace(loss_mode=method_mode(method), seed=seed)
    result = JobResult(method, cond, seed)
    try:
        trained = train(cache.train_set(cond), cfg, progress=progress)
        report = evaluate(trained.checkpoint, cache.held_out(cond.scene))
        result.psnr, result.ssim = report.mean_psnr, report.mean_ssim
        result.train_psnr = evaluate(trained.checkpoint, cache.train_set(cond)).mean_psnr
    except ManifoldNerfError as exc:
        log.error("%s %s seed %d failed: %s", method, cond.label, seed, exc)
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def run_recipe(recipe, seeds=(0, 1, 2), base_config=None, methods=None, cache=None, on_result=None):
    cache = cache or DatasetCache()
    rows = []
    for method, cond in recipe_grid(recipe, methods):
        row = SummaryRow(recipe, method, cond)
        for seed in seeds:
            res = run_job(method, cond, seed, cache, base_config)
            row.results.append(res)
            if on_result is not None:
                on_result(res)
        rows.append(row)
    return rows


def write_summary(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["recipe", "method", "condition", "scene", "pattern", "n_views", "seeds",
             "mean_psnr_db", "mean_ssim", "median_psnr_db", "median_ssim", "failures"]
        )
        for r in rows:
            c = r.condition
            w.writerow(
                [r.recipe, r.method, c.label, c.scene, c.pattern, c.n_views, len(r.results) - r.failures,
                 f"{r.mean_psnr:.4f}", f"{r.mean_ssim:.4f}", f"{r.median_psnr:.4f}", f"{r.median_ssim:.4f}",
                 r.failures]
            )


def write_job_results(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "condition", "seed", "psnr_db", "ssim", "train_psnr_db", "error"])
        for r in rows:
            for j in r.results:
                w.writerow(
                    [j.method, j.condition.label, j.seed, f"{j.psnr:.4f}", f"{j.ssim:.4f}",
                     f"{j.train_psnr:.4f}", j.error or ""]
                )

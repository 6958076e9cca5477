"""Losses, Adam, checkpoints and the few-shot training loop.

Three modes share one loop:

* ``vanilla``: pixel MSE only.
* ``dietnerf``: every K-th step, render a random hemisphere pose and pull
  its feature toward a random known view's feature.
* ``manifoldnerf``: every K-th step, render a pose on the arc between two
  nearby known views and pull its feature toward the interpolation of their
  features.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CheckpointError, ConfigurationError, DomainError, NumericError
from .features import ExtractorConfig, FeatureExtractor, lerp_features
from .field import DTYPE, EncodingConfig, MlpParams, RadianceField, backprop, init_params
from .geometry import (
    neighbor_threshold,
    pose_from_spherical,
    sample_unknown_viewpoint,
    select_pairs,
)
from .render import RayBundle, SamplingConfig, generate_rays, render_image, render_rays

log = logging.getLogger(__name__)

LOSS_MODES = ("vanilla", "dietnerf", "manifoldnerf")
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    batch_rays: int = 1024
    learning_rate: float = 5e-4
    learning_rate_final: float = 5e-5
    manifold_interval: int = 10
    scale_lambda: float = 0.1
    # a number in scene units, or "auto" for neighbour_threshold of the training views
    pair_threshold: float | str = 2.5
    loss_mode: str = "manifoldnerf"
    seed: int = 0
    feature_render_scale: float = 0.5
    samples_per_ray: int = 32
    near: float = 2.0
    far: float = 6.0
    background: tuple = (1.0, 1.0, 1.0)
    hidden: tuple = (64, 64, 64, 64)
    levels_position: int = 6
    levels_direction: int = 2
    feature_dim: int = 64
    grid_levels: tuple = (1, 2, 4)
    projection_seed: int = 0
    center_layout: bool = True
    mse_weight: float = 1.0
    renormalize_target: bool = False

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigurationError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.manifold_interval < 1:
            raise ConfigurationError(f"manifold_interval K must be >= 1, got {self.manifold_interval}")
        if self.scale_lambda < 0:
            raise ConfigurationError(f"scale_lambda must be >= 0, got {self.scale_lambda}")
        if self.batch_rays < 1:
            raise ConfigurationError(f"batch_rays must be >= 1, got {self.batch_rays}")
        if self.iterations < 0:
            raise ConfigurationError(f"iterations must be >= 0, got {self.iterations}")
        if self.pair_threshold != "auto" and not float(self.pair_threshold) >= 0:
            raise ConfigurationError(f"pair_threshold must be >= 0 or 'auto', got {self.pair_threshold!r}")
        if not 0 < self.feature_render_scale <= 1:
            raise ConfigurationError(f"feature_render_scale must lie in (0, 1], got {self.feature_render_scale}")

    @property
    def encoding(self):
        return EncodingConfig(self.levels_position, self.levels_direction, True)

    @property
    def extractor(self):
        return ExtractorConfig(tuple(self.grid_levels), self.projection_seed, self.feature_dim, self.center_layout)

    def sampling(self, stratified=False):
        return SamplingConfig(self.samples_per_ray, stratified, tuple(self.background), self.near, self.far)

    def replace(self, **overrides):
        names = {f.name for f in dataclasses.fields(self)}
        unknown = set(overrides) - names
        if unknown:
            raise ConfigurationError(f"unknown training options: {sorted(unknown)}")
        return dataclasses.replace(self, **overrides)

    def to_dict(self):
        return {f.name: _jsonable(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d):
        kwargs = dict(d)
        for key in ("background", "hidden", "grid_levels"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


@dataclass(frozen=True)
class LossBreakdown:
    iteration: int
    mse: float
    auxiliary: float
    total: float
    learning_rate: float


# -- losses --------------------------------------------------------------------


def mse_loss(rendered, truth):
    rendered = torch.as_tensor(rendered, dtype=DTYPE)
    truth = torch.as_tensor(truth, dtype=DTYPE)
    if rendered.shape != truth.shape:
        raise DomainError(f"rendered {tuple(rendered.shape)} and truth {tuple(truth.shape)} differ in shape")
    if rendered.numel() == 0:
        raise DomainError("MSE of an empty batch")
    return torch.mean((rendered - truth) ** 2)


def _feature_dot(a, b):
    a = torch.as_tensor(a, dtype=DTYPE)
    b = torch.as_tensor(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise DomainError(f"feature dimensions differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.dot(a, b)


def semantic_consistency_loss(v_known, v_rendered, scale_lambda):
    """``lambda * (1 - v_known . v_rendered)`` for a known-view feature and a render's feature."""
    return scale_lambda * (1.0 - _feature_dot(v_known, v_rendered))


def manifold_loss(v_rendered, v_interpolated, scale_lambda):
    """``lambda * (1 - v_rendered . v_interpolated)``; the target is not renormalized."""
    return scale_lambda * (1.0 - _feature_dot(v_rendered, v_interpolated))


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    first: list
    second: list
    step: int = 0

    @classmethod
    def zeros_like(cls, tensors):
        return cls([torch.zeros_like(t) for t in tensors], [torch.zeros_like(t) for t in tensors], 0)


def adam_step(params, grads, moments, lr, step=None):
    """One in-place Adam update.

    ``step`` is the 1-based count used for bias correction; defaults to
    ``moments.step + 1``. Returns the updated moments.
    """
    if len(params) != len(grads) or len(params) != len(moments.first):
        raise DomainError("parameter, gradient and moment lists differ in length")
    step = moments.step + 1 if step is None else step
    for g in grads:
        if not torch.isfinite(g).all():
            raise NumericError("non-finite gradient")
    bc1 = 1.0 - ADAM_BETA1**step
    bc2 = 1.0 - ADAM_BETA2**step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, moments.first, moments.second):
            if p.shape != g.shape:
                raise DomainError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
            m.mul_(ADAM_BETA1).add_(g, alpha=1.0 - ADAM_BETA1)
            v.mul_(ADAM_BETA2).addcmul_(g, g, value=1.0 - ADAM_BETA2)
            p.sub_(lr * (m / bc1) / (torch.sqrt(v / bc2) + ADAM_EPS))
    moments.step = step
    return moments


def learning_rate_at(config, iteration):
    """Exponential decay from ``learning_rate`` at 0 to ``learning_rate_final`` at ``iterations``."""
    if config.iterations == 0:
        return config.learning_rate
    frac = min(1.0, max(0.0, iteration / config.iterations))
    return config.learning_rate * (config.learning_rate_final / config.learning_rate) ** frac


# -- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    params: MlpParams
    config: TrainConfig
    iteration: int = 0
    moments: AdamState | None = None
    rng_state: dict | None = None
    pair_threshold: float | None = None

    @property
    def encoding(self):
        return self.config.encoding

    def field(self):
        return RadianceField(self.params, self.config.encoding)

    def save(self, path):
        path = Path(path)
        meta = {
            "format": "manifoldnerf-checkpoint",
            "version": CHECKPOINT_VERSION,
            "iteration": self.iteration,
            "config": self.config.to_dict(),
            "encoding": dataclasses.asdict(self.config.encoding),
            "layers": [list(w.shape) for w in self.params.weights],
            "activations": self.params.activations,
            "adam_step": None if self.moments is None else self.moments.step,
            "rng_state": self.rng_state,
            "pair_threshold": self.pair_threshold,
        }
        arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
        for i, (w, b) in enumerate(zip(self.params.weights, self.params.biases)):
            arrays[f"w{i}"] = w.detach().numpy()
            arrays[f"b{i}"] = b.detach().numpy()
        if self.moments is not None:
            for i, (m, v) in enumerate(zip(self.moments.first, self.moments.second)):
                arrays[f"m{i}"] = m.numpy()
                arrays[f"v{i}"] = v.numpy()
        path.parent.mkdir(parents=True, exist_ok=True)
        # an npz archive written with fixed member timestamps so identical runs give identical bytes
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            for key, arr in arrays.items():
                info = zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0))
                with zf.open(info, "w", force_zip64=True) as fh:
                    np.lib.format.write_array(fh, np.asanyarray(arr), allow_pickle=False)

    @classmethod
    def load(cls, path):
        try:
            with np.load(path) as z:
                arrays = {k: z[k] for k in z.files}
        except FileNotFoundError:
            raise
        except (OSError, ValueError, zipfile.BadZipFile) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if "meta" not in arrays:
            raise CheckpointError(f"{path} is not a manifoldnerf checkpoint")
        meta = json.loads(arrays["meta"].tobytes().decode())
        if meta.get("format") != "manifoldnerf-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")
        n = len(meta["layers"])
        weights = [torch.from_numpy(arrays[f"w{i}"].copy()) for i in range(n)]
        biases = [torch.from_numpy(arrays[f"b{i}"].copy()) for i in range(n)]
        for w, shape in zip(weights, meta["layers"]):
            if list(w.shape) != shape:
                raise CheckpointError(f"{path}: layer shape {list(w.shape)} does not match header {shape}")
        moments = None
        if meta["adam_step"] is not None:
            n_t = 2 * n
            moments = AdamState(
                [torch.from_numpy(arrays[f"m{i}"].copy()) for i in range(n_t)],
                [torch.from_numpy(arrays[f"v{i}"].copy()) for i in range(n_t)],
                meta["adam_step"],
            )
        return cls(
            MlpParams(weights, biases, meta["activations"]),
            TrainConfig.from_dict(meta["config"]),
            meta["iteration"],
            moments,
            meta["rng_state"],
            meta["pair_threshold"],
        )


def initial_checkpoint(config):
    params = init_params(config.encoding, tuple(config.hidden), seed=config.seed)
    return Checkpoint(params, config, 0, AdamState.zeros_like(params.tensors), None)


def render_view(checkpoint, pose, intr):
    """Evaluation render (midpoint samples, no gradients) as a numpy image."""
    img = render_image(checkpoint.field(), pose, intr, checkpoint.config.sampling(False))
    return img.numpy()


# -- training loop -------------------------------------------------------------


def downsample(image, intr_small):
    """Area-average an ``(H, W, 3)`` image to the size of ``intr_small``."""
    t = torch.as_tensor(image, dtype=DTYPE).permute(2, 0, 1)[None]
    out = F.adaptive_avg_pool2d(t, (intr_small.height, intr_small.width))
    return out[0].permute(1, 2, 0)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list = field(default_factory=list)
    # (iteration, index_a, index_b, s) for manifold steps, (iteration, known_index, -1, nan) for dietnerf
    auxiliary_events: list = field(default_factory=list)


def write_loss_log(losses, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "mse", "auxiliary", "total", "learning_rate"])
        for r in losses:
            w.writerow([r.iteration, repr(r.mse), repr(r.auxiliary), repr(r.total), repr(r.learning_rate)])


class Trainer:
    """Owns parameters, optimizer moments and the random streams of one run."""

    def __init__(self, dataset, checkpoint, crash_path=None):
        cfg = checkpoint.config
        if len(dataset) < 1:
            raise ConfigurationError("training needs at least one view")
        self.dataset = dataset
        self.ckpt = checkpoint
        self.cfg = cfg
        self.crash_path = crash_path
        self.field = checkpoint.field()
        checkpoint.params.requires_grad_(True)
        self.tensors = checkpoint.params.tensors
        if checkpoint.moments is None:
            checkpoint.moments = AdamState.zeros_like(self.tensors)

        if checkpoint.rng_state is None:
            # a resumed run without saved streams gets ones keyed on where it starts
            entropy = cfg.seed if checkpoint.iteration == 0 else [cfg.seed, checkpoint.iteration]
            ray_seq, aux_seq = np.random.SeedSequence(entropy).spawn(2)
            self.ray_rng = np.random.Generator(np.random.PCG64(ray_seq))
            self.aux_rng = np.random.Generator(np.random.PCG64(aux_seq))
        else:
            self.ray_rng = np.random.Generator(np.random.PCG64())
            self.aux_rng = np.random.Generator(np.random.PCG64())
            self.ray_rng.bit_generator.state = checkpoint.rng_state["rays"]
            self.aux_rng.bit_generator.state = checkpoint.rng_state["aux"]

        intr = dataset.intrinsics
        self.rays = RayBundle.cat(
            [generate_rays(p, intr, near=cfg.near, far=cfg.far) for p in dataset.poses]
        )
        self.targets = torch.as_tensor(dataset.images, dtype=DTYPE).reshape(-1, 3)
        self.feature_intr = intr.scaled(cfg.feature_render_scale)
        self.train_sampling = cfg.sampling(stratified=True)

        self.pairs = []
        self.known_features = None
        self.epsilon = None
        if cfg.loss_mode != "vanilla":
            self.extractor = FeatureExtractor(cfg.extractor)
            self.known_features = [
                self.extractor(downsample(img, self.feature_intr)).detach() for img in dataset.images
            ]
        if cfg.loss_mode == "manifoldnerf":
            self._prepare_pairs()
        elif cfg.loss_mode == "dietnerf":
            radii = np.linalg.norm(dataset.positions, axis=1)
            self.pose_radius = float(radii.mean())
            elev = np.degrees(np.arcsin(np.clip(dataset.positions[:, 2] / radii, -1.0, 1.0)))
            self.elevation_range = (float(elev.min()), float(elev.max()))

    def _prepare_pairs(self):
        positions = self.dataset.positions
        if len(positions) < 2:
            raise ConfigurationError(
                f"manifoldnerf needs at least 2 training views to form pairs (pair_threshold={self.cfg.pair_threshold})"
            )
        if self.cfg.pair_threshold == "auto":
            self.epsilon = neighbor_threshold(positions)
        else:
            self.epsilon = float(self.cfg.pair_threshold)
        self.pairs = select_pairs(positions, self.epsilon)
        if not self.pairs:
            raise ConfigurationError(
                f"no pair of training views is closer than pair_threshold epsilon={self.epsilon:g}; "
                "raise the threshold or use pair_threshold=auto"
            )
        self.ckpt.pair_threshold = self.epsilon
        log.info("manifold pairs: %d under epsilon=%.4g", len(self.pairs), self.epsilon)

    def _auxiliary(self, iteration, events):
        cfg = self.cfg
        if cfg.loss_mode == "manifoldnerf":
            pair = self.pairs[self.aux_rng.integers(len(self.pairs))]
            s = float(self.aux_rng.random())
            a, b = self.dataset.poses[pair.index_a], self.dataset.poses[pair.index_b]
            pose = sample_unknown_viewpoint((a, b), s)
            target = lerp_features(self.known_features[pair.index_a], self.known_features[pair.index_b], s)
            if cfg.renormalize_target:
                target = target / torch.linalg.norm(target)
            image = render_image(self.field, pose, self.feature_intr, self.train_sampling, True, self.aux_rng)
            events.append((iteration, pair.index_a, pair.index_b, s))
            return manifold_loss(self.extractor(image), target, cfg.scale_lambda)
        k = int(self.aux_rng.integers(len(self.dataset)))
        azimuth = float(self.aux_rng.uniform(0.0, 360.0))
        elevation = float(self.aux_rng.uniform(*self.elevation_range))
        pose = pose_from_spherical(azimuth, elevation, self.pose_radius)
        image = render_image(self.field, pose, self.feature_intr, self.train_sampling, True, self.aux_rng)
        events.append((iteration, k, -1, math.nan))
        return semantic_consistency_loss(self.known_features[k], self.extractor(image), cfg.scale_lambda)

    def step(self, iteration, events):
        """One optimisation step at 1-based global ``iteration``."""
        cfg = self.cfg
        idx = torch.from_numpy(self.ray_rng.integers(0, len(self.rays), size=cfg.batch_rays))
        rgb = render_rays(self.field, self.rays.select(idx), self.train_sampling, self.ray_rng)
        mse = mse_loss(rgb, self.targets[idx])
        aux = None
        if cfg.loss_mode != "vanilla" and iteration % cfg.manifold_interval == 0 and cfg.scale_lambda > 0:
            aux = self._auxiliary(iteration, events)
        total = cfg.mse_weight * mse + aux if aux is not None else cfg.mse_weight * mse
        grads = backprop(total, self.tensors)
        lr = learning_rate_at(cfg, iteration - 1)
        try:
            adam_step(self.tensors, grads, self.ckpt.moments, lr)
        except NumericError:
            self._crash(iteration)
            raise
        aux_val = 0.0 if aux is None else float(aux.detach())
        return LossBreakdown(iteration, float(mse.detach()), aux_val, float(total.detach()), lr)

    def _crash(self, iteration):
        if self.crash_path is not None:
            self.ckpt.iteration = iteration - 1
            self.ckpt.rng_state = self._rng_state()
            self.ckpt.save(self.crash_path)
            log.error("non-finite gradient at iteration %d; crash checkpoint written to %s", iteration, self.crash_path)

    def _rng_state(self):
        return {"rays": self.ray_rng.bit_generator.state, "aux": self.aux_rng.bit_generator.state}

    def run(self, steps, progress=None):
        losses, events = [], []
        start = self.ckpt.iteration
        for i in range(start + 1, start + steps + 1):
            losses.append(self.step(i, events))
            if progress is not None:
                progress(losses[-1])
        self.ckpt.iteration = start + steps
        self.ckpt.rng_state = self._rng_state()
        self.ckpt.params.requires_grad_(False)
        return TrainResult(self.ckpt, losses, events)


def train(dataset, config, max_steps=None, crash_path=None, progress=None):
    """Train from a fresh initialisation; stops after ``max_steps`` if given.

    The learning-rate schedule always spans ``config.iterations``, so a run
    stopped early can be resumed with :func:`fine_tune` without changing it.
    """
    steps = config.iterations if max_steps is None else min(max_steps, config.iterations)
    trainer = Trainer(dataset, initial_checkpoint(config), crash_path)
    return trainer.run(steps, progress)


def fine_tune(
    checkpoint,
    dataset,
    config_overrides=None,
    iterations=0,
    reuse_moments=False,
    crash_path=None,
    progress=None,
):
    """Continue training ``checkpoint`` for ``iterations`` more steps.

    Overrides may switch ``loss_mode`` or any other non-architectural option.
    Optimizer moments and the random streams are restarted unless
    ``reuse_moments`` is set, in which case the run continues exactly.
    """
    overrides = dict(config_overrides or {})
    config = checkpoint.config.replace(**overrides)
    arch = ("hidden", "levels_position", "levels_direction")
    for key in arch:
        if getattr(config, key) != getattr(checkpoint.config, key):
            raise CheckpointError(f"cannot fine-tune: {key} differs from the checkpoint")
    expected = init_params(config.encoding, tuple(config.hidden), seed=0)
    if [w.shape for w in expected.weights] != [w.shape for w in checkpoint.params.weights]:
        raise CheckpointError("cannot fine-tune: checkpoint layer shapes do not match the configuration")

    params = checkpoint.params.clone()
    if reuse_moments and checkpoint.moments is not None:
        moments = AdamState(
            [m.clone() for m in checkpoint.moments.first],
            [v.clone() for v in checkpoint.moments.second],
            checkpoint.moments.step,
        )
        rng_state = checkpoint.rng_state
    else:
        moments = AdamState.zeros_like(params.tensors)
        rng_state = None
    ckpt = Checkpoint(params, config, checkpoint.iteration, moments, rng_state, checkpoint.pair_threshold)
    if iterations == 0:
        return TrainResult(ckpt, [], [])
    trainer = Trainer(dataset, ckpt, crash_path)
    return trainer.run(iterations, progress)

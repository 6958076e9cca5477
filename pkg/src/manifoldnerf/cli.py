"""Command-line entry point: ``manifoldnerf <verb> ...``.

Verbs: scene-gen, dataset, train, eval, analyze, experiment. Every verb writes
into an output directory; when ``--out`` is omitted it goes under the
directory named by ``MANIFOLDNERF_RUN_ROOT`` (default ``./runs``). Outputs
are deterministic except ``run.log``, which carries the timestamps.

Exit codes: 0 success, 1 domain or configuration error, 2 I/O error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import ast
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .analysis import (
    dataset_features,
    find_arc_triples,
    interpolation_study,
    pairwise_similarity,
    project_2d,
)
from .data import (
    DEFAULT_RADIUS,
    PATTERNS,
    SceneSpec,
    default_intrinsics,
    load_dataset,
    make_preset,
    make_views,
    write_dataset,
)
from .errors import ConfigurationError, ManifoldNerfError
from .experiments import (
    METHODS,
    RECIPE_CONFIG,
    RECIPES,
    held_out_poses,
    method_mode,
    run_recipe,
    write_job_results,
    write_summary,
)
from .metrics import evaluate
from .training import Checkpoint, TrainConfig, fine_tune, train, write_loss_log

RUN_ROOT_ENV = "MANIFOLDNERF_RUN_ROOT"
PRESETS = ("blobs3", "blobs5", "asym")

log = logging.getLogger("manifoldnerf")


# -- key = value config files --------------------------------------------------


def parse_config_text(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = _parse_value(value)
    return out


def _parse_value(text):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def format_config(values):
    return "".join(f"{k} = {v!r}\n" for k, v in values.items())


def load_config_file(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc.strerror}") from exc
    return parse_config_text(text, str(path))


def resolve_train_config(file_values, overrides, base=None):
    """TrainConfig from defaults, then the config file, then flags."""
    base = base or TrainConfig()
    merged = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(merged) - names)
    if unknown:
        raise ConfigurationError(f"unknown training options: {unknown}")
    for key in ("hidden", "grid_levels", "background"):
        if key in merged and not isinstance(merged[key], tuple):
            merged[key] = tuple(merged[key]) if isinstance(merged[key], list) else (merged[key],)
    return base.replace(**merged)


# -- plumbing ------------------------------------------------------------------


def run_dir(args, verb):
    if getattr(args, "out", None):
        out = Path(args.out)
    else:
        out = Path(os.environ.get(RUN_ROOT_ENV, "runs")) / verb
    out.mkdir(parents=True, exist_ok=True)
    return out


def attach_run_log(out):
    handler = logging.FileHandler(out / "run.log", mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("manifoldnerf").addHandler(handler)
    return handler


def echo(msg):
    print(msg, flush=True)
    log.info(msg)


# -- verbs ---------------------------------------------------------------------


def cmd_scene_gen(args):
    scene = make_preset(args.preset, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scene.save(out)
    echo(f"wrote {args.preset} scene with {len(scene.primitives)} primitives to {out}")
    return 0


def cmd_dataset(args):
    if args.scene in PRESETS and not Path(args.scene).exists():
        scene = make_preset(args.scene)
    else:
        scene = SceneSpec.load(args.scene)
    intr = default_intrinsics(args.size, args.fov)
    if args.held_out:
        poses = held_out_poses(args.n, args.radius)
    else:
        poses = make_views(args.pattern, args.n, args.radius, args.elevations, args.azimuth_offset)
    out = run_dir(args, "dataset")
    handler = attach_run_log(out)
    try:
        write_dataset(scene, poses, intr, out, samples=args.samples, split=args.split)
        echo(f"wrote {len(poses)} views ({'held-out' if args.held_out else args.pattern}) to {out}")
    finally:
        log.removeHandler(handler)
    return 0


def _train_overrides(args):
    return {
        "iterations": args.iters,
        "seed": args.seed,
        "batch_rays": args.batch_rays,
        "learning_rate": args.lr,
        "scale_lambda": args.scale_lambda,
        "manifold_interval": args.interval,
        "pair_threshold": _threshold(args.epsilon),
        "samples_per_ray": args.samples,
        "feature_render_scale": args.feature_scale,
        **dict(_split_assignment(s) for s in args.set or ()),
    }


def _threshold(value):
    if value is None or value == "auto":
        return value
    try:
        return float(value)
    except ValueError:
        raise ConfigurationError(f"--epsilon must be a number or 'auto', got {value!r}") from None


def _split_assignment(text):
    if "=" not in text:
        raise ConfigurationError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), _parse_value(value.strip())


def cmd_train(args):
    file_values = load_config_file(args.config) if args.config else {}
    method = args.method or file_values.pop("method", "manifoldnerf")
    file_values.pop("method", None)
    overrides = _train_overrides(args)
    overrides["loss_mode"] = method_mode(method)
    out = run_dir(args, "train")
    handler = attach_run_log(out)
    try:
        dataset = load_dataset(args.dataset, args.split)
        progress = _progress_logger(args.log_every)
        if args.from_checkpoint:
            ckpt = Checkpoint.load(args.from_checkpoint)
            cfg = resolve_train_config(file_values, overrides, base=ckpt.config)
            changed = {
                f.name: getattr(cfg, f.name)
                for f in dataclasses.fields(cfg)
                if getattr(cfg, f.name) != getattr(ckpt.config, f.name)
            }
            extra = args.extra_iters if args.extra_iters is not None else cfg.iterations - ckpt.iteration
            result = fine_tune(ckpt, dataset, changed, max(0, extra), args.reuse_moments,
                               crash_path=out / "crash.npz", progress=progress)
        else:
            cfg = resolve_train_config(file_values, overrides)
            result = train(dataset, cfg, crash_path=out / "crash.npz", progress=progress)
        resolved = {"method": method, "dataset": str(args.dataset), **result.checkpoint.config.to_dict()}
        (out / "config.txt").write_text(format_config(resolved))
        result.checkpoint.save(out / "checkpoint.npz")
        write_loss_log(result.losses, out / "loss.csv")
        last = result.losses[-1] if result.losses else None
        msg = f"trained {method} to iteration {result.checkpoint.iteration}"
        if last is not None:
            msg += f"; final mse {last.mse:.6f}"
        echo(msg)
    finally:
        log.removeHandler(handler)
    return 0


def _progress_logger(every):
    def progress(row):
        if every and row.iteration % every == 0:
            log.info("iter %d mse %.6f aux %.6f lr %.3g", row.iteration, row.mse, row.auxiliary, row.learning_rate)

    return progress


def cmd_eval(args):
    out = run_dir(args, "eval")
    handler = attach_run_log(out)
    try:
        ckpt = Checkpoint.load(args.checkpoint)
        dataset = load_dataset(args.dataset, args.split)
        report = evaluate(ckpt, dataset)
        report.write_csv(out / "metrics.csv")
        echo(f"{len(report.rows)} views: mean PSNR {report.mean_psnr:.3f} dB, mean SSIM {report.mean_ssim:.4f}")
    finally:
        log.removeHandler(handler)
    return 0


def cmd_analyze(args):
    out = run_dir(args, "analyze")
    handler = attach_run_log(out)
    try:
        dataset = load_dataset(args.dataset, args.split)
        table = pairwise_similarity(dataset)
        table.write_csv(out / "similarity.csv")
        table.write_histogram_csv(out / "histogram.csv", args.bin_width)
        with open(out / "angle_buckets.csv", "w") as fh:
            fh.write("separation_low_deg,separation_high_deg,mean_cosine,pairs\n")
            for lo, hi, mean, count in table.angle_buckets(args.bucket_width):
                fh.write(f"{lo:.6f},{hi:.6f},{mean:.12f},{count}\n")
        feats = dataset_features(dataset)
        study = interpolation_study(dataset, triples=find_arc_triples(dataset.positions, args.max_separation), features=feats)
        study.write_csv(out / "interpolation.csv")
        if len(dataset) >= 3:
            project_2d(feats).write_csv(out / "projection.csv", table.azimuths, table.elevations)
        echo(f"analyzed {len(dataset)} views; {len(study.records)} arc triples, win rate {study.win_rate:.3f}")
    finally:
        log.removeHandler(handler)
    return 0


def cmd_experiment(args):
    file_values = load_config_file(args.config) if args.config else {}
    base = resolve_train_config(
        file_values,
        {"iterations": args.iters, "batch_rays": args.batch_rays},
        base=TrainConfig(**RECIPE_CONFIG),
    )
    out = run_dir(args, f"experiment-{args.recipe}")
    handler = attach_run_log(out)
    try:
        resolved = {"recipe": args.recipe, "seeds": tuple(args.seeds), **base.to_dict()}
        (out / "config.txt").write_text(format_config(resolved))

        def report(job):
            state = job.error or f"held-out PSNR {job.psnr:.3f} dB, SSIM {job.ssim:.4f}"
            echo(f"{job.method} {job.condition.label} seed {job.seed}: {state}")

        rows = run_recipe(args.recipe, tuple(args.seeds), base, tuple(args.methods) if args.methods else None,
                          on_result=report)
        write_summary(rows, out / "summary.csv")
        write_job_results(rows, out / "jobs.csv")
        failed = sum(r.failures for r in rows)
        echo(f"wrote {len(rows)} summary rows to {out / 'summary.csv'}; {failed} failed jobs")
    finally:
        log.removeHandler(handler)
    return 1 if failed else 0


# -- parser --------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="manifoldnerf",
        description="Few-shot radiance fields with feature-manifold regularization.",
        epilog=f"Output directories default to ${RUN_ROOT_ENV}/<verb> (else ./runs/<verb>).",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True, metavar="VERB")
    fmt = argparse.ArgumentDefaultsHelpFormatter

    s = sub.add_parser("scene-gen", help="write a preset scene file", formatter_class=fmt)
    s.add_argument("--preset", choices=PRESETS, default="blobs3")
    s.add_argument("--seed", type=int, default=None, help="jitter blob centers deterministically")
    s.add_argument("--out", required=True, help="scene file to write")
    s.set_defaults(func=cmd_scene_gen)

    s = sub.add_parser("dataset", help="render a view layout into a transforms.json dataset", formatter_class=fmt)
    s.add_argument("--scene", required=True, help="scene file, or a preset name")
    s.add_argument("--pattern", choices=PATTERNS, default="uniform_hemisphere")
    s.add_argument("--n", type=int, default=8, help="number of views")
    s.add_argument("--held-out", action="store_true", help="use the fixed random held-out poses instead of a pattern")
    s.add_argument("--elevations", type=float, nargs="+", default=None, help="pattern elevations in degrees")
    s.add_argument("--azimuth-offset", type=float, default=0.0)
    s.add_argument("--radius", type=float, default=DEFAULT_RADIUS)
    s.add_argument("--size", type=int, default=64, help="image width and height")
    s.add_argument("--fov", type=float, default=0.6, help="camera_angle_x in radians")
    s.add_argument("--samples", type=int, default=256, help="oracle samples per ray")
    s.add_argument("--split", default="train")
    s.add_argument("--out")
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("train", help="train a field on a dataset", formatter_class=fmt)
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--method", choices=sorted(METHODS), default=None, help="default manifoldnerf")
    s.add_argument("--config", help="key = value file of training options")
    s.add_argument("--iters", type=int, help=f"iterations (default {TrainConfig.iterations})")
    s.add_argument("--seed", type=int, help=f"random seed (default {TrainConfig.seed})")
    s.add_argument("--batch-rays", type=int, help=f"rays per step (default {TrainConfig.batch_rays})")
    s.add_argument("--lr", type=float, help=f"initial learning rate (default {TrainConfig.learning_rate})")
    s.add_argument("--lambda", dest="scale_lambda", type=float, help=f"auxiliary weight (default {TrainConfig.scale_lambda})")
    s.add_argument("--interval", type=int, help=f"auxiliary every K steps (default {TrainConfig.manifold_interval})")
    s.add_argument("--epsilon", help=f"pair threshold or 'auto' (default {TrainConfig.pair_threshold})")
    s.add_argument("--samples", type=int, help=f"samples per ray (default {TrainConfig.samples_per_ray})")
    s.add_argument("--feature-scale", type=float, help=f"feature render scale (default {TrainConfig.feature_render_scale})")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="any other training option")
    s.add_argument("--from-checkpoint", help="continue from this checkpoint")
    s.add_argument("--extra-iters", type=int, help="steps to add when continuing")
    s.add_argument("--reuse-moments", action="store_true", help="keep optimizer moments and random streams")
    s.add_argument("--log-every", type=int, default=100)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a dataset", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("analyze", help="feature similarity, interpolation and projection exports", formatter_class=fmt)
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--bin-width", type=float, default=0.02)
    s.add_argument("--bucket-width", type=float, default=30.0, help="angular bucket width in degrees")
    s.add_argument("--max-separation", type=float, default=90.0, help="widest arc for interpolation triples")
    s.add_argument("--out")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("experiment", help="run a comparison recipe", formatter_class=fmt)
    s.add_argument("--recipe", choices=RECIPES, required=True)
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--methods", nargs="+", choices=sorted(METHODS))
    s.add_argument("--config", help="key = value file of training options")
    s.add_argument("--iters", type=int, help=f"iterations (default {RECIPE_CONFIG['iterations']})")
    s.add_argument("--batch-rays", type=int, help=f"rays per step (default {RECIPE_CONFIG['batch_rays']})")
    s.add_argument("--out")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logger = logging.getLogger("manifoldnerf")
    logger.setLevel(logging.INFO)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ManifoldNerfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

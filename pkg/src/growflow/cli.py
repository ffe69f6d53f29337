"""Command-line entry point tying the pipeline together.

Subcommands: ``gen`` (synthetic dataset), ``train`` (staged optimization),
``render`` (time query to an image), ``eval`` (metric report), ``track``
(trajectory export), ``slice`` (temporal slice image), ``bench``
(micro-benchmarks).  Configuration comes from a JSON file mirroring the
module configs; command-line flags win over the file.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import field as vfield
from . import io, metrics, splat, train
from .core import DegenerateRotationError, GrowflowError
from .diff import GradientNanError
from .field import FieldConfig
from .io import Checkpoint, DataError, load_checkpoint, save_checkpoint
from .ode import IntegrationError, IntegrationOptions
from .splat import RenderConfig
from .synth import SceneSpec, generate_scene, load_ground_truth, render_dataset
from .train import BoundaryCache, TrainConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(GrowflowError):
    """Bad configuration file or command arguments."""


# ---------------------------------------------------------------------------
# config handling


_SECTIONS = {
    "scene": SceneSpec,
    "train": TrainConfig,
    "integration": IntegrationOptions,
    "render": RenderConfig,
    "field": FieldConfig,
}


def _build_section(cls, data: dict, path: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown config key '{path}.{key}'")
    try:
        return cls(**data)
    except (TypeError, GrowflowError) as err:
        raise ConfigError(f"invalid config section '{path}': {err}") from err


@dataclasses.dataclass
class RunConfig:
    scene: SceneSpec
    train: TrainConfig
    integration: IntegrationOptions
    render: RenderConfig
    field: FieldConfig
    seed: int | None = None

    @property
    def query_integration(self) -> IntegrationOptions:
        """Solver settings for evaluation-time queries: the adaptive pair
        unless the config explicitly pinned an integration section."""
        if getattr(self, "_integration_given", False):
            return self.integration
        return IntegrationOptions(method="rk45_adaptive")


def load_config(path: str | None) -> RunConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"missing config file: {p}")
        with open(p) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as err:
                raise ConfigError(f"config is not valid JSON: {err}") from err
    for key in data:
        if key not in _SECTIONS and key != "seed":
            raise ConfigError(f"unknown config key '{key}'")
    sections = {name: _build_section(cls, data.get(name, {}), name)
                for name, cls in _SECTIONS.items()}
    seed = data.get("seed")
    if seed is not None:
        sections["scene"] = dataclasses.replace(sections["scene"], seed=int(seed))
        sections["train"] = dataclasses.replace(sections["train"], seed=int(seed))
    cfg = RunConfig(seed=seed, **sections)
    cfg._integration_given = "integration" in data
    return cfg


# ---------------------------------------------------------------------------
# checkpoint plumbing


def _make_checkpoint(dataset, gaussians, field_params=None, cache=None,
                     meta=None) -> Checkpoint:
    ckpt = Checkpoint(
        gaussians=gaussians,
        cameras=dataset.cameras,
        time_axis=dataset.time_axis,
        scene_bounds=dataset.scene_bounds,
        foreground_box=dataset.foreground_box,
        background=dataset.background,
        field_params=field_params,
        meta=dict(meta or {}),
    )
    if cache is not None:
        times, snaps, cmeta = train.cache_to_sections(cache)
        ckpt.cache_times = times
        ckpt.cache_snapshots = snaps
        ckpt.meta["cache"] = cmeta
    return ckpt


def _cache_from_checkpoint(ckpt: Checkpoint) -> BoundaryCache | None:
    if ckpt.cache_times is None:
        return None
    return train.cache_from_sections(ckpt.gaussians, ckpt.cache_times,
                                     ckpt.cache_snapshots, ckpt.meta["cache"])


def _render_cfg_from_meta(ckpt: Checkpoint) -> RenderConfig:
    saved = (ckpt.meta or {}).get("render_cfg")
    return RenderConfig(**saved) if saved else RenderConfig()


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    gt, rig, axis = generate_scene(cfg.scene)
    dataset = render_dataset(gt, rig, axis, cfg.scene, args.out)
    n_imgs = len(dataset.images)
    print(f"dataset: {axis.n_timesteps} timesteps x {len(rig)} cameras "
          f"= {n_imgs} images at {cfg.scene.image_size}px")
    print(f"supervised timesteps: {axis.supervised_indices.tolist()}, "
          f"held-out cameras: {dataset.holdout_cameras}")
    print(f"foreground points: {gt.positions.shape[1]}, "
          f"backdrop gaussians: {len(gt.backdrop)}")
    print(f"scene bounds: {dataset.scene_bounds.lo.round(3).tolist()} .. "
          f"{dataset.scene_bounds.hi.round(3).tolist()}")
    return EXIT_OK


def _seed_points_for(dataset_dir, dataset):
    gt_path = Path(dataset_dir) / "ground_truth.json"
    if not gt_path.exists():
        return None
    gt = load_ground_truth(gt_path)
    return np.concatenate([gt.positions[dataset.time_axis.t_index],
                           gt.backdrop.centers])


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tcfg = cfg.train
    if args.skip_boundary:
        tcfg = dataclasses.replace(tcfg, skip_boundary=True)
    if args.encoder:
        kind = {"hexplane": "hexplane", "fourier": "fourier_mlp"}[args.encoder]
        tcfg = dataclasses.replace(tcfg, encoder_kind=kind)
    if args.color_flow:
        tcfg = dataclasses.replace(tcfg, color_flow=True)
    fcfg = dataclasses.replace(cfg.field, encoder_kind=tcfg.encoder_kind,
                               color_flow=tcfg.color_flow)
    dataset = io.load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stages = ["static", "boundary", "global"] if args.stage == "all" else [args.stage]
    log: list[train.LogRow] = []
    meta = {"render_cfg": dataclasses.asdict(cfg.render),
            "train_seed": tcfg.seed, "encoder_kind": tcfg.encoder_kind}

    def save_stage(name, gaussians, field_params=None, cache=None):
        ckpt = _make_checkpoint(dataset, gaussians, field_params, cache,
                                meta={**meta, "stage": name})
        save_checkpoint(out / f"{name}.ckpt", ckpt)

    def periodic(gaussians_ref, field_ref, cache_ref):
        def cb(stage, iteration, payload):
            if stage == "static":
                ckpt = _make_checkpoint(dataset, payload, meta={**meta, "stage": stage})
            else:
                ckpt = _make_checkpoint(dataset, gaussians_ref[0], payload,
                                        cache_ref[0], meta={**meta, "stage": stage})
            save_checkpoint(out / f"ckpt_{stage}_{iteration:06d}.ckpt", ckpt)
        return cb

    gaussians = None
    field_params = None
    cache = None
    if stages[0] != "static":
        prev = {"boundary": "static", "global": "boundary"}[stages[0]]
        prev_path = out / f"{prev}.ckpt"
        if not prev_path.exists():
            raise DataError(f"stage '{stages[0]}' needs the '{prev}' checkpoint "
                            f"at {prev_path}")
        ckpt = load_checkpoint(prev_path)
        gaussians = ckpt.gaussians
        field_params = ckpt.field_params
        cache = _cache_from_checkpoint(ckpt)

    g_ref, f_ref, c_ref = [gaussians], [field_params], [cache]
    for stage in stages:
        if stage == "static":
            seeds = _seed_points_for(args.dataset, dataset)
            gaussians = train.static_stage(dataset, tcfg, cfg.render,
                                           seed_points=seeds, log=log,
                                           checkpoint_cb=periodic(g_ref, f_ref, c_ref))
            g_ref[0] = gaussians
            save_stage("static", gaussians)
        elif stage == "boundary":
            if gaussians is None:
                raise DataError("boundary stage requires a static checkpoint")
            field_params = vfield.init_params(dataset.scene_bounds,
                                              seed=tcfg.seed * 8 + 2, config=fcfg)
            f_ref[0] = field_params
            cache = train.boundary_stage(gaussians, dataset, field_params, tcfg,
                                         cfg.render, log=log,
                                         checkpoint_cb=periodic(g_ref, f_ref, c_ref))
            c_ref[0] = cache
            save_stage("boundary", gaussians, field_params, cache)
        elif stage == "global":
            if gaussians is None or cache is None:
                raise DataError("global stage requires a boundary checkpoint")
            field_params = train.global_stage(cache, dataset, tcfg,
                                              field_params=field_params,
                                              render_cfg=cfg.render, log=log,
                                              checkpoint_cb=periodic(g_ref, f_ref, c_ref))
            f_ref[0] = field_params
            save_stage("global", gaussians, field_params, cache)
        else:
            raise ConfigError(f"unknown stage '{stage}'")

    with open(out / "train_log.tsv", "a") as f:
        for row in log:
            f.write(row.to_tsv() + "\n")
    print(f"trained stages {stages}; checkpoints in {out}")
    return EXIT_OK


def _load_model(checkpoint_path):
    ckpt = load_checkpoint(checkpoint_path)
    cache = _cache_from_checkpoint(ckpt)
    return ckpt, cache, _render_cfg_from_meta(ckpt)


def _scene_at(ckpt: Checkpoint, cache, t: float, int_opts: IntegrationOptions):
    if cache is not None and ckpt.field_params is not None:
        return train.query_time(cache, ckpt.field_params, t, int_opts)
    if t == 1.0:
        return ckpt.gaussians
    raise DataError("checkpoint has no trained field; only t=1 is renderable")


def cmd_render(args) -> int:
    cfg = load_config(args.config)
    if not 0.0 <= args.t <= 1.0:
        raise ConfigError(f"t must be in [0, 1], got {args.t}")
    ckpt, cache, rcfg = _load_model(args.checkpoint)
    if not 0 <= args.camera < len(ckpt.cameras):
        raise ConfigError(f"camera index {args.camera} out of range")
    gs = _scene_at(ckpt, cache, args.t, cfg.query_integration)
    img = splat.render(gs, ckpt.cameras[args.camera],
                       background=ckpt.background, cfg=rcfg)
    io.write_png(args.out, img.pixels)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ckpt, cache, rcfg = _load_model(args.checkpoint)
    dataset = io.load_dataset(args.dataset)
    axis = dataset.time_axis

    def render_fn(ti, ci):
        gs = _scene_at(ckpt, cache, float(axis.normalized[ti]), cfg.query_integration)
        return splat.render(gs, dataset.cameras[ci], background=dataset.background,
                            cfg=rcfg)

    trajectory = None
    gt_tracks = None
    gt_path = Path(args.dataset) / "ground_truth.json"
    if gt_path.exists() and cache is not None and ckpt.field_params is not None:
        gt = load_ground_truth(gt_path)
        trajectory = train.track_trajectory(cache, ckpt.field_params,
                                            axis.normalized, axis.raw_timesteps,
                                            cfg.query_integration)
        gt_tracks = gt.positions
    report = metrics.build_report(dataset, render_fn, trajectory, gt_tracks)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".tsv").write_text(report.to_tsv())
    out.with_suffix(".json").write_text(report.to_json())
    for split, agg in report.aggregates.items():
        cd = "" if agg.get("cd") is None else f"  cd={agg['cd']:.4f}"
        print(f"{split}: n={agg['n_rows']} psnr={agg['psnr_db']:.2f} "
              f"ssim={agg['ssim']:.4f}{cd}")
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = load_config(args.config)
    ckpt, cache, _ = _load_model(args.checkpoint)
    if cache is None or ckpt.field_params is None:
        raise DataError("track requires a checkpoint with a trained field")
    axis = ckpt.time_axis
    if args.times:
        times = np.array([float(x) for x in args.times.split(",")])
        raw = np.round(times * (axis.raw_timesteps[-1] - axis.raw_timesteps[0])
                       + axis.raw_timesteps[0]).astype(int)
    else:
        times = axis.normalized
        raw = axis.raw_timesteps
    n_fg = len(cache.snapshots[0].index)
    m = args.count
    if m > n_fg:
        print(f"warning: --count {m} exceeds {n_fg} foreground gaussians; clamping",
              file=sys.stderr)
        m = n_fg
    rows = np.sort(np.random.default_rng(args.sample_seed).choice(n_fg, m,
                                                                  replace=False))
    traj = train.track_trajectory(cache, ckpt.field_params, times, raw,
                                  cfg.query_integration, gaussian_rows=rows)
    doc = {
        "times": traj.times.tolist(),
        "raw_timesteps": traj.raw_timesteps.tolist(),
        "gaussian_indices": traj.gaussian_indices.tolist(),
        "positions": traj.centers.tolist(),
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as f:
        json.dump(doc, f)
    print(f"wrote {m} tracks over {len(times)} times to {args.out}")
    return EXIT_OK


def cmd_slice(args) -> int:
    cfg = load_config(args.config)
    ckpt, cache, rcfg = _load_model(args.checkpoint)
    if not 0 <= args.camera < len(ckpt.cameras):
        raise ConfigError(f"camera index {args.camera} out of range")
    cam = ckpt.cameras[args.camera]
    if not 0 <= args.column < cam.width:
        raise ConfigError(f"column {args.column} outside image width {cam.width}")
    axis = ckpt.time_axis
    eval_times = axis.normalized[:-1]
    columns = []
    for t in eval_times:
        gs = _scene_at(ckpt, cache, float(t), cfg.query_integration)
        img = splat.render(gs, cam, background=ckpt.background, cfg=rcfg)
        columns.append(img.pixels[:, args.column, :])
    strip = np.stack(columns, axis=1)  # (H, n_times, 3)
    io.write_png(args.out, strip)
    print(f"wrote temporal slice ({strip.shape[0]}x{strip.shape[1]}) to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    results = bench_mod.run_benches(args.filter, args.out,
                                    repetitions=args.repetitions)
    print(f"wrote {len(results)} benchmark rows to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="growflow",
                                description="Continuous-time growth "
                                            "reconstruction for Gaussian-splat scenes")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic growth dataset")
    g.add_argument("--config", default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="run the staged optimization")
    t.add_argument("--dataset", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--stage", default="all",
                   choices=["all", "static", "boundary", "global"])
    t.add_argument("--skip-boundary", action="store_true")
    t.add_argument("--encoder", choices=["hexplane", "fourier"], default=None)
    t.add_argument("--color-flow", action="store_true")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render the scene at a normalized time")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--camera", type=int, required=True)
    r.add_argument("--t", type=float, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config", default=None)
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="metric report over held-out cameras")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", default=None)
    e.set_defaults(fn=cmd_eval)

    k = sub.add_parser("track", help="export foreground trajectories as JSON")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--count", type=int, default=8)
    k.add_argument("--times", default=None,
                   help="comma-separated normalized times (default: dataset grid)")
    k.add_argument("--sample-seed", type=int, default=0)
    k.add_argument("--config", default=None)
    k.set_defaults(fn=cmd_track)

    s = sub.add_parser("slice", help="temporal slice: one pixel column over time")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--camera", type=int, required=True)
    s.add_argument("--column", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None)
    s.set_defaults(fn=cmd_slice)

    b = sub.add_parser("bench", help="micro-benchmarks of the hot kernels")
    b.add_argument("--filter", default="")
    b.add_argument("--out", required=True)
    b.add_argument("--repetitions", type=int, default=10)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (IntegrationError, GradientNanError, DegenerateRotationError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except GrowflowError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from growflow import cli, io, splat, train
from growflow.field import FieldConfig
from growflow.ode import GeomState
from growflow.splat import RenderConfig
from growflow.synth import SceneSpec, gaussians_at, generate_scene, render_dataset
from growflow import field as vfield


def write_config(path, **sections):
    with open(path, "w") as f:
        json.dump(sections, f)
    return str(path)


SCENE = dict(n_stems=1, n_branch_events=0, n_gaussians=6, n_timesteps=4,
             camera_count=3, image_size=20, seed=5, holdout_every=3,
             supervised_stride=2)
TRAIN = dict(n_static=8, n_boundary=2, n_global=3, view_batch=2, substeps=2)
FIELD = dict(levels=1, features=2, spatial_resolution=5, temporal_resolution=3)
RENDER = dict(dilation=0.0)


def dir_digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture()
def gen_dir(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", scene=SCENE)
    out = tmp_path / "data"
    assert cli.main(["gen", "--config", cfg, "--out", str(out)]) == 0
    return out


def test_gen_layout_and_determinism(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", scene=SCENE)
    out1, out2 = tmp_path / "d1", tmp_path / "d2"
    assert cli.main(["gen", "--config", cfg, "--out", str(out1)]) == 0
    assert cli.main(["gen", "--config", cfg, "--out", str(out2)]) == 0
    assert (out1 / "cameras.json").exists()
    assert (out1 / "times.json").exists()
    assert (out1 / "images" / "t0" / "cam0.png").exists()
    assert dir_digest(out1) == dir_digest(out2)
    with open(out1 / "cameras.json") as f:
        assert len(json.load(f)) == SCENE["camera_count"]


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", scene={"n_stemz": 2})
    rc = cli.main(["gen", "--config", cfg, "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "scene.n_stemz" in capsys.readouterr().err


def test_train_stages_and_resume(gen_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", train=TRAIN, field=FIELD,
                       render=RENDER)
    out = tmp_path / "run"
    rc = cli.main(["train", "--dataset", str(gen_dir), "--config", cfg,
                   "--out", str(out), "--stage", "static"])
    assert rc == 0
    assert (out / "static.ckpt").exists()
    rc = cli.main(["train", "--dataset", str(gen_dir), "--config", cfg,
                   "--out", str(out), "--stage", "boundary"])
    assert rc == 0
    assert (out / "boundary.ckpt").exists()
    rc = cli.main(["train", "--dataset", str(gen_dir), "--config", cfg,
                   "--out", str(out), "--stage", "global"])
    assert rc == 0
    ckpt = io.load_checkpoint(out / "global.ckpt")
    assert ckpt.field_params is not None
    assert len(ckpt.cache_snapshots) == 3  # supervised timesteps 0, 2, 3
    assert (out / "train_log.tsv").exists()
    lines = (out / "train_log.tsv").read_text().strip().split("\n")
    assert lines[0].split("\t")[0] == "static"


def test_train_missing_prerequisite_names_stage(gen_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", train=TRAIN, field=FIELD)
    rc = cli.main(["train", "--dataset", str(gen_dir), "--config", cfg,
                   "--out", str(tmp_path / "empty"), "--stage", "global"])
    assert rc == 3
    err = capsys.readouterr().err
    assert "boundary" in err


def test_train_skip_boundary_cache_length_one(gen_dir, tmp_path):
    cfg = write_config(tmp_path / "cfg.json", train=TRAIN, field=FIELD,
                       render=RENDER)
    out = tmp_path / "run"
    rc = cli.main(["train", "--dataset", str(gen_dir), "--config", cfg,
                   "--out", str(out), "--skip-boundary"])
    assert rc == 0
    ckpt = io.load_checkpoint(out / "global.ckpt")
    assert len(ckpt.cache_snapshots) == 1
    assert ckpt.meta["cache"]["skip_boundary"] is True


def test_train_fourier_encoder(gen_dir, tmp_path):
    cfg = write_config(tmp_path / "cfg.json", train=TRAIN, field=FIELD,
                       render=RENDER)
    out = tmp_path / "run"
    rc = cli.main(["train", "--dataset", str(gen_dir), "--config", cfg,
                   "--out", str(out), "--encoder", "fourier"])
    assert rc == 0
    ckpt = io.load_checkpoint(out / "global.ckpt")
    assert ckpt.field_params.config.encoder_kind == "fourier_mlp"


@pytest.fixture()
def trained_dir(gen_dir, tmp_path):
    cfg = write_config(tmp_path / "traincfg.json", train=TRAIN, field=FIELD,
                       render=RENDER)
    out = tmp_path / "run"
    assert cli.main(["train", "--dataset", str(gen_dir), "--config", cfg,
                     "--out", str(out)]) == 0
    return out


def test_render_determinism_and_t1_static(trained_dir, tmp_path):
    out_a, out_b = tmp_path / "a.png", tmp_path / "b.png"
    args = ["render", "--checkpoint", str(trained_dir / "global.ckpt"),
            "--camera", "0", "--t", "1.0"]
    assert cli.main(args + ["--out", str(out_a)]) == 0
    assert cli.main(args + ["--out", str(out_b)]) == 0
    assert out_a.read_bytes() == out_b.read_bytes()
    # t=1 renders the static-stage scene
    ckpt = io.load_checkpoint(trained_dir / "static.ckpt")
    img = splat.render(ckpt.gaussians, ckpt.cameras[0],
                       background=ckpt.background,
                       cfg=RenderConfig(**ckpt.meta["render_cfg"]))
    expected = io.encode_srgb_u8(img.pixels)
    from PIL import Image as PILImage
    with PILImage.open(out_a) as im:
        got = np.asarray(im.convert("RGB"))
    assert np.array_equal(got, expected)


def test_render_supervised_time_matches_cached_snapshot(trained_dir, tmp_path):
    ckpt = io.load_checkpoint(trained_dir / "global.ckpt")
    cache = train.cache_from_sections(ckpt.gaussians, ckpt.cache_times,
                                      ckpt.cache_snapshots, ckpt.meta["cache"])
    t = float(cache.times[1])
    out = tmp_path / "sup.png"
    assert cli.main(["render", "--checkpoint", str(trained_dir / "global.ckpt"),
                     "--camera", "1", "--t", str(t), "--out", str(out)]) == 0
    gs = cache.snapshots[1].apply_to(ckpt.gaussians)
    img = splat.render(gs, ckpt.cameras[1], background=ckpt.background,
                       cfg=RenderConfig(**ckpt.meta["render_cfg"]))
    from PIL import Image as PILImage
    with PILImage.open(out) as im:
        got = np.asarray(im.convert("RGB"))
    assert np.array_equal(got, io.encode_srgb_u8(img.pixels))


def test_render_t_out_of_range(trained_dir, tmp_path, capsys):
    rc = cli.main(["render", "--checkpoint", str(trained_dir / "global.ckpt"),
                   "--camera", "0", "--t", "1.5", "--out", str(tmp_path / "x.png")])
    assert rc == 2


def test_eval_report_files(trained_dir, gen_dir, tmp_path, capsys):
    out = tmp_path / "report"
    rc = cli.main(["eval", "--checkpoint", str(trained_dir / "global.ckpt"),
                   "--dataset", str(gen_dir), "--out", str(out)])
    assert rc == 0
    tsv = (out.with_suffix(".tsv")).read_text()
    doc = json.loads(out.with_suffix(".json").read_text())
    assert "training" in doc["aggregates"] and "interpolation" in doc["aggregates"]
    # last timestep excluded from rows
    assert all(r["timestep_index"] != 3 for r in doc["rows"])
    assert doc["rows"][0]["cd"] is not None
    assert "psnr_db" in tsv


def test_eval_without_ground_truth_omits_cd(trained_dir, gen_dir, tmp_path):
    (gen_dir / "ground_truth.json").unlink()
    out = tmp_path / "report"
    rc = cli.main(["eval", "--checkpoint", str(trained_dir / "global.ckpt"),
                   "--dataset", str(gen_dir), "--out", str(out)])
    assert rc == 0
    doc = json.loads(out.with_suffix(".json").read_text())
    assert all(r["cd"] is None for r in doc["rows"])
    assert doc["aggregates"]["combined"]["psnr_db"] is not None


def _zero_field_checkpoint(tmp_path):
    """Handmade checkpoint: exact zero field and a cache straight from the
    ground truth, for contract tests that need exactness."""
    spec = SceneSpec(**SCENE)
    gt, rig, axis = generate_scene(spec)
    ds = render_dataset(gt, rig, axis, spec, tmp_path / "zf_data")
    gs = gaussians_at(gt, axis.t_index)
    params = vfield.init_params(ds.scene_bounds, seed=0,
                                config=FieldConfig(**FIELD))
    state = GeomState.from_gaussians(gs)
    times = axis.supervised_times[::-1].copy()
    cache = train.BoundaryCache(
        gaussians=gs, snapshots=[state] * len(times), times=times,
        raw_indices=axis.supervised_indices[::-1].copy())
    ckpt = io.Checkpoint(
        gaussians=gs, cameras=rig, time_axis=axis,
        scene_bounds=ds.scene_bounds, foreground_box=ds.foreground_box,
        background=ds.background, field_params=params,
        meta={"render_cfg": RENDER})
    times_arr, snaps, cmeta = train.cache_to_sections(cache)
    ckpt.cache_times = times_arr
    ckpt.cache_snapshots = snaps
    ckpt.meta["cache"] = cmeta
    path = tmp_path / "zero.ckpt"
    io.save_checkpoint(path, ckpt)
    return path


def test_track_zero_field_constant(tmp_path):
    path = _zero_field_checkpoint(tmp_path)
    out = tmp_path / "tracks.json"
    rc = cli.main(["track", "--checkpoint", str(path), "--out", str(out),
                   "--count", "4"])
    assert rc == 0
    doc = json.loads(out.read_text())
    pos = np.array(doc["positions"])
    assert pos.shape[1] == 4
    assert np.abs(pos - pos[0]).max() < 1e-9


def _constant_flow_checkpoint(tmp_path, velocity):
    """Checkpoint whose field is a constant translational flow, with a cache
    built by actually integrating each supervised interval."""
    from growflow.ode import IntegrationOptions, integrate
    from growflow.train import _field_fn

    spec = SceneSpec(**SCENE)
    gt, rig, axis = generate_scene(spec)
    ds = render_dataset(gt, rig, axis, spec, tmp_path / "cf_data")
    gs = gaussians_at(gt, axis.t_index)
    params = vfield.init_params(ds.scene_bounds, seed=0,
                                config=FieldConfig(**FIELD))
    params.arrays["head.center.b1"][:] = velocity
    times = axis.supervised_times[::-1].copy()
    snaps = [GeomState.from_gaussians(gs)]
    for k in range(len(times) - 1):
        nxt, _ = integrate(_field_fn(params, None), snaps[-1], float(times[k]),
                           float(times[k + 1]), IntegrationOptions(substeps=4))
        snaps.append(nxt)
    cache = train.BoundaryCache(gaussians=gs, snapshots=snaps, times=times,
                                raw_indices=axis.supervised_indices[::-1].copy())
    ckpt = io.Checkpoint(
        gaussians=gs, cameras=rig, time_axis=axis,
        scene_bounds=ds.scene_bounds, foreground_box=ds.foreground_box,
        background=ds.background, field_params=params,
        meta={"render_cfg": RENDER})
    times_arr, snap_secs, cmeta = train.cache_to_sections(cache)
    ckpt.cache_times = times_arr
    ckpt.cache_snapshots = snap_secs
    ckpt.meta["cache"] = cmeta
    path = tmp_path / "flow.ckpt"
    io.save_checkpoint(path, ckpt)
    return path, cache


def test_track_supervised_times_match_cache(tmp_path):
    path, cache = _constant_flow_checkpoint(tmp_path, [0.08, -0.03, 0.05])
    out = tmp_path / "tracks.json"
    rc = cli.main(["track", "--checkpoint", str(path), "--out", str(out),
                   "--count", str(SCENE["n_gaussians"])])
    assert rc == 0
    doc = json.loads(out.read_text())
    pos = np.array(doc["positions"])          # (T, M, 3) over the dataset grid
    for k, raw_idx in enumerate(cache.raw_indices):
        got = pos[int(raw_idx)]
        want = cache.snapshots[k].centers
        assert np.abs(got - want).max() < 1e-6


def test_track_count_clamped_with_warning(tmp_path, capsys):
    path = _zero_field_checkpoint(tmp_path)
    out = tmp_path / "tracks.json"
    rc = cli.main(["track", "--checkpoint", str(path), "--out", str(out),
                   "--count", "500"])
    assert rc == 0
    assert "clamping" in capsys.readouterr().err
    doc = json.loads(out.read_text())
    assert np.array(doc["positions"]).shape[1] == SCENE["n_gaussians"]


def test_slice_dimensions_and_static_scene(tmp_path):
    path = _zero_field_checkpoint(tmp_path)
    out = tmp_path / "slice.png"
    rc = cli.main(["slice", "--checkpoint", str(path), "--camera", "0",
                   "--column", "10", "--out", str(out)])
    assert rc == 0
    from PIL import Image as PILImage
    with PILImage.open(out) as im:
        arr = np.asarray(im)
    assert arr.shape[0] == SCENE["image_size"]          # camera height
    assert arr.shape[1] == SCENE["n_timesteps"] - 1      # evaluation times
    # zero flow renders the same scene at every time: identical columns
    assert np.all(arr == arr[:, :1, :])


def test_slice_column_out_of_range(tmp_path):
    path = _zero_field_checkpoint(tmp_path)
    rc = cli.main(["slice", "--checkpoint", str(path), "--camera", "0",
                   "--column", "99", "--out", str(tmp_path / "x.png")])
    assert rc == 2


def test_checkpoint_round_trip_bit_exact(tmp_path):
    path = _zero_field_checkpoint(tmp_path)
    a = io.load_checkpoint(path)
    path2 = tmp_path / "again.ckpt"
    io.save_checkpoint(path2, a)
    assert path.read_bytes() == path2.read_bytes()
    b = io.load_checkpoint(path2)
    assert np.array_equal(a.gaussians.centers, b.gaussians.centers)
    assert np.array_equal(a.gaussians.rotations, b.gaussians.rotations)
    for name in a.field_params.arrays:
        assert np.array_equal(a.field_params.arrays[name],
                              b.field_params.arrays[name])


def test_bench_command(tmp_path):
    out = tmp_path / "bench.tsv"
    rc = cli.main(["bench", "--filter", "rk4", "--out", str(out),
                   "--repetitions", "10"])
    assert rc == 0
    lines = out.read_text().strip().split("\n")
    assert lines[0].startswith("kernel")
    assert len(lines) == 4  # header + three scales


def test_bench_filter_matching_nothing(tmp_path):
    out = tmp_path / "bench.tsv"
    rc = cli.main(["bench", "--filter", "nosuchkernel", "--out", str(out)])
    assert rc == 0
    assert out.read_text().strip().split("\n")[0].startswith("kernel")

import numpy as np
import pytest

from growflow import io, splat
from growflow.core import GaussianSet
from growflow.synth import (
    SceneSpec, gaussians_at, generate_scene, load_ground_truth, render_dataset,
)


def small_spec(**kw):
    base = dict(n_stems=2, n_branch_events=1, n_gaussians=10, n_timesteps=5,
                camera_count=4, image_size=24, seed=3, holdout_every=3)
    base.update(kw)
    return SceneSpec(**base)


def test_deterministic_in_seed():
    a, rig_a, axis_a = generate_scene(small_spec())
    b, rig_b, axis_b = generate_scene(small_spec())
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.radii, b.radii)
    assert np.array_equal(a.colors, b.colors)
    assert all(np.array_equal(ca.rotation_world_to_cam, cb.rotation_world_to_cam)
               for ca, cb in zip(rig_a, rig_b))
    assert np.array_equal(axis_a.raw_timesteps, axis_b.raw_timesteps)


def test_no_branches_constant_born_count():
    gt, _, _ = generate_scene(small_spec(n_branch_events=0))
    born = (gt.radii > 0.0).sum(axis=1)
    assert np.all(born == born[0])


def test_branches_emerge_with_zero_radius():
    gt, _, _ = generate_scene(small_spec())
    late = gt.birth_time > 0.0
    assert late.any()
    assert np.all(gt.radii[0, late] == 0.0)


def test_monotone_volume_property_sweep():
    rng = np.random.default_rng(0)
    for _ in range(25):
        spec = small_spec(seed=int(rng.integers(0, 10_000)),
                          n_branch_events=int(rng.integers(0, 3)),
                          n_gaussians=int(rng.integers(6, 20)),
                          growth_curve=("linear", "smoothstep")[int(rng.integers(2))])
        gt, _, _ = generate_scene(spec)
        vol = gt.volumes()
        assert np.all(np.diff(vol) >= -1e-15)
        # per-point radii never decrease after birth
        assert np.all(np.diff(gt.radii, axis=0) >= -1e-15)


def test_reverse_time_volume_non_increasing():
    gt, _, _ = generate_scene(small_spec())
    reversed_vol = gt.volumes()[::-1]
    assert np.all(np.diff(reversed_vol) <= 1e-15)


def test_points_inside_foreground_box():
    gt, _, _ = generate_scene(small_spec())
    flat = gt.positions.reshape(-1, 3)
    assert gt.foreground_box.contains(flat).all()
    assert gt.scene_bounds.contains_box(gt.foreground_box)
    # backdrop sits outside the foreground box
    assert not gt.foreground_box.contains(gt.backdrop.centers).any()


def test_supervision_includes_endpoints():
    _, _, axis = generate_scene(small_spec(n_timesteps=8, supervised_stride=2))
    assert axis.supervised_indices[0] == 0
    assert axis.supervised_indices[-1] == axis.t_index == 7
    assert axis.normalized[axis.t_index] == 1.0


def test_zero_radius_point_contributes_nothing():
    gt, rig, _ = generate_scene(small_spec())
    unborn = gt.radii[0] == 0.0
    assert unborn.any()
    gs_all = gaussians_at(gt, 0)
    n_fg = gt.positions.shape[1]
    keep = np.concatenate([~unborn, np.ones(len(gs_all) - n_fg, dtype=bool)])
    gs_without = GaussianSet(
        gs_all.centers[keep], gs_all.rotations[keep], gs_all.log_scales[keep],
        gs_all.opacity_logits[keep], gs_all.colors[keep],
        gs_all.foreground_mask[keep])
    cfg = splat.RenderConfig(dilation=0.0)
    a = splat.render_brute_force(gs_all, rig[0], background=(1, 1, 1), cfg=cfg)
    b = splat.render_brute_force(gs_without, rig[0], background=(1, 1, 1), cfg=cfg)
    assert np.array_equal(a.pixels, b.pixels)


def test_render_dataset_layout_and_roundtrip(tmp_path):
    spec = small_spec()
    gt, rig, axis = generate_scene(spec)
    ds = render_dataset(gt, rig, axis, spec, tmp_path)
    assert len(ds.images) == spec.n_timesteps * spec.camera_count
    assert (tmp_path / "cameras.json").exists()
    assert (tmp_path / "times.json").exists()
    assert (tmp_path / "ground_truth.json").exists()
    assert (tmp_path / "images" / "t0" / "cam0.png").exists()
    assert (tmp_path / "masks" / "t0" / "cam0.png").exists()

    loaded = io.load_dataset(tmp_path)
    assert len(loaded.images) == len(ds.images)
    assert loaded.holdout_cameras == ds.holdout_cameras
    assert np.array_equal(loaded.time_axis.raw_timesteps, axis.raw_timesteps)

    # re-rendering from the written ground truth reproduces the PNG bytes
    gt2 = load_ground_truth(tmp_path / "ground_truth.json")
    cfg = splat.RenderConfig(dilation=spec.dilation)
    img = splat.render_brute_force(gaussians_at(gt2, 1), rig[1],
                                   background=spec.background, cfg=cfg)
    expected = io.encode_srgb_u8(img.pixels)
    from PIL import Image as PILImage
    with PILImage.open(tmp_path / "images" / "t1" / "cam1.png") as im:
        written = np.asarray(im.convert("RGB"))
    assert np.array_equal(expected, written)


def test_gaussian_count_masks_match_spec():
    gt, _, _ = generate_scene(small_spec(n_gaussians=12))
    assert gt.positions.shape[1] == 12
    gs = gaussians_at(gt, 0)
    assert gs.foreground_mask.sum() == 12
    assert (~gs.foreground_mask).sum() == len(gt.backdrop)

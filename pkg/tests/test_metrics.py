import numpy as np
import pytest

from growflow.core import Box, Camera, Image, TimeAxis, TimedDataset
from growflow.metrics import (
    EvalReport, GrowthTrajectory, MetricsError, build_report,
    chamfer_per_timestep, chamfer_tracking, psnr, ssim,
)


def test_psnr_identical_images_capped():
    img = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert psnr(img, img) == 99.0


def test_psnr_uniform_error():
    a = np.full((10, 10, 3), 0.5)
    b = a + 0.1
    assert psnr(a, b) == pytest.approx(20.0)


def test_psnr_mask_selects_matching_region():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(8, 8, 3))
    b = a.copy()
    b[4:, :, :] = rng.uniform(size=(4, 8, 3))
    mask = np.zeros((8, 8), dtype=bool)
    mask[:4] = True
    assert psnr(a, b, mask=mask) == 99.0
    assert psnr(a, b) < 99.0


def test_psnr_empty_mask_rejected():
    a = np.zeros((4, 4, 3))
    with pytest.raises(MetricsError):
        psnr(a, a, mask=np.zeros((4, 4), dtype=bool))


def test_psnr_strictly_decreasing_in_mse():
    a = np.full((12, 12, 3), 0.5)
    values = [psnr(a, a + d) for d in (0.01, 0.02, 0.05, 0.1)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_ssim_identical_is_one():
    img = np.random.default_rng(2).uniform(size=(16, 16, 3))
    assert ssim(img, img) == pytest.approx(1.0)


def test_ssim_negation_of_checkerboard_is_negative():
    i, j = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
    board = ((i + j) % 2).astype(float)
    a = np.repeat(board[:, :, None], 3, axis=2)
    assert ssim(a, 1.0 - a) < 0.0


def test_ssim_tiny_noise_close_to_one():
    rng = np.random.default_rng(3)
    a = np.full((16, 16, 3), 0.5)
    b = a + rng.uniform(-1e-6, 1e-6, a.shape)
    assert ssim(a, b) > 0.999999


def test_ssim_undersized_rejected():
    a = np.zeros((8, 8, 3))
    with pytest.raises(MetricsError):
        ssim(a, a)


def test_ssim_bounded():
    rng = np.random.default_rng(4)
    for _ in range(5):
        a = rng.uniform(size=(12, 12, 3))
        b = rng.uniform(size=(12, 12, 3))
        v = ssim(a, b)
        assert -1.0 <= v <= 1.0


# ---------------------------------------------------------------------------
# chamfer


def _traj(centers, times=None):
    centers = np.asarray(centers, float)
    t = np.arange(centers.shape[0]) if times is None else times
    return GrowthTrajectory(np.asarray(t, float) / max(len(t) - 1, 1),
                            np.arange(centers.shape[0]), centers,
                            np.arange(centers.shape[1]))


def test_chamfer_exact_match_is_zero():
    gt = np.random.default_rng(5).uniform(size=(4, 6, 3))
    assert chamfer_tracking(_traj(gt.copy()), gt) == 0.0


def test_chamfer_constant_offset():
    gt = np.zeros((3, 1, 3))
    pred = gt + np.array([0.1, 0.0, 0.0])
    assert chamfer_tracking(_traj(pred), gt) == pytest.approx(0.1)


def test_chamfer_mean_of_pairs():
    gt = np.zeros((3, 2, 3))
    gt[:, 1, 0] = 10.0  # separate the two tracks
    pred = gt.copy()
    pred[:, 0, 1] += 0.1
    pred[:, 1, 1] += 0.3
    assert chamfer_tracking(_traj(pred), gt) == pytest.approx(0.2)


def test_chamfer_excludes_last_timestep():
    gt = np.zeros((3, 1, 3))
    pred = gt.copy()
    pred[2, 0, 0] = 100.0  # error only at the final timestep
    assert chamfer_tracking(_traj(pred), gt) == 0.0


def test_chamfer_permutation_invariant():
    rng = np.random.default_rng(6)
    gt = rng.uniform(size=(4, 5, 3))
    pred = gt + rng.normal(scale=0.01, size=gt.shape)
    perm = rng.permutation(5)
    a = chamfer_tracking(_traj(pred), gt)
    b = chamfer_tracking(_traj(pred[:, perm, :]), gt)
    assert a == pytest.approx(b)


def test_chamfer_tie_breaks_to_lowest_index():
    gt = np.zeros((2, 2, 3))
    gt[:, 1, :] = 0.0  # two identical ground-truth points at t0
    gt[1, 0, 0] = 1.0  # they diverge later
    gt[1, 1, 0] = -1.0
    pred = np.zeros((2, 1, 3))
    pred[1, 0, 0] = 1.0  # follows point 0
    assert chamfer_tracking(_traj(pred), gt) == pytest.approx(0.0)
    per_t = chamfer_per_timestep(_traj(pred), gt)
    assert per_t[1] == pytest.approx(0.0)


def test_chamfer_empty_ground_truth_rejected():
    with pytest.raises(MetricsError):
        chamfer_tracking(_traj(np.zeros((2, 1, 3))), np.zeros((2, 0, 3)))


# ---------------------------------------------------------------------------
# report assembly


def _mini_dataset(rng):
    cam = Camera(np.eye(3), np.array([0.0, 0.0, 3.0]), 8.0, 8.0, 6.0, 6.0, 12, 12)
    cams = [cam, cam]
    axis = TimeAxis(np.array([0, 1, 2]), 2, np.array([0, 2]))
    images = {(t, c): Image(rng.uniform(size=(12, 12, 3)))
              for t in range(3) for c in range(2)}
    box = Box([-1, -1, -1], [1, 1, 1])
    return TimedDataset(cameras=cams, images=images, masks=None, time_axis=axis,
                        scene_bounds=box, foreground_box=box,
                        holdout_cameras=[1])


def test_build_report_rows_and_splits():
    rng = np.random.default_rng(7)
    ds = _mini_dataset(rng)

    def render_fn(ti, ci):
        return ds.images[(ti, ci)]

    report = build_report(ds, render_fn)
    # |times - 1| x |held-out cameras| rows, last timestep absent
    assert len(report.rows) == 2 * 1
    assert all(r.raw_timestep != 2 for r in report.rows)
    assert [r.is_interpolated for r in report.rows] == [False, True]
    assert report.aggregates["training"]["psnr_db"] == 99.0
    assert report.aggregates["combined"]["n_rows"] == 2


def test_build_report_combined_is_weighted_mean():
    rng = np.random.default_rng(8)
    ds = _mini_dataset(rng)
    other = {k: Image(np.clip(v.pixels + rng.normal(scale=0.05, size=v.pixels.shape),
                              0, 1))
             for k, v in ds.images.items()}

    def render_fn(ti, ci):
        return other[(ti, ci)]

    rep = build_report(ds, render_fn)
    agg = rep.aggregates
    n_t, n_i = agg["training"]["n_rows"], agg["interpolation"]["n_rows"]
    want = (agg["training"]["psnr_db"] * n_t + agg["interpolation"]["psnr_db"] * n_i) / (n_t + n_i)
    assert agg["combined"]["psnr_db"] == pytest.approx(want)


def test_build_report_deterministic_and_serializable():
    rng = np.random.default_rng(9)
    ds = _mini_dataset(rng)

    def render_fn(ti, ci):
        return ds.images[(ti, ci)]

    a = build_report(ds, render_fn)
    b = build_report(ds, render_fn)
    assert a.to_tsv() == b.to_tsv()
    assert a.to_json() == b.to_json()
    assert isinstance(a, EvalReport)


def test_build_report_requires_holdout():
    rng = np.random.default_rng(10)
    ds = _mini_dataset(rng)
    ds.holdout_cameras = []
    with pytest.raises(MetricsError):
        build_report(ds, lambda ti, ci: ds.images[(ti, ci)])

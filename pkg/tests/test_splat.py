import numpy as np
import pytest

from growflow import splat
from growflow.core import Camera, GaussianSet, normalize_quaternion
from growflow.diff import ParameterStore, finite_difference_check
from growflow.splat import (
    RenderConfig, RenderStats, project, render, render_brute_force,
    render_with_grads,
)

SIG95 = float(np.log(0.95 / 0.05))  # opacity logit for sigma(o) = 0.95


def make_camera(width=4, height=4, fx=4.0, fy=4.0, cx=None, cy=None):
    return Camera(np.eye(3), np.zeros(3), fx, fy,
                  cx if cx is not None else width / 2.0,
                  cy if cy is not None else height / 2.0, width, height)


def make_set(centers, log_scales=None, opacity=0.6, colors=None, rotations=None):
    centers = np.atleast_2d(np.asarray(centers, float))
    n = len(centers)
    if log_scales is None:
        log_scales = np.zeros((n, 3))
    if colors is None:
        colors = np.tile([0.8, 0.4, 0.2], (n, 1))
    if rotations is None:
        rotations = np.tile([1.0, 0, 0, 0], (n, 1))
    logit = np.log(opacity / (1 - opacity))
    return GaussianSet(centers, rotations, np.asarray(log_scales, float),
                       np.full(n, logit), np.asarray(colors, float),
                       np.ones(n, dtype=bool))


def random_scene(rng, n, width=8, height=8):
    cam = Camera(np.eye(3), np.zeros(3), 6.0, 6.0, width / 2, height / 2,
                 width, height)
    centers = np.stack([
        rng.uniform(-1.5, 1.5, n), rng.uniform(-1.5, 1.5, n),
        rng.uniform(0.5, 4.0, n)], axis=1)
    gs = GaussianSet(
        centers,
        normalize_quaternion(rng.normal(size=(n, 4))),
        rng.uniform(-2.0, 0.0, (n, 3)),
        rng.uniform(-2.0, 3.0, n),
        rng.uniform(0.0, 1.0, (n, 3)),
        np.ones(n, dtype=bool),
    )
    return gs, cam


# ---------------------------------------------------------------------------
# projection


def test_project_on_axis_example():
    cam = make_camera(width=64, height=64, fx=100.0, fy=100.0, cx=32.0, cy=32.0)
    gs = make_set([[0.0, 0.0, 2.0]], log_scales=[[np.log(0.1)] * 3])
    p = project(gs, 0, cam, dilation=0.0)
    assert p is not None
    assert np.allclose(p.mean2d, [32.0, 32.0])
    assert np.allclose(p.cov2d, 25.0 * np.eye(2), atol=1e-9)
    assert p.depth == pytest.approx(2.0)


def test_project_behind_camera_culled():
    cam = make_camera()
    gs = make_set([[0.0, 0.0, -1.0]])
    assert project(gs, 0, cam) is None


def test_project_depth_scaling():
    cam = make_camera(width=64, height=64, fx=100.0, fy=100.0)
    near = make_set([[0.0, 0.0, 2.0]], log_scales=[[np.log(0.1)] * 3])
    far = make_set([[0.0, 0.0, 4.0]], log_scales=[[np.log(0.1)] * 3])
    p_near = project(near, 0, cam, dilation=0.0)
    p_far = project(far, 0, cam, dilation=0.0)
    assert np.allclose(p_far.cov2d * 4.0, p_near.cov2d, rtol=1e-12)


def test_project_footprint_cull():
    cam = make_camera(width=8, height=8, fx=8.0, fy=8.0)
    # tiny gaussian far off-image
    gs = make_set([[50.0, 0.0, 1.0]], log_scales=[[np.log(0.01)] * 3])
    assert project(gs, 0, cam) is None


# ---------------------------------------------------------------------------
# rendering


def test_render_empty_set_is_background():
    cam = make_camera()
    img = render(GaussianSet.empty(), cam, background=(0.2, 0.4, 0.6))
    assert np.allclose(img.pixels, [0.2, 0.4, 0.6])


def test_render_single_gaussian_alpha_half():
    cam = make_camera(width=4, height=4, fx=4.0, fy=4.0, cx=2.5, cy=2.5)
    gs = make_set([[0.0, 0.0, 2.0]], opacity=0.5, colors=[[1.0, 0.0, 0.0]])
    img = render(gs, cam, background=(0.0, 0.0, 0.0))
    assert np.allclose(img.pixels[2, 2], [0.5, 0.0, 0.0], atol=1e-12)


def test_render_two_coincident_gaussians():
    cam = make_camera(width=4, height=4, fx=4.0, fy=4.0, cx=2.5, cy=2.5)
    centers = [[0.0, 0.0, 2.0], [0.0, 0.0, 2.5]]
    gs = make_set(centers, opacity=0.5,
                  colors=[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    img = render(gs, cam, background=(0.0, 0.0, 0.0))
    assert np.allclose(img.pixels[2, 2], [0.5, 0.0, 0.25], atol=1e-12)


def test_render_matches_brute_force_randomized():
    rng = np.random.default_rng(42)
    for _ in range(10):
        n = int(rng.integers(1, 33))
        gs, cam = random_scene(rng, n, width=int(rng.integers(4, 17)),
                               height=int(rng.integers(4, 17)))
        a = render(gs, cam, background=(1, 1, 1))
        b = render_brute_force(gs, cam, background=(1, 1, 1))
        assert np.abs(a.pixels - b.pixels).max() < 1e-6


def test_render_pixel_range_convexity():
    rng = np.random.default_rng(3)
    gs, cam = random_scene(rng, 20)
    img = render(gs, cam, background=(1, 1, 1))
    assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0


def test_render_permutation_invariance():
    rng = np.random.default_rng(5)
    gs, cam = random_scene(rng, 12)
    perm = rng.permutation(12)
    gs2 = GaussianSet(gs.centers[perm], gs.rotations[perm], gs.log_scales[perm],
                      gs.opacity_logits[perm], gs.colors[perm],
                      gs.foreground_mask[perm])
    a = render(gs, cam, background=(0, 0, 0))
    b = render(gs2, cam, background=(0, 0, 0))
    assert np.array_equal(a.pixels, b.pixels)


def test_render_translation_invariance():
    rng = np.random.default_rng(6)
    gs, cam = random_scene(rng, 8)
    shift = np.array([0.3, -1.2, 0.7])
    gs2 = GaussianSet(gs.centers + shift, gs.rotations, gs.log_scales,
                      gs.opacity_logits, gs.colors, gs.foreground_mask)
    cam2 = Camera(cam.rotation_world_to_cam,
                  cam.translation - cam.rotation_world_to_cam @ shift,
                  cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)
    a = render(gs, cam, background=(1, 1, 1))
    b = render(gs2, cam2, background=(1, 1, 1))
    assert np.abs(a.pixels - b.pixels).max() < 1e-10


def test_render_singular_covariance_skipped():
    cam = make_camera()
    gs = make_set([[0.0, 0.0, 2.0]], log_scales=[[0.0, -20.0, -20.0]])
    stats = RenderStats()
    img = render(gs, cam, background=(1, 1, 1), cfg=RenderConfig(dilation=0.0),
                 stats=stats)
    assert stats.n_skipped_singular == 1
    assert np.allclose(img.pixels, 1.0)


def test_gaussian_far_outside_frustum_is_background():
    cam = make_camera()
    gs = make_set([[100.0, 100.0, 50.0]])
    img = render_brute_force(gs, cam, background=(0.5, 0.5, 0.5))
    assert np.allclose(img.pixels, 0.5)


# ---------------------------------------------------------------------------
# gradients


def _grad_f(camera, target, loss_kind="l1", freeze=False):
    def f(store):
        gs = GaussianSet(store.value("centers"), store.value("rotations"),
                         store.value("log_scales"), store.value("opacity_logits"),
                         store.value("colors"), np.ones(len(store.value("centers")),
                                                        dtype=bool))
        loss, grads = render_with_grads(gs, camera, target, loss_kind,
                                        background=(0.1, 0.1, 0.1),
                                        freeze_appearance=freeze)
        for name, g in grads.items():
            store.flat_grad(name)[:] += g.reshape(-1)
        return loss
    return f


def _two_gaussian_store(rng):
    store = ParameterStore()
    store.add("centers", np.array([[0.2, -0.1, 2.0], [-0.3, 0.2, 2.6]]))
    store.add("rotations", normalize_quaternion(rng.normal(size=(2, 4))))
    store.add("log_scales", rng.uniform(-0.3, 0.3, (2, 3)))
    store.add("opacity_logits", np.array([0.4, -0.2]))
    store.add("colors", np.array([[0.9, 0.2, 0.1], [0.2, 0.3, 0.8]]))
    return store


def test_render_grads_match_finite_differences():
    rng = np.random.default_rng(9)
    cam = make_camera(width=4, height=4, fx=4.0, fy=4.0)
    tgt_scene, _ = random_scene(rng, 3, width=4, height=4)
    target = render(tgt_scene, cam, background=(0.3, 0.3, 0.3)).pixels
    store = _two_gaussian_store(rng)
    report = finite_difference_check(_grad_f(cam, target), store, step=1e-6)
    assert report.max_rel_error < 1e-4


def test_render_grads_zero_at_optimum():
    rng = np.random.default_rng(10)
    cam = make_camera(width=4, height=4)
    store = _two_gaussian_store(rng)
    gs = GaussianSet(store.value("centers"), store.value("rotations"),
                     store.value("log_scales"), store.value("opacity_logits"),
                     store.value("colors"), np.ones(2, dtype=bool))
    target = render(gs, cam, background=(0.1, 0.1, 0.1)).pixels
    loss, grads = render_with_grads(gs, cam, target, "l1",
                                    background=(0.1, 0.1, 0.1))
    assert loss == 0.0
    for g in grads.values():
        assert np.all(g == 0.0)


def test_render_grads_freeze_appearance():
    rng = np.random.default_rng(11)
    cam = make_camera(width=4, height=4)
    tgt_scene, _ = random_scene(rng, 3, width=4, height=4)
    target = render(tgt_scene, cam, background=(0.1, 0.1, 0.1)).pixels
    store = _two_gaussian_store(rng)
    gs = GaussianSet(store.value("centers"), store.value("rotations"),
                     store.value("log_scales"), store.value("opacity_logits"),
                     store.value("colors"), np.ones(2, dtype=bool))
    _, grads = render_with_grads(gs, cam, target, "l1",
                                 background=(0.1, 0.1, 0.1),
                                 freeze_appearance=True)
    assert np.all(grads["opacity_logits"] == 0.0)
    assert np.all(grads["colors"] == 0.0)
    assert np.any(grads["centers"] != 0.0)


def test_render_grads_mixed_loss_fd():
    rng = np.random.default_rng(12)
    cam = make_camera(width=12, height=12, fx=10.0, fy=10.0)
    tgt_scene, _ = random_scene(rng, 3, width=12, height=12)
    target = render(tgt_scene, cam, background=(0.3, 0.3, 0.3)).pixels
    store = _two_gaussian_store(rng)
    report = finite_difference_check(_grad_f(cam, target, loss_kind="mix"),
                                     store, step=1e-6, sample=40,
                                     rng=np.random.default_rng(0))
    assert report.max_rel_error < 1e-4

"""A first look at the splat renderer.

Builds a handful of Gaussians by hand, projects one of them through the
camera to inspect its screen-space footprint, renders the scene, and checks
the image against the brute-force oracle.
"""
import numpy as np

from growflow.core import Camera, GaussianSet, normalize_quaternion
from growflow.io import write_png
from growflow.splat import RenderConfig, project, render, render_brute_force

rng = np.random.default_rng(7)

# a camera at the origin looking down +z
cam = Camera(np.eye(3), np.zeros(3), fx=96.0, fy=96.0, cx=48.0, cy=48.0,
             width=96, height=96)

# three colored blobs at different depths plus a big dim backdrop disk
centers = np.array([
    [-0.35, 0.15, 2.0],
    [0.25, -0.1, 2.6],
    [0.05, 0.3, 3.4],
    [0.0, 0.0, 6.0],
])
gs = GaussianSet(
    centers=centers,
    rotations=normalize_quaternion(rng.normal(size=(4, 4))),
    log_scales=np.log([[0.18] * 3, [0.2] * 3, [0.25] * 3, [1.6, 1.6, 0.3]]),
    opacity_logits=np.array([1.5, 1.0, 1.0, 2.0]),
    colors=np.array([[0.9, 0.25, 0.2], [0.2, 0.55, 0.9],
                     [0.95, 0.8, 0.25], [0.45, 0.45, 0.5]]),
    foreground_mask=np.array([True, True, True, False]),
)

# what does the first Gaussian look like on screen?
p = project(gs, 0, cam)
print("projected mean (px):", p.mean2d.round(2))
print("projected covariance (px^2):\n", p.cov2d.round(3))
print("depth:", round(p.depth, 3), " peak alpha:", round(p.alpha_peak, 3))

img = render(gs, cam, background=(1.0, 1.0, 1.0))
oracle = render_brute_force(gs, cam, background=(1.0, 1.0, 1.0))
print("max |render - brute force| =", np.abs(img.pixels - oracle.pixels).max())

write_png("demo_splat.png", img.pixels)
print("wrote demo_splat.png")

# culling behavior: behind the camera and far off-frame both disappear
behind = GaussianSet(np.array([[0.0, 0.0, -1.0]]), [[1, 0, 0, 0]],
                     np.zeros((1, 3)), [2.0], [[1, 0, 0]], [True])
print("behind-camera gaussian projects to:", project(behind, 0, cam))

stats_cfg = RenderConfig()
print("dilation default (px^2):", stats_cfg.dilation)

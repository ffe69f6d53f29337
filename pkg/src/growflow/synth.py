"""Procedural growing-plant scenes with exact ground truth.

Stems elongate along smooth 3D curves while per-point radii ramp up; branch
events spawn new points whose radii grow from exactly zero, so played in
reverse the scene shrinks smoothly to nothing new — total activated volume
is monotonically non-decreasing forward in time.  A camera orbit rig and
brute-force renders of every (timestep, camera) pair provide the posed
images, and the point trajectories are written alongside as the tracking
oracle.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io, splat
from .core import Box, Camera, GaussianSet, GrowflowError, TimeAxis, TimedDataset

__all__ = ["SceneSpec", "GroundTruth", "generate_scene", "render_dataset",
           "gaussians_at", "load_ground_truth", "write_ground_truth"]

OPACITY_LOGIT = float(np.log(0.95 / 0.05))   # activated opacity 0.95
MIN_RADIUS = 1e-8                            # render floor for unborn points


@dataclass(frozen=True)
class SceneSpec:
    n_stems: int = 2
    n_branch_events: int = 1
    n_gaussians: int = 16        # total foreground points (stems + branches)
    n_timesteps: int = 8
    camera_count: int = 16
    image_size: int = 64
    growth_curve: str = "smoothstep"   # linear | smoothstep
    seed: int = 0
    background: tuple = (1.0, 1.0, 1.0)
    supervised_stride: int = 2
    holdout_every: int = 10
    dilation: float = 0.0        # px^2 used when rendering the dataset

    def __post_init__(self):
        if min(self.n_stems, self.n_gaussians, self.n_timesteps,
               self.camera_count) < 1 or self.image_size < 16:
            raise GrowflowError("invalid scene spec")
        if self.growth_curve not in ("linear", "smoothstep"):
            raise GrowflowError(f"unknown growth curve '{self.growth_curve}'")


@dataclass
class GroundTruth:
    """Per-timestep point states plus the static backdrop."""

    times: np.ndarray           # (T,) normalized
    positions: np.ndarray       # (T, N, 3)
    radii: np.ndarray           # (T, N)
    colors: np.ndarray          # (N, 3)
    birth_time: np.ndarray      # (N,) normalized time radius becomes positive
    backdrop: GaussianSet       # static, outside the foreground box
    foreground_box: Box
    scene_bounds: Box

    def volumes(self) -> np.ndarray:
        return (self.radii ** 3).sum(axis=1)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _quad_curve(base, ctrl, tip, u):
    """Quadratic Bezier through base/ctrl/tip, u in [0, 1] (arc parameter)."""
    u = np.asarray(u)[..., None]
    return ((1 - u) ** 2 * base + 2 * u * (1 - u) * ctrl + u ** 2 * tip)


def _orbit_cameras(count: int, image_size: int, radius: float, height: float,
                   target: np.ndarray) -> list[Camera]:
    cams = []
    focal = image_size * 1.25
    for k in range(count):
        az = 2.0 * np.pi * k / count
        eye = np.array([radius * np.cos(az), radius * np.sin(az), height])
        forward = target - eye
        forward = forward / np.linalg.norm(forward)
        world_up = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, world_up)
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        cams.append(Camera(R, -R @ eye, focal, focal, image_size / 2.0,
                           image_size / 2.0, image_size, image_size))
    return cams


def generate_scene(spec: SceneSpec):
    """Build the ground truth trajectory, camera rig, and time axis.

    Deterministic in ``spec.seed``; point identity is stable across time
    (index i is the same material point at every timestep after birth).
    """
    rng = np.random.default_rng([spec.seed, 0x5CE7E])
    T = spec.n_timesteps
    times = np.linspace(0.0, 1.0, T) if T > 1 else np.array([1.0])

    n_branch_pts = 0
    if spec.n_branch_events > 0:
        n_branch_pts = max(spec.n_branch_events,
                           int(round(spec.n_gaussians * 0.2)))
        n_branch_pts = min(n_branch_pts, spec.n_gaussians - spec.n_stems)
    n_stem_pts = spec.n_gaussians - n_branch_pts
    per_stem = np.full(spec.n_stems, n_stem_pts // spec.n_stems)
    per_stem[: n_stem_pts % spec.n_stems] += 1

    # growth progress s(t): stems start partially grown and reach 1 at t=1
    import os
    s0 = float(os.environ.get("GROWFLOW_S0", "0.3"))
    prog = times if spec.growth_curve == "linear" else _smoothstep(times)
    s = s0 + (1.0 - s0) * prog

    positions = np.zeros((T, spec.n_gaussians, 3))
    radii = np.zeros((T, spec.n_gaussians))
    colors = np.zeros((spec.n_gaussians, 3))
    birth = np.zeros(spec.n_gaussians)

    stems = []
    idx = 0
    for si in range(spec.n_stems):
        count = int(per_stem[si])
        ang = 2.0 * np.pi * si / spec.n_stems + rng.uniform(-0.3, 0.3)
        base = np.array([0.22 * np.cos(ang), 0.22 * np.sin(ang), 0.02])
        tip = base + np.array([rng.uniform(-0.25, 0.25),
                               rng.uniform(-0.25, 0.25),
                               rng.uniform(0.75, 0.95)])
        ctrl = 0.5 * (base + tip) + np.array([rng.uniform(-0.2, 0.2),
                                              rng.uniform(-0.2, 0.2), 0.0])
        u = (np.arange(count) + 1.0) / count
        r_fin = rng.uniform(0.035, 0.06, count)
        rows = np.arange(idx, idx + count)
        stems.append((rows, base, ctrl, tip, u))
        for k in range(T):
            positions[k, rows] = _quad_curve(base, ctrl, tip, u * s[k])
            # radius ramps once the advancing tip passes the point's station,
            # with a floor so stem points are born at t=0
            ramp = np.clip((s[k] - u * s0) / 0.6, 0.0, 1.0)
            radii[k, rows] = r_fin * (0.35 + 0.65 * ramp)
        colors[rows] = np.stack([rng.uniform(0.10, 0.25, count),
                                 rng.uniform(0.45, 0.75, count),
                                 rng.uniform(0.10, 0.30, count)], axis=1)
        birth[rows] = 0.0
        idx += count

    # branch events: sub-stems sprouting mid-sequence from a parent point
    if n_branch_pts:
        per_event = np.full(spec.n_branch_events,
                            n_branch_pts // spec.n_branch_events)
        per_event[: n_branch_pts % spec.n_branch_events] += 1
        for ev in range(spec.n_branch_events):
            count = int(per_event[ev])
            if count == 0:
                continue
            rows = np.arange(idx, idx + count)
            host_rows, base, ctrl, tip, host_u = stems[ev % len(stems)]
            attach_u = float(rng.uniform(0.35, 0.65))
            # keep the emergence window spanning supervised anchors so the
            # shrink-to-zero transition is observed at both ends
            t_event = float(rng.uniform(0.45, 0.55))
            direction = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
                                  rng.uniform(0.3, 0.6)])
            direction = 0.35 * direction / np.linalg.norm(direction)
            v = (np.arange(count) + 1.0) / count
            r_fin = rng.uniform(0.03, 0.05, count)
            for k in range(T):
                anchor = _quad_curve(base, ctrl, tip, np.array([attach_u * s[k]]))[0]
                sb = _smoothstep((times[k] - t_event) / (1.0 - t_event)) \
                    if times[k] > t_event else 0.0
                # a short zero-radius stub before emergence keeps unborn
                # points spatially distinct from their parent stem, so the
                # position-queried field can address them separately
                positions[k, rows] = anchor + np.outer(v * (0.18 + 0.82 * sb),
                                                       direction)
                ramp = np.clip((sb - v * 0.3) / 0.6, 0.0, 1.0)
                radii[k, rows] = r_fin * ramp
            colors[rows] = np.stack([rng.uniform(0.3, 0.5, count),
                                     rng.uniform(0.5, 0.8, count),
                                     rng.uniform(0.1, 0.2, count)], axis=1)
            first_alive = (radii[:, rows] > 0.0).argmax(axis=0)
            birth[rows] = times[first_alive]
            idx += count

    # backdrop: a floor plane of large static Gaussians outside the foreground box
    grid = np.linspace(-0.55, 0.55, 3)
    gx, gy = np.meshgrid(grid, grid)
    n_floor = gx.size
    floor_centers = np.stack([gx.ravel(), gy.ravel(), np.full(n_floor, -0.16)], axis=1)
    floor_rng = np.random.default_rng([spec.seed, 0xF100])
    backdrop = GaussianSet(
        centers=floor_centers,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n_floor, 1)),
        log_scales=np.tile(np.log([0.26, 0.26, 0.02]), (n_floor, 1)),
        opacity_logits=np.full(n_floor, OPACITY_LOGIT),
        colors=0.45 + 0.2 * floor_rng.uniform(size=(n_floor, 1)) * np.ones((1, 3)),
        foreground_mask=np.zeros(n_floor, dtype=bool),
    )

    pad = 0.12
    lo = positions.reshape(-1, 3).min(axis=0) - pad
    hi = positions.reshape(-1, 3).max(axis=0) + pad
    foreground_box = Box(lo, hi)
    scene_lo = np.minimum(lo, floor_centers.min(axis=0) - 0.6)
    scene_hi = np.maximum(hi, floor_centers.max(axis=0) + 0.6)
    scene_bounds = Box(scene_lo, scene_hi)

    gt = GroundTruth(times=times, positions=positions, radii=radii,
                     colors=colors, birth_time=birth, backdrop=backdrop,
                     foreground_box=foreground_box, scene_bounds=scene_bounds)

    rig = _orbit_cameras(spec.camera_count, spec.image_size, radius=2.3,
                         height=0.75, target=np.array([0.0, 0.0, 0.45]))

    sup = list(range(0, T, spec.supervised_stride))
    if sup[-1] != T - 1:
        sup.append(T - 1)
    axis = TimeAxis(np.arange(T), T - 1, np.array(sup))
    return gt, rig, axis


def gaussians_at(gt: GroundTruth, k: int) -> GaussianSet:
    """Scene state at timestep index k: foreground points as isotropic
    Gaussians plus the static backdrop."""
    n = gt.positions.shape[1]
    fg = GaussianSet(
        centers=gt.positions[k],
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.tile(np.log(np.maximum(gt.radii[k], MIN_RADIUS))[:, None], (1, 3)),
        opacity_logits=np.full(n, OPACITY_LOGIT),
        colors=gt.colors,
        foreground_mask=np.ones(n, dtype=bool),
    )
    bd = gt.backdrop
    return GaussianSet(
        np.concatenate([fg.centers, bd.centers]),
        np.concatenate([fg.rotations, bd.rotations]),
        np.concatenate([fg.log_scales, bd.log_scales]),
        np.concatenate([fg.opacity_logits, bd.opacity_logits]),
        np.concatenate([fg.colors, bd.colors]),
        np.concatenate([fg.foreground_mask, bd.foreground_mask]),
    )


def write_ground_truth(path, gt: GroundTruth) -> None:
    doc = {
        "times": gt.times.tolist(),
        "positions": gt.positions.tolist(),
        "radii": gt.radii.tolist(),
        "colors": gt.colors.tolist(),
        "birth_time": gt.birth_time.tolist(),
        "backdrop": {
            "centers": gt.backdrop.centers.tolist(),
            "rotations": gt.backdrop.rotations.tolist(),
            "log_scales": gt.backdrop.log_scales.tolist(),
            "opacity_logits": gt.backdrop.opacity_logits.tolist(),
            "colors": gt.backdrop.colors.tolist(),
        },
        "foreground_box": gt.foreground_box.to_json(),
        "scene_bounds": gt.scene_bounds.to_json(),
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_ground_truth(path) -> GroundTruth:
    with open(path) as f:
        doc = json.load(f)
    bd = doc["backdrop"]
    n = len(bd["centers"])
    backdrop = GaussianSet(
        np.array(bd["centers"]), np.array(bd["rotations"]),
        np.array(bd["log_scales"]), np.array(bd["opacity_logits"]),
        np.array(bd["colors"]), np.zeros(n, dtype=bool))
    return GroundTruth(
        times=np.array(doc["times"]), positions=np.array(doc["positions"]),
        radii=np.array(doc["radii"]), colors=np.array(doc["colors"]),
        birth_time=np.array(doc["birth_time"]), backdrop=backdrop,
        foreground_box=Box.from_json(doc["foreground_box"]),
        scene_bounds=Box.from_json(doc["scene_bounds"]))


def render_dataset(gt: GroundTruth, rig: list[Camera], axis: TimeAxis,
                   spec: SceneSpec, out_dir) -> TimedDataset:
    """Render every (timestep, camera) pair with the brute-force path and
    write the dataset directory (images, masks, rig, times, ground truth)."""
    cfg = splat.RenderConfig(dilation=spec.dilation)
    bg = np.asarray(spec.background, dtype=np.float64)
    images = {}
    masks = {}
    for k in range(axis.n_timesteps):
        gs = gaussians_at(gt, k)
        fg_only = GaussianSet(
            gs.centers[gs.foreground_mask], gs.rotations[gs.foreground_mask],
            gs.log_scales[gs.foreground_mask], gs.opacity_logits[gs.foreground_mask],
            gs.colors[gs.foreground_mask], gs.foreground_mask[gs.foreground_mask])
        for ci, cam in enumerate(rig):
            images[(k, ci)] = splat.render_brute_force(gs, cam, background=bg, cfg=cfg)
            masks[(k, ci)] = splat.render_alpha(fg_only, cam, cfg=cfg) > 0.01
    holdout = list(range(0, len(rig), spec.holdout_every))
    dataset = TimedDataset(
        cameras=rig, images=images, masks=masks, time_axis=axis,
        scene_bounds=gt.scene_bounds, foreground_box=gt.foreground_box,
        holdout_cameras=holdout, background=bg)
    out = Path(out_dir)
    io.write_dataset(out, dataset)
    write_ground_truth(out / "ground_truth.json", gt)
    return dataset

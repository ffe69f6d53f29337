"""Domain types shared by all modules: Gaussian primitives, cameras,
images, the time axis, scene bounds, and small quaternion/covariance
utilities.  All types are immutable values after construction and safe to
share across workers."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "GrowflowError", "DegenerateRotationError", "GaussianSet", "Camera",
    "TimeAxis", "TimedDataset", "Image", "Box",
    "normalize_quaternion", "quaternion_to_rotation", "covariance_from",
]


class GrowflowError(Exception):
    """Base class for pipeline errors."""


class DegenerateRotationError(GrowflowError):
    """Quaternion too close to zero to normalize."""


# ---------------------------------------------------------------------------
# quaternion / covariance utilities


def normalize_quaternion(q) -> np.ndarray:
    """Return q/|q| with the first nonzero component made non-negative.

    Works on a single 4-vector or an (N, 4) batch.  The sign convention
    keeps checkpoints deterministic under the double cover.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    qb = np.atleast_2d(q)
    norms = np.linalg.norm(qb, axis=1)
    if np.any(norms <= 1e-12):
        raise DegenerateRotationError("quaternion norm below 1e-12")
    # leave already-unit rows untouched so the operation is exactly idempotent
    scale = np.where(np.abs(norms - 1.0) < 1e-12, 1.0, norms)
    out = qb / scale[:, None]
    nz = np.abs(out) > 0.0
    first = np.argmax(nz, axis=1)
    sign = np.sign(out[np.arange(len(out)), first])
    sign[sign == 0.0] = 1.0
    out = out * sign[:, None]
    return out[0] if single else out


def quaternion_to_rotation(q) -> np.ndarray:
    """Unit quaternion(s) (w, x, y, z) to rotation matrix/matrices."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    qb = np.atleast_2d(q)
    norms = np.linalg.norm(qb, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise GrowflowError("quaternion not unit-norm within 1e-9")
    w, x, y, z = qb[:, 0], qb[:, 1], qb[:, 2], qb[:, 3]
    R = np.empty((len(qb), 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def covariance_from(q, log_s) -> np.ndarray:
    """Sigma = R diag(exp(log_s))^2 R^T for unit quaternion q."""
    R = quaternion_to_rotation(q)
    s = np.exp(np.asarray(log_s, dtype=np.float64))
    if R.ndim == 2:
        M = R * s[None, :]
        return M @ M.T
    M = R * s[:, None, :]
    return M @ np.swapaxes(M, -1, -2)


# ---------------------------------------------------------------------------
# scene types


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in scene units."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))
        if np.any(self.hi < self.lo):
            raise GrowflowError("box hi < lo")

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.all((p >= self.lo) & (p <= self.hi), axis=1)

    def contains_box(self, other: "Box") -> bool:
        return bool(np.all(other.lo >= self.lo) and np.all(other.hi <= self.hi))

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def to_json(self):
        return {"min": self.lo.tolist(), "max": self.hi.tolist()}

    @staticmethod
    def from_json(d) -> "Box":
        return Box(np.array(d["min"]), np.array(d["max"]))


@dataclass(frozen=True)
class GaussianSet:
    """Scene state: per-primitive geometry plus time-invariant appearance.

    Scales are stored as logs and opacities as logits so that activated
    values stay in range under unconstrained gradient updates.
    """

    centers: np.ndarray        # (N, 3)
    rotations: np.ndarray      # (N, 4) quaternions, wxyz
    log_scales: np.ndarray     # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray         # (N, 3) linear RGB
    foreground_mask: np.ndarray  # (N,) bool

    def __post_init__(self):
        for name in ("centers", "rotations", "log_scales", "opacity_logits", "colors"):
            object.__setattr__(self, name,
                               np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        object.__setattr__(self, "foreground_mask",
                           np.ascontiguousarray(self.foreground_mask, dtype=bool))
        n = len(self.centers)
        shapes = {
            "centers": (n, 3), "rotations": (n, 4), "log_scales": (n, 3),
            "opacity_logits": (n,), "colors": (n, 3), "foreground_mask": (n,),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise GrowflowError(f"GaussianSet.{name}: expected {want}, got {got}")

    def __len__(self):
        return len(self.centers)

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def normalized(self) -> "GaussianSet":
        """Copy with unit, sign-canonicalized quaternions."""
        if len(self) == 0:
            return self
        return replace(self, rotations=normalize_quaternion(self.rotations))

    @staticmethod
    def empty() -> "GaussianSet":
        return GaussianSet(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                           np.zeros(0), np.zeros((0, 3)), np.zeros(0, dtype=bool))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; x_cam = R x_world + t, +z forward, +y down in image."""

    rotation_world_to_cam: np.ndarray  # (3, 3)
    translation: np.ndarray            # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.rotation_world_to_cam, dtype=np.float64)
        object.__setattr__(self, "rotation_world_to_cam", R)
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64))
        if self.width < 1 or self.height < 1:
            raise GrowflowError("camera dimensions must be >= 1")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GrowflowError("rotation_world_to_cam must be orthonormal, det +1")

    def world_to_cam(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation_world_to_cam.T + self.translation

    def to_json(self):
        return {
            "rotation": self.rotation_world_to_cam.tolist(),
            "translation": self.translation.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @staticmethod
    def from_json(d) -> "Camera":
        return Camera(np.array(d["rotation"]), np.array(d["translation"]),
                      d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"])


@dataclass(frozen=True)
class TimeAxis:
    """Dataset timesteps mapped affinely onto normalized time [0, 1].

    ``t_index`` marks the fully grown timestep (the reverse-time training
    anchor); ``supervised_indices`` are the timesteps whose images are used
    during dynamics training.  The fully grown timestep is always the last
    supervised one and normalizes to 1.
    """

    raw_timesteps: np.ndarray        # (T,) ints, strictly increasing
    t_index: int
    supervised_indices: np.ndarray   # indices into raw_timesteps

    def __post_init__(self):
        raw = np.asarray(self.raw_timesteps, dtype=np.int64)
        sup = np.asarray(self.supervised_indices, dtype=np.int64)
        object.__setattr__(self, "raw_timesteps", raw)
        object.__setattr__(self, "supervised_indices", sup)
        if len(raw) < 2 or np.any(np.diff(raw) <= 0):
            raise GrowflowError("raw_timesteps must be strictly increasing, length >= 2")
        if len(sup) < 1 or np.any(np.diff(sup) <= 0):
            raise GrowflowError("supervised_indices must be strictly increasing")
        if sup[0] != 0 or sup[-1] != self.t_index or self.t_index != len(raw) - 1:
            raise GrowflowError("supervision must span the full axis and end at t_index")

    @property
    def normalized(self) -> np.ndarray:
        raw = self.raw_timesteps.astype(np.float64)
        return (raw - raw[0]) / (raw[-1] - raw[0])

    @property
    def n_timesteps(self) -> int:
        return len(self.raw_timesteps)

    @property
    def supervised_times(self) -> np.ndarray:
        return self.normalized[self.supervised_indices]

    def to_normalized(self, index: int) -> float:
        return float(self.normalized[index])

    def to_json(self):
        return {
            "raw_timesteps": self.raw_timesteps.tolist(),
            "t_index": int(self.t_index),
            "supervised_indices": self.supervised_indices.tolist(),
        }

    @staticmethod
    def from_json(d) -> "TimeAxis":
        return TimeAxis(np.array(d["raw_timesteps"]), d["t_index"],
                        np.array(d["supervised_indices"]))


@dataclass(frozen=True)
class Image:
    """Linear-light RGB image with values in [0, 1]."""

    pixels: np.ndarray  # (H, W, 3)

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        object.__setattr__(self, "pixels", p)
        if p.ndim != 3 or p.shape[2] != 3:
            raise GrowflowError(f"image must be (H, W, 3), got {p.shape}")
        if not np.isfinite(p).all():
            raise GrowflowError("image contains non-finite values")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass
class TimedDataset:
    """Posed images indexed by (timestep index, camera index)."""

    cameras: list[Camera]
    images: dict[tuple[int, int], Image]
    masks: dict[tuple[int, int], np.ndarray] | None
    time_axis: TimeAxis
    scene_bounds: Box
    foreground_box: Box
    holdout_cameras: list[int] = field(default_factory=list)
    background: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64)
        if not self.scene_bounds.contains_box(self.foreground_box):
            raise GrowflowError("foreground_box must lie inside scene_bounds")
        for (ti, ci), img in self.images.items():
            cam = self.cameras[ci]
            if (img.height, img.width) != (cam.height, cam.width):
                raise GrowflowError(f"image ({ti},{ci}) does not match camera dims")

    @property
    def train_cameras(self) -> list[int]:
        held = set(self.holdout_cameras)
        return [i for i in range(len(self.cameras)) if i not in held]

"""Evaluation metrics and reports: PSNR (full and masked), SSIM, and the
trajectory-tracking Chamfer distance against ground-truth point tracks.

:func:`ssim` is written against the dispatching primitives so it can also
serve as a differentiable loss term when handed tape nodes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import diff
from .core import GrowflowError, Image, TimedDataset

__all__ = [
    "MetricsError", "psnr", "ssim", "GrowthTrajectory",
    "chamfer_tracking", "chamfer_per_timestep", "EvalRow", "EvalReport",
    "build_report",
]

PSNR_CAP_DB = 99.0


class MetricsError(GrowflowError):
    """Metric called outside its contract."""


def _pixels(x):
    if isinstance(x, Image):
        return x.pixels
    return x


def psnr(pred, gt, mask: np.ndarray | None = None) -> float:
    """10*log10(1/MSE) on [0, 1] images, capped at the 99 dB sentinel.

    ``mask`` restricts the mean to true pixels (all channels kept).
    """
    a, b = np.asarray(_pixels(pred), float), np.asarray(_pixels(gt), float)
    if a.shape != b.shape:
        raise MetricsError("psnr: image dimensions differ")
    err2 = (a - b) ** 2
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if not m.any():
            raise MetricsError("psnr: mask selects no pixels")
        err2 = err2[m]
    mse = err2.mean()
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k2 = np.outer(k, k)
    return k2 / k2.sum()


_SSIM_WINDOW = _gaussian_window()
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def ssim(pred, gt):
    """Mean local SSIM: 11x11 Gaussian window (sigma 1.5), C1=(0.01)^2,
    C2=(0.03)^2 on [0, 1] range, per channel then averaged over the valid
    region.  Accepts arrays or tape nodes for ``pred``."""
    a = _pixels(pred)
    b = np.asarray(_pixels(gt), dtype=np.float64)
    shape = diff.value_of(a).shape
    if shape[0] < 11 or shape[1] < 11:
        raise MetricsError("ssim: images must be at least 11x11")
    if shape != b.shape:
        raise MetricsError("ssim: image dimensions differ")
    w = _SSIM_WINDOW
    mu1 = diff.filter2d_valid(a, w)
    mu2 = diff.filter2d_valid(b, w)
    s11 = diff.filter2d_valid(a * a, w) - mu1 * mu1
    s22 = diff.filter2d_valid(b * b, w) - mu2 * mu2
    s12 = diff.filter2d_valid(a * b, w) - mu1 * mu2
    num = (2.0 * mu1 * mu2 + _SSIM_C1) * (2.0 * s12 + _SSIM_C2)
    den = (mu1 * mu1 + mu2 * mu2 + _SSIM_C1) * (s11 + s22 + _SSIM_C2)
    return (num / den).mean()


# ---------------------------------------------------------------------------
# tracking Chamfer distance


@dataclass(frozen=True)
class GrowthTrajectory:
    """Per-primitive center curves over a time grid (foreground subset)."""

    times: np.ndarray            # (T,) normalized times
    raw_timesteps: np.ndarray    # (T,) dataset timesteps
    centers: np.ndarray          # (T, N, 3)
    gaussian_indices: np.ndarray  # (N,) indices into the full scene

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, float))
        object.__setattr__(self, "raw_timesteps", np.asarray(self.raw_timesteps))
        object.__setattr__(self, "centers", np.asarray(self.centers, float))
        object.__setattr__(self, "gaussian_indices",
                           np.asarray(self.gaussian_indices, dtype=np.int64))


def _match_first_frame(pred0: np.ndarray, gt0: np.ndarray) -> np.ndarray:
    # argmin breaks distance ties toward the lowest ground-truth index
    d2 = ((pred0[:, None, :] - gt0[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def chamfer_per_timestep(predicted: GrowthTrajectory, gt_points: np.ndarray) -> np.ndarray:
    """Per-timestep mean distance between each predicted center and the
    ground-truth point it matched at the first timestep."""
    gt = np.asarray(gt_points, dtype=np.float64)
    if gt.ndim != 3 or gt.shape[1] == 0:
        raise MetricsError("chamfer: ground truth is empty")
    if predicted.centers.shape[1] == 0:
        raise MetricsError("chamfer: no foreground trajectories")
    if gt.shape[0] != predicted.centers.shape[0]:
        raise MetricsError("chamfer: time grids differ")
    match = _match_first_frame(predicted.centers[0], gt[0])
    diffs = predicted.centers - gt[:, match, :]
    return np.linalg.norm(diffs, axis=2).mean(axis=1)


def chamfer_tracking(predicted: GrowthTrajectory, gt_points: np.ndarray) -> float:
    """Tracking Chamfer distance: match once at the first timestep, follow
    the matched points, average over time with the last timestep excluded
    (when more than one timestep is given)."""
    per_t = chamfer_per_timestep(predicted, gt_points)
    if len(per_t) > 1:
        per_t = per_t[:-1]
    return float(per_t.mean())


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalRow:
    timestep_index: int
    raw_timestep: int
    camera_index: int
    is_interpolated: bool
    psnr_db: float
    ssim: float
    cd: float | None = None


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def to_tsv(self) -> str:
        lines = ["timestep\traw\tcamera\tsplit\tpsnr_db\tssim\tcd"]
        for r in self.rows:
            split = "interpolation" if r.is_interpolated else "training"
            cd = "" if r.cd is None else f"{r.cd:.6f}"
            lines.append(f"{r.timestep_index}\t{r.raw_timestep}\t{r.camera_index}"
                         f"\t{split}\t{r.psnr_db:.4f}\t{r.ssim:.6f}\t{cd}")
        lines.append("")
        for split, agg in self.aggregates.items():
            cd = "" if agg.get("cd") is None else f"\tcd={agg['cd']:.6f}"
            lines.append(f"# {split}: n={agg['n_rows']}\tpsnr_db={agg['psnr_db']:.4f}"
                         f"\tssim={agg['ssim']:.6f}{cd}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {
            "rows": [vars(r) for r in self.rows],
            "aggregates": self.aggregates,
        }
        return json.dumps(doc, indent=1)


def _aggregate(rows: list[EvalRow], cd_by_t: dict[int, float] | None) -> dict:
    agg = {
        "n_rows": len(rows),
        "psnr_db": float(np.mean([r.psnr_db for r in rows])) if rows else None,
        "ssim": float(np.mean([r.ssim for r in rows])) if rows else None,
    }
    if cd_by_t is not None and rows:
        ts = sorted({r.timestep_index for r in rows})
        agg["cd"] = float(np.mean([cd_by_t[t] for t in ts]))
    else:
        agg["cd"] = None
    return agg


def build_report(dataset: TimedDataset, render_fn,
                 trajectory: GrowthTrajectory | None = None,
                 gt_tracks: np.ndarray | None = None) -> EvalReport:
    """Render every (evaluation time, held-out camera) pair and assemble the
    per-timestep and aggregate metric report.

    Evaluation times are all dataset timesteps except the last.  Rows are
    split by supervised vs interpolated timesteps; ``render_fn(ti, ci)``
    must return the linear image for timestep index ``ti`` seen from camera
    ``ci``.
    """
    axis = dataset.time_axis
    holdout = list(dataset.holdout_cameras)
    if not holdout:
        raise MetricsError("build_report: no held-out cameras designated")
    eval_times = list(range(axis.n_timesteps - 1))
    supervised = set(axis.supervised_indices.tolist())

    cd_by_t = None
    if trajectory is not None and gt_tracks is not None:
        # the trajectory is expected on the dataset's timestep grid
        if not np.array_equal(trajectory.raw_timesteps,
                              axis.raw_timesteps[:len(trajectory.raw_timesteps)]):
            raise MetricsError("chamfer: trajectory grid does not match dataset")
        per_t = chamfer_per_timestep(trajectory, gt_tracks)
        cd_by_t = {k: float(per_t[k]) for k in range(len(per_t))}

    rows: list[EvalRow] = []
    for ti in eval_times:
        for ci in holdout:
            pred = render_fn(ti, ci)
            gt = dataset.images[(ti, ci)]
            mask = dataset.masks.get((ti, ci)) if dataset.masks else None
            rows.append(EvalRow(
                timestep_index=ti,
                raw_timestep=int(axis.raw_timesteps[ti]),
                camera_index=ci,
                is_interpolated=ti not in supervised,
                psnr_db=psnr(pred, gt, mask=mask),
                ssim=float(diff.value_of(ssim(_pixels(pred), gt.pixels))),
                cd=None if cd_by_t is None else cd_by_t.get(ti),
            ))

    report = EvalReport(rows=rows)
    train_rows = [r for r in rows if not r.is_interpolated]
    interp_rows = [r for r in rows if r.is_interpolated]
    report.aggregates = {
        "training": _aggregate(train_rows, cd_by_t),
        "interpolation": _aggregate(interp_rows, cd_by_t),
        "combined": _aggregate(rows, cd_by_t),
    }
    return report

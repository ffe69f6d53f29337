"""Differentiable forward splatting: perspective projection of 3D Gaussians
through the local linearization of the camera map, then front-to-back alpha
compositing per pixel.

All geometry math is written against the dispatching primitives in
:mod:`growflow.diff`, so the same code path serves plain-array rendering and
tape-recorded rendering with gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diff, metrics
from .core import Camera, GaussianSet, GrowflowError, Image
from .diff import Node, ParameterStore, Tape, backward, value_of

__all__ = [
    "RenderConfig", "RenderStats", "ProjectedGaussian", "project",
    "render", "render_brute_force", "render_with_grads", "render_alpha",
    "composite_rows", "loss_node", "active_pixel_indices", "cull_and_order",
]

ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0


@dataclass(frozen=True)
class RenderConfig:
    """Rasterization knobs.  The effective cull radius is never below the
    level at which a suppressed contribution could reach the compositing
    skip threshold, so culling is exactly invisible in the output."""

    dilation: float = 0.3          # px^2 added to cov2d (anti-aliasing)
    near_plane: float = 0.01       # scene units
    footprint_sigma: float = 3.0   # minimum cull radius, in sigmas
    cond_limit: float = 1e12       # cov2d condition number before skip


@dataclass
class RenderStats:
    n_culled_near: int = 0
    n_culled_footprint: int = 0
    n_skipped_singular: int = 0
    n_input: int = 0


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray    # (2,) pixels
    cov2d: np.ndarray     # (2, 2) pixels^2, dilated
    depth: float          # camera-frame z
    color: np.ndarray     # (3,)
    alpha_peak: float
    source_index: int


# ---------------------------------------------------------------------------
# projection


def _project_rows(centers, rotations, log_scales, opacity_logits, camera: Camera,
                  dilation: float):
    """EWA projection of a batch of Gaussians (Node- or array-valued).

    Returns screen means, the dilated 2D covariance entries (a, b, c for
    [[a, b], [b, c]]), camera-frame depth, and activated peak opacity.
    """
    R = camera.rotation_world_to_cam
    X = centers @ R.T + camera.translation
    x, y, z = X[:, 0], X[:, 1], X[:, 2]
    iz = 1.0 / z
    mx = camera.fx * x * iz + camera.cx
    my = camera.fy * y * iz + camera.cy

    qn = rotations / diff.sqrt((rotations * rotations).sum(axis=1, keepdims=True))
    w, qx, qy, qz = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    rot = diff.stack([
        1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - w * qz), 2 * (qx * qz + w * qy),
        2 * (qx * qy + w * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - w * qx),
        2 * (qx * qz - w * qy), 2 * (qy * qz + w * qx), 1 - 2 * (qx * qx + qy * qy),
    ], axis=-1).reshape((-1, 3, 3))
    scales = diff.exp(log_scales)
    M = rot * scales.reshape((-1, 1, 3))
    cov3 = M @ diff.swapaxes(M, -1, -2)
    cov_cam = R @ cov3 @ R.T

    n = value_of(centers).shape[0]
    zeros = np.zeros(n)
    jr0 = diff.stack([camera.fx * iz, zeros, -camera.fx * x * iz * iz], axis=-1)
    jr1 = diff.stack([zeros, camera.fy * iz, -camera.fy * y * iz * iz], axis=-1)
    J = diff.stack([jr0, jr1], axis=1)                      # (n, 2, 3)
    cov2 = J @ cov_cam @ diff.swapaxes(J, -1, -2)           # (n, 2, 2)
    a = cov2[:, 0, 0] + dilation
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + dilation

    peak = diff.sigmoid(opacity_logits)
    return mx, my, a, b, c, z, peak


def _cull_radius_factor(peak: np.ndarray, footprint_sigma: float) -> np.ndarray:
    # radius (in sigmas of the largest principal axis) beyond which the
    # contribution is guaranteed under the compositing skip threshold
    needed = np.sqrt(2.0 * np.log(np.maximum(255.0 * peak, 1.0 + 1e-12)))
    return np.maximum(footprint_sigma, needed)


def cull_and_order(gaussians: GaussianSet, camera: Camera, cfg: RenderConfig,
                   footprint_cull: bool = True,
                   stats: RenderStats | None = None):
    """Evaluate culling on plain values and return surviving indices in
    stable depth order (ties broken by source index), plus per-survivor
    conservative screen bounding boxes."""
    stats = stats if stats is not None else RenderStats()
    n = len(gaussians)
    stats.n_input = n
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 4)), stats
    mx, my, a, b, c, z, peak = _project_rows(
        gaussians.centers, gaussians.rotations, gaussians.log_scales,
        gaussians.opacity_logits, camera, cfg.dilation)

    keep = z > cfg.near_plane
    stats.n_culled_near = int(n - keep.sum())

    det = a * c - b * b
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(mid * mid - det, 0.0))
    lam_max = mid + disc
    lam_min = mid - disc
    with np.errstate(divide="ignore", invalid="ignore"):
        bad = ~np.isfinite(det) | (det <= 0.0) | (lam_min <= 0.0) \
            | (lam_max > cfg.cond_limit * lam_min)
    stats.n_skipped_singular = int((keep & bad).sum())
    keep &= ~bad

    if footprint_cull:
        radius = _cull_radius_factor(peak, cfg.footprint_sigma) * np.sqrt(np.maximum(lam_max, 0.0))
        nearest_x = np.clip(mx, 0.0, camera.width)
        nearest_y = np.clip(my, 0.0, camera.height)
        d2 = (mx - nearest_x) ** 2 + (my - nearest_y) ** 2
        visible = (d2 <= radius * radius) & (peak >= ALPHA_SKIP)
        stats.n_culled_footprint = int((keep & ~visible).sum())
        keep &= visible

    idx = np.flatnonzero(keep)
    order = idx[np.lexsort((idx, z[idx]))]
    radius_all = _cull_radius_factor(peak, cfg.footprint_sigma) * np.sqrt(np.maximum(lam_max, 1e-30))
    bboxes = np.stack([
        mx[order] - radius_all[order], mx[order] + radius_all[order],
        my[order] - radius_all[order], my[order] + radius_all[order],
    ], axis=1)
    return order, bboxes, stats


def project(gaussians: GaussianSet, index: int, camera: Camera,
            dilation: float = 0.3, near_plane: float = 0.01,
            footprint_sigma: float = 3.0) -> ProjectedGaussian | None:
    """Project one Gaussian; returns None when culled (behind the near plane
    or with its screen footprint entirely off-image)."""
    cfg = RenderConfig(dilation=dilation, near_plane=near_plane,
                       footprint_sigma=footprint_sigma)
    sub = GaussianSet(
        gaussians.centers[index:index + 1], gaussians.rotations[index:index + 1],
        gaussians.log_scales[index:index + 1], gaussians.opacity_logits[index:index + 1],
        gaussians.colors[index:index + 1], gaussians.foreground_mask[index:index + 1])
    order, _, _ = cull_and_order(sub, camera, cfg)
    if len(order) == 0:
        return None
    mx, my, a, b, c, z, peak = _project_rows(
        sub.centers, sub.rotations, sub.log_scales, sub.opacity_logits,
        camera, dilation)
    return ProjectedGaussian(
        mean2d=np.array([mx[0], my[0]]),
        cov2d=np.array([[a[0], b[0]], [b[0], c[0]]]),
        depth=float(z[0]),
        color=sub.colors[0].copy(),
        alpha_peak=float(peak[0]),
        source_index=index,
    )


# ---------------------------------------------------------------------------
# compositing


def _composite_forward(mx, my, ia, ib, ic, peak, pix_u, pix_v):
    """Alpha matrix and transmittances for ordered Gaussians over pixels."""
    dx = pix_u[None, :] - mx[:, None]
    dy = pix_v[None, :] - my[:, None]
    m2 = dx * dx
    m2 *= ia[:, None]
    tmp = dx * dy
    tmp *= -2.0 * ib[:, None]
    m2 += tmp
    np.multiply(dy, dy, out=tmp)
    tmp *= ic[:, None]
    m2 += tmp
    m2 *= -0.5
    alpha = np.exp(m2, out=m2)
    alpha *= peak[:, None]
    dead = alpha >= ALPHA_CLAMP
    np.minimum(alpha, ALPHA_CLAMP, out=alpha)
    below = alpha < ALPHA_SKIP
    alpha[below] = 0.0
    dead |= below
    one_m = 1.0 - alpha
    inclusive = np.cumprod(one_m, axis=0)
    transmit = inclusive / one_m                        # exclusive product
    weight = alpha * transmit                           # (K, P)
    return dx, dy, alpha, dead, one_m, transmit, weight, inclusive[-1]


def _composite_out(weight, col_v, bg, total_transmit):
    return weight.T @ col_v + bg[None, :] * total_transmit[:, None]


def composite_image(mx, my, ia, ib, ic, peak, col, pix_u, pix_v, background):
    """Fused front-to-back compositing over a pixel set -> (P, 3).

    A single tape primitive with a hand-derived backward pass: the (K, P)
    working set is touched a fixed number of times instead of once per
    recorded elementwise op.
    """
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy()
    tape = diff._tape_of(mx, my, ia, ib, ic, peak, col)
    mxv, myv, iav, ibv, icv = (value_of(x) for x in (mx, my, ia, ib, ic))
    peakv, colv = value_of(peak), value_of(col)
    dx, dy, alpha, dead, one_m, transmit, weight, total = _composite_forward(
        mxv, myv, iav, ibv, icv, peakv, pix_u, pix_v)
    out_v = _composite_out(weight, colv, bg, total)
    if tape is None:
        return out_v
    out = Node(out_v, tape)

    def bw(g):
        # d out / d col and the per-(gaussian, pixel) weight gradient
        if isinstance(col, Node):
            diff._accum(col, weight @ g)
        dw = colv @ g.T                            # (K, P)
        g_bg = g @ bg                              # (P,)
        # suffix sum over later gaussians for the transmittance chain
        dww = dw * weight
        suffix = np.cumsum(dww[::-1], axis=0)[::-1]
        suffix -= dww
        suffix += (g_bg * total)[None, :]
        suffix /= one_m
        d_alpha = dw * transmit
        d_alpha -= suffix
        d_alpha[dead] = 0.0                        # clamp/skip gates
        if isinstance(peak, Node):
            diff._accum(peak, np.einsum("kp,kp->k", d_alpha, alpha)
                        / np.where(peakv == 0, 1.0, peakv))
        d_m2 = d_alpha
        d_m2 *= alpha
        d_m2 *= -0.5                               # alpha = peak*exp(-m2/2)
        if isinstance(ia, Node):
            diff._accum(ia, np.einsum("kp,kp,kp->k", d_m2, dx, dx))
        if isinstance(ib, Node):
            diff._accum(ib, -2.0 * np.einsum("kp,kp,kp->k", d_m2, dx, dy))
        if isinstance(ic, Node):
            diff._accum(ic, np.einsum("kp,kp,kp->k", d_m2, dy, dy))
        if isinstance(mx, Node) or isinstance(my, Node):
            sx = np.einsum("kp,kp->k", d_m2, dx)
            sy = np.einsum("kp,kp->k", d_m2, dy)
            if isinstance(mx, Node):
                diff._accum(mx, -2.0 * (iav * sx - ibv * sy))
            if isinstance(my, Node):
                diff._accum(my, -2.0 * (icv * sy - ibv * sx))

    tape._record("composite", out, diff._make_bw(bw, mx, my, ia, ib, ic, peak, col))
    return out


def composite_rows(centers, rotations, log_scales, opacity_logits, colors,
                   camera: Camera, background, cfg: RenderConfig,
                   order: np.ndarray, pix_u: np.ndarray, pix_v: np.ndarray):
    """Front-to-back compositing of the ordered Gaussians over an arbitrary
    pixel set.  Inputs may be Nodes or arrays; output is (P, 3)."""
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    n_pix = len(pix_u)
    if len(order) == 0:
        return np.tile(bg, (n_pix, 1))

    mu = diff.take(centers, order)
    q = diff.take(rotations, order)
    ls = diff.take(log_scales, order)
    op = diff.take(opacity_logits, order)
    col = diff.take(colors, order)

    mx, my, a, b, c, _z, peak = _project_rows(mu, q, ls, op, camera, cfg.dilation)
    det = a * c - b * b
    ia = c / det
    ib = b / det
    ic = a / det
    return composite_image(mx, my, ia, ib, ic, peak, col, pix_u, pix_v, bg)


def _pixel_grid(camera: Camera):
    u = np.arange(camera.width, dtype=np.float64) + 0.5
    v = np.arange(camera.height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    return uu.reshape(-1), vv.reshape(-1)


def active_pixel_indices(bboxes: np.ndarray, camera: Camera) -> np.ndarray:
    """Flat indices of pixels inside the union of the screen bounding boxes."""
    canvas = np.zeros((camera.height, camera.width), dtype=bool)
    for x0, x1, y0, y1 in bboxes:
        c0 = max(int(np.floor(x0 - 0.5)), 0)
        c1 = min(int(np.ceil(x1 - 0.5)) + 1, camera.width)
        r0 = max(int(np.floor(y0 - 0.5)), 0)
        r1 = min(int(np.ceil(y1 - 0.5)) + 1, camera.height)
        if c1 > c0 and r1 > r0:
            canvas[r0:r1, c0:c1] = True
    return np.flatnonzero(canvas.reshape(-1))


def render(gaussians: GaussianSet, camera: Camera, background=(1.0, 1.0, 1.0),
           cfg: RenderConfig | None = None, stats: RenderStats | None = None) -> Image:
    """Render with near-plane and screen-footprint culling."""
    cfg = cfg or RenderConfig()
    order, _, _ = cull_and_order(gaussians, camera, cfg, footprint_cull=True,
                                 stats=stats)
    u, v = _pixel_grid(camera)
    flat = composite_rows(gaussians.centers, gaussians.rotations,
                          gaussians.log_scales, gaussians.opacity_logits,
                          gaussians.colors, camera, background, cfg, order, u, v)
    return Image(flat.reshape(camera.height, camera.width, 3))


def render_brute_force(gaussians: GaussianSet, camera: Camera,
                       background=(1.0, 1.0, 1.0), cfg: RenderConfig | None = None,
                       stats: RenderStats | None = None) -> Image:
    """Oracle renderer: identical contract to :func:`render` but with no
    footprint culling — every in-front Gaussian is evaluated at every pixel."""
    cfg = cfg or RenderConfig()
    order, _, _ = cull_and_order(gaussians, camera, cfg, footprint_cull=False,
                                 stats=stats)
    u, v = _pixel_grid(camera)
    flat = composite_rows(gaussians.centers, gaussians.rotations,
                          gaussians.log_scales, gaussians.opacity_logits,
                          gaussians.colors, camera, background, cfg, order, u, v)
    return Image(flat.reshape(camera.height, camera.width, 3))


def render_alpha(gaussians: GaussianSet, camera: Camera,
                 cfg: RenderConfig | None = None) -> np.ndarray:
    """Accumulated coverage map 1 - prod(1 - alpha), shape (H, W)."""
    cfg = cfg or RenderConfig()
    order, _, _ = cull_and_order(gaussians, camera, cfg)
    if len(order) == 0:
        return np.zeros((camera.height, camera.width))
    u, v = _pixel_grid(camera)
    mu = gaussians.centers[order]
    mx, my, a, b, c, _z, peak = _project_rows(
        mu, gaussians.rotations[order], gaussians.log_scales[order],
        gaussians.opacity_logits[order], camera, cfg.dilation)
    det = a * c - b * b
    dx = u[None, :] - mx[:, None]
    dy = v[None, :] - my[:, None]
    m2 = ((c / det)[:, None] * dx * dx - 2 * (b / det)[:, None] * dx * dy
          + (a / det)[:, None] * dy * dy)
    alpha = np.minimum(peak[:, None] * np.exp(-0.5 * m2), ALPHA_CLAMP)
    alpha[alpha < ALPHA_SKIP] = 0.0
    coverage = 1.0 - np.exp(np.log(1.0 - alpha).sum(axis=0))
    return coverage.reshape(camera.height, camera.width)


# ---------------------------------------------------------------------------
# losses


def loss_node(pred_active, pixel_idx: np.ndarray, target: np.ndarray,
              background, kind: str, ssim_lambda: float = 0.2):
    """Scalar photometric loss from compositing output over an active pixel
    subset.  ``kind`` is ``"l1"`` or ``"mix"`` ((1-l)*L1 + l*(1-SSIM))."""
    h, w, _ = target.shape
    tgt_flat = target.reshape(-1, 3)
    n_pix = h * w
    if kind == "l1":
        active_tgt = tgt_flat[pixel_idx]
        active_term = abs(pred_active - active_tgt).sum()
        rest = np.setdiff1d(np.arange(n_pix), pixel_idx, assume_unique=True)
        bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
        const_term = np.abs(bg[None, :] - tgt_flat[rest]).sum()
        return (active_term + const_term) / (3.0 * n_pix)
    if kind == "mix":
        full = diff.embed_rows(pred_active, pixel_idx, n_pix,
                               np.asarray(background, dtype=np.float64))
        l1 = abs(full - tgt_flat).mean()
        img = full.reshape((h, w, 3))
        ssim_val = metrics.ssim(img, target)
        return (1.0 - ssim_lambda) * l1 + ssim_lambda * (1.0 - ssim_val)
    raise GrowflowError(f"unknown loss kind '{kind}'")


def render_with_grads(gaussians: GaussianSet, camera: Camera, target,
                      loss_kind: str = "l1", *, background=(1.0, 1.0, 1.0),
                      ssim_lambda: float = 0.2, freeze_appearance: bool = False,
                      cfg: RenderConfig | None = None):
    """Render, compare against ``target``, and return (loss, gradients).

    Gradients are reported for all five parameter arrays; when
    ``freeze_appearance`` is set the opacity and color entries are exactly
    zero (those inputs are treated as constants).
    """
    cfg = cfg or RenderConfig()
    tgt = target.pixels if isinstance(target, Image) else np.asarray(target, dtype=np.float64)
    if tgt.shape != (camera.height, camera.width, 3):
        raise GrowflowError("target dimensions do not match camera")

    store = ParameterStore()
    store.add("centers", gaussians.centers)
    store.add("rotations", gaussians.rotations)
    store.add("log_scales", gaussians.log_scales)
    store.add("opacity_logits", gaussians.opacity_logits)
    store.add("colors", gaussians.colors)

    tape = Tape()
    mu = tape.leaf(store, "centers")
    q = tape.leaf(store, "rotations")
    ls = tape.leaf(store, "log_scales")
    if freeze_appearance:
        op, col = gaussians.opacity_logits, gaussians.colors
    else:
        op = tape.leaf(store, "opacity_logits")
        col = tape.leaf(store, "colors")

    order, _, _ = cull_and_order(gaussians, camera, cfg)
    u, v = _pixel_grid(camera)
    pred = composite_rows(mu, q, ls, op, col, camera, background, cfg, order, u, v)
    loss = loss_node(pred, np.arange(len(u)), tgt, background, loss_kind, ssim_lambda)
    if isinstance(loss, Node):
        loss_val = backward(tape, loss)
    else:  # everything culled: constant loss, zero gradients
        loss_val = float(loss)
    grads = {name: store.grad(name).copy() for name in store.names()}
    return loss_val, grads

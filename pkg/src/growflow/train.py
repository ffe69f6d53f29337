"""Three-stage optimization: static reconstruction of the fully grown
scene, backward-in-time boundary reconstruction with state caching, and
global optimization of a fresh velocity field over randomly sampled
supervised intervals.  Includes the Adam optimizer, time queries against
the trained model, and trajectory export.

Appearance (opacity, color) is frozen after the static stage; Gaussians
outside the foreground box are never touched again.  All randomness is
derived from the config seed, and gradient reductions run in a fixed
order, so stages are exactly reproducible.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import diff, field as vfield, splat
from .core import GaussianSet, GrowflowError, TimedDataset, normalize_quaternion
from .diff import ParameterStore, Tape, backward, value_of
from .field import FieldConfig, VelocityFieldParams
from .metrics import GrowthTrajectory
from .ode import GeomState, IntegrationOptions, integrate
from .splat import RenderConfig

__all__ = ["TrainConfig", "BoundaryCache", "AdamState", "adam_update",
           "init_static_gaussians", "static_stage", "boundary_stage",
           "global_stage", "query_time", "track_trajectory", "LogRow"]

GAUSSIAN_SEGMENTS = ("centers", "rotations", "log_scales", "opacity_logits", "colors")


@dataclass(frozen=True)
class TrainConfig:
    n_static: int = 30_000
    n_boundary: int = 300          # per supervised interval
    n_global: int = 30_000
    lr_grid: float = 1.6e-3
    lr_mlp: float = 1.6e-4
    lr_static: dict = dc_field(default_factory=lambda: {
        "centers": 1.6e-3, "rotations": 2e-3, "log_scales": 5e-3,
        "opacity_logits": 5e-2, "colors": 2.5e-2,
    })
    view_batch: int = 30
    ssim_lambda: float = 0.2
    seed: int = 0
    densify: str = "off"           # on | off
    skip_boundary: bool = False
    encoder_kind: str = "hexplane"
    color_flow: bool = False
    substeps: int = 8              # RK4 substeps per supervised interval
    n_init: int = 64               # static init count without seed points
    warm_start_global: bool = False
    densify_interval: int = 500
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005

    def __post_init__(self):
        if min(self.n_static, self.n_boundary, self.n_global, self.view_batch) < 1:
            raise GrowflowError("iteration counts and view batch must be >= 1")
        if self.lr_grid <= 0 or self.lr_mlp <= 0 or any(v <= 0 for v in self.lr_static.values()):
            raise GrowflowError("learning rates must be positive")
        if self.densify not in ("on", "off"):
            raise GrowflowError("densify must be 'on' or 'off'")


@dataclass
class BoundaryCache:
    """Per-timestep geometric snapshots, ordered from the fully grown state
    (index 0, normalized time 1) backward in time; appearance is shared via
    the referenced GaussianSet."""

    gaussians: GaussianSet          # frozen appearance + background rows
    snapshots: list[GeomState]
    times: np.ndarray               # (K,) normalized, descending
    raw_indices: np.ndarray         # (K,) timestep indices, matching times
    skip_boundary: bool = False

    def __post_init__(self):
        if len(self.snapshots) != len(self.times):
            raise GrowflowError("cache snapshots and times differ in length")


@dataclass
class LogRow:
    stage: str
    iteration: int
    interval: int
    loss: float
    wall_ms: float

    def to_tsv(self) -> str:
        return (f"{self.stage}\t{self.iteration}\t{self.interval}"
                f"\t{self.loss:.8f}\t{self.wall_ms:.3f}")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @staticmethod
    def for_store(store: ParameterStore) -> "AdamState":
        return AdamState(
            m={n: np.zeros(store.flat_value(n).size) for n in store.names()},
            v={n: np.zeros(store.flat_value(n).size) for n in store.names()},
        )


def adam_update(store: ParameterStore, group_rates: dict, step_index: int,
                state: AdamState) -> None:
    """One Adam step (first/second moments, bias correction, per-segment
    learning rates).  ``step_index`` is 1-based."""
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step_index
    c2 = 1.0 - b2 ** step_index
    for name in store.names():
        lr = group_rates[name]
        g = store.flat_grad(name)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = m / c1
        step /= np.sqrt(v / c2) + state.eps
        store.flat_value(name)[:] -= lr * step


def _decayed(rates: dict, it: int, total: int) -> dict:
    f = 0.1 ** (it / max(total, 1))
    return {k: v * f for k, v in rates.items()}


# ---------------------------------------------------------------------------
# shared rendering-loss plumbing


def _targets_at(dataset: TimedDataset, t_idx: int, cams) -> list[np.ndarray]:
    return [dataset.images[(t_idx, c)].pixels for c in cams]


def _batch(rng, dataset: TimedDataset, size: int) -> list[int]:
    pool = dataset.train_cameras
    return [pool[i] for i in rng.integers(0, len(pool), size)]


def _static_loss(tape, store, dataset, cams, t_idx, bg, cfg, ssim_lambda):
    leaves = {n: tape.leaf(store, n) for n in GAUSSIAN_SEGMENTS}
    current = GaussianSet(*(store.value(n) for n in GAUSSIAN_SEGMENTS),
                          foreground_mask=np.ones(len(store.value("centers")), bool))
    total = None
    for ci in cams:
        cam = dataset.cameras[ci]
        order, bboxes, _ = splat.cull_and_order(current, cam, cfg)
        idx = splat.active_pixel_indices(bboxes, cam)
        pu = (idx % cam.width) + 0.5
        pv = (idx // cam.width) + 0.5
        pred = splat.composite_rows(
            leaves["centers"], leaves["rotations"], leaves["log_scales"],
            leaves["opacity_logits"], leaves["colors"], cam, bg, cfg, order, pu, pv)
        target = dataset.images[(t_idx, ci)].pixels
        loss = splat.loss_node(pred, idx, target, bg, "mix", ssim_lambda)
        total = loss if total is None else total + loss
    return total * (1.0 / len(cams))


def _field_fn(params: VelocityFieldParams, arrays):
    color = params.config.color_flow

    def fn(comps, t):
        vel = vfield.eval_field(comps[0], t, params, arrays=arrays)
        out = (vel.d_center, vel.d_quat, vel.d_log_scale)
        return out + ((vel.d_color,) if color else ())
    return fn


def _assemble_scene(out_state: GeomState, gaussians: GaussianSet):
    """Concatenate foreground nodes with frozen background rows; returns the
    node arrays plus a plain-value GaussianSet in the same row order for
    cull planning."""
    bg_rows = np.flatnonzero(~gaussians.foreground_mask)
    idx = out_state.index
    vals = GaussianSet(
        np.concatenate([value_of(out_state.centers), gaussians.centers[bg_rows]]),
        np.concatenate([value_of(out_state.rotations), gaussians.rotations[bg_rows]]),
        np.concatenate([value_of(out_state.log_scales), gaussians.log_scales[bg_rows]]),
        np.concatenate([gaussians.opacity_logits[idx], gaussians.opacity_logits[bg_rows]]),
        np.concatenate([value_of(out_state.colors) if out_state.colors is not None
                        else gaussians.colors[idx], gaussians.colors[bg_rows]]),
        np.concatenate([np.ones(len(idx), bool), np.zeros(len(bg_rows), bool)]))
    centers = diff.concatenate([out_state.centers, gaussians.centers[bg_rows]], axis=0)
    rots = diff.concatenate([out_state.rotations, gaussians.rotations[bg_rows]], axis=0)
    lss = diff.concatenate([out_state.log_scales, gaussians.log_scales[bg_rows]], axis=0)
    if out_state.colors is not None:
        cols = diff.concatenate([out_state.colors, gaussians.colors[bg_rows]], axis=0)
    else:
        cols = vals.colors
    return vals, centers, rots, lss, cols


def _interval_loss(tape, store, params, gaussians, state0, t_from, t_to,
                   substeps, dataset, cams, t_idx, bg, cfg):
    arrays = vfield.leaves_for(params, tape, store)
    opts = IntegrationOptions(substeps=substeps, renormalize_quats=True)
    out, _ = integrate(_field_fn(params, arrays), state0, t_from, t_to, opts)
    vals, centers, rots, lss, cols = _assemble_scene(out, gaussians)
    total = None
    for ci in cams:
        cam = dataset.cameras[ci]
        order, bboxes, _ = splat.cull_and_order(vals, cam, cfg)
        idx = splat.active_pixel_indices(bboxes, cam)
        pu = (idx % cam.width) + 0.5
        pv = (idx // cam.width) + 0.5
        pred = splat.composite_rows(centers, rots, lss, vals.opacity_logits,
                                    cols, cam, bg, cfg, order, pu, pv)
        target = dataset.images[(t_idx, ci)].pixels
        loss = splat.loss_node(pred, idx, target, bg, "l1")
        total = loss if total is None else total + loss
    return total * (1.0 / len(cams))


# ---------------------------------------------------------------------------
# stage 1: static reconstruction


def init_static_gaussians(dataset: TimedDataset, config: TrainConfig,
                          seed_points: np.ndarray | None = None) -> GaussianSet:
    """Initial scene for the static stage: seed points jittered by 1% of the
    scene extent when available, else uniform in the foreground box."""
    rng = np.random.default_rng([config.seed, 11])
    extent = float(dataset.scene_bounds.extent.max())
    if seed_points is not None and len(seed_points) > 0:
        pts = np.asarray(seed_points, dtype=np.float64)
        pts = pts + rng.normal(scale=0.01 * extent, size=pts.shape)
    else:
        box = dataset.foreground_box
        pts = box.lo + rng.uniform(size=(config.n_init, 3)) * box.extent
    n = len(pts)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    nn = np.sqrt(d2.min(axis=1))
    cap = 0.2 * float(dataset.foreground_box.extent.mean())
    nn = np.clip(nn, 1e-4 * extent, max(cap, 1e-4 * extent))
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianSet(
        centers=pts,
        rotations=quats,
        log_scales=np.log(0.7 * nn)[:, None] * np.ones((1, 3)),
        opacity_logits=np.zeros(n),
        colors=np.full((n, 3), 0.5),
        foreground_mask=dataset.foreground_box.contains(pts),
    )


def _densify(gaussians: GaussianSet, grad_accum: np.ndarray, counts: np.ndarray,
             config: TrainConfig, extent: float, rng) -> GaussianSet:
    avg = grad_accum / np.maximum(counts, 1)
    scales = gaussians.scales.max(axis=1)
    hot = avg > config.densify_grad_threshold
    clone = hot & (scales <= 0.01 * extent)
    split = hot & (scales > 0.01 * extent)
    keep = gaussians.opacities >= config.prune_opacity

    parts = {name: [getattr(gaussians, name)[keep]] for name in
             GAUSSIAN_SEGMENTS + ("foreground_mask",)}
    for row in np.flatnonzero(clone & keep):
        for name in GAUSSIAN_SEGMENTS + ("foreground_mask",):
            parts[name].append(getattr(gaussians, name)[row:row + 1])
        parts["centers"][-1] = parts["centers"][-1] + \
            rng.normal(scale=0.3 * gaussians.scales[row].mean(), size=(1, 3))
    for row in np.flatnonzero(split & keep):
        offs = rng.normal(scale=gaussians.scales[row].mean() * 0.5, size=(1, 3))
        for name in GAUSSIAN_SEGMENTS + ("foreground_mask",):
            parts[name].append(getattr(gaussians, name)[row:row + 1])
        parts["centers"][-1] = parts["centers"][-1] + offs
        parts["log_scales"][-1] = parts["log_scales"][-1] - np.log(1.6)
    out = {name: np.concatenate(arrs) for name, arrs in parts.items()}
    # shrink the split originals as well as their offspring
    split_kept = split[keep]
    out["log_scales"][:split_kept.size][split_kept] -= np.log(1.6)
    return GaussianSet(**out)


def static_stage(dataset: TimedDataset, config: TrainConfig,
                 render_cfg: RenderConfig | None = None,
                 seed_points: np.ndarray | None = None,
                 log: list | None = None, checkpoint_cb=None,
                 checkpoint_every: int = 1000) -> GaussianSet:
    """Fit the fully grown scene at the dataset's final supervised timestep
    with the mixed L1/SSIM loss over random view batches."""
    cfg = render_cfg or RenderConfig()
    t_idx = dataset.time_axis.t_index
    if not any(k[0] == t_idx for k in dataset.images):
        raise GrowflowError("dataset has no images at the final timestep")
    rng = np.random.default_rng([config.seed, 1])
    gaussians = init_static_gaussians(dataset, config, seed_points)
    extent = float(dataset.scene_bounds.extent.max())
    bg = dataset.background

    store = ParameterStore()
    for name in GAUSSIAN_SEGMENTS:
        store.add(name, getattr(gaussians, name))
    adam = AdamState.for_store(store)
    grad_accum = np.zeros(len(gaussians))
    grad_counts = np.zeros(len(gaussians))

    for it in range(config.n_static):
        t0 = time.perf_counter()
        cams = _batch(rng, dataset, config.view_batch)
        store.zero_grad()
        tape = Tape()
        loss = _static_loss(tape, store, dataset, cams, t_idx, bg, cfg,
                            config.ssim_lambda)
        loss_val = backward(tape, loss)
        adam_update(store, _decayed(config.lr_static, it, config.n_static),
                    it + 1, adam)
        np.clip(store.value("colors"), 0.0, 1.0, out=store.value("colors"))
        grad_accum += np.linalg.norm(store.grad("centers"), axis=1)
        grad_counts += 1.0
        if log is not None:
            log.append(LogRow("static", it, -1, loss_val,
                              (time.perf_counter() - t0) * 1e3))
        if checkpoint_cb is not None and (it + 1) % checkpoint_every == 0:
            snap = GaussianSet(
                *(store.value(n).copy() for n in GAUSSIAN_SEGMENTS),
                foreground_mask=dataset.foreground_box.contains(store.value("centers")))
            checkpoint_cb("static", it + 1, snap)
        if (config.densify == "on" and (it + 1) % config.densify_interval == 0
                and it + 1 < config.n_static):
            current = GaussianSet(
                *(store.value(n).copy() for n in GAUSSIAN_SEGMENTS),
                foreground_mask=dataset.foreground_box.contains(store.value("centers")))
            gaussians = _densify(current, grad_accum, grad_counts, config,
                                 extent, rng)
            store = ParameterStore()
            for name in GAUSSIAN_SEGMENTS:
                store.add(name, getattr(gaussians, name))
            adam = AdamState.for_store(store)
            grad_accum = np.zeros(len(gaussians))
            grad_counts = np.zeros(len(gaussians))

    final = GaussianSet(
        store.value("centers").copy(),
        normalize_quaternion(store.value("rotations")),
        store.value("log_scales").copy(),
        store.value("opacity_logits").copy(),
        store.value("colors").copy(),
        foreground_mask=dataset.foreground_box.contains(store.value("centers")),
    )
    return final


# ---------------------------------------------------------------------------
# stage 2: boundary reconstruction


def _supervised_schedule(dataset: TimedDataset):
    axis = dataset.time_axis
    idx = axis.supervised_indices[::-1]            # final first
    return idx.copy(), axis.normalized[idx].copy()


def boundary_stage(gaussians: GaussianSet, dataset: TimedDataset,
                   field_params: VelocityFieldParams, config: TrainConfig,
                   render_cfg: RenderConfig | None = None,
                   log: list | None = None, checkpoint_cb=None,
                   checkpoint_every: int = 1000) -> BoundaryCache:
    """Walk the supervised timesteps backward from the fully grown state,
    training the shared field one interval at a time and caching each
    integrated boundary state."""
    cfg = render_cfg or RenderConfig()
    raw_idx, times = _supervised_schedule(dataset)
    state = GeomState.from_gaussians(gaussians, config.color_flow)
    snapshots = [state]
    if config.skip_boundary:
        return BoundaryCache(gaussians=gaussians, snapshots=snapshots,
                             times=times[:1], raw_indices=raw_idx[:1],
                             skip_boundary=True)

    rng = np.random.default_rng([config.seed, 2])
    store = ParameterStore()
    vfield.register_in_store(field_params, store)
    adam = AdamState.for_store(store)
    rates = {name: (config.lr_grid if name.startswith("field.planes") else config.lr_mlp)
             for name in store.names()}
    n_intervals = len(times) - 1
    total_iters = n_intervals * config.n_boundary
    step = 0
    for k in range(n_intervals):
        t_from, t_to = float(times[k]), float(times[k + 1])
        target_idx = int(raw_idx[k + 1])
        for it in range(config.n_boundary):
            t0 = time.perf_counter()
            cams = _batch(rng, dataset, config.view_batch)
            store.zero_grad()
            tape = Tape()
            loss = _interval_loss(tape, store, field_params, gaussians, state,
                                  t_from, t_to, config.substeps, dataset, cams,
                                  target_idx, dataset.background, cfg)
            loss_val = backward(tape, loss)
            step += 1
            adam_update(store, _decayed(rates, step, total_iters), step, adam)
            if log is not None:
                log.append(LogRow("boundary", step - 1, k, loss_val,
                                  (time.perf_counter() - t0) * 1e3))
            if checkpoint_cb is not None and step % checkpoint_every == 0:
                checkpoint_cb("boundary", step, field_params)
        opts = IntegrationOptions(substeps=config.substeps, renormalize_quats=True)
        state, _ = integrate(_field_fn(field_params, None), state, t_from, t_to, opts)
        snapshots.append(state)
    return BoundaryCache(gaussians=gaussians, snapshots=snapshots, times=times,
                         raw_indices=raw_idx, skip_boundary=False)


# ---------------------------------------------------------------------------
# stage 3: global optimization


def global_stage(cache: BoundaryCache, dataset: TimedDataset,
                 config: TrainConfig, field_params: VelocityFieldParams | None = None,
                 render_cfg: RenderConfig | None = None,
                 log: list | None = None, checkpoint_cb=None,
                 checkpoint_every: int = 1000) -> VelocityFieldParams:
    """Train a fresh field (or warm-start the given one) on randomly sampled
    supervised intervals, using the cached snapshots as initial conditions;
    the cache itself is never modified."""
    cfg = render_cfg or RenderConfig()
    raw_idx, times = _supervised_schedule(dataset)
    if field_params is None or not config.warm_start_global:
        fconfig = (field_params.config if field_params is not None else
                   FieldConfig(encoder_kind=config.encoder_kind,
                               color_flow=config.color_flow))
        field_params = vfield.init_params(dataset.scene_bounds,
                                          seed=config.seed * 8 + 3, config=fconfig)
    rng = np.random.default_rng([config.seed, 3])
    store = ParameterStore()
    vfield.register_in_store(field_params, store)
    adam = AdamState.for_store(store)
    rates = {name: (config.lr_grid if name.startswith("field.planes") else config.lr_mlp)
             for name in store.names()}
    n_intervals = len(times) - 1
    for it in range(config.n_global):
        t0 = time.perf_counter()
        k = int(rng.integers(0, n_intervals))
        if cache.skip_boundary:
            state0 = cache.snapshots[0]
            t_from, t_to = float(times[0]), float(times[k + 1])
            substeps = config.substeps * (k + 1)
        else:
            state0 = cache.snapshots[k]
            t_from, t_to = float(times[k]), float(times[k + 1])
            substeps = config.substeps
        target_idx = int(raw_idx[k + 1])
        cams = _batch(rng, dataset, config.view_batch)
        store.zero_grad()
        tape = Tape()
        loss = _interval_loss(tape, store, field_params, cache.gaussians, state0,
                              t_from, t_to, substeps, dataset, cams, target_idx,
                              dataset.background, cfg)
        loss_val = backward(tape, loss)
        adam_update(store, _decayed(rates, it + 1, config.n_global), it + 1, adam)
        if log is not None:
            log.append(LogRow("global", it, k, loss_val,
                              (time.perf_counter() - t0) * 1e3))
        if checkpoint_cb is not None and (it + 1) % checkpoint_every == 0:
            checkpoint_cb("global", it + 1, field_params)
    return field_params


# ---------------------------------------------------------------------------
# queries


def cache_to_sections(cache: BoundaryCache):
    """Boundary cache as checkpoint sections (times + per-snapshot arrays)."""
    snaps = []
    for s in cache.snapshots:
        d = {"centers": s.centers, "rotations": s.rotations,
             "log_scales": s.log_scales, "index": s.index.astype(np.float64)}
        if s.colors is not None:
            d["colors"] = s.colors
        snaps.append(d)
    meta = {"raw_indices": cache.raw_indices.tolist(),
            "skip_boundary": bool(cache.skip_boundary)}
    return np.asarray(cache.times, float), snaps, meta


def cache_from_sections(gaussians: GaussianSet, times: np.ndarray,
                        snaps: list[dict], meta: dict) -> BoundaryCache:
    snapshots = []
    for d in snaps:
        snapshots.append(GeomState(
            centers=d["centers"], rotations=d["rotations"],
            log_scales=d["log_scales"], colors=d.get("colors"),
            index=d["index"].astype(np.int64), n_total=len(gaussians)))
    return BoundaryCache(gaussians=gaussians, snapshots=snapshots,
                         times=np.asarray(times, float),
                         raw_indices=np.asarray(meta["raw_indices"], dtype=np.int64),
                         skip_boundary=bool(meta.get("skip_boundary", False)))


def query_time(cache: BoundaryCache, field_params: VelocityFieldParams,
               t_query: float, options: IntegrationOptions | None = None) -> GaussianSet:
    """Scene state at any normalized time: integrate foreground geometry
    from the nearest cached boundary (exact snapshot when t_query lands on
    one) and substitute it into the full frozen scene."""
    if not 0.0 <= t_query <= 1.0:
        raise GrowflowError(f"t_query must be in [0, 1], got {t_query}")
    options = options or IntegrationOptions(method="rk45_adaptive")
    near = int(np.argmin(np.abs(cache.times - t_query)))
    state = cache.snapshots[near]
    t_near = float(cache.times[near])
    if t_near != t_query:
        state, _ = integrate(_field_fn(field_params, None), state, t_near,
                             t_query, options)
    return state.apply_to(cache.gaussians)


def track_trajectory(cache: BoundaryCache, field_params: VelocityFieldParams,
                     times: np.ndarray, raw_timesteps: np.ndarray,
                     options: IntegrationOptions | None = None,
                     gaussian_rows: np.ndarray | None = None) -> GrowthTrajectory:
    """Foreground center curves over an evaluation time grid."""
    fg_index = cache.snapshots[0].index
    rows = np.arange(len(fg_index)) if gaussian_rows is None else gaussian_rows
    centers = []
    for t in times:
        gs = query_time(cache, field_params, float(t), options)
        centers.append(gs.centers[fg_index][rows])
    return GrowthTrajectory(times=np.asarray(times, float),
                            raw_timesteps=np.asarray(raw_timesteps),
                            centers=np.stack(centers),
                            gaussian_indices=fg_index[rows])

"""The learned velocity field over Gaussian geometric parameters.

A multi-level six-plane spatio-temporal feature grid (planes over (x,y),
(y,z), (x,z), (x,t), (y,t), (z,t); bilinear interpolation, product fusion
across planes, concatenation across levels) feeds a small fusion MLP and
independent decoder heads for translational, rotational, and scale
velocities, with an optional color head.  An MLP-with-Fourier-encoding
variant of the encoder is available for ablation; it produces a feature of
the same width so downstream signatures are unchanged.

All evaluation is written against :mod:`growflow.diff` primitives and works
identically on plain arrays and tape nodes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diff
from .core import Box, GrowflowError
from .diff import ParameterStore, Tape

__all__ = [
    "FieldConfig", "VelocityFieldParams", "Velocity", "init_params",
    "hex_interp", "fourier_mlp_interp", "eval_field", "register_in_store",
    "leaves_for", "params_to_sections", "params_from_sections",
]

HIDDEN = 64
_SPATIAL_PAIRS = (np.array([0, 1, 0]), np.array([1, 2, 2]))  # (x,y),(y,z),(x,z)


@dataclass(frozen=True)
class FieldConfig:
    """Architecture knobs with the defaults used throughout."""

    encoder_kind: str = "hexplane"      # hexplane | fourier_mlp
    levels: int = 2
    features: int = 8
    spatial_resolution: int = 64
    temporal_resolution: int = 25
    upsample_factor: int = 2
    fourier_bands: int = 6
    color_flow: bool = False

    def __post_init__(self):
        if self.encoder_kind not in ("hexplane", "fourier_mlp"):
            raise GrowflowError(f"unknown encoder_kind '{self.encoder_kind}'")
        if min(self.levels, self.features, self.spatial_resolution,
               self.temporal_resolution, self.upsample_factor,
               self.fourier_bands) < 1:
            raise GrowflowError("field configuration values must be >= 1")


@dataclass
class VelocityFieldParams:
    """Feature planes plus decoder weights, with the scene box used to
    normalize query positions.  ``arrays`` maps canonical segment names to
    the underlying float64 arrays (shared, not copied, when registered in a
    ParameterStore)."""

    config: FieldConfig
    bounds: Box
    arrays: dict[str, np.ndarray]
    clamp_count: int = 0

    def level_resolution(self, level: int) -> tuple[int, int]:
        c = self.config
        f = c.upsample_factor ** level
        return c.spatial_resolution * f, c.temporal_resolution * f

    def plane(self, level: int, which: int) -> np.ndarray:
        """One of the six feature grids: 0..2 spatial, 3..5 temporal."""
        if which < 3:
            return self.arrays[f"planes.l{level}.spatial"][which]
        return self.arrays[f"planes.l{level}.temporal"][which - 3]

    @property
    def feature_dim(self) -> int:
        return self.config.levels * self.config.features


@dataclass
class Velocity:
    """Per-Gaussian parameter time-derivatives (batched over Gaussians)."""

    d_center: object       # (n, 3)
    d_quat: object         # (n, 4)
    d_log_scale: object    # (n, 3)
    d_color: object | None = None  # (n, 3) when the color head is active


def _glorot(rng, n_in, n_out):
    a = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-a, a, size=(n_in, n_out))


def _mlp_segments(rng, prefix, n_in, n_out, zero_final=False, small=False):
    if small:
        w0 = rng.uniform(-1e-2, 1e-2, size=(n_in, HIDDEN))
        w1 = rng.uniform(-1e-2, 1e-2, size=(HIDDEN, n_out))
    else:
        w0 = _glorot(rng, n_in, HIDDEN)
        w1 = np.zeros((HIDDEN, n_out)) if zero_final else _glorot(rng, HIDDEN, n_out)
    return {
        f"{prefix}.w0": w0, f"{prefix}.b0": np.zeros(HIDDEN),
        f"{prefix}.w1": w1, f"{prefix}.b1": np.zeros(n_out),
    }


def init_params(bounds: Box, seed: int = 0,
                config: FieldConfig | None = None) -> VelocityFieldParams:
    """Fresh field parameters.

    Plane cells start at 1.0 (the six-way product is then 1, keeping
    initial features well scaled) and decoder head output layers start at
    zero so the initial field is exactly the zero flow.
    """
    cfg = config or FieldConfig()
    rng = np.random.default_rng([seed, 0xF1E1D])
    arrays: dict[str, np.ndarray] = {}
    feat = cfg.levels * cfg.features
    if cfg.encoder_kind == "hexplane":
        for lv in range(cfg.levels):
            rs = cfg.spatial_resolution * cfg.upsample_factor ** lv
            rt = cfg.temporal_resolution * cfg.upsample_factor ** lv
            arrays[f"planes.l{lv}.spatial"] = np.ones((3, rs, rs, cfg.features))
            arrays[f"planes.l{lv}.temporal"] = np.ones((3, rs, rt, cfg.features))
    else:
        gamma_dim = 4 * 2 * cfg.fourier_bands + 4
        arrays.update(_mlp_segments(rng, "encoder", gamma_dim, feat, small=True))
    arrays.update(_mlp_segments(rng, "fusion", feat, HIDDEN))
    heads = ["center", "quat", "scale"] + (["color"] if cfg.color_flow else [])
    outs = {"center": 3, "quat": 4, "scale": 3, "color": 3}
    for h in heads:
        arrays.update(_mlp_segments(rng, f"head.{h}", HIDDEN, outs[h], zero_final=True))
    for k, v in arrays.items():
        arrays[k] = np.ascontiguousarray(v, dtype=np.float64)
    return VelocityFieldParams(config=cfg, bounds=bounds, arrays=arrays)


# ---------------------------------------------------------------------------
# store integration


def register_in_store(params: VelocityFieldParams, store: ParameterStore,
                      prefix: str = "field.") -> None:
    """Expose every field array as a store segment sharing its memory, so
    optimizer updates through the store are visible to the params object."""
    for name, arr in params.arrays.items():
        store.add(prefix + name, arr)


def leaves_for(params: VelocityFieldParams, tape: Tape, store: ParameterStore,
               prefix: str = "field.") -> dict[str, object]:
    return {name: tape.leaf(store, prefix + name) for name in params.arrays}


# ---------------------------------------------------------------------------
# encoders


def _normalize_positions(positions, params: VelocityFieldParams):
    lo, hi = params.bounds.lo, params.bounds.hi
    pn = (positions - lo) / (hi - lo)
    vals = diff.value_of(pn)
    outside = int(((vals < 0.0) | (vals > 1.0)).any(axis=1).sum())
    if outside:
        params.clamp_count += outside
        pn = diff.minimum(diff.maximum(pn, 0.0), 1.0)
    return pn


class _Bilerp:
    """Cached bilinear lookup on a stack of 3 planes (shared (n, 3) query)."""

    def __init__(self, flat_values, u, v_or_scalar, res_u, res_v, features):
        n = u.shape[0]
        self.res_u, self.res_v, self.features = res_u, res_v, features
        gu = u * (res_u - 1)
        self.iu = np.clip(np.floor(gu), 0, max(res_u - 2, 0)).astype(np.int64)
        self.fu = gu - self.iu
        if np.ndim(v_or_scalar) == 0:
            gv = float(v_or_scalar) * (res_v - 1)
            iv = int(np.clip(np.floor(gv), 0, max(res_v - 2, 0)))
            self.iv = np.full((n, 3), iv, dtype=np.int64)
            self.fv = np.full((n, 3), gv - iv)
        else:
            gv = v_or_scalar * (res_v - 1)
            self.iv = np.clip(np.floor(gv), 0, max(res_v - 2, 0)).astype(np.int64)
            self.fv = gv - self.iv
        base = (np.arange(3, dtype=np.int64) * res_u * res_v)[None, :]
        r00 = base + self.iu * res_v + self.iv
        self.rows = np.stack([r00, r00 + 1, r00 + res_v, r00 + res_v + 1])  # (4,n,3)
        self.corners = flat_values[self.rows.reshape(-1)].reshape((4, n, 3, features))
        self.weights = np.stack([
            (1 - self.fu) * (1 - self.fv), (1 - self.fu) * self.fv,
            self.fu * (1 - self.fv), self.fu * self.fv])                   # (4,n,3)
        self.value = (self.corners * self.weights[..., None]).sum(axis=0)  # (n,3,F)

    def backward(self, d_value, plane_grad_flat, want_query_grad: bool):
        """Scatter gradients into the flat plane grad buffer; return the
        gradient wrt the (n, 3) u and v query coordinates (grid-unit scaled
        back to normalized coordinates by the caller)."""
        if plane_grad_flat is not None:
            vals = (self.weights[..., None] * d_value[None]).reshape(-1, self.features)
            np.add.at(plane_grad_flat, self.rows.reshape(-1), vals)
        if not want_query_grad:
            return None, None
        d_w = (self.corners * d_value[None]).sum(axis=3)                   # (4,n,3)
        fu, fv = self.fu, self.fv
        d_fu = (-(1 - fv) * d_w[0] - fv * d_w[1]
                + (1 - fv) * d_w[2] + fv * d_w[3])
        d_fv = (-(1 - fu) * d_w[0] + (1 - fu) * d_w[1]
                - fu * d_w[2] + fu * d_w[3])
        return d_fu * (self.res_u - 1), d_fv * (self.res_v - 1)


def hex_interp(positions, t: float, params: VelocityFieldParams,
               arrays: dict | None = None):
    """Feature lookup: per level, bilinearly interpolate the six planes,
    fuse by elementwise product across planes, concatenate levels
    -> (n, L*F).

    Implemented as one fused tape primitive: the backward pass scatters
    directly into the plane gradients and chains through the bilinear
    weights into the query positions.
    """
    P = arrays if arrays is not None else params.arrays
    cfg = params.config
    pn = _normalize_positions(positions, params)
    t = float(min(max(t, 0.0), 1.0))
    a_cols, b_cols = _SPATIAL_PAIRS
    F = cfg.features

    tape = diff._tape_of(pn, *P.values())
    pn_v = diff.value_of(pn)
    n = pn_v.shape[0]
    levels = []
    feats = []
    for lv in range(cfg.levels):
        rs, rt = params.level_resolution(lv)
        sp_node = P[f"planes.l{lv}.spatial"]
        tp_node = P[f"planes.l{lv}.temporal"]
        sp_flat = diff.value_of(sp_node).reshape(3 * rs * rs, F)
        tp_flat = diff.value_of(tp_node).reshape(3 * rs * rt, F)
        bsp = _Bilerp(sp_flat, pn_v[:, a_cols], pn_v[:, b_cols], rs, rs, F)
        btp = _Bilerp(tp_flat, pn_v, t, rs, rt, F)
        pv = np.concatenate([bsp.value, btp.value], axis=1)  # (n, 6, F)
        prod = pv.prod(axis=1)
        levels.append((sp_node, tp_node, bsp, btp, pv, rs, rt))
        feats.append(prod)
    feat_v = np.concatenate(feats, axis=1) if cfg.levels > 1 else feats[0]
    if tape is None:
        return feat_v
    out = diff.Node(feat_v, tape)

    def bw(g):
        d_pn = np.zeros((n, 3)) if isinstance(pn, diff.Node) else None
        for lv, (sp_node, tp_node, bsp, btp, pv, rs, rt) in enumerate(levels):
            g_l = g[:, lv * F:(lv + 1) * F]
            # product rule across the six planes via prefix/suffix products
            pref = np.ones_like(pv)
            np.cumprod(pv[:, :-1], axis=1, out=pref[:, 1:])
            suff = np.ones_like(pv)
            np.cumprod(pv[:, :0:-1], axis=1, out=suff[:, -2::-1])
            d_pv = pref * suff * g_l[:, None, :]
            for node, b in ((sp_node, bsp), (tp_node, btp)):
                grad_flat = None
                if isinstance(node, diff.Node):
                    if node.grad is None:
                        node.grad = np.zeros_like(node.value)
                    grad_flat = node.grad.reshape(-1, F)
                d_slice = d_pv[:, :3] if b is bsp else d_pv[:, 3:]
                d_fu, d_fv = b.backward(d_slice, grad_flat, d_pn is not None)
                if d_pn is not None:
                    if b is bsp:
                        for k in range(3):
                            d_pn[:, a_cols[k]] += d_fu[:, k]
                            d_pn[:, b_cols[k]] += d_fv[:, k]
                    else:
                        d_pn += d_fu  # temporal u-side is (x, y, z) directly
        if d_pn is not None:
            diff._accum(pn, d_pn)

    tape._record("hex_interp", out, diff._make_bw(bw, pn, *P.values()))
    return out


def fourier_encode(positions_norm, t: float, bands: int):
    """sin/cos at frequencies 2^0..2^(bands-1) * pi of (x, y, z, t), with the
    raw inputs appended: length 4*2*bands + 4."""
    n = diff.value_of(positions_norm).shape[0]
    tcol = np.full((n, 1), float(t))
    p4 = diff.concatenate([positions_norm, tcol], axis=1)
    parts = []
    for b in range(bands):
        arg = p4 * (np.pi * (2.0 ** b))
        parts.append(diff.sin(arg))
        parts.append(diff.cos(arg))
    parts.append(p4)
    return diff.concatenate(parts, axis=1)


def _mlp(x, P, prefix: str):
    h = diff.linear(x, P[f"{prefix}.w0"], P[f"{prefix}.b0"], relu_act=True)
    return diff.linear(h, P[f"{prefix}.w1"], P[f"{prefix}.b1"])


def fourier_mlp_interp(positions, t: float, params: VelocityFieldParams,
                       arrays: dict | None = None):
    """Ablation encoder: positional-encoding MLP producing a feature of the
    same width as the plane encoder."""
    P = arrays if arrays is not None else params.arrays
    pn = _normalize_positions(positions, params)
    gamma = fourier_encode(pn, min(max(float(t), 0.0), 1.0),
                           params.config.fourier_bands)
    return _mlp(gamma, P, "encoder")


def eval_field(centers, t: float, params: VelocityFieldParams,
               arrays: dict | None = None) -> Velocity:
    """Velocities of the Gaussian geometric parameters at (centers, t)."""
    P = arrays if arrays is not None else params.arrays
    if params.config.encoder_kind == "hexplane":
        feat = hex_interp(centers, t, params, arrays)
    else:
        feat = fourier_mlp_interp(centers, t, params, arrays)
    z = _mlp(feat, P, "fusion")
    return Velocity(
        d_center=_mlp(z, P, "head.center"),
        d_quat=_mlp(z, P, "head.quat"),
        d_log_scale=_mlp(z, P, "head.scale"),
        d_color=_mlp(z, P, "head.color") if params.config.color_flow else None,
    )


# ---------------------------------------------------------------------------
# checkpoint sections


def params_to_sections(params: VelocityFieldParams):
    meta = {
        "encoder_kind": params.config.encoder_kind,
        "levels": params.config.levels,
        "features": params.config.features,
        "spatial_resolution": params.config.spatial_resolution,
        "temporal_resolution": params.config.temporal_resolution,
        "upsample_factor": params.config.upsample_factor,
        "fourier_bands": params.config.fourier_bands,
        "color_flow": params.config.color_flow,
        "bounds": params.bounds.to_json(),
        "array_names": sorted(params.arrays),
    }
    return meta, dict(params.arrays)


def params_from_sections(meta: dict, arrays: dict[str, np.ndarray]) -> VelocityFieldParams:
    cfg = FieldConfig(
        encoder_kind=meta["encoder_kind"], levels=meta["levels"],
        features=meta["features"], spatial_resolution=meta["spatial_resolution"],
        temporal_resolution=meta["temporal_resolution"],
        upsample_factor=meta["upsample_factor"],
        fourier_bands=meta["fourier_bands"], color_flow=meta["color_flow"],
    )
    want = set(meta["array_names"])
    got = {k: np.ascontiguousarray(v, dtype=np.float64)
           for k, v in arrays.items() if k in want}
    if set(got) != want:
        raise GrowflowError("checkpoint field sections incomplete")
    return VelocityFieldParams(config=cfg, bounds=Box.from_json(meta["bounds"]),
                               arrays=got)

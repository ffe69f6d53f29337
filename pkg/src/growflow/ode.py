"""Numerical integration of Gaussian geometric parameters under the learned
velocity field: fixed-step classical RK4 for training (differentiated
through by the tape) and an embedded Runge-Kutta-Fehlberg 4(5) pair with PI
step-size control for evaluation-time queries.

States are handled in three interchangeable forms: a bare array (scalar
test problems), a tuple of component arrays, or a :class:`GeomState`.  The
time direction is free; backward integration just uses a negative step.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diff
from .core import GaussianSet, GrowflowError
from .diff import value_of

__all__ = ["IntegrationError", "IntegrationOptions", "GeomState",
           "rk4_step", "integrate", "roundtrip_defect"]

SAFETY = 0.9
GROW_MIN, GROW_MAX = 0.2, 5.0
H_FLOOR = 1e-12


class IntegrationError(GrowflowError):
    """Integration failed (non-finite derivative, step underflow, or step
    budget exhausted)."""


@dataclass(frozen=True)
class IntegrationOptions:
    method: str = "rk4_fixed"       # rk4_fixed | rk45_adaptive
    substeps: int = 8               # fixed mode: steps per call
    rtol: float = 1e-4
    atol: float = 1e-5
    max_steps: int = 10_000
    renormalize_quats: bool = True

    def __post_init__(self):
        if self.method not in ("rk4_fixed", "rk45_adaptive"):
            raise GrowflowError(f"unknown integration method '{self.method}'")
        if self.substeps < 1 or self.rtol <= 0 or self.atol <= 0 or self.max_steps < 1:
            raise GrowflowError("invalid integration options")


@dataclass(frozen=True)
class GeomState:
    """Flat view of the foreground subset's geometric parameters plus the
    index map back into the full GaussianSet."""

    centers: np.ndarray     # (n, 3)
    rotations: np.ndarray   # (n, 4)
    log_scales: np.ndarray  # (n, 3)
    colors: np.ndarray | None  # (n, 3) when color flow is enabled
    index: np.ndarray       # (n,) rows in the owning GaussianSet
    n_total: int

    @staticmethod
    def from_gaussians(gs: GaussianSet, color_flow: bool = False) -> "GeomState":
        idx = np.flatnonzero(gs.foreground_mask)
        return GeomState(
            centers=gs.centers[idx].copy(),
            rotations=gs.rotations[idx].copy(),
            log_scales=gs.log_scales[idx].copy(),
            colors=gs.colors[idx].copy() if color_flow else None,
            index=idx,
            n_total=len(gs),
        )

    def apply_to(self, gs: GaussianSet) -> GaussianSet:
        if len(gs) != self.n_total:
            raise GrowflowError("GeomState does not match this GaussianSet")
        centers = gs.centers.copy()
        rotations = gs.rotations.copy()
        log_scales = gs.log_scales.copy()
        colors = gs.colors.copy()
        centers[self.index] = self.centers
        rotations[self.index] = self.rotations
        log_scales[self.index] = self.log_scales
        if self.colors is not None:
            colors[self.index] = self.colors
        return GaussianSet(centers, rotations, log_scales, gs.opacity_logits.copy(),
                           colors, gs.foreground_mask.copy())

    def components(self) -> tuple:
        comps = (self.centers, self.rotations, self.log_scales)
        return comps + ((self.colors,) if self.colors is not None else ())

    def with_components(self, comps) -> "GeomState":
        return replace(self, centers=comps[0], rotations=comps[1],
                       log_scales=comps[2],
                       colors=comps[3] if self.colors is not None else None)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(c) for c in self.components()])


# ---------------------------------------------------------------------------
# state adapters: bare array | tuple | GeomState


def _unpack(state):
    if isinstance(state, GeomState):
        return state.components(), lambda c: state.with_components(c), "geom"
    if isinstance(state, (tuple, list)):
        return tuple(state), tuple, "tuple"
    return (state,), lambda c: c[0], "array"


def _wrap_eval(field_eval, kind):
    if kind == "array":
        return lambda comps, t: (field_eval(comps[0], t),)
    return field_eval


def _check_finite(derivs, t):
    for k, d in enumerate(derivs):
        vals = np.atleast_1d(value_of(d))
        bad = ~np.isfinite(vals.reshape(vals.shape[0], -1)).all(axis=1)
        if bad.any():
            row = int(np.argmax(bad))
            raise IntegrationError(
                f"non-finite derivative at t={t:.6g} (component {k}, row {row})")


def _axpy(y, a, k):
    return tuple(yi + a * ki for yi, ki in zip(y, k))


def _renorm_quats(comps, slot: int):
    q = comps[slot]
    n = diff.sqrt((q * q).sum(axis=-1, keepdims=True))
    return comps[:slot] + (q / n,) + comps[slot + 1:]


def _rk4_core(f, comps, t, h, renorm_slot):
    k1 = f(comps, t)
    _check_finite(k1, t)
    k2 = f(_axpy(comps, 0.5 * h, k1), t + 0.5 * h)
    _check_finite(k2, t + 0.5 * h)
    k3 = f(_axpy(comps, 0.5 * h, k2), t + 0.5 * h)
    _check_finite(k3, t + 0.5 * h)
    k4 = f(_axpy(comps, h, k3), t + h)
    _check_finite(k4, t + h)
    out = tuple(
        y + (h / 6.0) * (a + 2.0 * b + 2.0 * c + d)
        for y, a, b, c, d in zip(comps, k1, k2, k3, k4))
    if renorm_slot is not None:
        out = _renorm_quats(out, renorm_slot)
    return out


def _renorm_slot(state, options):
    if options is not None and options.renormalize_quats and isinstance(state, GeomState):
        return 1
    return None


def rk4_step(field_eval, state, t: float, h: float,
             options: IntegrationOptions | None = None):
    """One classical four-stage Runge-Kutta step (h may be negative)."""
    if h == 0.0:
        raise GrowflowError("rk4_step requires h != 0")
    comps, rebuild, kind = _unpack(state)
    f = _wrap_eval(field_eval, kind)
    out = _rk4_core(f, comps, t, h, _renorm_slot(state, options))
    return rebuild(out)


# ---------------------------------------------------------------------------
# Runge-Kutta-Fehlberg 4(5)

_RKF_C = np.array([0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2])
_RKF_A = [
    [],
    [1 / 4],
    [3 / 32, 9 / 32],
    [1932 / 2197, -7200 / 2197, 7296 / 2197],
    [439 / 216, -8.0, 3680 / 513, -845 / 4104],
    [-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40],
]
_RKF_B5 = np.array([16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55])
_RKF_B4 = np.array([25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0])


def _rkf45_step(f, comps, t, h):
    ks = []
    for i in range(6):
        yi = comps
        for j, a in enumerate(_RKF_A[i]):
            if a != 0.0:
                yi = _axpy(yi, h * a, ks[j])
        ki = f(yi, t + _RKF_C[i] * h)
        _check_finite(ki, t + _RKF_C[i] * h)
        ks.append(ki)
    y5 = comps
    y4 = comps
    for i in range(6):
        if _RKF_B5[i] != 0.0:
            y5 = _axpy(y5, h * _RKF_B5[i], ks[i])
        if _RKF_B4[i] != 0.0:
            y4 = _axpy(y4, h * _RKF_B4[i], ks[i])
    return y5, y4, ks[0]


def _error_norm(y0, y1, y4, y5, rtol, atol):
    total, count = 0.0, 0
    for a, b, c4, c5 in zip(y0, y1, y4, y5):
        scale = atol + rtol * np.maximum(np.abs(a), np.abs(b))
        e = (np.asarray(c5) - np.asarray(c4)) / scale
        total += float((e * e).sum())
        count += e.size
    return np.sqrt(total / max(count, 1))


def _initial_step(f, comps, t0, span, rtol, atol):
    # standard two-probe heuristic, clipped to the interval
    f0 = f(comps, t0)
    scale = [atol + rtol * np.abs(np.asarray(c)) for c in comps]
    d0 = np.sqrt(sum(float(((np.asarray(c) / s) ** 2).sum()) for c, s in zip(comps, scale))
                 / max(sum(np.asarray(c).size for c in comps), 1))
    d1 = np.sqrt(sum(float(((np.asarray(k) / s) ** 2).sum()) for k, s in zip(f0, scale))
                 / max(sum(np.asarray(c).size for c in comps), 1))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, abs(span))
    y1 = _axpy(comps, np.sign(span) * h0, f0)
    f1 = f(y1, t0 + np.sign(span) * h0)
    d2 = np.sqrt(sum(float((((np.asarray(k1) - np.asarray(k0)) / s) ** 2).sum())
                     for k0, k1, s in zip(f0, f1, scale))
                 / max(sum(np.asarray(c).size for c in comps), 1)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100.0 * h0, h1, abs(span))


def _integrate_adaptive(f, comps, t0, t1, options, post_step=None):
    direction = 1.0 if t1 > t0 else -1.0
    span = t1 - t0
    h = _initial_step(f, comps, t0, span, options.rtol, options.atol)
    t = t0
    samples = [(t0, tuple(np.array(value_of(c)) for c in comps))]
    err_prev = 1.0
    n_accepted = 0
    for _ in range(options.max_steps):
        if (t - t1) * direction >= 0.0:
            return comps, samples, n_accepted
        h = min(h, abs(t1 - t))
        if h < H_FLOOR:
            raise IntegrationError(f"adaptive step underflow at t={t:.6g}")
        y5, y4, _ = _rkf45_step(f, comps, t, direction * h)
        err = _error_norm(comps, y5, y4, y5, options.rtol, options.atol)
        if err <= 1.0:
            comps = y5   # propagate the 5th-order solution
            if post_step is not None:
                comps = post_step(comps)
            t = t + direction * h
            samples.append((t, tuple(np.array(value_of(c)) for c in comps)))
            n_accepted += 1
            if err == 0.0:
                factor = GROW_MAX
            else:
                factor = SAFETY * err ** (-0.7 / 5.0) * err_prev ** (0.4 / 5.0)
            err_prev = max(err, 1e-10)
        else:
            factor = max(SAFETY * err ** (-0.2), GROW_MIN)
        h = h * float(np.clip(factor, GROW_MIN, GROW_MAX))
    raise IntegrationError(f"step budget exhausted ({options.max_steps}) at t={t:.6g}")


def integrate(field_eval, state0, t0: float, t1: float,
              options: IntegrationOptions | None = None):
    """Integrate from t0 to t1 (either direction).

    Returns ``(state1, samples)`` where samples is a list of
    (time, component values) at the start point and every accepted step
    endpoint.  Fixed mode takes exactly ``options.substeps`` RK4 steps and
    is differentiable through the tape; adaptive mode follows rtol/atol.
    """
    options = options or IntegrationOptions()
    comps, rebuild, kind = _unpack(state0)
    f = _wrap_eval(field_eval, kind)
    slot = _renorm_slot(state0, options)

    if t0 == t1:
        return rebuild(comps), [(t0, tuple(np.array(value_of(c)) for c in comps))]

    if options.method == "rk4_fixed":
        h = (t1 - t0) / options.substeps
        samples = [(t0, tuple(np.array(value_of(c)) for c in comps))]
        t = t0
        for i in range(options.substeps):
            comps = _rk4_core(f, comps, t, h, slot)
            t = t0 + (i + 1) * (t1 - t0) / options.substeps
            samples.append((t, tuple(np.array(value_of(c)) for c in comps)))
        return rebuild(comps), samples

    if any(isinstance(c, diff.Node) for c in comps):
        raise GrowflowError("adaptive integration is not differentiable; "
                            "use rk4_fixed under a tape")
    comps = tuple(np.asarray(c, dtype=np.float64) for c in comps)
    post = (lambda c: _renorm_quats(c, slot)) if slot is not None else None
    out, samples, _ = _integrate_adaptive(f, comps, t0, t1, options, post_step=post)
    return rebuild(out), samples


def roundtrip_defect(field_eval, state0, t0: float, t1: float,
                     options: IntegrationOptions | None = None) -> float:
    """Max-norm deviation after integrating t0 -> t1 -> t0."""
    there, _ = integrate(field_eval, state0, t0, t1, options)
    back, _ = integrate(field_eval, there, t1, t0, options)
    comps0, _, _ = _unpack(state0)
    comps1, _, _ = _unpack(back)
    worst = 0.0
    for a, b in zip(comps0, comps1):
        worst = max(worst, float(np.abs(value_of(a) - value_of(b)).max()))
    return worst

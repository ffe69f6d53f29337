"""Reverse-mode differentiation over a flat parameter store.

A :class:`Tape` records array-valued primitive operations as they execute;
:func:`backward` replays them in exact reverse order and accumulates
gradients of a scalar loss into the :class:`ParameterStore` that owns the
leaf parameters.  All math is float64.

Every primitive here is written to accept either a :class:`Node` (recorded,
differentiable) or a plain ``numpy`` array (eager, no recording), so the
same model code serves both the training path and fast inference.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "DiffError", "ContractError", "GradientNanError", "CheckInvalidError",
    "ParameterStore", "Tape", "Node", "backward", "finite_difference_check",
    "value_of", "exp", "log", "sqrt", "sin", "cos", "absolute", "sigmoid",
    "relu", "minimum", "maximum", "power", "linear", "take", "stack",
    "concatenate",
    "swapaxes", "gate", "embed_rows", "filter2d_valid", "FdReport",
]


class DiffError(Exception):
    """Base class for differentiation-engine failures."""


class ContractError(DiffError):
    """An operation was called outside its documented contract."""


class GradientNanError(DiffError):
    """A non-finite gradient appeared during the backward pass."""

    def __init__(self, op_name: str):
        super().__init__(f"non-finite gradient produced by operation '{op_name}'")
        self.op_name = op_name


class CheckInvalidError(DiffError):
    """A finite-difference check could not be trusted (non-deterministic f)."""


# ---------------------------------------------------------------------------
# parameter storage


class ParameterStore:
    """Named float64 segments with a parallel gradient buffer.

    Segments are stored flat with shape metadata; ``value``/``grad`` return
    reshaped views so in-place optimizer updates are visible to callers that
    hold the same store.
    """

    def __init__(self):
        self._data: dict[str, np.ndarray] = {}
        self._grad: dict[str, np.ndarray] = {}
        self._shape: dict[str, tuple[int, ...]] = {}

    def add(self, name: str, value) -> None:
        if name in self._data:
            raise ContractError(f"duplicate segment name '{name}'")
        arr = np.ascontiguousarray(value, dtype=np.float64)
        self._shape[name] = arr.shape
        self._data[name] = arr.reshape(-1)
        self._grad[name] = np.zeros(arr.size, dtype=np.float64)

    def names(self) -> list[str]:
        return list(self._data)

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def shape(self, name: str) -> tuple[int, ...]:
        return self._shape[name]

    def value(self, name: str) -> np.ndarray:
        return self._data[name].reshape(self._shape[name])

    def grad(self, name: str) -> np.ndarray:
        return self._grad[name].reshape(self._shape[name])

    def set_value(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._shape[name]:
            raise ContractError(f"shape mismatch for segment '{name}'")
        self._data[name][:] = arr.reshape(-1)

    def flat_value(self, name: str) -> np.ndarray:
        return self._data[name]

    def flat_grad(self, name: str) -> np.ndarray:
        return self._grad[name]

    def zero_grad(self) -> None:
        for g in self._grad.values():
            g[:] = 0.0

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self._data.values())


# ---------------------------------------------------------------------------
# tape and nodes


class Node:
    """An array value tracked on a tape."""

    __slots__ = ("value", "grad", "tape")
    # Make numpy defer binary ops to our reflected operators.
    __array_ufunc__ = None

    def __init__(self, value, tape: "Tape"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Node(shape={self.value.shape})"

    # -- arithmetic operators -------------------------------------------
    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(self, other)

    def __sub__(self, other):
        return _sub(self, other)

    def __rsub__(self, other):
        return _sub(other, self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(self, other)

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)

    def __neg__(self):
        return _mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __abs__(self):
        return absolute(self)

    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    def __getitem__(self, key):
        return _getitem(self, key)

    # -- numpy-style methods (duck-typed against ndarray) ----------------
    def sum(self, axis=None, keepdims=False):
        return _sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _mean(self, axis=axis, keepdims=keepdims)

    def cumsum(self, axis=0):
        return _cumsum(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def ravel(self):
        return _reshape(self, (self.value.size,))


class Tape:
    """Ordered record of primitive operations.

    The backward pass visits records in exact reverse of recording order,
    which is a valid reverse-topological order because every operand node
    exists before the operation that consumes it.
    """

    def __init__(self):
        self._records: list[tuple[str, Node, object]] = []
        self._leaves: list[tuple[Node, ParameterStore, str]] = []

    def __len__(self):
        return len(self._records)

    def leaf(self, store: ParameterStore, name: str) -> Node:
        node = Node(store.value(name), self)
        self._leaves.append((node, store, name))
        return node

    def node(self, value) -> Node:
        """Wrap a raw array as an un-parametrized node (grads discarded)."""
        return Node(value, self)

    def _record(self, name: str, out: Node, bw) -> None:
        self._records.append((name, out, bw))


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def _accum(node, g) -> None:
    if not isinstance(node, Node):
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64)  # own a copy
    else:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(tape: Tape, loss: Node, check_nan: bool = True) -> float:
    """Propagate d(loss)/d(everything) and add results into leaf stores.

    Calling backward twice without re-recording accumulates gradients
    additively.  Returns the scalar loss value.  With ``check_nan`` a
    non-finite gradient raises :class:`GradientNanError` naming the first
    offending operation (located by a second, instrumented replay, so the
    healthy path pays nothing per op).
    """
    if not isinstance(loss, Node):
        raise ContractError("loss must be a Node recorded on the tape")
    lv = loss.value
    if lv.size != 1:
        raise ContractError(f"loss must be scalar, got shape {lv.shape}")
    if not np.isfinite(lv).all():
        raise GradientNanError("loss")
    loss.grad = np.ones_like(lv)
    for _name, out, bw in reversed(tape._records):
        if out.grad is not None:
            bw(out.grad)
    if check_nan and any(
            node.grad is not None and not np.isfinite(node.grad).all()
            for node, _s, _n in tape._leaves):
        _locate_nan(tape, loss)
    for node, store, name in tape._leaves:
        if node.grad is not None:
            store.flat_grad(name)[:] += node.grad.reshape(-1)
    return float(lv.reshape(()))


def _locate_nan(tape: Tape, loss: Node):
    """Replay the backward traversal with per-op checking to find the first
    operation that produced a non-finite gradient."""
    seen: set[int] = set()
    for _name, out, bw in tape._records:
        if id(out) not in seen:
            out.grad = None
            seen.add(id(out))
        for inp in _grad_targets(bw):
            if id(inp) not in seen:
                inp.grad = None
                seen.add(id(inp))
    for node, _s, _n in tape._leaves:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for name, out, bw in reversed(tape._records):
        if out.grad is None:
            continue
        bw(out.grad)
        for inp in _grad_targets(bw):
            if inp.grad is not None and not np.isfinite(inp.grad).all():
                raise GradientNanError(name)
    raise GradientNanError("unlocated")


def _grad_targets(bw):
    # backward closures stash their Node inputs on themselves
    return getattr(bw, "targets", ())


def _make_bw(fn, *targets):
    nodes = tuple(t for t in targets if isinstance(t, Node))
    fn.targets = nodes
    return fn


# ---------------------------------------------------------------------------
# primitive operations


def _add(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    if tape is None:
        return av + bv
    out = Node(av + bv, tape)

    def bw(g):
        if isinstance(a, Node):
            _accum(a, _unbroadcast(g, av.shape))
        if isinstance(b, Node):
            _accum(b, _unbroadcast(g, bv.shape))

    tape._record("add", out, _make_bw(bw, a, b))
    return out


def _sub(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    if tape is None:
        return av - bv
    out = Node(av - bv, tape)

    def bw(g):
        if isinstance(a, Node):
            _accum(a, _unbroadcast(g, av.shape))
        if isinstance(b, Node):
            _accum(b, _unbroadcast(-g, bv.shape))

    tape._record("sub", out, _make_bw(bw, a, b))
    return out


def _mul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    if tape is None:
        return av * bv
    out = Node(av * bv, tape)

    def bw(g):
        if isinstance(a, Node):
            _accum(a, _unbroadcast(g * bv, av.shape))
        if isinstance(b, Node):
            _accum(b, _unbroadcast(g * av, bv.shape))

    tape._record("mul", out, _make_bw(bw, a, b))
    return out


def _div(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    if tape is None:
        return av / bv
    out = Node(av / bv, tape)

    def bw(g):
        if isinstance(a, Node):
            _accum(a, _unbroadcast(g / bv, av.shape))
        if isinstance(b, Node):
            _accum(b, _unbroadcast(-g * av / (bv * bv), bv.shape))

    tape._record("div", out, _make_bw(bw, a, b))
    return out


def power(a, p: float):
    """Elementwise a**p for a constant exponent."""
    if not isinstance(a, Node):
        return np.power(value_of(a), p)
    av = a.value
    out = Node(np.power(av, p), a.tape)

    def bw(g):
        _accum(a, g * p * np.power(av, p - 1.0))

    a.tape._record("pow", out, _make_bw(bw, a))
    return out


def exp(a):
    if not isinstance(a, Node):
        return np.exp(value_of(a))
    ov = np.exp(a.value)
    out = Node(ov, a.tape)

    def bw(g):
        _accum(a, g * ov)

    a.tape._record("exp", out, _make_bw(bw, a))
    return out


def log(a):
    if not isinstance(a, Node):
        return np.log(value_of(a))
    av = a.value
    out = Node(np.log(av), a.tape)

    def bw(g):
        _accum(a, g / av)

    a.tape._record("log", out, _make_bw(bw, a))
    return out


def sin(a):
    if not isinstance(a, Node):
        return np.sin(value_of(a))
    av = a.value
    out = Node(np.sin(av), a.tape)

    def bw(g):
        _accum(a, g * np.cos(av))

    a.tape._record("sin", out, _make_bw(bw, a))
    return out


def cos(a):
    if not isinstance(a, Node):
        return np.cos(value_of(a))
    av = a.value
    out = Node(np.cos(av), a.tape)

    def bw(g):
        _accum(a, -g * np.sin(av))

    a.tape._record("cos", out, _make_bw(bw, a))
    return out


def sqrt(a):
    if not isinstance(a, Node):
        return np.sqrt(value_of(a))
    ov = np.sqrt(a.value)
    out = Node(ov, a.tape)

    def bw(g):
        _accum(a, g * (0.5 / ov))

    a.tape._record("sqrt", out, _make_bw(bw, a))
    return out


def absolute(a):
    if not isinstance(a, Node):
        return np.abs(value_of(a))
    av = a.value
    out = Node(np.abs(av), a.tape)

    def bw(g):
        _accum(a, g * np.sign(av))

    a.tape._record("abs", out, _make_bw(bw, a))
    return out


def sigmoid(a):
    if not isinstance(a, Node):
        return 1.0 / (1.0 + np.exp(-value_of(a)))
    ov = 1.0 / (1.0 + np.exp(-a.value))
    out = Node(ov, a.tape)

    def bw(g):
        _accum(a, g * ov * (1.0 - ov))

    a.tape._record("sigmoid", out, _make_bw(bw, a))
    return out


def relu(a):
    if not isinstance(a, Node):
        return np.maximum(value_of(a), 0.0)
    av = a.value
    out = Node(np.maximum(av, 0.0), a.tape)

    def bw(g):
        _accum(a, g * (av > 0.0))

    a.tape._record("relu", out, _make_bw(bw, a))
    return out


def minimum(a, c):
    """min(a, c) against a constant; subgradient follows the live branch."""
    if not isinstance(a, Node):
        return np.minimum(value_of(a), c)
    av = a.value
    out = Node(np.minimum(av, c), a.tape)

    def bw(g):
        _accum(a, g * (av < c))

    a.tape._record("min", out, _make_bw(bw, a))
    return out


def maximum(a, c):
    if not isinstance(a, Node):
        return np.maximum(value_of(a), c)
    av = a.value
    out = Node(np.maximum(av, c), a.tape)

    def bw(g):
        _accum(a, g * (av > c))

    a.tape._record("max", out, _make_bw(bw, a))
    return out


def linear(x, w, b, relu_act: bool = False):
    """Fused affine layer y = x @ w + b with optional ReLU (one record)."""
    tape = _tape_of(x, w, b)
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    pre = xv @ wv + bv
    ov = np.maximum(pre, 0.0) if relu_act else pre
    if tape is None:
        return ov
    out = Node(ov, tape)

    def bw(g):
        if relu_act:
            g = g * (pre > 0.0)
        if isinstance(x, Node):
            _accum(x, g @ wv.T)
        if isinstance(w, Node):
            _accum(w, xv.T @ g)
        if isinstance(b, Node):
            _accum(b, g.sum(axis=0))

    tape._record("linear", out, _make_bw(bw, x, w, b))
    return out


def _matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    if tape is None:
        return np.matmul(av, bv)
    out = Node(np.matmul(av, bv), tape)

    def bw(g):
        if isinstance(a, Node):
            if bv.ndim == 1:
                ga = np.multiply.outer(g, bv) if g.ndim else g * bv
            else:
                ga = np.matmul(g, np.swapaxes(bv, -1, -2))
            _accum(a, _unbroadcast(ga, av.shape))
        if isinstance(b, Node):
            if av.ndim == 1:
                gb = np.multiply.outer(av, g)
            else:
                gb = np.matmul(np.swapaxes(av, -1, -2), g)
            _accum(b, _unbroadcast(gb, bv.shape))

    tape._record("matmul", out, _make_bw(bw, a, b))
    return out


def _sum(a, axis=None, keepdims=False):
    if not isinstance(a, Node):
        return np.sum(value_of(a), axis=axis, keepdims=keepdims)
    av = a.value
    out = Node(av.sum(axis=axis, keepdims=keepdims), a.tape)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, av.shape))

    a.tape._record("sum", out, _make_bw(bw, a))
    return out


def _mean(a, axis=None, keepdims=False):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    return _mul(_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _cumsum(a, axis=0):
    if not isinstance(a, Node):
        return np.cumsum(value_of(a), axis=axis)
    out = Node(np.cumsum(a.value, axis=axis), a.tape)

    def bw(g):
        # adjoint of cumsum is reversed cumsum
        _accum(a, np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis))

    a.tape._record("cumsum", out, _make_bw(bw, a))
    return out


def _reshape(a, shape):
    if not isinstance(a, Node):
        return value_of(a).reshape(shape)
    av = a.value
    out = Node(av.reshape(shape), a.tape)

    def bw(g):
        _accum(a, g.reshape(av.shape))

    a.tape._record("reshape", out, _make_bw(bw, a))
    return out


def swapaxes(a, ax1: int, ax2: int):
    if not isinstance(a, Node):
        return np.swapaxes(value_of(a), ax1, ax2)
    out = Node(np.swapaxes(a.value, ax1, ax2), a.tape)

    def bw(g):
        _accum(a, np.swapaxes(g, ax1, ax2))

    a.tape._record("swapaxes", out, _make_bw(bw, a))
    return out


def _getitem(a, key):
    if not isinstance(a, Node):
        return value_of(a)[key]
    av = a.value
    out = Node(av[key], a.tape)

    def bw(g):
        buf = np.zeros_like(av)
        np.add.at(buf, key, g)
        _accum(a, buf)

    a.tape._record("getitem", out, _make_bw(bw, a))
    return out


def take(a, indices, axis: int = 0):
    """Gather rows along the leading axis (scatter-add on backward)."""
    idx = np.asarray(indices)
    if not isinstance(a, Node):
        return np.take(value_of(a), idx, axis=axis)
    av = a.value
    out = Node(np.take(av, idx, axis=axis), a.tape)

    def bw(g):
        buf = np.zeros_like(av)
        np.add.at(buf, idx if axis == 0 else (slice(None),) * axis + (idx,), g)
        _accum(a, buf)

    a.tape._record("take", out, _make_bw(bw, a))
    return out


def stack(parts, axis: int = 0):
    tape = _tape_of(*parts)
    vals = [value_of(p) for p in parts]
    if tape is None:
        return np.stack(vals, axis=axis)
    out = Node(np.stack(vals, axis=axis), tape)

    def bw(g):
        pieces = np.moveaxis(g, axis, 0)
        for p, gp in zip(parts, pieces):
            if isinstance(p, Node):
                _accum(p, gp)

    tape._record("stack", out, _make_bw(bw, *parts))
    return out


def concatenate(parts, axis: int = 0):
    tape = _tape_of(*parts)
    vals = [value_of(p) for p in parts]
    if tape is None:
        return np.concatenate(vals, axis=axis)
    out = Node(np.concatenate(vals, axis=axis), tape)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(p, Node):
                sl = (slice(None),) * axis + (slice(lo, hi),)
                _accum(p, g[sl])

    tape._record("concat", out, _make_bw(bw, *parts))
    return out


def gate(a, mask):
    """Multiply by a constant 0/1 mask (hard gating, zero grad where masked)."""
    m = np.asarray(mask, dtype=np.float64)
    if not isinstance(a, Node):
        return value_of(a) * m
    out = Node(a.value * m, a.tape)

    def bw(g):
        _accum(a, g * m)

    a.tape._record("gate", out, _make_bw(bw, a))
    return out


def embed_rows(a, row_idx, n_rows: int, fill):
    """Place rows of ``a`` (k, C) at ``row_idx`` of an (n_rows, C) array.

    Remaining rows take the constant ``fill``; gradients flow only to ``a``.
    """
    idx = np.asarray(row_idx)
    fill = np.asarray(fill, dtype=np.float64)
    av = value_of(a)
    base = np.broadcast_to(fill, (n_rows,) + av.shape[1:]).copy()
    if not isinstance(a, Node):
        base[idx] = av
        return base
    base[idx] = a.value
    out = Node(base, a.tape)

    def bw(g):
        _accum(a, g[idx])

    a.tape._record("embed", out, _make_bw(bw, a))
    return out


def filter2d_valid(a, kernel: np.ndarray):
    """'Valid' 2D correlation of an (H, W) or (H, W, C) array with a small
    symmetric kernel.  The kernel is a constant (not differentiated)."""
    from scipy.ndimage import correlate1d

    k = np.asarray(kernel, dtype=np.float64)
    assert k.ndim == 2 and k.shape[0] % 2 == 1 and k.shape[1] % 2 == 1
    ry, rx = k.shape[0] // 2, k.shape[1] // 2
    # separable only if rank 1; fall back to full 2D via two passes when not
    u, s, vt = np.linalg.svd(k)
    if s[1:].max(initial=0.0) > 1e-12 * s[0]:
        raise ContractError("filter2d_valid expects a separable kernel")
    ky = u[:, 0] * np.sqrt(s[0])
    kx = vt[0] * np.sqrt(s[0])

    def fwd(x):
        y = correlate1d(x, ky, axis=0, mode="constant")
        y = correlate1d(y, kx, axis=1, mode="constant")
        return y[ry:-ry or None, rx:-rx or None]

    def adj(g, shape):
        pad = [(ry, ry), (rx, rx)] + [(0, 0)] * (len(shape) - 2)
        gp = np.pad(g, pad)
        # symmetric 1D kernels make the adjoint a correlation with the same taps
        y = correlate1d(gp, ky[::-1], axis=0, mode="constant")
        y = correlate1d(y, kx[::-1], axis=1, mode="constant")
        return y

    if not isinstance(a, Node):
        return fwd(value_of(a))
    av = a.value
    out = Node(fwd(av), a.tape)

    def bw(g):
        _accum(a, adj(g, av.shape))

    a.tape._record("filter2d", out, _make_bw(bw, a))
    return out


# ---------------------------------------------------------------------------
# finite differences


class FdReport:
    """Result of a finite-difference gradient check."""

    def __init__(self, max_rel_error: float, worst_name: str, worst_index: int,
                 n_checked: int):
        self.max_rel_error = max_rel_error
        self.worst_name = worst_name
        self.worst_index = worst_index
        self.n_checked = n_checked

    def __repr__(self):
        return (f"FdReport(max_rel_error={self.max_rel_error:.3e}, "
                f"worst={self.worst_name}[{self.worst_index}], "
                f"n_checked={self.n_checked})")


def finite_difference_check(f, store: ParameterStore, step: float = 1e-6,
                            tolerance: float = 1e-4, sample: int | None = None,
                            rng: np.random.Generator | None = None,
                            abs_floor: float = 1e-6) -> FdReport:
    """Compare the analytic gradient of ``f(store)`` with central differences.

    ``f`` must populate ``store`` gradients (typically by recording a tape
    and calling :func:`backward`) and return the scalar loss.  When
    ``sample`` is given, a seeded random subset of parameters is probed;
    otherwise every parameter is.  Relative error uses a small absolute
    floor so exactly-zero gradients compare cleanly.

    Raises :class:`CheckInvalidError` if two evaluations at the base point
    disagree (non-deterministic ``f``).
    """
    if step <= 0:
        raise ContractError("step must be positive")
    store.zero_grad()
    base = f(store)
    if f(store) != base:
        raise CheckInvalidError("f is not deterministic at the base point")
    store.zero_grad()
    f(store)
    analytic = {name: store.flat_grad(name).copy() for name in store.names()}

    coords = [(name, i) for name in store.names()
              for i in range(store.flat_value(name).size)]
    if sample is not None and sample < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=sample, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    worst_name, worst_index = "", -1
    for name, i in coords:
        vec = store.flat_value(name)
        keep = vec[i]
        vec[i] = keep + step
        store.zero_grad()
        f_plus = f(store)
        vec[i] = keep - step
        store.zero_grad()
        f_minus = f(store)
        vec[i] = keep
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = analytic[name][i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
        if rel > worst:
            worst, worst_name, worst_index = rel, name, i
    store.zero_grad()
    f(store)  # leave gradients in the documented state
    return FdReport(worst, worst_name, worst_index, len(coords))

"""Reverse-mode autodiff over 64-bit numpy arrays.

Every tensor op used by the models lives here. Ops build a dynamic graph
(parent links plus saved activations); ``backward`` walks it in reverse
topological order and accumulates gradients into ``.grad`` buffers.
Gradients accumulate across calls until ``zero_grads`` is used.

Broadcasting in binary ops is deliberately narrow: equal shapes, a scalar
operand, or one operand whose shape is a trailing suffix of the other
(leading batch dims). Anything richer raises ``ShapeError``.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_GELU_CUBIC = 0.044715  # conventional cubic coefficient of the tanh approximation
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_node_ids = itertools.count()

# Distinct computation records may run on separate threads; graph mode and
# the per-pass gradient buffer are therefore thread-local.
_tls = threading.local()


def _grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class MaskError(ValueError):
    """Attention mask leaves a row with no admissible entry."""


@contextmanager
def no_grad():
    """Disable graph construction inside the block (forward values only)."""
    prev = _grad_enabled()
    _tls.grad_enabled = False
    try:
        yield
    finally:
        _tls.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled()


class Tensor:
    """N-dimensional float64 array with gradient accumulation.

    ``grad`` is ``None`` until a backward pass touches the tensor; a tensor
    with ``requires_grad=False`` never accumulates gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward", "_forward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._forward: Optional[Callable[[], np.ndarray]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], None],
          forward_fn: Callable[[], np.ndarray]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_node_ids)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._forward = forward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._forward = None
    return out


# -- broadcasting helpers ----------------------------------------------

def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb:
        return True
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if small == ():
        return True
    return len(small) < len(big) and big[len(big) - len(small):] == small


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` over the leading axes it gained relative to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


def _binary(a, b, op: str, fwd, da, db) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible "
                         "(only scalars and leading batch dims broadcast)")
    data = fwd(a.data, b.data)

    def backward_fn(g):
        if a.requires_grad:
            _accum_into(a, _unbroadcast(da(g, a.data, b.data), a.shape))
        if b.requires_grad:
            _accum_into(b, _unbroadcast(db(g, a.data, b.data), b.shape))

    return _make(data, (a, b), op, backward_fn, lambda: fwd(a.data, b.data))


# -- arithmetic ops -----------------------------------------------------

def add(a, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    """Hadamard product (with the restricted broadcasting rules)."""
    return _binary(a, b, "hadamard", lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def matmul(a, b) -> Tensor:
    """Matrix product over the trailing two dims.

    Leading dims must match exactly, or one operand may be a plain matrix
    broadcast across the other's leading dims.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must have >= 2 dims, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree for shapes {a.shape} x {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if not (la == lb or la == () or lb == ()):
        raise ShapeError(f"matmul: leading dims disagree for shapes {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward_fn(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum_into(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum_into(b, _unbroadcast(gb, b.shape))

    return _make(data, (a, b), "matmul", backward_fn, lambda: np.matmul(a.data, b.data))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` fused into one graph node.

    ``weight`` is stored ``[out, in]``; ``x`` may carry leading batch dims.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]} "
                         f"(shapes {x.shape} x {weight.shape})")
    in_dim, out_dim = weight.shape[1], weight.shape[0]
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, in_dim)
    y2 = x2 @ weight.data.T
    if bias is not None:
        bias = _as_tensor(bias)
        y2 = y2 + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        g2 = g.reshape(-1, out_dim)
        if x.requires_grad:
            _accum_into(x, (g2 @ weight.data).reshape(x.shape))
        if weight.requires_grad:
            _accum_into(weight, g2.T @ x2)
        if bias is not None and bias.requires_grad:
            _accum_into(bias, g2.sum(axis=0))

    def forward_fn():
        y = x.data.reshape(-1, in_dim) @ weight.data.T
        if bias is not None:
            y = y + bias.data
        return y.reshape(lead + (out_dim,))

    return _make(y2.reshape(lead + (out_dim,)), parents, "linear", backward_fn, forward_fn)


# -- activations ---------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # clip keeps exp in range; the tails are saturated anyway
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward_fn(g):
        if a.requires_grad:
            _accum_into(a, g * (a.data > 0))

    return _make(data, (a,), "relu", backward_fn, lambda: np.maximum(a.data, 0.0))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)

    def backward_fn(g):
        if a.requires_grad:
            _accum_into(a, g * (1.0 - t * t))

    return _make(t, (a,), "tanh", backward_fn, lambda: np.tanh(a.data))


def silu(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)

    def backward_fn(g):
        if a.requires_grad:
            _accum_into(a, g * (s * (1.0 + a.data * (1.0 - s))))

    return _make(a.data * s, (a,), "silu", backward_fn,
                 lambda: a.data * _sigmoid(a.data))


def gelu(a) -> Tensor:
    """GELU via the tanh approximation (cubic coefficient 0.044715)."""
    a = _as_tensor(a)

    def f(x):
        u = _SQRT_2_OVER_PI * (x + _GELU_CUBIC * (x * x * x))
        return 0.5 * x * (1.0 + np.tanh(u))

    x = a.data
    u = _SQRT_2_OVER_PI * (x + _GELU_CUBIC * (x * x * x))
    t = np.tanh(u)

    def backward_fn(g):
        if a.requires_grad:
            du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * (x * x))
            _accum_into(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _make(0.5 * x * (1.0 + t), (a,), "gelu", backward_fn, lambda: f(a.data))


_ELEMENTWISE = {"add": add, "sub": sub, "hadamard": mul, "gelu": gelu,
                "silu": silu, "relu": relu, "tanh": tanh}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch by kind name; binary kinds take two operands, unary one."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# -- shape ops ------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    old = a.shape

    def backward_fn(g):
        if a.requires_grad:
            _accum_into(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), "reshape", backward_fn,
                 lambda: a.data.reshape(shape))


def swap_axes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)

    def backward_fn(g):
        if a.requires_grad:
            _accum_into(a, np.swapaxes(g, ax1, ax2))

    return _make(np.ascontiguousarray(np.swapaxes(a.data, ax1, ax2)), (a,), "swap_axes",
                 backward_fn, lambda: np.ascontiguousarray(np.swapaxes(a.data, ax1, ax2)))


def transpose_last(a) -> Tensor:
    return swap_axes(a, -1, -2)


def concat_last(a, b) -> Tensor:
    """Concatenate along the last dim; leading shapes must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_last: leading shapes disagree, {a.shape} vs {b.shape}")
    d1 = a.shape[-1]

    def backward_fn(g):
        if a.requires_grad:
            _accum_into(a, np.ascontiguousarray(g[..., :d1]))
        if b.requires_grad:
            _accum_into(b, np.ascontiguousarray(g[..., d1:]))

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), "concat_last",
                 backward_fn, lambda: np.concatenate([a.data, b.data], axis=-1))


def _scatter_add(buf: np.ndarray, axis: int, idx: np.ndarray, g: np.ndarray) -> None:
    """Sum ``g`` slices into ``buf`` along ``axis`` (duplicates accumulate)."""
    if idx.ndim == 1 and idx.size > 1 and np.all(np.diff(idx) >= 0):
        # sorted indices: segment-sum via reduceat, much faster than add.at
        gm = np.moveaxis(g, axis, 0)
        bm = np.moveaxis(buf, axis, 0)
        uniq, starts = np.unique(idx, return_index=True)
        bm[uniq] += np.add.reduceat(gm, starts, axis=0)
        return
    if idx.ndim == 1 and idx.size * buf.shape[axis] <= 250_000:
        # scatter as a dense matmul over a one-hot selector
        gm = np.moveaxis(g, axis, 0).reshape(idx.size, -1)
        onehot = np.zeros((buf.shape[axis], idx.size))
        onehot[idx, np.arange(idx.size)] = 1.0
        bm = np.moveaxis(buf, axis, 0)
        bm += (onehot @ gm).reshape(bm.shape)
        return
    np.add.at(buf, (slice(None),) * axis + (idx,), g)


def index_select(a, axis: int, indices) -> Tensor:
    """Gather ``indices`` along ``axis``; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise IndexError(f"index_select: indices out of range for axis {axis} "
                         f"of shape {a.shape} (got min={idx.min()}, max={idx.max()})")

    def backward_fn(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            if idx.ndim == 1:
                _scatter_add(buf, axis, idx, g)
            else:
                np.add.at(buf, (slice(None),) * axis + (idx,), g)
            _accum_into(a, buf)

    return _make(np.take(a.data, idx, axis=axis), (a,), "index_select",
                 backward_fn, lambda: np.take(a.data, idx, axis=axis))


def narrow(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along ``axis``; backward zero-pads."""
    a = _as_tensor(a)
    if not 0 <= start <= stop <= a.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{stop}] outside axis {axis} of {a.shape}")
    sl = (slice(None),) * axis + (slice(start, stop),)

    def backward_fn(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[sl] = g
            _accum_into(a, buf)

    return _make(np.ascontiguousarray(a.data[sl]), (a,), "narrow",
                 backward_fn, lambda: np.ascontiguousarray(a.data[sl]))


# -- reductions -----------------------------------------------------------

def sum_all(a) -> Tensor:
    a = _as_tensor(a)

    def backward_fn(g):
        if a.requires_grad:
            _accum_into(a, np.broadcast_to(g, a.shape).copy())

    return _make(a.data.sum(), (a,), "sum", backward_fn, lambda: a.data.sum())


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    return mul(sum_all(a), 1.0 / a.size)


# -- normalization and softmax ---------------------------------------------

def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Standardize the last dim to mean 0, population variance 1 (no affine)."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    n = a.shape[-1]

    def backward_fn(g):
        if a.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            _accum_into(a, inv * (g - gm - y * gym))

    def forward_fn():
        m = a.data.mean(axis=-1, keepdims=True)
        c = a.data - m
        v = (c * c).mean(axis=-1, keepdims=True)
        return c * (1.0 / np.sqrt(v + eps))  # same op order as above: replay is bit-exact

    return _make(y, (a,), "layer_norm", backward_fn, forward_fn)


def softmax_masked(a, mask) -> Tensor:
    """Row-wise softmax over the last dim with hard masking.

    ``mask`` is a boolean array broadcastable to ``a``'s shape; ``True``
    marks admissible entries. Masked entries are exactly 0 in the output.
    Raises ``MaskError`` if any row has no admissible entry.
    """
    a = _as_tensor(a)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not m.any(axis=-1).all():
        raise MaskError("softmax_masked: at least one row is fully masked")
    row_max = np.max(a.data, axis=-1, keepdims=True, initial=-np.inf, where=m)
    e = np.exp(a.data - row_max) * m
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum_into(a, y * (g - dot))

    def forward_fn():
        rm = np.max(a.data, axis=-1, keepdims=True, initial=-np.inf, where=m)
        ee = np.exp(a.data - rm) * m
        return ee / ee.sum(axis=-1, keepdims=True)

    return _make(y, (a,), "softmax_masked", backward_fn, forward_fn)


def log_softmax(a) -> Tensor:
    """Stable log-softmax over the last dim (unmasked)."""
    a = _as_tensor(a)
    row_max = a.data.max(axis=-1, keepdims=True)
    shifted = a.data - row_max
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse

    def backward_fn(g):
        if a.requires_grad:
            p = np.exp(y)
            _accum_into(a, g - p * g.sum(axis=-1, keepdims=True))

    def forward_fn():
        rm = a.data.max(axis=-1, keepdims=True)
        sh = a.data - rm
        return sh - np.log(np.exp(sh).sum(axis=-1, keepdims=True))

    return _make(y, (a,), "log_softmax", backward_fn, forward_fn)


# -- backward pass ---------------------------------------------------------

def _accum_into(t: Tensor, g: np.ndarray):
    """Accumulate into the current pass buffer (leaves and interior alike)."""
    buf = _tls.pass_grads
    key = id(t)
    cur = buf.get(key)
    buf[key] = g if cur is None else cur + g


def _topo_order(root: Tensor) -> list:
    """Iterative post-order over parents (nodes requiring grad only)."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``.grad`` for every requires-grad tensor reachable from ``loss``.

    Repeated calls without zeroing accumulate. Contributions from shared
    subexpressions are summed. Deterministic given an identical graph.
    """
    if loss.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    buf: dict = {}
    _tls.pass_grads = buf
    buf[id(loss)] = np.ones((), dtype=np.float64)
    try:
        for node in reversed(order):
            g = buf.get(id(node))
            if g is None:
                continue
            if g.shape != node.shape:
                g = np.broadcast_to(g, node.shape).copy()
            # pass buffers are never mutated in place, so aliasing is safe
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is not None:
                node._backward(g)
    finally:
        _tls.pass_grads = {}


def zero_grads(tensors: Iterable[Tensor]):
    for t in tensors:
        t.grad = None


# -- computation record ------------------------------------------------------

def computation_record(out: Tensor) -> list:
    """Topologically ordered node list (inputs precede outputs) ending at ``out``."""
    order, seen, stack = [], set(), [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def replay(out: Tensor):
    """Re-execute the record forward, overwriting each non-leaf's data.

    Deterministic ops and untouched leaves make the replay bit-identical.
    """
    for node in computation_record(out):
        if node._forward is not None:
            node.data = node._forward()


# -- finite differences --------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max slot-wise relative error between autodiff and central differences.

    ``f`` must be scalar-valued and deterministic. The relative error per
    slot uses denominator ``max(|grad|, 1e-8)`` with ``|grad|`` the larger
    of the two estimates.
    """
    probe = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(probe)
    if out.shape != ():
        raise ValueError(f"finite_diff_check: f must be scalar-valued, got shape {out.shape}")
    backward(out)
    ad = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    fd = np.zeros(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(probe).data)
            flat[i] = orig - h
            fm = float(f(probe).data)
            flat[i] = orig
            fd[i] = (fp - fm) / (2.0 * h)
    ad = ad.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(ad - fd) / denom))


def finite_diff_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                       h: float = 1e-5) -> float:
    """Finite-difference check of ``loss_fn`` against every slot of ``params``.

    ``loss_fn`` closes over the given parameter tensors and must be
    deterministic. The graph is built once; each perturbation replays only
    the nodes downstream of the perturbed parameter through the recorded
    forward closures. Returns the max slot-wise relative error.
    """
    zero_grads(params)
    loss = loss_fn()
    backward(loss)
    record = computation_record(loss)
    worst = 0.0
    for p in params:
        dirty_ids = {id(p)}
        dirty = []
        for node in record:
            if node._forward is not None and any(id(q) in dirty_ids for q in node._parents):
                dirty_ids.add(id(node))
                dirty.append(node)

        def recompute():
            for node in dirty:
                node.data = node._forward()

        ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        ad = ad.reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            recompute()
            fp = float(loss.data)
            flat[i] = orig - h
            recompute()
            fm = float(loss.data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            denom = max(abs(ad[i]), abs(fd), 1e-8)
            worst = max(worst, abs(ad[i] - fd) / denom)
        recompute()  # leave the graph clean for the next parameter
    zero_grads(params)
    return worst

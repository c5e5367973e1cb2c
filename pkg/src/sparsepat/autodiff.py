"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation records a :class:`TapeNode` on its output
tensor.  ``backward`` walks those nodes in reverse topological order, so a
graph is built implicitly by the forward pass and discarded after one
backward sweep (one graph per training step).

Activations are 4-D ``(batch, channel, height, width)``; parameters may be
1-D (bias, normalization affine) or 4-D (kernels).  Broadcasting is limited
to per-channel bias and scale.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, optimizer updates)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    pass


class TapeNode:
    __slots__ = ("kind", "inputs", "backward_fn", "consumed")

    def __init__(self, kind, inputs, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """Array plus optional gradient buffer and the node that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _needs_grad(inputs) -> bool:
    return _grad_enabled() and any(t.requires_grad for t in inputs)


def _make(data, kind, inputs, backward_fn) -> Tensor:
    out = Tensor(data)
    if _needs_grad(inputs):
        out.requires_grad = True
        out.node = TapeNode(kind, tuple(inputs), backward_fn)
    return out


def _check_same(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("add", a, b)
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("sub", a, b)
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, factor: float) -> Tensor:
    return _make(a.data * factor, "scale", (a,), lambda g: (g * factor,))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), "abs", (a,), lambda g: (g * sign,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    return _make(s, "sigmoid", (a,), lambda g: (g * s * (1 - s),))


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) without overflow."""
    x = a.data
    val = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    s = _stable_sigmoid(x)
    return _make(val, "softplus", (a,), lambda g: (g * s,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), "clamp", (a,), lambda g: (g * mask,))


def _scalar_shape(x):
    return (1,) * max(x.ndim, 1)


def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    val = a.data.sum(dtype=a.dtype).reshape(_scalar_shape(a.data))
    return _make(val, "sum", (a,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    val = (a.data.sum(dtype=a.dtype) / n).reshape(_scalar_shape(a.data))
    return _make(val, "mean", (a,), lambda g: (np.full(shape, g.reshape(()) / n, dtype=a.dtype),))


def concat(tensors, axis=1) -> Tensor:
    """Channel-wise concatenation; other dimensions must agree."""
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, bw)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.shape != (x.shape[1],):
        raise ShapeError(f"channel_bias: bias shape {b.shape} does not match {x.shape[1]} channels")
    return _make(
        x.data + b.data[None, :, None, None],
        "channel_bias",
        (x, b),
        lambda g: (g, g.sum(axis=(0, 2, 3))),
    )


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp, kh, kw, stride, ho, wo):
    # xp: padded (B, C, Hp, Wp) -> (B, C, kh, kw, ho, wo)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.transpose(0, 1, 4, 5, 2, 3)


def _conv_core(x, w, stride, padding):
    """Cross-correlation of x (B,C,H,W) with w (O,C,kh,kw); returns (out, cols)."""
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if kh == kw == 1 and stride == 1 and padding == 0:
        cols = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, b * h * wd)
        out = w.reshape(o, c) @ cols
        return out.reshape(o, b, h, wd).transpose(1, 0, 2, 3), cols
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    # (B, C, kh, kw, ho, wo) -> (C*kh*kw, B*ho*wo)
    cols = np.ascontiguousarray(cols.transpose(1, 2, 3, 0, 4, 5)).reshape(c * kh * kw, b * ho * wo)
    out = w.reshape(o, -1) @ cols
    return out.reshape(o, b, ho, wo).transpose(1, 0, 2, 3), cols


def _conv_input_grad(g, w, in_shape, stride, padding):
    """Adjoint of _conv_core with respect to its input."""
    b, c, h, wd = in_shape
    o, _, kh, kw = w.shape
    _, _, ho, wo = g.shape
    dcols = w.reshape(o, -1).T @ g.transpose(1, 0, 2, 3).reshape(o, -1)
    if kh == kw == 1 and stride == 1 and padding == 0:
        return dcols.reshape(c, b, h, wd).transpose(1, 0, 2, 3)
    dcols = dcols.reshape(c, kh, kw, b, ho, wo)
    dxp = np.zeros((b, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                :, i, j
            ].transpose(1, 0, 2, 3)
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def _conv_weight_grad(g, cols, w_shape):
    o = w_shape[0]
    return (g.transpose(1, 0, 2, 3).reshape(o, -1) @ cols.T).reshape(w_shape)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    ho = conv_output_size(x.shape[2], w.shape[2], stride, padding)
    wo = conv_output_size(x.shape[3], w.shape[3], stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: non-positive output size {ho}x{wo} for input {x.shape}")
    out, cols = _conv_core(x.data, w.data, stride, padding)
    in_shape, w_shape, wd = x.shape, w.shape, w.data
    inputs = (x, w) if b is None else (x, w, b)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias shape {b.shape}, expected ({w.shape[0]},)")
        out = out + b.data[None, :, None, None]

    def bw(g):
        gx = _conv_input_grad(g, wd, in_shape, stride, padding) if x.requires_grad else None
        gw = _conv_weight_grad(g, cols, w_shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(np.ascontiguousarray(out), "conv2d", inputs, bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=2, padding=0) -> Tensor:
    """Transposed convolution; ``w`` has shape (in, out, kh, kw).

    Forward is the input-gradient of ``conv2d`` with the same kernel, so the
    two are adjoint by construction.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input has {x.shape[1]} channels, kernel expects {w.shape[0]}")
    bsz, _, h, wd_ = x.shape
    _, oc, kh, kw = w.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wd_ - 1) * stride - 2 * padding + kw
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive output size {ho}x{wo}")
    out_shape = (bsz, oc, ho, wo)
    out = _conv_input_grad(x.data, w.data, out_shape, stride, padding)
    wdat = w.data
    inputs = (x, w) if b is None else (x, w, b)
    if b is not None:
        if b.shape != (oc,):
            raise ShapeError(f"conv_transpose2d: bias shape {b.shape}, expected ({oc},)")
        out = out + b.data[None, :, None, None]

    def bw(g):
        gx, cols = _conv_core(g, wdat, stride, padding)
        gw = None
        if w.requires_grad:
            # d/dw <x, conv(g, w)> in conv-weight layout (in, out, kh, kw)
            gw = _conv_weight_grad(x.data, cols, wdat.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(np.ascontiguousarray(out), "conv_transpose2d", inputs, bw)


def maxpool2x2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial dims must be even, got {h}x{w}")
    blocks = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h // 2, w // 2, 4
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(b, c, h, w),)

    return _make(out, "maxpool2x2", (x,), bw)


# ---------------------------------------------------------------------------
# normalization


def _normalize(x, gamma, beta, axes, eps, kind, stats=None):
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"{kind}: affine params {gamma.shape}/{beta.shape} do not match {x.shape[1]} channels"
        )
    xd = x.data
    if stats is None:
        mu = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
    else:
        mu = stats[0].reshape(1, -1, 1, 1).astype(xd.dtype)
        var = stats[1].reshape(1, -1, 1, 1).astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    g4 = gamma.data.reshape(1, -1, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, -1, 1, 1)
    n = np.prod([xd.shape[a] for a in axes])

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * g4
        if stats is not None:
            dx = dxhat * inv
        else:
            dx = (inv / n) * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        return dx, dgamma, dbeta

    return _make(out, kind, (x, gamma, beta), bw), mu, var


def batch_norm(x, gamma, beta, running_mean=None, running_var=None, training=True,
               momentum=0.1, eps=1e-5) -> Tensor:
    """Per-channel normalization over (batch, H, W).

    In training mode the batch statistics are used and the running buffers
    (numpy arrays, updated in place) track them with ``momentum``; in eval
    mode the running buffers are used.
    """
    if training:
        out, mu, var = _normalize(x, gamma, beta, (0, 2, 3), eps, "batch_norm")
        if running_mean is not None:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var.reshape(-1) * (n / max(n - 1, 1))
            running_mean *= 1 - momentum
            running_mean += momentum * mu.reshape(-1)
            running_var *= 1 - momentum
            running_var += momentum * unbiased
        return out
    out, _, _ = _normalize(x, gamma, beta, (0, 2, 3), eps, "batch_norm",
                           stats=(running_mean, running_var))
    return out


def instance_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    out, _, _ = _normalize(x, gamma, beta, (2, 3), eps, "instance_norm")
    return out


# ---------------------------------------------------------------------------
# dispatch and backward

OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "abs": abs_,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "clamp": clamp,
    "sum": sum_,
    "mean": mean,
    "concat": lambda *ts, axis=1: concat(ts, axis=axis),
    "channel_bias": add_channel_bias,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "maxpool2x2": maxpool2x2,
    "batch_norm": batch_norm,
    "instance_norm": instance_norm,
}


def forward_op(kind: str, inputs, **attrs) -> Tensor:
    """Apply the operation registered under ``kind`` to ``inputs``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order[::-1]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``."""
    if loss.data.size != 1 or any(d != 1 for d in loss.shape):
        raise ShapeError(f"backward: loss must be a single-element tensor, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise RuntimeError("backward: loss does not depend on any tensor requiring grad")
    if loss.node.consumed:
        raise RuntimeError("backward: graph already consumed; run a new forward pass first")

    grads = {id(loss): np.ones_like(loss.data)}
    for t in _topo_order(loss):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t.node
        if node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if node.consumed:
            raise RuntimeError("backward: graph already consumed; run a new forward pass first")
        in_grads = node.backward_fn(g)
        node.consumed = True
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                ig = ig.reshape(inp.shape)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
    # drop references so saved activations can be freed
    _release(loss)


def _release(root):
    stack = [root]
    while stack:
        t = stack.pop()
        node = t.node
        if node is None or node.backward_fn is None:
            continue
        node.backward_fn = None
        stack.extend(node.inputs)


def zero_grads(params) -> None:
    for p in params:
        if p.grad is not None:
            p.grad[...] = 0
        else:
            p.grad = np.zeros_like(p.data)

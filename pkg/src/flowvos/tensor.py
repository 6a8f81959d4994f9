"""N-dimensional float tensors with a reverse-mode differentiation tape.

Values are stored in 32-bit precision by default (64-bit leaves propagate
64-bit through the graph, which the gradient checker exploits); reductions
accumulate in 64 bits regardless of the storage dtype. Tensors are immutable
after creation except for gradient accumulation, so independent graphs may
be evaluated from different threads as long as each thread backpropagates
only through its own graph.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InputError, ShapeError, UsageError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording on the current thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


_check_finite = False


def set_finite_checks(enabled: bool) -> None:
    """Verify every primitive output is finite (debug aid, off by default)."""
    global _check_finite
    _check_finite = enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor/tensor division is not a primitive; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise InputError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out._op = op
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
        out._op = op
    return out


class Tape:
    """Topologically ordered record of the ops reachable from a root tensor.

    The order guarantees every node's parents precede it; a backward sweep
    therefore visits each node exactly once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @staticmethod
    def trace(root: Tensor) -> "Tape":
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return Tape(nodes)


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate dLoss/dX into .grad of every requires_grad tensor in the graph."""
    if loss.data.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = Tape.trace(loss)
    grads: dict[int, np.ndarray] = {}
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    grads[id(loss)] = seed
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.astype(g.dtype, copy=False)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), vjp, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), vjp, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    out_dtype = np.result_type(a.dtype, b.dtype)
    # 64-bit accumulation over the contracted axis
    data = np.matmul(a.data.astype(np.float64, copy=False), b.data.astype(np.float64, copy=False))
    data = data.astype(out_dtype, copy=False)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            ga = _unbroadcast(ga, a.data.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            gb = _unbroadcast(gb, b.data.shape)
        return ga, gb

    return _result(data, (a, b), vjp, "matmul")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return _result(y, (x,), vjp, "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    y = np.maximum(x.data, 0)

    def vjp(g):
        return (g * (x.data > 0),)

    return _result(y, (x,), vjp, "relu")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    y = (e / denom).astype(x.dtype, copy=False)

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype, copy=False)
        return (y * (g - inner),)

    return _result(y, (x,), vjp, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True, dtype=np.float64)).astype(x.dtype, copy=False)
    y = shifted - lse
    sm = np.exp(y)

    def vjp(g):
        gsum = g.sum(axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype, copy=False)
        return (g - sm * gsum,)

    return _result(y, (x,), vjp, "log_softmax")


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype, copy=False)
    data = np.asarray(data)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).astype(x.dtype, copy=False).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return _result(data, (x,), vjp, "sum")


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.data.shape[a] for a in axes]))
    s = tsum(x, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _result(data, (x,), vjp, "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    data = np.transpose(x.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _result(data, (x,), vjp, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, tuple(ts), vjp, "concat")


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; gradient scatters back into zeros."""
    x = as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = x.data[idx].copy()

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _result(data, (x,), vjp, "narrow")


def bilinear_sample(feature, points) -> Tensor:
    """Sample a [C, H, W] map at P fractional (x, y) pixel locations.

    Coordinates are clamped to the valid grid before interpolation; the
    coordinate gradient is zeroed where the raw coordinate fell outside
    [0, W-1] x [0, H-1]. Returns [P, C], differentiable in both inputs.
    """
    feature, points = as_tensor(feature), as_tensor(points)
    if feature.ndim != 3:
        raise ShapeError(f"bilinear_sample expects [C, H, W] features, got {feature.shape}")
    if points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"bilinear_sample expects [P, 2] points, got {points.shape}")
    if not np.all(np.isfinite(points.data)):
        raise InputError("bilinear_sample: non-finite sampling coordinates")
    C, H, W = feature.shape
    xr = points.data[:, 0]
    yr = points.data[:, 1]
    inside_x = (xr >= 0.0) & (xr <= W - 1)
    inside_y = (yr >= 0.0) & (yr <= H - 1)
    x = np.clip(xr, 0.0, W - 1)
    y = np.clip(yr, 0.0, H - 1)
    x0 = np.clip(np.floor(x), 0, max(W - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(y), 0, max(H - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (x - x0).astype(feature.dtype)
    wy = (y - y0).astype(feature.dtype)

    f = feature.data
    f00 = f[:, y0, x0]  # [C, P]
    f01 = f[:, y0, x1]
    f10 = f[:, y1, x0]
    f11 = f[:, y1, x1]
    # weight form (not lerp form) so integer coordinates reproduce the grid
    # value bit-exactly
    w00 = (1 - wx) * (1 - wy)
    w01 = wx * (1 - wy)
    w10 = (1 - wx) * wy
    w11 = wx * wy
    out = (f00 * w00 + f01 * w01 + f10 * w10 + f11 * w11).T.copy()  # [P, C]

    def vjp(g):
        gT = g.T  # [C, P]
        gf = gp = None
        if feature.requires_grad:
            gf = np.zeros_like(f)
            np.add.at(gf, (slice(None), y0, x0), gT * w00)
            np.add.at(gf, (slice(None), y0, x1), gT * w01)
            np.add.at(gf, (slice(None), y1, x0), gT * w10)
            np.add.at(gf, (slice(None), y1, x1), gT * w11)
        if points.requires_grad:
            ddx = (1 - wy) * (f01 - f00) + wy * (f11 - f10)  # [C, P]
            ddy = (1 - wx) * (f10 - f00) + wx * (f11 - f01)
            gx = (gT * ddx).sum(axis=0, dtype=np.float64) * inside_x
            gy = (gT * ddy).sum(axis=0, dtype=np.float64) * inside_y
            gp = np.stack([gx, gy], axis=1).astype(points.dtype, copy=False)
        return gf, gp

    return _result(out, (feature, points), vjp, "bilinear_sample")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on a single image: [Cin, H, W] -> [Cout, H', W']."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects [Cin,H,W] and [Cout,Cin,kh,kw], got {x.shape}, {weight.shape}")
    cin, H, W = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Hp, Wp = xp.shape[1:]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    s0, s1, s2 = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(cin, kh, kw, Ho, Wo),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
        writeable=False,
    )
    cols = patches.reshape(cin * kh * kw, Ho * Wo)
    w2 = weight.data.reshape(cout, cin * kh * kw)
    out = np.matmul(w2.astype(np.float64, copy=False), cols.astype(np.float64, copy=False))
    out = out.astype(x.dtype, copy=False).reshape(cout, Ho, Wo)
    b = as_tensor(bias) if bias is not None else None
    if b is not None:
        out = out + b.data.reshape(cout, 1, 1)

    def vjp(g):
        g2 = g.reshape(cout, Ho * Wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.T).reshape(weight.shape).astype(weight.dtype, copy=False)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=1, dtype=np.float64).astype(b.dtype, copy=False)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(cin, kh, kw, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += gcols[:, i, j]
            gx = gxp[:, padding : padding + H, padding : padding + W] if padding else gxp
        return gx, gw, gb

    parents = (x, weight, b) if b is not None else (x, weight)
    if b is None:
        return _result(out, parents, lambda g: vjp(g)[:2], "conv2d")
    return _result(out, parents, vjp, "conv2d")


def _upsample_axis_weights(n_in: int, n_out: int, dtype):
    # half-pixel centers (align_corners=False); constant maps stay constant
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.clip(np.floor(src), 0, max(n_in - 2, 0)).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = (src - i0).astype(dtype)
    return i0, i1, w


def upsample_bilinear(x, factor: int) -> Tensor:
    """Bilinear upsampling of a [C, H, W] map by an integer factor."""
    x = as_tensor(x)
    C, H, W = x.shape
    Ho, Wo = H * factor, W * factor
    r0, r1, wr = _upsample_axis_weights(H, Ho, x.dtype)
    c0, c1, wc = _upsample_axis_weights(W, Wo, x.dtype)
    rows = x.data[:, r0, :] * (1 - wr)[None, :, None] + x.data[:, r1, :] * wr[None, :, None]
    out = rows[:, :, c0] * (1 - wc)[None, None, :] + rows[:, :, c1] * wc[None, None, :]

    def vjp(g):
        grows = np.zeros((C, Ho, W), dtype=g.dtype)
        np.add.at(grows, (slice(None), slice(None), c0), g * (1 - wc)[None, None, :])
        np.add.at(grows, (slice(None), slice(None), c1), g * wc[None, None, :])
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), r0, slice(None)), grows * (1 - wr)[None, :, None])
        np.add.at(gx, (slice(None), r1, slice(None)), grows * wr[None, :, None])
        return (gx,)

    return _result(out.astype(x.dtype, copy=False), (x,), vjp, "upsample_bilinear")


def group_norm(x, num_groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Group normalization over a [C, H, W] map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C, H, W = x.shape
    if C % num_groups:
        raise ShapeError(f"group_norm: {C} channels not divisible by {num_groups} groups")
    gsz = C // num_groups
    xg = x.data.reshape(num_groups, gsz * H * W)
    mu = xg.mean(axis=1, keepdims=True, dtype=np.float64)
    var = ((xg - mu) ** 2).mean(axis=1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = ((xg - mu) * inv).astype(x.dtype).reshape(C, H, W)
    out = xhat * gamma.data.reshape(C, 1, 1) + beta.data.reshape(C, 1, 1)

    def vjp(g):
        gxh = g * gamma.data.reshape(C, 1, 1)
        gxh = gxh.reshape(num_groups, gsz * H * W)
        xh = xhat.reshape(num_groups, gsz * H * W)
        n = gsz * H * W
        gsum = gxh.sum(axis=1, keepdims=True, dtype=np.float64)
        gdot = (gxh * xh).sum(axis=1, keepdims=True, dtype=np.float64)
        gx = (inv / n) * (n * gxh - gsum - xh * gdot)
        gx = gx.astype(x.dtype, copy=False).reshape(C, H, W) if x.requires_grad else None
        gg = (g * xhat).sum(axis=(1, 2), dtype=np.float64).astype(gamma.dtype) if gamma.requires_grad else None
        gb = g.sum(axis=(1, 2), dtype=np.float64).astype(beta.dtype) if beta.requires_grad else None
        return gx, gg, gb

    return _result(out, (x, gamma, beta), vjp, "group_norm")


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy; logits [K, H, W], integer labels [H, W]."""
    logits = as_tensor(logits)
    K = logits.shape[0]
    lab = np.asarray(labels)
    if lab.shape != logits.shape[1:]:
        raise ShapeError(f"cross_entropy: labels {lab.shape} vs logits {logits.shape}")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    kidx = lab.reshape(-1)
    hw = np.arange(kidx.size)
    flat = onehot.reshape(K, -1)
    flat[kidx, hw] = 1.0
    lsm = log_softmax(logits, axis=0)
    picked = mul(lsm, Tensor(onehot))
    return mul(tsum(picked), -1.0 / kidx.size)

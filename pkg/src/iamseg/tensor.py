"""Dense tensors with reverse-mode automatic differentiation on a dynamic tape.

The op set is exactly what the segmentation model needs: 3x3 (grouped,
optionally strided) convolution, bilinear resampling, pooling, pointwise
nonlinearities, matmul/linear, concat, reductions and scalar powers. Every
op registers a backward rule; `iamseg.gradcheck` verifies all of them
against central differences.
"""

from __future__ import annotations

import functools
from typing import Callable, Iterable, Sequence

import numpy as np

EPS_CLAMP = 1e-12  # log/sqrt arguments are clamped to this floor

_SUPPORTED_DTYPES = (np.float32, np.float64)


class TensorError(ValueError):
    """Raised on shape/dtype violations and tape misuse."""


class Tensor:
    """A dense row-major array, optionally tracked for gradients.

    Data is owned by the tensor and treated as immutable once created;
    only the optimizer mutates parameter buffers, between tapes.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _SUPPORTED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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
        if self.data.size != 1:
            raise TensorError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def constant(value, dtype=np.float32) -> Tensor:
    """An untracked tensor, e.g. for masks and targets."""
    return Tensor(np.asarray(value, dtype=dtype))


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of ops; backward replays it once, in reverse."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._used = False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self._nodes.append((out, inputs, backward_fn))


_ACTIVE_TAPE: Tape | None = None


class tape:
    """Context manager activating a fresh tape for recording."""

    def __enter__(self) -> Tape:
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TensorError("a tape is already active; nested tapes are not supported")
        _ACTIVE_TAPE = Tape()
        return _ACTIVE_TAPE

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


def backward(loss: Tensor) -> None:
    """Populate .grad for every tracked tensor reachable from `loss`."""
    t = _ACTIVE_TAPE
    if t is None or len(t) == 0:
        raise TensorError("backward requires a non-empty active tape")
    if t._used:
        raise TensorError("backward was already run on this tape; open a new tape first")
    if loss.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    t._used = True
    loss.grad = np.ones_like(loss.data)
    for out, inputs, backward_fn in reversed(t._nodes):
        g = out.grad
        if g is None:
            continue
        input_grads = backward_fn(g)
        for inp, gi in zip(inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.ascontiguousarray(gi)
            else:
                np.add(inp.grad, gi, out=inp.grad)


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    """Wrap op output; record on the active tape when gradients are needed."""
    t = _ACTIVE_TAPE
    track = t is not None and any(i.requires_grad for i in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        t.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# pointwise and linear-algebra ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise TensorError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise TensorError(f"transpose expects a 2-D tensor, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make(out.copy(), (a,), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[M,K] @ weight[O,K]^T + bias[O]."""
    if x.shape[1] != weight.shape[1]:
        raise TensorError(f"linear inner dimensions differ: x {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def bwd(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make(out, (x, weight, bias), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _make(out, tuple(tensors), bwd)


def gather_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def bwd(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _make(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bwd(g):
        return (g * (a.data > 0),)

    return _make(out, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise TensorError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    clamped = np.maximum(a.data, EPS_CLAMP)
    out = np.log(clamped)

    def bwd(g):
        return (np.where(a.data > EPS_CLAMP, g / clamped, 0.0),)

    return _make(out, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    clamped = np.maximum(a.data, EPS_CLAMP)
    out = np.sqrt(clamped)

    def bwd(g):
        return (np.where(a.data > EPS_CLAMP, 0.5 * g / out, 0.0),)

    return _make(out, (a,), bwd)


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise a**exponent; caller guarantees a >= 0 for non-integer exponents."""
    p = float(exponent)
    out = a.data**p

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, (a,), bwd)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _make(out, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# spatial ops


def _im2col(padded: np.ndarray, kh: int, kw: int, stride: int):
    view = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    view = view[:, ::stride, ::stride]
    c, ho, wo = view.shape[:3]
    cols = view.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, groups: int = 1) -> Tensor:
    """3x3 cross-correlation, padding 1, stride 1 or 2, optional channel groups."""
    if x.ndim != 3:
        raise TensorError(f"conv2d input must be [C,H,W], got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise TensorError(f"conv2d weight must be [C_out,C_in/groups,3,3], got shape {weight.shape}")
    cin, h, w = x.shape
    cout = weight.shape[0]
    if stride not in (1, 2):
        raise TensorError(f"conv2d stride must be 1 or 2, got {stride}")
    if cin % groups or cout % groups:
        raise TensorError(f"channels (in={cin}, out={cout}) not divisible by groups={groups}")
    if weight.shape[1] != cin // groups:
        raise TensorError(
            f"conv2d weight expects {weight.shape[1]} input channels per group, input has {cin // groups}"
        )
    if bias.shape != (cout,):
        raise TensorError(f"conv2d bias must be [{cout}], got shape {bias.shape}")

    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    cig, cog = cin // groups, cout // groups
    cols_by_group = []
    outs = []
    for g in range(groups):
        cols, ho, wo = _im2col(padded[g * cig : (g + 1) * cig], 3, 3, stride)
        wg = weight.data[g * cog : (g + 1) * cog].reshape(cog, cig * 9)
        outs.append(wg @ cols)
        cols_by_group.append(cols)
    out = np.concatenate(outs, axis=0) + bias.data[:, None]
    out = out.reshape(cout, ho, wo)

    def bwd(g_out):
        gf = g_out.reshape(cout, ho * wo)
        gw = np.empty_like(weight.data)
        gx_padded = np.zeros_like(padded)
        for g in range(groups):
            gfg = gf[g * cog : (g + 1) * cog]
            cols = cols_by_group[g]
            gw[g * cog : (g + 1) * cog] = (gfg @ cols.T).reshape(cog, cig, 3, 3)
            gcols = (weight.data[g * cog : (g + 1) * cog].reshape(cog, cig * 9).T @ gfg).reshape(
                cig, 3, 3, ho, wo
            )
            sl = gx_padded[g * cig : (g + 1) * cig]
            for ki in range(3):
                for kj in range(3):
                    sl[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += gcols[:, ki, kj]
        gx = gx_padded[:, 1 : 1 + h, 1 : 1 + w]
        gb = gf.sum(axis=1)
        return gx, gw, gb

    return _make(out, (x, weight, bias), bwd)


def max_pool2x2(x: Tensor) -> Tensor:
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise TensorError(f"max_pool2x2 needs even spatial size, got {h}x{w}")
    windows = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(-1, 4)
    idx = windows.argmax(axis=1)
    rows = np.arange(windows.shape[0])
    out = windows[rows, idx].reshape(c, h // 2, w // 2)

    def bwd(g):
        gw = np.zeros_like(windows)
        gw[rows, idx] = g.reshape(-1)
        gx = gw.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
        return (gx,)

    return _make(out, (x,), bwd)


def _pool_bins(n: int, k: int):
    starts = [(i * n) // k for i in range(k)]
    ends = [-(-((i + 1) * n) // k) for i in range(k)]
    return starts, ends


def adaptive_avg_pool(x: Tensor, out_size: int) -> Tensor:
    """Average-pool [C,H,W] down to [C,k,k]; k is clamped to the input size."""
    c, h, w = x.shape
    kh = min(out_size, h)
    kw = min(out_size, w)
    rs, re = _pool_bins(h, kh)
    cs, ce = _pool_bins(w, kw)
    # bin sums via a zero-padded 2-D prefix sum
    ii = np.zeros((c, h + 1, w + 1), dtype=np.float64)
    ii[:, 1:, 1:] = x.data.cumsum(axis=1).cumsum(axis=2)
    r0 = np.asarray(rs)[:, None]
    r1 = np.asarray(re)[:, None]
    c0 = np.asarray(cs)[None, :]
    c1 = np.asarray(ce)[None, :]
    sums = ii[:, r1, c1] - ii[:, r0, c1] - ii[:, r1, c0] + ii[:, r0, c0]
    areas = ((r1 - r0) * (c1 - c0)).astype(np.float64)
    out = (sums / areas).astype(x.dtype)

    def bwd(g):
        gx = np.zeros_like(x.data)
        scaled = g / areas.astype(x.dtype)
        for i in range(kh):
            for j in range(kw):
                gx[:, rs[i] : re[i], cs[j] : ce[j]] += scaled[:, i, j, None, None]
        return (gx,)

    return _make(out, (x,), bwd)


@functools.lru_cache(maxsize=None)
def _interp_matrix(n_in: int, n_out: int, dtype_name: str) -> np.ndarray:
    """Rows map output samples to the two nearest inputs, half-pixel centers, edge clamp."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - w1)
    np.add.at(mat, (rows, i1), w1)
    return mat.astype(dtype_name)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 3:
        raise TensorError(f"bilinear_resize input must be [C,H,W], got shape {x.shape}")
    _, h, w = x.shape
    ry = _interp_matrix(h, out_h, x.dtype.name)
    rx = _interp_matrix(w, out_w, x.dtype.name)
    out = np.matmul(ry, np.matmul(x.data, rx.T))

    def bwd(g):
        return (np.matmul(ry.T, np.matmul(g, rx)),)

    return _make(out, (x,), bwd)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 2:
        raise TensorError(f"upsample factor must be >= 2, got {factor}")
    _, h, w = x.shape
    return bilinear_resize(x, h * factor, w * factor)

"""Dense tensors with reverse-mode differentiation on top of numpy.

Every array-valued quantity in the model is a :class:`Tensor`. Operations
record their parents and a closure mapping the output gradient to parent
gradients; :func:`backward` walks the recorded graph in reverse execution
order and accumulates gradients at fan-out.
"""
from __future__ import annotations

import contextlib
import itertools
import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float64

_seq = itertools.count()
_state = threading.local()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """Raised when an operator produces NaN or Inf."""


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def record_branches():
    """Collect signatures of every piecewise decision taken inside the block.

    ReLU activity patterns and top-K selections are appended to the yielded
    list. Finite-difference checks compare the lists for ``x+eps`` and
    ``x-eps`` to reject probes that straddle a kink.
    """
    prev = getattr(_state, "branches", None)
    log: list = []
    _state.branches = log
    try:
        yield log
    finally:
        _state.branches = prev


def _log_branch(sig) -> None:
    log = getattr(_state, "branches", None)
    if log is not None:
        log.append(sig)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self, params: Iterable["Tensor"] = ()):
        backward(self, params)


class Parameter(Tensor):
    """A named learnable tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    _log_branch(("relu", mask.tobytes()))
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits, overflow-free."""
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    x = logits.data
    out = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (logits,), lambda g: (g * (_sigmoid(x) - y),), "bce_with_logits")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inv),),
        "transpose",
    )


def take(a: Tensor, index) -> Tensor:
    """Numpy-style indexing; duplicate indices accumulate in backward."""

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int)) or i is Ellipsis or i is None for i in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    n = len(tensors)
    return _make(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        "stack",
    )


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner axis mismatch: a axis -1 has {a.shape[-1]}, b axis -2 has {b.shape[-2]}"
        )
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul leading axes do not broadcast: {a.shape} vs {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` over the last axis."""
    if weight.ndim != 2:
        raise DimensionError(f"linear weight must be [d_out, d_in], got {weight.shape}")
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear input last axis has {x.shape[-1]}, weight expects d_in={weight.shape[1]}"
        )
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    out = matmul(flat, transpose(weight, (1, 0)))
    if bias is not None:
        out = out + bias
    return reshape(out, lead + (weight.shape[0],))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for rank {a.ndim}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=-1, keepdims=True)
    return centered * power(var + eps, -0.5) * gain + bias


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise DimensionError(f"expected 3 per-axis values, got {v}")
    return v  # type: ignore[return-value]


_AXES = ("T", "H", "W")


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding="same") -> Tensor:
    """Cross-correlate ``x[C_in,T,H,W]`` with ``kernel[C_out,C_in,t,kh,kw]``.

    ``padding="same"`` zero-pads ``k // 2`` per axis, which preserves extents
    for odd kernels at stride 1.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv3d input must be [C,T,H,W], got rank {x.ndim}")
    if kernel.ndim != 5:
        raise DimensionError(f"conv3d kernel must be [C_out,C_in,t,kh,kw], got rank {kernel.ndim}")
    if kernel.shape[1] != x.shape[0]:
        raise DimensionError(
            f"conv3d channel axis mismatch: input C={x.shape[0]}, kernel C_in={kernel.shape[1]}"
        )
    st = _triple(stride)
    if padding == "same" and st == (1, 1, 1):
        # taps that only ever see zero padding are dropped; result is unchanged
        crop = []
        for n, k in zip(x.shape[1:], kernel.shape[2:]):
            lo = k // 2 - (n - 1)
            crop.append(slice(lo, lo + 2 * n - 1) if lo > 0 else slice(None))
        if any(c != slice(None) for c in crop):
            kernel = take(kernel, (slice(None), slice(None), *crop))
    ks = kernel.shape[2:]
    pad = tuple(k // 2 for k in ks) if padding == "same" else _triple(padding)
    for name, n, k, p in zip(_AXES, x.shape[1:], ks, pad):
        if k > n + 2 * p:
            raise DimensionError(f"conv3d kernel extent {k} exceeds padded input extent {n + 2 * p} on axis {name}")
    xp = np.pad(x.data, ((0, 0),) + tuple((p, p) for p in pad))
    win = sliding_window_view(xp, ks, axis=(1, 2, 3))[:, :: st[0], :: st[1], :: st[2]]
    out_sp = win.shape[1:4]
    # im2col once: [C_in*t*kh*kw, T'*H'*W'], reused by the backward pass
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(-1, int(np.prod(out_sp)))
    c_out = kernel.shape[0]
    wmat = kernel.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, *out_sp)
    if bias is not None:
        out = out + bias.data.reshape(-1, 1, 1, 1)

    def bw(g):
        gmat = g.reshape(c_out, -1)
        gw = (gmat @ cols.T).reshape(kernel.shape)
        gcol = (wmat.T @ gmat).reshape(x.shape[0], *ks, *out_sp)
        gxp = np.zeros_like(xp)
        for a in range(ks[0]):
            for b in range(ks[1]):
                for c in range(ks[2]):
                    gxp[
                        :,
                        a : a + st[0] * out_sp[0] : st[0],
                        b : b + st[1] * out_sp[1] : st[1],
                        c : c + st[2] * out_sp[2] : st[2],
                    ] += gcol[:, a, b, c]
        gx = gxp[
            :,
            pad[0] : pad[0] + x.shape[1],
            pad[1] : pad[1] + x.shape[2],
            pad[2] : pad[2] + x.shape[3],
        ]
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw, "conv3d")


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out) * n_in) // n_out


def resize_nearest(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resampling of the last two axes to ``size``."""
    h_in, w_in = x.shape[-2:]
    if (h_in, w_in) == tuple(size):
        return x
    ri = _nearest_index(h_in, size[0])
    ci = _nearest_index(w_in, size[1])
    return take(x, (Ellipsis, ri[:, None], ci[None, :]))


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties resolved lowest-index first."""
    scores = np.asarray(scores).reshape(-1)
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range [1, {n}]")
    return np.argsort(-scores, kind="stable")[:k]


def topk_select(scores: Tensor, values: Tensor, k: int) -> tuple[list[int], Tensor]:
    """Pick the rows of ``values`` whose scores are the ``k`` largest.

    The choice itself carries no gradient; gradients reach ``values`` on the
    selected rows only.
    """
    if scores.ndim != 1 or values.ndim != 2 or values.shape[0] != scores.shape[0]:
        raise DimensionError(f"topk_select needs scores[N] and values[N,d], got {scores.shape} and {values.shape}")
    idx = topk_indices(scores.data, k)
    _log_branch(("topk", idx.tobytes()))
    return idx.tolist(), take(values, idx)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, newest first."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack_.extend(node._parents)
    nodes.sort(key=lambda n: n._seq, reverse=True)
    return nodes


def backward(root: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    Parameters in ``params`` that are not reachable get an all-zero grad.
    """
    if root.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in _tape(root):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# tensor snapshots
# ---------------------------------------------------------------------------

SNAPSHOT_MAGIC = b"TAFT"


def encode_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def decode_array(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    shape = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    n = int(np.prod(shape, dtype=np.int64))
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
    return arr, offset + 8 * n


def save_snapshot(path, tensor) -> None:
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC + encode_array(arr))


def load_snapshot(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a tensor snapshot (bad magic)")
    arr, _ = decode_array(buf, 4)
    return arr


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def check_gradient(
    fn: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    *,
    eps: float = 1e-3,
    points: int = 5,
    rng: np.random.Generator | None = None,
    max_redraws: int = 50,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``points`` random coordinates are probed across ``wrt``. A probe whose
    ``+eps``/``-eps`` evaluations take different ReLU or top-K branches is
    redrawn, since the function is not differentiable across the kink.
    Error metric: ``|g_analytic - g_fd| / max(1, |g_fd|)``.
    """
    rng = rng or np.random.default_rng(0)
    for t in wrt:
        t.grad = None
    backward(fn(), wrt)
    analytic = [t.grad.copy() for t in wrt]
    sizes = np.array([t.size for t in wrt], dtype=float)
    worst = 0.0
    done = 0
    redraws = 0
    while done < points:
        which = int(rng.choice(len(wrt), p=sizes / sizes.sum()))
        t = wrt[which]
        flat = t.data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        with no_grad():
            flat[i] = orig + eps
            with record_branches() as up:
                f_plus = float(fn().data)
            flat[i] = orig - eps
            with record_branches() as down:
                f_minus = float(fn().data)
            flat[i] = orig
        if up != down:
            redraws += 1
            if redraws > max_redraws:
                raise RuntimeError("gradient check kept hitting non-differentiable points")
            continue
        fd = (f_plus - f_minus) / (2 * eps)
        err = abs(analytic[which].reshape(-1)[i] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
        done += 1
    return worst

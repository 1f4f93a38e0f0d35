"""Dense tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays (float64 by default, float32 opt-in). Differentiable
ops record themselves on the active ``Tape``; ``Tape.backward`` replays the
record in reverse to populate ``.grad`` buffers. Outside an active tape every
op is a plain numpy computation.

Broadcasting is deliberately narrow: binary ops require identical shapes,
except that ``add`` accepts a trailing-shape bias operand, and ``broadcast_to``
performs explicit, recorded expansion. Anything else raises ``ShapeError``.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

Scalar = Union[int, float]


class ShapeError(ValueError):
    """Raised when operands do not satisfy an op's shape contract."""


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPES: list["Tape"] = []


def _active_tape() -> Optional["Tape"]:
    return _TAPES[-1] if _TAPES else None


class Tape:
    """Ordered record of executed differentiable ops.

    Use as a context manager around the forward pass, then call ``backward``
    on the scalar loss. Execution order is already topological, so the reverse
    walk visits every op exactly once with complete output gradients.
    """

    def __init__(self) -> None:
        # each record: (input tensors, output tensor, grad_fn)
        self._ops: list[tuple[tuple["Tensor", ...], "Tensor", Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: "Tensor") -> None:
        """Populate ``.grad`` of every recorded tensor reachable from ``loss``."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise RuntimeError("backward already called on this tape; record a new tape")
        self._consumed = True
        loss._accum_grad(np.ones_like(loss.data))
        for inputs, out, grad_fn in reversed(self._ops):
            gout = out.grad
            if gout is None:
                continue
            for tensor, gin in zip(inputs, grad_fn(gout)):
                if gin is None or not tensor.requires_grad:
                    continue
                if gin.shape != tensor.data.shape:
                    raise ShapeError(
                        f"grad shape {gin.shape} != tensor shape {tensor.data.shape}"
                    )
                tensor._accum_grad(gin)


def backward(loss: "Tensor", tape: Tape) -> None:
    """Functional alias for ``tape.backward(loss)``."""
    tape.backward(loss)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """Immutable-by-convention dense array participating in autodiff.

    Data must not be mutated while a tape referencing the tensor is alive;
    optimizers update leaf ``.data`` between tapes.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")

    # -- bookkeeping --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and not isinstance(shape[0], int):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def apply_op(
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    grad_fn: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Wrap a primitive's forward result and record it on the active tape.

    ``grad_fn`` maps the output gradient to per-input gradients (None for
    inputs that need none). Extension point for fused primitives defined
    outside this module.
    """
    tape = _active_tape()
    requires = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = requires
    out.grad = None
    if requires:
        tape._ops.append((tuple(inputs), out, grad_fn))
    return out


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------


def _is_trailing(shape: tuple, of: tuple) -> bool:
    return len(shape) <= len(of) and shape == of[len(of) - len(shape):]


def _sum_to_trailing(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a, b) -> Tensor:
    """Elementwise sum; one operand may be a trailing-shape bias."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return apply_op([a, b], a.data + b.data, lambda g: (g, g))
    if _is_trailing(b.shape, a.shape):
        return apply_op([a, b], a.data + b.data,
                        lambda g: (g, _sum_to_trailing(g, b.shape)))
    if _is_trailing(a.shape, b.shape):
        return apply_op([a, b], a.data + b.data,
                        lambda g: (_sum_to_trailing(g, a.shape), g))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a, b) -> Tensor:
    """Elementwise product; shapes must match exactly (scalars allowed)."""
    if isinstance(b, (int, float)):
        a = _as_tensor(a)
        c = float(b)
        return apply_op([a], a.data * c, lambda g: (g * c,))
    if isinstance(a, (int, float)):
        return mul(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return apply_op([a, b], a.data * b.data,
                    lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    """Elementwise quotient; shapes must match exactly (scalar divisor allowed)."""
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} differ")
    inv = 1.0 / b.data
    out = a.data * inv
    return apply_op([a, b], out,
                    lambda g: (g * inv, -g * out * inv))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product [..,m,k] @ [..,k,n]; batch dims must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree ({a.shape} @ {b.shape})")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims disagree ({a.shape} @ {b.shape})")
    out = a.data @ b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return apply_op([a, b], out, grad_fn)


# ---------------------------------------------------------------------------
# Elementwise functions
# ---------------------------------------------------------------------------


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    return apply_op([x], t, lambda g: (g * (1.0 - t * t),))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return apply_op([x], np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    return apply_op([x], s, lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    return apply_op([x], x.data * s,
                    lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


def _softplus(x: np.ndarray) -> np.ndarray:
    # log1p(exp(x)) overflows for large x; identity is exact there to 1e-13
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def softplus(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return apply_op([x], _softplus(x.data),
                    lambda g: (g * _sigmoid(x.data),))


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(x.data)
    return apply_op([x], e, lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive value")
    return apply_op([x], np.log(x.data), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt of negative value")
    r = np.sqrt(x.data)
    return apply_op([x], r, lambda g: (g * (0.5 / r),))


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return apply_op([x], x.data * x.data, lambda g: (g * (2.0 * x.data),))


def expm1_over_x(x: Tensor) -> Tensor:
    """phi(z) = (exp(z) - 1) / z with a series fallback near zero.

    The value switches to 1 + z/2 + z^2/6 below |z| = 1e-6 (truncation error
    O(z^3)); the derivative switches to 1/2 + z/3 below |z| = 1e-4 where the
    closed form (e^z (z-1) + 1) / z^2 starts to cancel.
    """
    x = _as_tensor(x)
    z = x.data
    small = np.abs(z) < 1e-6
    zs = np.where(small, 1.0, z)  # avoid 0/0; masked out below
    val = np.where(small, 1.0 + z / 2.0 + z * z / 6.0, np.expm1(zs) / zs)

    def grad_fn(g):
        dsmall = np.abs(z) < 1e-4
        zd = np.where(dsmall, 1.0, z)
        deriv = np.where(dsmall, 0.5 + z / 3.0,
                         (np.exp(zd) * (zd - 1.0) + 1.0) / (zd * zd))
        return (g * deriv,)

    return apply_op([x], val, grad_fn)


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    out = x.data.reshape(shape)
    orig = x.data.shape
    return apply_op([x], out, lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return apply_op([x], np.ascontiguousarray(x.data.transpose(axes)),
                    lambda g: (g.transpose(inv),))


def reverse(x: Tensor, axis: int) -> Tensor:
    """Order reversal along one axis; gradient is the reversed gradient."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"reverse: axis {axis} invalid for shape {x.shape}")
    return apply_op([x], np.flip(x.data, axis).copy(),
                    lambda g: (np.flip(g, axis).copy(),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; gradient sums the expanded axes."""
    x = _as_tensor(x)
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape).copy()
    in_shape = x.data.shape

    def grad_fn(g):
        extra = len(shape) - len(in_shape)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        rep = tuple(i for i, d in enumerate(in_shape) if d == 1 and g.shape[i] != 1)
        if rep:
            g = g.sum(axis=rep, keepdims=True)
        return (g,)

    return apply_op([x], out, grad_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of empty list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return apply_op(tensors, out, grad_fn)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``."""
    x = _as_tensor(x)
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow: [{start},{start + length}) outside dim {x.shape[axis]}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return apply_op([x], x.data[idx].copy(), grad_fn)


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array (scatter-add backward)."""
    x = _as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(x.data, indices, axis=axis)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        # np.add.at accumulates duplicate indices correctly
        np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (full,)

    return apply_op([x], out, grad_fn)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    in_shape = x.data.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, in_shape).copy(),)

    return apply_op([x], np.asarray(out), grad_fn)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------


def conv1d(x: Tensor, kernel: Tensor, padding: str = "same", axis: int = 1) -> Tensor:
    """Cross-correlation of ``x`` [C, L] with ``kernel`` [C', C, k] along ``axis``.

    ``axis`` names the length axis of the 2-D input (1 for [C, L], 0 for
    [L, C]); the output keeps the same layout. "same" zero-pads to preserve
    length, "valid" requires k <= L.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 2 or kernel.ndim != 3:
        raise ShapeError("conv1d expects x [C,L] and kernel [C',C,k]")
    if axis not in (0, 1):
        raise ShapeError("conv1d: axis must be 0 or 1")
    xd = x.data if axis == 1 else x.data.T  # [C, L]
    c_out, c_in, k = kernel.shape
    if xd.shape[0] != c_in:
        raise ShapeError(f"conv1d: {xd.shape[0]} input channels, kernel wants {c_in}")
    length = xd.shape[1]
    if length == 0:
        raise ShapeError("conv1d: empty input")
    if padding == "same":
        pl, pr = (k - 1) // 2, k - 1 - (k - 1) // 2
    elif padding == "valid":
        pl = pr = 0
        if k > length:
            raise ShapeError(f"conv1d: kernel {k} longer than input {length}")
    else:
        raise ValueError(f"conv1d: unknown padding {padding!r}")
    xp = np.pad(xd, ((0, 0), (pl, pr)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # [C, Lo, k]
    lo = win.shape[1]
    cols = win.transpose(1, 0, 2).reshape(lo, c_in * k)
    wmat = kernel.data.reshape(c_out, c_in * k)
    out = cols @ wmat.T  # [Lo, C']
    out_data = out.T if axis == 1 else out

    def grad_fn(g):
        g2 = (g.T if axis == 1 else g)  # [Lo, C']
        gk = None
        if kernel.requires_grad:
            gk = (g2.T @ cols).reshape(c_out, c_in, k)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(lo, c_in, k)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + lo] += dcols[:, :, j].T
            gxd = gxp[:, pl:pl + length]
            gx = gxd if axis == 1 else np.ascontiguousarray(gxd.T)
        return gx, gk

    return apply_op([x, kernel], np.ascontiguousarray(out_data), grad_fn)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           padding: str = "same") -> Tensor:
    """2-D cross-correlation: x [B,C,T,F], kernel [C',C,kt,kf], stride 1."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects x [B,C,T,F] and kernel [C',C,kt,kf]")
    b, c_in, t, f = x.shape
    c_out, ck, kt, kf = kernel.shape
    if ck != c_in:
        raise ShapeError(f"conv2d: {c_in} input channels, kernel wants {ck}")
    if padding == "same":
        pt0, pt1 = (kt - 1) // 2, kt - 1 - (kt - 1) // 2
        pf0, pf1 = (kf - 1) // 2, kf - 1 - (kf - 1) // 2
    elif padding == "valid":
        pt0 = pt1 = pf0 = pf1 = 0
        if kt > t or kf > f:
            raise ShapeError("conv2d: kernel larger than input")
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt0, pt1), (pf0, pf1)))
    to, fo = xp.shape[2] - kt + 1, xp.shape[3] - kf + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kt, kf), axis=(2, 3))
    # win: [B, C, To, Fo, kt, kf] -> cols [B*To*Fo, C*kt*kf]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * to * fo, c_in * kt * kf)
    wmat = kernel.data.reshape(c_out, -1)
    out = (cols @ wmat.T).reshape(b, to, fo, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError("conv2d: bias must have shape [C']")
        out += bias.data[None, :, None, None]

    inputs = [x, kernel] if bias is None else [x, kernel, bias]

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * to * fo, c_out)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(b, to, fo, c_in, kt, kf).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for i in range(kt):
                for j in range(kf):
                    gxp[:, :, i:i + to, j:j + fo] += dcols[:, :, :, :, i, j]
            gx = gxp[:, :, pt0:pt0 + t, pf0:pf0 + f]
        if bias is None:
            return gx, gk
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gk, gb

    return apply_op(inputs, out, grad_fn)


def depthwise_causal_conv1d(x: Tensor, kernel: Tensor,
                            bias: Optional[Tensor] = None) -> Tensor:
    """Per-channel causal convolution: x [B,L,D], kernel [D,k].

    Left-pads with k-1 zeros so out[l] depends only on x[<=l].
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 2:
        raise ShapeError("depthwise_causal_conv1d expects x [B,L,D], kernel [D,k]")
    b, length, d = x.shape
    dk, k = kernel.shape
    if dk != d:
        raise ShapeError(f"kernel channels {dk} != input channels {d}")
    xp = np.pad(x.data, ((0, 0), (k - 1, 0), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # [B,L,D,k]
    out = np.einsum("bldk,dk->bld", win, kernel.data)
    if bias is not None:
        bias = _as_tensor(bias)
        out += bias.data[None, None, :]
    inputs = [x, kernel] if bias is None else [x, kernel, bias]

    def grad_fn(g):
        gk = np.einsum("bld,bldk->dk", g, win) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + length, :] += g * kernel.data[None, None, :, j]
            gx = gxp[:, k - 1:, :]
        if bias is None:
            return gx, gk
        gb = g.sum(axis=(0, 1)) if bias.requires_grad else None
        return gx, gk, gb

    return apply_op(inputs, out, grad_fn)


def avg_pool2d(x: Tensor, pool: tuple[int, int]) -> Tensor:
    """Non-overlapping average pooling on [B,C,T,F]; pool must divide dims."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("avg_pool2d expects [B,C,T,F]")
    pt, pf = pool
    b, c, t, f = x.shape
    if t % pt or f % pf:
        raise ShapeError(f"avg_pool2d: pool {pool} does not divide ({t},{f})")
    to, fo = t // pt, f // pf
    r = x.data.reshape(b, c, to, pt, fo, pf)
    out = r.mean(axis=(3, 5))
    inv = 1.0 / (pt * pf)

    def grad_fn(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] * inv,
                             (b, c, to, pt, fo, pf)).reshape(b, c, t, f)
        return (gx.copy(),)

    return apply_op([x], out, grad_fn)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def gradcheck(fn: Callable[[], Tensor], wrt: Sequence[Tensor], h: float = 1e-6,
              max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None,
              ) -> float:
    """Max relative error between tape gradients and central finite differences.

    ``fn`` rebuilds the scalar loss from the ``wrt`` leaves on every call.
    Relative error per entry is |a - n| / max(1, |a|, |n|). When
    ``max_entries`` is set, that many entries per tensor are sampled
    (deterministically via ``rng``) instead of sweeping all of them.
    """
    for t in wrt:
        t.zero_grad()
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]

    worst = 0.0
    for t, ga in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            r = rng if rng is not None else np.random.default_rng(0)
            idxs = r.choice(flat.size, size=max_entries, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = float(gflat[i])
            rel = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, rel)
    return worst

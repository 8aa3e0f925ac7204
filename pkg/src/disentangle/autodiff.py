"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tape`` records operations in execution order (which is already a
topological order); ``Tape.backward`` walks the record once in reverse,
accumulating gradients by addition wherever a node fans out. One tape is
built per training step and discarded after the backward passes.

Tensors not created on a tape (``node_id is None``) are detached: they
never receive gradient and their branches are skipped during backward.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatchError",
    "NonScalarRootError",
    "concat",
    "conv1d",
    "conv1d_transpose",
    "conv1d_output_length",
    "gather_rows",
    "logsumexp",
    "matmul",
    "norm2",
    "tile_time",
    "crop_time",
]


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonScalarRootError(ValueError):
    """Backward was started from a non-scalar tensor."""


class Tensor:
    """Dense real array, optionally tracked on a tape."""

    __slots__ = ("values", "tape", "node_id")

    def __init__(self, values, tape: "Tape | None" = None, node_id: int | None = None):
        self.values = np.asarray(values)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        """A view of the same values with no tape connection."""
        return Tensor(self.values)

    def __repr__(self) -> str:
        tracked = "tracked" if self.node_id is not None else "detached"
        return f"Tensor(shape={self.shape}, {tracked})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor/tensor division is not a primitive; use scale")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def square(self):
        return square(self)

    def abs(self):
        return absolute(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


class Tape:
    """Ordered record of operations for one forward/backward cycle.

    Every recorded entry holds the input node ids, the output node id and
    a backward rule mapping the output gradient to input gradients. Ids
    increase monotonically, so the record order is a topological order.
    """

    __slots__ = ("_entries", "_n_nodes")

    def __init__(self):
        self._entries: list[tuple[tuple[int | None, ...], int, Callable]] = []
        self._n_nodes = 0

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self):
        return self._entries

    def _new_id(self) -> int:
        nid = self._n_nodes
        self._n_nodes += 1
        return nid

    def leaf(self, values) -> Tensor:
        """Register an array as a gradient-receiving leaf."""
        return Tensor(values, self, self._new_id())

    def record(self, values, input_ids, rule) -> Tensor:
        out = Tensor(values, self, self._new_id())
        self._entries.append((tuple(input_ids), out.node_id, rule))
        return out

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a scalar root with respect to every reachable node.

        Leaves not on a path to the root are simply absent from the result;
        callers that need dense gradients fill in zeros (see ParamSet).
        """
        if root.tape is not self or root.node_id is None:
            raise ValueError("root tensor is not tracked on this tape")
        if root.size != 1:
            raise NonScalarRootError(f"backward root must be scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.values)}
        for input_ids, out_id, rule in reversed(self._entries):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for iid, ig in zip(input_ids, rule(g)):
                if iid is None or ig is None:
                    continue
                acc = grads.get(iid)
                grads[iid] = ig if acc is None else acc + ig
        return grads


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.node_id is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _ids(tape: Tape | None, *tensors: Tensor):
    if tape is None:
        return None
    return tuple(t.node_id for t in tensors)


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
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic ----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.values + b.values
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    ash, bsh = a.shape, b.shape
    ta, tb = a.node_id is not None, b.node_id is not None

    def rule(g):
        return (
            _unbroadcast(g, ash) if ta else None,
            _unbroadcast(g, bsh) if tb else None,
        )

    return tape.record(out, (a.node_id, b.node_id), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = a.values - b.values
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    ash, bsh = a.shape, b.shape
    ta, tb = a.node_id is not None, b.node_id is not None

    def rule(g):
        return (
            _unbroadcast(g, ash) if ta else None,
            _unbroadcast(-g, bsh) if tb else None,
        )

    return tape.record(out, (a.node_id, b.node_id), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.values * b.values
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    av, bv = a.values, b.values
    ash, bsh = a.shape, b.shape
    ta, tb = a.node_id is not None, b.node_id is not None

    def rule(g):
        return (
            _unbroadcast(g * bv, ash) if ta else None,
            _unbroadcast(g * av, bsh) if tb else None,
        )

    return tape.record(out, (a.node_id, b.node_id), rule)


def scale(x: Tensor, c: float) -> Tensor:
    out = x.values * c
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    return tape.record(out, (x.node_id,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.values, 0.0)
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    xv = x.values

    def rule(g):
        return (_relu_backward(xv, g),)

    return tape.record(out, (x.node_id,), rule)


def _relu_backward(xv, g):
    # module-level so the gradient-checker's negative control can patch it
    return g * (xv > 0)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    return tape.record(out, (x.node_id,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    out = np.log(x.values)
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    xv = x.values
    return tape.record(out, (x.node_id,), lambda g: (g / xv,))


def square(x: Tensor) -> Tensor:
    out = x.values * x.values
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    xv = x.values
    return tape.record(out, (x.node_id,), lambda g: (g * (2.0 * xv),))


def absolute(x: Tensor) -> Tensor:
    out = np.abs(x.values)
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    sgn = np.sign(x.values)
    return tape.record(out, (x.node_id,), lambda g: (g * sgn,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.values, lo, hi)
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    mask = (x.values >= lo) & (x.values <= hi)
    return tape.record(out, (x.node_id,), lambda g: (g * mask,))


# -- reductions -----------------------------------------------------------


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.values.sum(axis=axes)
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    shape = x.shape
    expand = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def rule(g):
        return (np.broadcast_to(g.reshape(expand), shape),)

    return tape.record(out, (x.node_id,), rule)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.values.mean(axis=axes)
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    shape = x.shape
    count = 1
    for a in axes:
        count *= shape[a]
    expand = tuple(1 if i in axes else n for i, n in enumerate(shape))
    inv = 1.0 / count

    def rule(g):
        return (np.broadcast_to((g * inv).reshape(expand), shape),)

    return tape.record(out, (x.node_id,), rule)


def norm2(x: Tensor) -> Tensor:
    """Whole-tensor L2 norm (scalar)."""
    out = np.sqrt((x.values * x.values).sum())
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    xv = x.values

    def rule(g):
        if out == 0.0:
            return (np.zeros_like(xv),)
        return (g * (xv / out),)

    return tape.record(out, (x.node_id,), rule)


def logsumexp(x: Tensor, axis: int) -> Tensor:
    """Stabilized log(sum(exp(x))) over one axis (axis dropped)."""
    axis = axis % x.ndim
    m = x.values.max(axis=axis, keepdims=True)
    shifted = np.exp(x.values - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = (m + np.log(total)).squeeze(axis=axis)
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    softmax = shifted / total

    def rule(g):
        return (np.expand_dims(g, axis) * softmax,)

    return tape.record(out, (x.node_id,), rule)


# -- shape manipulation ----------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out = x.values.reshape(shape)
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    orig = x.shape
    return tape.record(out, (x.node_id,), lambda g: (g.reshape(orig),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    arrays = [t.values for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    tape = _tape_of(*tensors)
    if tape is None:
        return Tensor(out)
    ax = axis % out.ndim
    sizes = [a.shape[ax] for a in arrays]
    offsets = np.cumsum(sizes)[:-1]
    tracked = [t.node_id is not None for t in tensors]

    def rule(g):
        pieces = np.split(g, offsets, axis=ax)
        return tuple(p if tr else None for p, tr in zip(pieces, tracked))

    return tape.record(out, tuple(t.node_id for t in tensors), rule)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor by integer index."""
    if x.ndim != 2:
        raise ShapeMismatchError(f"gather_rows expects a matrix, got shape {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    out = x.values[idx]
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    shape = x.shape
    dtype = x.dtype

    def rule(g):
        dz = np.zeros(shape, dtype=dtype)
        np.add.at(dz, idx, g)
        return (dz,)

    return tape.record(out, (x.node_id,), rule)


def tile_time(v: Tensor, length: int) -> Tensor:
    """Broadcast a channel vector over a new time axis.

    (C,) -> (length, C) and (B, C) -> (B, length, C).
    """
    if v.ndim == 1:
        out = np.broadcast_to(v.values, (length, v.shape[0])).copy()
        sum_axis = 0
    elif v.ndim == 2:
        out = np.broadcast_to(v.values[:, None, :], (v.shape[0], length, v.shape[1])).copy()
        sum_axis = 1
    else:
        raise ShapeMismatchError(f"tile_time expects 1-D or 2-D input, got shape {v.shape}")
    tape = _tape_of(v)
    if tape is None:
        return Tensor(out)
    return tape.record(out, (v.node_id,), lambda g: (g.sum(axis=sum_axis),))


def crop_time(x: Tensor, start: int, length: int) -> Tensor:
    """Slice ``length`` frames from the time axis (second-to-last)."""
    t_axis = x.ndim - 2
    total = x.shape[t_axis]
    if start < 0 or start + length > total:
        raise ShapeMismatchError(f"crop [{start}:{start + length}] out of range for {total} frames")
    sl = [slice(None)] * x.ndim
    sl[t_axis] = slice(start, start + length)
    sl = tuple(sl)
    out = x.values[sl]
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    shape = x.shape
    dtype = x.dtype

    def rule(g):
        dz = np.zeros(shape, dtype=dtype)
        dz[sl] = g
        return (dz,)

    return tape.record(out, (x.node_id,), rule)


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul expects matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: inner dims differ, shapes {a.shape} and {b.shape}")
    out = a.values @ b.values
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    av, bv = a.values, b.values
    ta, tb = a.node_id is not None, b.node_id is not None

    def rule(g):
        return (
            g @ bv.T if ta else None,
            av.T @ g if tb else None,
        )

    return tape.record(out, (a.node_id, b.node_id), rule)


# -- convolutions -----------------------------------------------------------


def conv1d_output_length(length: int, stride: int) -> int:
    """Same-padded stride-k convolution maps T to ceil(T/k)."""
    return -(-length // stride)


def _same_padding(length: int, width: int, stride: int) -> tuple[int, int, int]:
    out = conv1d_output_length(length, stride)
    total = max((out - 1) * stride + width - length, 0)
    left = total // 2
    return out, left, total - left


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """1-D convolution over the time axis with "same" zero padding.

    ``x`` is (T, C_in) or (B, T, C_in); ``w`` is (width, C_in, C_out).
    Stride k maps length T to ceil(T/k).
    """
    if stride < 1:
        raise ValueError(f"conv1d stride must be >= 1, got {stride}")
    squeeze = x.ndim == 2
    xv = x.values[None] if squeeze else x.values
    if xv.ndim != 3 or w.ndim != 3:
        raise ShapeMismatchError(f"conv1d: input shape {x.shape}, kernel shape {w.shape}")
    bsz, length, cin = xv.shape
    width, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeMismatchError(f"conv1d: input channels {cin} != kernel channels {wcin} "
                                 f"(shapes {x.shape} and {w.shape})")
    out_len, left, right = _same_padding(length, width, stride)
    xp = np.pad(xv, ((0, 0), (left, right), (0, 0)))
    idx = np.arange(out_len)[:, None] * stride + np.arange(width)[None, :]
    patches = xp[:, idx, :].reshape(bsz * out_len, width * cin)
    wf = w.values.reshape(width * cin, cout)
    y = patches @ wf
    if b is not None:
        if b.shape != (cout,):
            raise ShapeMismatchError(f"conv1d: bias shape {b.shape} != ({cout},)")
        y = y + b.values
    y = y.reshape(bsz, out_len, cout)
    if squeeze:
        y = y[0]

    tape = _tape_of(x, w, b) if b is not None else _tape_of(x, w)
    if tape is None:
        return Tensor(y)
    tx = x.node_id is not None
    tw = w.node_id is not None
    tb = b is not None and b.node_id is not None
    pad_len = xp.shape[1]

    def rule(g):
        gf = g.reshape(bsz * out_len, cout)
        gw = (patches.T @ gf).reshape(width, cin, cout) if tw else None
        gb = gf.sum(axis=0) if tb else None
        gx = None
        if tx:
            dpatches = (gf @ wf.T).reshape(bsz, out_len, width, cin)
            dxp = np.zeros((bsz, pad_len, cin), dtype=g.dtype)
            last = (out_len - 1) * stride
            for k in range(width):
                dxp[:, k:k + last + 1:stride, :] += dpatches[:, :, k, :]
            gx = dxp[:, left:left + length, :]
            if squeeze:
                gx = gx[0]
        ids_grads = [gx, gw]
        if b is not None:
            ids_grads.append(gb)
        return tuple(ids_grads)

    ids = [x.node_id, w.node_id]
    if b is not None:
        ids.append(b.node_id)
    return tape.record(y, ids, rule)


def conv1d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Stride-k transposed 1-D convolution mapping length T to T*k.

    Requires (width - stride) even and >= 0 so the output length is exact.
    ``x`` is (T, C_in) or (B, T, C_in); ``w`` is (width, C_in, C_out).
    """
    if stride < 1:
        raise ValueError(f"conv1d_transpose stride must be >= 1, got {stride}")
    squeeze = x.ndim == 2
    xv = x.values[None] if squeeze else x.values
    bsz, length, cin = xv.shape
    width, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeMismatchError(f"conv1d_transpose: input channels {cin} != kernel channels "
                                 f"{wcin} (shapes {x.shape} and {w.shape})")
    if (width - stride) % 2 or width < stride:
        raise ValueError(f"conv1d_transpose: width {width} and stride {stride} must satisfy "
                         f"width >= stride with (width - stride) even")
    pad = (width - stride) // 2
    out_len = length * stride
    full = (length - 1) * stride + width
    wm = w.values  # (width, cin, cout)
    yp = np.zeros((bsz, full, cout), dtype=xv.dtype)
    last = (length - 1) * stride
    for k in range(width):
        yp[:, k:k + last + 1:stride, :] += xv @ wm[k]
    y = yp[:, pad:pad + out_len, :]
    if b is not None:
        y = y + b.values
    if squeeze:
        y = y[0]

    tape = _tape_of(x, w, b) if b is not None else _tape_of(x, w)
    if tape is None:
        return Tensor(y)
    tx = x.node_id is not None
    tw = w.node_id is not None
    tb = b is not None and b.node_id is not None

    def rule(g):
        gv = g[None] if squeeze else g
        dyp = np.zeros((bsz, full, cout), dtype=gv.dtype)
        dyp[:, pad:pad + out_len, :] = gv
        gx = np.zeros_like(xv) if tx else None
        gw = np.zeros_like(wm) if tw else None
        x2d = xv.reshape(bsz * length, cin)
        for k in range(width):
            dslice = dyp[:, k:k + last + 1:stride, :]
            if tx:
                gx += dslice @ wm[k].T
            if tw:
                gw[k] = x2d.T @ dslice.reshape(bsz * length, cout)
        if tx and squeeze:
            gx = gx[0]
        gb = gv.sum(axis=(0, 1)) if tb else None
        ids_grads = [gx, gw]
        if b is not None:
            ids_grads.append(gb)
        return tuple(ids_grads)

    ids = [x.node_id, w.node_id]
    if b is not None:
        ids.append(b.node_id)
    return tape.record(y, ids, rule)

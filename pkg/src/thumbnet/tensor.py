"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a C-contiguous numpy array. Every differentiable
operation is a :class:`Function`; when any input requires a gradient the
output remembers the function and its inputs together with a monotonically
increasing sequence number. :func:`backward` collects the operations that
reach the root into a :class:`GradTape` and replays it in reverse execution
order, visiting each operation exactly once.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
import threading
from pathlib import Path

import numpy as np

from .errors import DataFormatError, NumericFault, ShapeError, UsageError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float32
_debug = False
_seq = itertools.count()
_local = threading.local()


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    try:
        resolved = np.dtype(_DTYPES.get(dtype, dtype)).type
    except TypeError:
        resolved = None
    if resolved not in (np.float32, np.float64):
        raise UsageError(f"precision must be f32 or f64, got {dtype!r}")
    _default_dtype = resolved


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the element type of newly created tensors."""
    global _default_dtype
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = previous


def set_debug(flag: bool):
    """Full NaN/Inf scans on every op output when on; sampled checks otherwise."""
    global _debug
    _debug = bool(flag)


def is_debug() -> bool:
    return _debug


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def _check_finite(out: np.ndarray, name: str, reduces: bool):
    if out.size == 0:
        return
    if _debug or reduces or out.size == 1:
        ok = np.isfinite(out).all()
    else:
        ok = np.isfinite(out.flat[0])
    if not ok:
        raise NumericFault(f"{name}: non-finite value in output of shape {out.shape}")


class _Node:
    __slots__ = ("fn", "inputs", "seq")

    def __init__(self, fn, inputs, seq):
        self.fn = fn
        self.inputs = inputs
        self.seq = seq


class Function:
    """Base class of differentiable primitives.

    ``forward`` receives raw arrays and may stash whatever ``backward`` needs
    on ``self``. ``backward`` receives the gradient of the output and returns
    one array (or None) per input.
    """

    reduces = False

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs):
        fn = cls()
        dtype = next((t.data.dtype for t in inputs if isinstance(t, Tensor)), None)
        inputs = tuple(as_tensor(t, dtype) for t in inputs)
        with np.errstate(all="ignore"):
            out = fn.forward(*(t.data for t in inputs), **kwargs)
        out = np.ascontiguousarray(out, dtype=inputs[0].data.dtype)
        _check_finite(out, cls.__name__.lower(), cls.reduces)
        result = Tensor._wrap(out)
        if grad_enabled() and any(t.requires_grad for t in inputs):
            result.requires_grad = True
            result._node = _Node(fn, inputs, next(_seq))
        return result


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        dtype = dtype or _default_dtype
        self.data = np.array(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    @classmethod
    def _wrap(cls, array):
        t = cls.__new__(cls)
        t.data = array
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return Max.apply(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sqrt(self):
        return Pow.apply(self, exponent=0.5)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    @property
    def T(self):
        return self.transpose()

    def broadcast_to(self, shape):
        return BroadcastTo.apply(self, shape=tuple(shape))

    def backward(self):
        backward(self)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


class _Binary(Function):
    def forward(self, a, b):
        _broadcast_shape(type(self).__name__.lower(), a, b)
        self.a, self.b = a, b
        return self.compute(a, b)


class Add(_Binary):
    def compute(self, a, b):
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.a.shape), _unbroadcast(g, self.b.shape)


class Sub(_Binary):
    def compute(self, a, b):
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.a.shape), _unbroadcast(-g, self.b.shape)


class Mul(_Binary):
    def compute(self, a, b):
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class Div(_Binary):
    def compute(self, a, b):
        return a / b

    def backward(self, g):
        ga = g / self.b
        gb = -g * self.a / (self.b * self.b)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Pow(Function):
    def forward(self, a, exponent):
        self.a, self.exponent = a, exponent
        return a**exponent

    def backward(self, g):
        p = self.exponent
        return (g * p * self.a ** (p - 1),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        ga = g @ np.swapaxes(self.b, -1, -2)
        gb = np.swapaxes(self.a, -1, -2) @ g
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, a, axes):
        if axes is not None and sorted(axes) != list(range(a.ndim)):
            raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, g):
        if self.axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(self.axes)),)


class BroadcastTo(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        try:
            return np.broadcast_to(a, shape).copy()
        except ValueError:
            raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None

    def backward(self, g):
        return (_unbroadcast(g, self.in_shape),)


def _expand_reduced(g, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(in_shape)), in_shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, in_shape)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    return tuple(a % ndim for a in axes)


class Sum(Function):
    reduces = True

    def forward(self, a, axis=None, keepdims=False):
        self.in_shape, self.axis, self.keepdims = a.shape, _norm_axis(axis, a.ndim), keepdims
        return a.sum(axis=self.axis, keepdims=keepdims)

    def backward(self, g):
        return (_expand_reduced(g, self.in_shape, self.axis, self.keepdims).copy(),)


class Mean(Function):
    reduces = True

    def forward(self, a, axis=None, keepdims=False):
        self.in_shape, self.axis, self.keepdims = a.shape, _norm_axis(axis, a.ndim), keepdims
        if self.axis is None:
            self.count = a.size
        else:
            self.count = int(np.prod([a.shape[i] for i in self.axis]))
        return a.mean(axis=self.axis, keepdims=keepdims)

    def backward(self, g):
        return (_expand_reduced(g / self.count, self.in_shape, self.axis, self.keepdims).copy(),)


class Max(Function):
    """Reduce-max over one axis (or all); ties route gradient to the first maximum."""

    reduces = True

    def forward(self, a, axis=None, keepdims=False):
        if axis is not None and not np.isscalar(axis):
            raise UsageError("max: only a single reduction axis is supported")
        self.in_shape, self.axis, self.keepdims = a.shape, axis, keepdims
        if axis is None:
            flat = a.reshape(-1)
            self.index = int(np.argmax(flat))
            out = flat[self.index]
            return np.reshape(out, (1,) * a.ndim) if keepdims else np.asarray(out)
        self.axis = axis % a.ndim
        self.index = np.argmax(a, axis=self.axis)
        out = np.take_along_axis(a, np.expand_dims(self.index, self.axis), self.axis)
        return out if keepdims else np.squeeze(out, self.axis)

    def backward(self, g):
        grad = np.zeros(self.in_shape, dtype=g.dtype)
        if self.axis is None:
            grad.reshape(-1)[self.index] = g.reshape(-1)[0]
            return (grad,)
        if not self.keepdims:
            g = np.expand_dims(g, self.axis)
        np.put_along_axis(grad, np.expand_dims(self.index, self.axis), g, self.axis)
        return (grad,)


# -- tape ---------------------------------------------------------------
class GradTape:
    """Ordered record of the operations that contribute to one root.

    ``entries`` holds the produced tensors sorted by execution order; each
    entry's ``_node`` names the function and inputs that created it.
    """

    def __init__(self, entries):
        self.entries = entries

    @classmethod
    def from_root(cls, root: Tensor):
        seen = set()
        entries = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            entries.append(t)
            stack.extend(t._node.inputs)
        entries.sort(key=lambda t: t._node.seq)
        return cls(entries)

    def __len__(self):
        return len(self.entries)

    def replay(self, root: Tensor, seed_grad=None):
        """Propagate from ``root``; return {id(leaf): (leaf, grad)}."""
        if seed_grad is None:
            seed_grad = np.ones_like(root.data)
        pending = {id(root): seed_grad}
        leaves = {}
        for t in reversed(self.entries):
            g = pending.pop(id(t), None)
            if g is None:
                continue
            grads = t._node.fn.backward(g)
            for inp, gi in zip(t._node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    key = id(inp)
                    if key in leaves:
                        leaves[key] = (inp, leaves[key][1] + gi)
                    else:
                        leaves[key] = (inp, np.array(gi, dtype=inp.data.dtype))
                else:
                    key = id(inp)
                    pending[key] = pending[key] + gi if key in pending else gi
        return leaves


def _leaf_grads(root: Tensor):
    if not isinstance(root, Tensor) or root.size != 1:
        shape = getattr(root, "shape", None)
        raise UsageError(f"backward: root must be a scalar tensor, got shape {shape}")
    if root._node is None:
        if root.requires_grad:
            return {id(root): (root, np.ones_like(root.data))}
        raise UsageError("backward: root was not produced on the gradient tape")
    return GradTape.from_root(root).replay(root)


def backward(root: Tensor):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    for leaf, g in _leaf_grads(root).values():
        g = g.reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g


def grad(root: Tensor, wrt):
    """Gradients of ``root`` w.r.t. each tensor in ``wrt``; zeros when disconnected.

    Leaves' ``.grad`` fields are left untouched.
    """
    found = _leaf_grads(root)
    out = []
    for t in wrt:
        hit = found.get(id(t))
        out.append(hit[1].reshape(t.shape) if hit is not None else np.zeros_like(t.data))
    return out


def grad_check(f, point, step=1e-4, eps=1e-8):
    """Max relative error between autodiff and central differences.

    Runs in double precision. ``f`` maps a tensor to a scalar tensor.
    """
    with precision("f64"):
        base = np.array(as_tensor(point).data, dtype=np.float64)
        x = Tensor(base, requires_grad=True, dtype=np.float64)
        y = f(x)
        if y.size != 1:
            raise UsageError(f"grad_check: f must return a scalar, got shape {y.shape}")
        analytic = grad(y, [x])[0] if y.requires_grad else np.zeros_like(base)
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = f(Tensor(base, dtype=np.float64)).item()
                flat[i] = orig - step
                fm = f(Tensor(base, dtype=np.float64)).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericFault(f"grad_check: non-finite f near coordinate {i}")
                numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), eps)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0


# -- TSR1 serialization ---------------------------------------------------
_MAGIC = b"TSR1"
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def tensor_to_bytes(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise UsageError(f"TSR1 supports float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise UsageError("TSR1 rank is limited to 255")
    header = _MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes()


def tensor_from_bytes(buf: bytes) -> Tensor:
    if len(buf) < 6 or buf[:4] != _MAGIC:
        raise DataFormatError("TSR1: bad magic")
    code, rank = buf[4], buf[5]
    if code not in _CODE_TO_DTYPE:
        raise DataFormatError(f"TSR1: unknown dtype code {code}")
    end = 6 + 4 * rank
    if len(buf) < end:
        raise DataFormatError("TSR1: truncated header")
    shape = struct.unpack(f"<{rank}I", buf[6:end])
    dt = _CODE_TO_DTYPE[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) - end != expected:
        raise DataFormatError(f"TSR1: payload is {len(buf) - end} bytes, expected {expected}")
    arr = np.frombuffer(buf, dtype=dt, offset=end).reshape(shape)
    return Tensor._wrap(arr.astype(dt.newbyteorder("="), copy=True))


def save_tensor(path, t):
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    return tensor_from_bytes(Path(path).read_bytes())

"""Minimal reverse-mode automatic differentiation on top of numpy.

Every value in the model is a :class:`Tensor`.  Operations build the graph
as they run (define-by-run); :func:`backward` sorts the graph reachable from
a scalar root into a :class:`Tape` and replays the recorded backward rules
in reverse order.  Backward rules always *add* into ``.grad`` so gradients
from several roots accumulate.

All data is float64.
"""

import math
import struct
import zlib

import numpy as np

__all__ = [
    "Tensor", "Tape", "AdamState", "ShapeError",
    "tensor", "constant", "parameter",
    "matmul", "add", "sub", "mul", "scale", "sigmoid", "tanh", "exp", "log",
    "softmax", "mean", "sum", "max", "concat", "getitem", "reshape",
    "transpose", "conv2d", "backward", "no_grad", "adam_step", "zero_grad", "grad_check",
    "save_tensors", "load_tensors", "BlobError",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Args:
        data: array-like, converted to a float64 ndarray.
        requires_grad: whether gradients should be accumulated into ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def accumulate(self, g):
        if self.grad is None:
            # take ownership of fresh arrays, copy views and foreign buffers
            if isinstance(g, np.ndarray) and g.base is None and g.flags.writeable \
                    and g.dtype == np.float64 and g.shape == self.data.shape:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad += g


def tensor(data, requires_grad=False):
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def constant(data):
    return Tensor(data, requires_grad=False)


def parameter(data):
    return Tensor(data, requires_grad=True)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that stops graph recording (inference only)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev


def _node(data, parents, backward_fn, op):
    needs = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, False, op=op)
    return Tensor(data, True, parents, backward_fn, op)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (undo numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)

    def bw(g_out):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g_out, a.shape))
        if b.requires_grad:
            gb = _unbroadcast(g_out, b.shape)
            b.accumulate(gb.copy() if gb is g_out else gb)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)

    def bw(g_out):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g_out, a.shape))
        if b.requires_grad:
            b.accumulate(-_unbroadcast(g_out, b.shape))

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)

    def bw(g_out):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g_out * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g_out * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw, "mul")


def scale(a, s):
    """Multiply by a Python scalar."""
    a = _wrap(a)
    s = float(s)

    def bw(g_out):
        a.accumulate(g_out * s)

    return _node(a.data * s, (a,), bw, "scale")


def sigmoid(a):
    a = _wrap(a)
    # tanh form never overflows
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw(g_out):
        a.accumulate(g_out * y * (1.0 - y))

    return _node(y, (a,), bw, "sigmoid")


def tanh(a):
    a = _wrap(a)
    y = np.tanh(a.data)

    def bw(g_out):
        a.accumulate(g_out * (1.0 - y * y))

    return _node(y, (a,), bw, "tanh")


def exp(a):
    a = _wrap(a)
    y = np.exp(a.data)

    def bw(g_out):
        a.accumulate(g_out * y)

    return _node(y, (a,), bw, "exp")


def log(a):
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")

    def bw(g_out):
        a.accumulate(g_out / a.data)

    return _node(np.log(a.data), (a,), bw, "log")


def softmax(a):
    """Softmax over the last axis."""
    a = _wrap(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g_out):
        g = g_out
        a.accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node(y, (a,), bw, "softmax")


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim, op):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for ndim {ndim}")
    return axis % ndim


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = _wrap(a)
    axis = _norm_axis(axis, a.ndim, "sum")

    def bw(g_out):
        g = g_out
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.shape))

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    axis = _norm_axis(axis, a.ndim, "mean")
    n = a.size if axis is None else a.shape[axis]

    def bw(g_out):
        g = g_out / n
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.shape))

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw, "mean")


def max(a, axis):  # noqa: A001
    """Maximum over ``axis``.

    The adjoint goes to a single element per reduced slice: the first
    occurrence of the maximum (``np.argmax`` order), so ties resolve to the
    lowest index.
    """
    a = _wrap(a)
    axis = _norm_axis(axis, a.ndim, "max")
    if a.shape[axis] == 0:
        raise ShapeError(f"max: empty axis {axis} in shape {a.shape}")
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    y = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def bw(g_out):
        g = np.zeros_like(a.data)
        np.put_along_axis(g, idx, np.expand_dims(g_out, axis), axis=axis)
        a.accumulate(g)

    return _node(y, (a,), bw, "max")


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b):
    """Matrix product following ``np.matmul`` batching rules (ndim >= 2)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} do not conform") from None
    if b.ndim == 2 and a.ndim > 2:
        # stacked rows times one matrix: fold the batch into a single GEMM
        a2 = a.data.reshape(-1, a.shape[-1])

        def bw(g_out):
            g = g_out.reshape(-1, b.shape[-1])
            if a.requires_grad:
                a.accumulate((g @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b.accumulate(a2.T @ g)

        return _node((a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],)), (a, b), bw, "matmul")

    def bw(g_out):
        g = g_out
        if a.requires_grad:
            a.accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def concat(tensors, axis=0):
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no operands")
    ax = _norm_axis(axis, ts[0].ndim, "concat")
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} do not conform on axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g_out):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g_out.ndim
                sl[ax] = slice(lo, hi)
                t.accumulate(g_out[tuple(sl)])

    return _node(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), bw, "concat")


def getitem(a, idx):
    """Basic or advanced indexing; the backward scatter-adds."""
    a = _wrap(a)
    try:
        y = a.data[idx]
    except IndexError as exc:
        raise ShapeError(f"slice: index {idx!r} invalid for shape {a.shape}") from exc
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)

    def bw(g_out):
        g = np.zeros_like(a.data)
        if basic:
            g[idx] = g_out
        else:
            np.add.at(g, idx, g_out)
        a.accumulate(g)

    return _node(np.array(y, copy=True), (a,), bw, "slice")


def reshape(a, shape):
    a = _wrap(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None

    def bw(g_out):
        a.accumulate(g_out.reshape(a.shape))

    return _node(y, (a,), bw, "reshape")


def transpose(a, axes):
    a = _wrap(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))

    def bw(g_out):
        a.accumulate(g_out.transpose(inv))

    return _node(a.data.transpose(axes), (a,), bw, "transpose")


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation.

    Args:
        x: input of shape (B, C_in, H, W).
        w: kernel of shape (C_out, C_in, K, K).
        b: optional bias of shape (C_out,).
        stride: step between output positions.
        padding: zero padding on every side.

    Returns:
        Tensor of shape (B, C_out, H_out, W_out) with
        ``H_out = (H + 2*padding - K) // stride + 1``.
    """
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: shapes {x.shape} and {w.shape} do not conform")
    parents = (x, w)
    if b is not None:
        b = _wrap(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match kernel {w.shape}")
        parents = (x, w, b)
    B, C, H, W = x.shape
    O, _, K, _ = w.shape
    s, p = int(stride), int(padding)
    Ho = (H + 2 * p - K) // s + 1
    Wo = (W + 2 * p - K) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # cols: (B, Ho, Wo, C, K, K)
    sb, sc, sh, sw = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, shape=(B, Ho, Wo, C, K, K), strides=(sb, sh * s, sw * s, sc, sh, sw), writeable=False
    )
    cols = cols.reshape(B * Ho * Wo, C * K * K)
    wmat = w.data.reshape(O, C * K * K)
    y = cols @ wmat.T
    if b is not None:
        y = y + b.data
    y = y.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def bw(g_out):
        g = g_out.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        if w.requires_grad:
            w.accumulate((g.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b.accumulate(g.sum(axis=0))
        if x.requires_grad:
            gcols = (g @ wmat).reshape(B, Ho, Wo, C, K, K)
            gxp = np.zeros_like(xp)
            for i in range(K):
                for j in range(K):
                    gxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            x.accumulate(gxp[:, :, p:p + H, p:p + W] if p else gxp)

    return _node(np.ascontiguousarray(y), parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Topologically ordered record of the graph below a root."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root):
        order = []
        state = {}  # id -> 1 visiting, 2 done
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            key = id(node)
            if expanded:
                state[key] = 2
                order.append(node)
                continue
            st = state.get(key)
            if st == 2:
                continue
            if st == 1:
                raise RuntimeError(f"backward: cycle detected at {node!r}")
            state[key] = 1
            stack.append((node, True))
            for parent in node._parents:
                pst = state.get(id(parent))
                if pst == 1:
                    raise RuntimeError(f"backward: cycle detected at {parent!r}")
                if pst is None and parent.requires_grad:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(root, tape=None):
    """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``root``.

    Intermediate gradients are released after use; leaf gradients add into
    whatever was there before.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return Tape([])
    tape = tape or Tape.from_root(root)
    root.accumulate(np.ones_like(root.data))
    for node in reversed(tape.nodes):
        if node._backward is not None:
            if node.grad is None:
                continue
            node._backward(node.grad)
            node.grad = None
    return tape


def zero_grad(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Bias-corrected Adam state for a fixed, ordered list of parameters."""

    def __init__(self, shapes, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.first_moment = [np.zeros(s) for s in shapes]
        self.second_moment = [np.zeros(s) for s in shapes]
        self.step_count = 0
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon

    @classmethod
    def for_params(cls, params, **kw):
        return cls([p.shape for p in params], **kw)


def adam_step(params, state):
    """Apply one Adam update in place and clear the gradients."""
    if len(params) != len(state.first_moment):
        raise ValueError("adam_step: parameter count does not match optimizer state")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {i} with shape {p.shape} has no gradient")
        if state.first_moment[i].shape != p.shape:
            raise ShapeError(f"adam_step: moment shape {state.first_moment[i].shape} vs param {p.shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.grad = None
    return params


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, point, h=1e-5):
    """Largest relative error between autodiff and central differences.

    Args:
        f: callable taking a Tensor (requires_grad) and returning a scalar Tensor.
        point: array-like evaluation point.
        h: finite-difference step.

    Returns:
        max over coordinates of ``|a - n| / max(1, |a|, |n|)``.
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    x0 = np.array(point, dtype=np.float64)
    x = parameter(x0.copy())
    y = f(x)
    if not np.all(np.isfinite(y.data)):
        raise FloatingPointError("grad_check: non-finite function value")
    backward(y)
    analytic = np.zeros_like(x0) if x.grad is None else x.grad.copy()
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xp[i] += h
        fp = f(constant(xp.reshape(x0.shape))).item()
        xp[i] -= 2 * h
        fm = f(constant(xp.reshape(x0.shape))).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"grad_check: non-finite value at coordinate {i}")
        flat[i] = (fp - fm) / (2 * h)
    if not np.all(np.isfinite(analytic)):
        raise FloatingPointError("grad_check: non-finite analytic gradient")
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0


# ---------------------------------------------------------------------------
# named-tensor blob
#
# layout (all little-endian):
#   magic b"RTB1" | u32 entry count
#   per entry: u32 name length | name (UTF-8) | u32 ndim | u64 extents[ndim]
#              | f64 data[prod(extents)] | u32 crc32 of the entry bytes above

_MAGIC = b"RTB1"


class BlobError(ValueError):
    """Malformed tensor blob; ``offset`` is the byte position of the failure."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def save_tensors(path, tensors):
    """Write an ordered mapping name -> ndarray (or Tensor) to ``path``."""
    parts = [_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8", order="C")
        nb = name.encode("utf-8")
        entry = b"".join([
            struct.pack("<I", len(nb)), nb,
            struct.pack("<I", arr.ndim),
            struct.pack(f"<{arr.ndim}Q", *arr.shape),
            arr.tobytes(),
        ])
        parts.append(entry)
        parts.append(struct.pack("<I", zlib.crc32(entry)))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_tensors(path):
    """Read a blob written by :func:`save_tensors`; returns a dict name -> ndarray."""
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise BlobError(f"truncated while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != _MAGIC:
        raise BlobError("bad magic", 0)
    (count,) = struct.unpack("<I", take(4, "entry count"))
    out = {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise BlobError("name is not valid UTF-8", start + 4) from None
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        if ndim > 32:
            raise BlobError(f"implausible ndim {ndim}", pos - 4)
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, "extents"))
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        if n * 8 > len(buf) - pos:
            raise BlobError(f"truncated data for {name!r}", pos)
        data = np.frombuffer(take(8 * n, "data"), dtype="<f8").astype(np.float64).reshape(shape)
        end = pos
        (crc,) = struct.unpack("<I", take(4, "checksum"))
        if zlib.crc32(buf[start:end]) != crc:
            raise BlobError(f"checksum mismatch in entry {name!r}", start)
        if name in out:
            raise BlobError(f"duplicate entry {name!r}", start)
        out[name] = data
    if pos != len(buf):
        raise BlobError("trailing bytes after last entry", pos)
    return out

"""A small reverse-mode autodiff tensor on top of numpy, plus Adam and checkpoints.

Only the operations needed by the network and its losses are provided.
Broadcasting follows numpy for elementwise ops; gradients are summed back
over broadcast axes.
"""
import json
import struct
from dataclasses import dataclass, field

import numpy as np

_FLOATS = (np.float32, np.float64)


def _as_array(data, dtype=None):
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype.type not in _FLOATS:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @classmethod
    def from_op(cls, data, parents, backward):
        """Result of an op. ``backward(g)`` returns one gradient (or None) per parent."""
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)
    dtype = property(lambda self: self.data.dtype)

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar root")
            grad = np.ones_like(self.data)
        for node in _topological(self):
            if node is self:
                g = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)
                if node._backward is None:
                    if node.requires_grad:
                        node.grad = g.copy() if node.grad is None else node.grad + g
                    continue
            else:
                g = node.grad
            if node._backward is None or g is None:
                continue
            grads = node._backward(g)
            for parent, pg in zip(node._parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad += pg
            if node._parents and node is not self:
                node.grad = None  # interior gradients are not kept

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological(root):
    order, state = [], {}
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        key = id(node)
        if done:
            state[key] = 2
            order.append(node)
            continue
        if state.get(key) == 2:
            continue
        if state.get(key) == 1:
            raise RuntimeError("cycle detected in autodiff graph")
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            s = state.get(id(p))
            if s == 1:
                raise RuntimeError("cycle detected in autodiff graph")
            if s is None:
                stack.append((p, False))
    order.reverse()
    return order


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a = _wrap(a)
    b = _wrap(b, like=a)
    _check_broadcast(a, b, "add")
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a = _wrap(a)
    b = _wrap(b, like=a)
    _check_broadcast(a, b, "sub")
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b):
    a = _wrap(a)
    b = _wrap(b, like=a)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(a.data * b.data, (a, b), backward)


def square(x):
    x = _wrap(x)
    return Tensor.from_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def relu(x):
    x = _wrap(x)
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def softplus(x):
    x = _wrap(x)
    out = np.logaddexp(0, x.data).astype(x.dtype)

    def backward(g):
        # derivative is the logistic function
        return (g * (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype),)

    return Tensor.from_op(out, (x,), backward)


def log(x):
    x = _wrap(x)
    return Tensor.from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def log1p(x):
    x = _wrap(x)
    return Tensor.from_op(np.log1p(x.data), (x,), lambda g: (g / (1.0 + x.data),))


def minimum0(x):
    """Elementwise ``min(x, 0)``: keeps only the negative part."""
    x = _wrap(x)
    mask = x.data < 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape


def reshape(x, shape):
    x = _wrap(x)
    old = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def permute(x, axes):
    x = _wrap(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x, index):
    x = _wrap(x)

    def backward(g):
        full = np.zeros_like(x.data)
        if _has_array_index(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return Tensor.from_op(x.data[index], (x,), backward)


def _has_array_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ValueError(f"concat: incompatible shapes {ref.shape} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def repeat(x, repeats, axis):
    """``np.repeat`` along one axis; the gradient sums each group of copies."""
    x = _wrap(x)
    ax = axis % x.ndim

    def backward(g):
        shp = list(g.shape)
        shp[ax:ax + 1] = [x.shape[ax], repeats]
        return (g.reshape(shp).sum(axis=ax + 1),)

    return Tensor.from_op(np.repeat(x.data, repeats, axis=ax), (x,), backward)


def gather(x, index, axis=-1):
    """Select entries of ``x`` along ``axis`` by an integer index table."""
    x = _wrap(x)
    index = np.asarray(index, dtype=np.int64)
    ax = axis % x.ndim

    def backward(g):
        return (_scatter_add_array(g, index, ax, x.shape[ax]),)

    return Tensor.from_op(np.take(x.data, index, axis=ax), (x,), backward)


def _scatter_add_array(g, index, ax, size):
    shape = list(g.shape[:ax]) + [size] + list(g.shape[ax + index.ndim:])
    out = np.zeros(shape, dtype=g.dtype)
    moved = np.moveaxis(out, ax, 0)
    gm = g.reshape(g.shape[:ax] + (-1,) + g.shape[ax + index.ndim:])
    np.add.at(moved, index.ravel(), np.moveaxis(gm, ax, 0))
    return out


def scatter_add(x, index, size, axis=-1):
    """Adjoint of :func:`gather`: sum entries of ``x`` into ``size`` slots."""
    x = _wrap(x)
    index = np.asarray(index, dtype=np.int64)
    ax = axis % x.ndim
    if index.ndim != 1 or index.size != x.shape[ax]:
        raise ValueError("scatter_add: index table must match the scattered axis")

    def backward(g):
        return (np.take(g, index, axis=ax),)

    return Tensor.from_op(_scatter_add_array(x.data, index, ax, size), (x,), backward)


# ---------------------------------------------------------------------------
# reductions and products


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False):
    x = _wrap(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return Tensor.from_op(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = _wrap(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axes, keepdims), 1.0 / count)


def matmul(a, b):
    """Batched matrix product with numpy ``matmul`` semantics (ndim >= 2)."""
    a = _wrap(a)
    b = _wrap(b, like=a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(a.data @ b.data, (a, b), backward)


def batchnorm(x, gamma, beta, running_mean, running_var, training=True, momentum=0.1, eps=1e-5):
    """Per-channel normalisation over every axis except axis 1.

    ``running_mean``/``running_var`` are numpy arrays updated in place in
    training mode and used as the statistics in evaluation mode.
    """
    x = _wrap(x)
    C = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        n = x.data.size // C
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * n / max(n - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.astype(x.dtype).reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                m = g.size // C
                gx = (inv.reshape(bshape) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes).reshape(bshape)
                    - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
                )
            else:
                gx = gxhat * inv.reshape(bshape)
        return gx, gg, gb

    return Tensor.from_op(out.astype(x.dtype), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, in place on ``params`` (numpy arrays)."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if p.shape != g.shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise FloatingPointError(f"refusing Adam step: gradient {i} has {bad} non-finite entries")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, self.lr)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"SHDW"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors, config=None):
    """Write named float32 arrays plus a JSON key-value header."""
    header = json.dumps({"format_version": CHECKPOINT_VERSION, **(config or {})}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Return ``(config, tensors)`` from :func:`save_checkpoint` output."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        config = json.loads(fh.read(hlen).decode())
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode()
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            tensors[name] = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    return config, tensors

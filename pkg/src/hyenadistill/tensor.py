"""Dense tensors with reverse-mode automatic differentiation on top of numpy.

Deliberately small: float32/float64 only, no implicit broadcasting between
tensors (scalar constants excepted), graphs built and walked single-threaded.
Large enough to express and train the decoder models in this repository while
staying cheap to verify against central finite differences at 64-bit.
"""

from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class ShapeError(ValueError):
    """Operand shapes (or dtypes) violate an operation's contract."""


class NumericError(ArithmeticError):
    """NaN input, log of a non-positive value, and similar numeric misuse."""


class GraphError(RuntimeError):
    """backward() called on a consumed, detached, or non-scalar root."""


_grad_enabled = True
_node_ids = itertools.count()
_last_backward_ops = 0


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense real array plus an optional gradient accumulator.

    Tensors produced by operations carry links to their parents and the
    per-parent gradient rules needed for reverse-mode differentiation.
    Leaf tensors with ``requires_grad=False`` are immutable by convention
    and safe to share; parameter updates rebind ``.data`` rather than
    writing in place so recorded graphs stay valid.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps", "_nid", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(DTYPES.get(dtype, dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjps = ()
        self._nid = next(_node_ids)
        self._spent = False

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
    def dtype_name(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(DTYPES.get(dtype, dtype)))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype_name}{flag})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def backward(self):
        return backward(self)


def _node(data, parents, vjps) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    return out


def _check_binary(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ "
                         "(no implicit broadcasting)")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtypes {a.data.dtype} and {b.data.dtype} differ")


# -- creation ------------------------------------------------------------


def create(shape, init: str, *, c=None, lo=None, hi=None, mu=None, sigma=None,
           seed=None, dtype: str = "f32", requires_grad: bool = False) -> Tensor:
    """Create a tensor from a named initializer.

    ``init`` is one of ``zeros | ones | constant | uniform | normal``.
    Random initializers require an explicit seed; results are deterministic
    given (init, seed) and independent of dtype rounding order.
    """
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    np_dtype = DTYPES[dtype]
    if init == "zeros":
        data = np.zeros(shape, dtype=np_dtype)
    elif init == "ones":
        data = np.ones(shape, dtype=np_dtype)
    elif init == "constant":
        if c is None:
            raise ValueError("constant init needs c")
        data = np.full(shape, c, dtype=np_dtype)
    elif init in ("uniform", "normal"):
        if seed is None:
            raise ValueError(f"{init} init needs an explicit seed")
        rng = np.random.default_rng(int(seed))
        if init == "uniform":
            if lo is None or hi is None:
                raise ValueError("uniform init needs lo and hi")
            data = rng.uniform(lo, hi, size=shape).astype(np_dtype)
        else:
            if mu is None or sigma is None:
                raise ValueError("normal init needs mu and sigma")
            data = rng.normal(mu, sigma, size=shape).astype(np_dtype)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


def from_array(values, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(values), requires_grad=requires_grad, dtype=dtype)


def seed_stream(root_seed: int):
    """Infinite stream of independent integer seeds derived from one root.

    Stable across runs and platforms: element i is SeedSequence(root, (i,)).
    """
    i = 0
    while True:
        yield int(np.random.SeedSequence(entropy=int(root_seed),
                                         spawn_key=(i,)).generate_state(1)[0])
        i += 1


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Either both operands are stacked with identical
    leading axes, or ``b`` is a plain 2-D matrix shared across ``a``'s
    leading axes."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dims")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner extents {ad.shape[-1]} vs {bd.shape[-2]}")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: leading axes {ad.shape[:-2]} vs {bd.shape[:-2]}")
    if ad.dtype != bd.dtype:
        raise ShapeError(f"matmul: dtypes {ad.dtype} and {bd.dtype} differ")
    out = ad @ bd

    def da(g):
        return g @ np.swapaxes(bd, -1, -2)

    def db(g):
        if bd.ndim == 2 and ad.ndim > 2:
            k = ad.shape[-1]
            return ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        return np.swapaxes(ad, -1, -2) @ g

    return _node(out, (a, b), (da, db))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w with an optional bias row added to every output row."""
    y = matmul(x, w)
    if b is None:
        return y
    bd = b.data
    if bd.shape != (y.data.shape[-1],):
        raise ShapeError(f"linear: bias shape {bd.shape} vs output width {y.data.shape[-1]}")
    out = y.data + bd

    def dy(g):
        return g

    def dbias(g):
        return g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _node(out, (y, b), (dy, dbias))


# -- softmax family --------------------------------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax along the last axis, stabilized by row-max
    subtraction. -inf entries (masked scores) are mapped to exactly 0."""
    x = a.data
    if np.isnan(x).any():
        raise NumericError("softmax_rows: NaN input")
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        s = (g * y).sum(axis=-1, keepdims=True)
        return y * (g - s)

    return _node(y, (a,), (vjp,))


def log_softmax_rows(a: Tensor) -> Tensor:
    x = a.data
    if np.isnan(x).any():
        raise NumericError("log_softmax_rows: NaN input")
    m = np.max(x, axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def vjp(g):
        return g - np.exp(y) * g.sum(axis=-1, keepdims=True)

    return _node(y, (a,), (vjp,))


# -- elementwise -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    return _node(a.data + b.data, (a, b), (lambda g: g, lambda g: g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    return _node(a.data - b.data, (a, b), (lambda g: g, lambda g: -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), (lambda g: g * bd, lambda g: g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), (lambda g: g * c,))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU; the constants are fixed so golden values
    are portable across platforms."""
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    y = 0.5 * x * (1.0 + t)

    def vjp(g):
        sech2 = 1.0 - t * t
        inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * inner)

    return _node(y, (a,), (vjp,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 1.0 / (1.0 + np.exp(-x))
    y = x * s

    def vjp(g):
        return g * (s * (1.0 + x * (1.0 - s)))

    return _node(y, (a,), (vjp,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _node(y, (a,), (lambda g: g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.min(x, initial=np.inf) <= 0.0:
        raise NumericError("log: non-positive input")
    return _node(np.log(x), (a,), (lambda g: g / x,))


def sin(a: Tensor) -> Tensor:
    x = a.data
    return _node(np.sin(x), (a,), (lambda g: g * np.cos(x),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(0.0, x).astype(x.dtype, copy=False)

    def vjp(g):
        return g / (1.0 + np.exp(-x))

    return _node(y, (a,), (vjp,))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "gelu": gelu, "silu": silu,
    "exp": exp, "log": log, "scale": scale, "sin": sin, "softplus": softplus,
}


def elementwise(op: str, *operands, c: float | None = None) -> Tensor:
    """Dispatch-by-name pointwise application (binary ops take equal shapes;
    ``scale`` is the only scalar-broadcast form)."""
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    if op == "scale":
        if c is None:
            raise ValueError("scale needs c")
        return scale(operands[0], c)
    return _ELEMENTWISE[op](*operands)


# -- reductions --------------------------------------------------------------


def _check_axis(a: Tensor, axis):
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"axis {axis} out of range for ndim {a.ndim}")


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    _check_axis(a, axis)
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return np.full(shape, g, dtype=a.data.dtype)
        return np.ascontiguousarray(np.broadcast_to(np.expand_dims(g, axis), shape))

    return _node(a.data.sum(axis=axis), (a,), (vjp,))


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    _check_axis(a, axis)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    def vjp(g):
        if axis is None:
            return np.full(shape, g / count, dtype=a.data.dtype)
        return np.ascontiguousarray(np.broadcast_to(np.expand_dims(g / count, axis), shape))

    return _node(a.data.mean(axis=axis), (a,), (vjp,))


def reductions(op: str, a: Tensor, axis=None) -> Tensor:
    if op == "sum":
        return reduce_sum(a, axis)
    if op == "mean":
        return reduce_mean(a, axis)
    raise ValueError(f"unknown reduction {op!r}")


# -- structural ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), (lambda g: g.reshape(old),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), (lambda g: np.transpose(g, inv),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor; use permute otherwise")
    return permute(a, (1, 0))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit (deliberate) broadcast. The gradient sums back over the
    expanded axes."""
    shape = tuple(shape)
    src = a.data.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    pad = len(shape) - len(src)

    def vjp(g):
        g = g.sum(axis=tuple(range(pad))) if pad else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and shape[pad + i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return np.ascontiguousarray(g)

    return _node(out, (a,), (vjp,))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; gradient scatters back zero-padded."""
    _check_axis(a, axis)
    axis = axis % a.ndim
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{start + length}] out of range "
                         f"for extent {a.data.shape[axis]}")
    idx = tuple(slice(None) if i != axis else slice(start, start + length)
                for i in range(a.ndim))
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return full

    return _node(a.data[idx], (a,), (vjp,))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from an embedding table; the gradient scatter-adds."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"token index out of range [0, {table.data.shape[0]})")
    td = table.data

    def vjp(g):
        full = np.zeros_like(td)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return full

    return _node(td[ids], (table,), (vjp,))


def pick_index(a: Tensor, ids: np.ndarray) -> Tensor:
    """Select one entry per row along the last axis (for log-prob gathers)."""
    ids = np.asarray(ids)
    if ids.shape != a.data.shape[:-1]:
        raise ShapeError(f"pick_index: ids shape {ids.shape} vs rows {a.data.shape[:-1]}")
    if ids.size and (ids.min() < 0 or ids.max() >= a.data.shape[-1]):
        raise IndexError(f"index out of range [0, {a.data.shape[-1]})")
    out = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, ids[..., None], g[..., None], axis=-1)
        return full

    return _node(out, (a,), (vjp,))


# -- fused layers --------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learnable gain and bias.

    Fused into one node: the closed-form gradient keeps graphs shallow and
    avoids needing implicit broadcasting anywhere else.
    """
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    y = xhat * gain.data + bias.data

    def dx(g):
        gh = g * gain.data
        return inv * (gh - gh.mean(axis=-1, keepdims=True)
                      - xhat * (gh * xhat).mean(axis=-1, keepdims=True))

    def dgain(g):
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def dbias(g):
        return g.reshape(-1, d).sum(axis=0)

    return _node(y, (x, gain, bias), (dx, dgain, dbias))


def rope(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotate coordinate pairs (x[2i], x[2i+1]) of the last axis by
    position * base**(-2i/width). ``positions`` indexes the second-to-last
    axis. A pure rotation, so the gradient rotates by the negated angle.
    """
    width = x.data.shape[-1]
    if width % 2:
        raise ShapeError("rope needs an even last-axis extent")
    L = x.data.shape[-2]
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (L,):
        raise ShapeError(f"rope: positions shape {positions.shape} vs length {L}")
    half = width // 2
    theta = float(base) ** (-2.0 * np.arange(half) / width)
    ang = positions[:, None] * theta[None, :]
    cos = np.cos(ang).astype(x.data.dtype)
    sin_ = np.sin(ang).astype(x.data.dtype)
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    y = np.empty_like(x.data)
    y[..., 0::2] = xe * cos - xo * sin_
    y[..., 1::2] = xe * sin_ + xo * cos

    def vjp(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        out = np.empty_like(g)
        out[..., 0::2] = ge * cos + go * sin_
        out[..., 1::2] = -ge * sin_ + go * cos
        return out

    return _node(y, (x,), (vjp,))


# -- autodiff -------------------------------------------------------------------


def trace(root: Tensor) -> list[Tensor]:
    """Reachable graph nodes in execution (topological) order."""
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._nid in seen:
            continue
        seen[t._nid] = t
        for p in t._parents:
            if p._nid not in seen:
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t._nid)


def backward(loss: Tensor) -> dict:
    """Reverse-mode sweep from a scalar loss.

    Accumulates into ``.grad`` of every requires_grad ancestor (additively
    across calls on leaves; call :func:`zero_grad` between optimizer steps)
    and returns a map of those tensors to their gradients. Each op node's
    gradient rule fires exactly once. A second backward on the same root
    raises; rebuild the forward pass instead.
    """
    global _last_backward_ops
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss._spent:
        raise GraphError("graph already consumed by a previous backward; "
                         "re-run the forward pass before differentiating again")
    if not loss.requires_grad:
        raise GraphError("loss is detached: nothing in its history requires grad")

    seen = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._nid in seen:
            continue
        seen[t._nid] = t
        for p in t._parents:
            if p.requires_grad and p._nid not in seen:
                stack.append(p)
    order = sorted(seen.values(), key=lambda t: t._nid, reverse=True)

    buf = {loss._nid: np.ones_like(loss.data)}
    grads: dict[Tensor, np.ndarray] = {}
    applied = 0
    for t in order:
        g = buf.pop(t._nid, None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        grads[t] = t.grad
        if t._parents:
            applied += 1
            for p, vjp in zip(t._parents, t._vjps):
                if not p.requires_grad:
                    continue
                contrib = vjp(g)
                if p._nid in buf:
                    buf[p._nid] = buf[p._nid] + contrib
                else:
                    buf[p._nid] = contrib
    loss._spent = True
    _last_backward_ops = applied
    return grads


def last_backward_op_count() -> int:
    """Gradient-rule applications performed by the most recent backward."""
    return _last_backward_ops


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


def grad_check(f, inputs, eps: float = 1e-5, seed: int = 0) -> float:
    """Compare analytic gradients of a scalar-valued tensor function against
    central finite differences at 64-bit and return the worst relative error.

    Checks every input coordinate, or a seeded random subsample of 10^4
    coordinates when there are more.
    """
    xs = []
    for t in inputs:
        base = t.data if isinstance(t, Tensor) else np.asarray(t)
        xs.append(Tensor(np.array(base, dtype=np.float64), requires_grad=True))
    out = f(*xs)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    backward(out)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]

    coords = [(i, j) for i, x in enumerate(xs) for j in range(x.data.size)]
    if len(coords) > 10_000:
        rng = np.random.default_rng(seed)
        keep = rng.choice(len(coords), size=10_000, replace=False)
        coords = [coords[int(k)] for k in keep]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = xs[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(f(*xs).data.reshape(()))
            flat[j] = orig - eps
            fm = float(f(*xs).data.reshape(()))
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * eps)
            ana = float(analytic[i].reshape(-1)[j])
            err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-3)
            if err > worst:
                worst = err
    return worst

"""Dense numpy arrays with a recording tape and reverse-mode gradients.

Ops are plain functions over :class:`Tensor`.  While a :class:`Tape` is
active every op whose inputs are tracked is appended to it; ``backward``
walks the tape in reverse.  Without an active tape ops only compute values,
which is how inference runs.

Broadcasting is one-sided: the output shape of a binary elementwise op must
equal the shape of one of its operands (the other may omit leading axes or
carry size-1 axes).  Anything else is a :class:`ShapeError`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

EPS = 1e-10

_tapes: list["Tape"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "kind", "id", "tape", "param")

    def __init__(self, value, kind="const", param=None):
        self.value = value
        self.grad = None
        self.parents = ()
        self.backward_fn = None
        self.kind = kind
        self.id = None
        self.tape = None
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def tracked(self):
        return self.tape is not None

    def numpy(self):
        return self.value

    def __repr__(self):
        return f"Tensor({self.kind}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    accumulator: np.ndarray = field(init=False)
    moment: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.require(np.asarray(self.value), requirements="C")
        self.zero_grad()
        self.accumulator = np.zeros_like(self.value)
        self.moment = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.accumulator = self.accumulator.astype(dtype)
        self.moment = self.moment.astype(dtype)


class Tape:
    """Ordered record of executed ops; node ``i`` only reads nodes ``< i``."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def record(self, t: Tensor) -> Tensor:
        t.id = len(self.nodes)
        t.tape = self
        self.nodes.append(t)
        return t

    def leaf(self, param: Parameter) -> Tensor:
        t = self._leaves.get(id(param))
        if t is None:
            t = self.record(Tensor(param.value, kind="param", param=param))
            self._leaves[id(param)] = t
        return t

    def backward(self, loss: Tensor):
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or parent.tape is not self:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        for t in self._leaves.values():
            if t.grad is not None:
                t.param.grad += t.grad.astype(t.param.grad.dtype, copy=False)


def current_tape():
    return _tapes[-1] if _tapes else None


def backward(loss: Tensor):
    """Accumulate d(loss)/d(param) into ``Parameter.grad`` for every reachable parameter."""
    if loss.tape is None:
        raise ValueError("loss is not on a tape; compute it inside `with Tape():`")
    loss.tape.backward(loss)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        tape = current_tape()
        return tape.leaf(x) if tape is not None else Tensor(x.value, kind="param", param=x)
    return Tensor(np.asarray(x))


def _pair(a, b):
    # non-Tensor constants (python scalars, masks) take the float dtype of the other operand
    if not isinstance(a, (Tensor, Parameter)):
        b = as_tensor(b)
        a = Tensor(np.asarray(a, dtype=b.dtype if b.dtype.kind == "f" else None))
        return a, b
    a = as_tensor(a)
    if not isinstance(b, (Tensor, Parameter)):
        b = Tensor(np.asarray(b, dtype=a.dtype if a.dtype.kind == "f" else None))
    return a, as_tensor(b)


def _node(value, kind, parents, backward_fn):
    out = Tensor(value, kind=kind)
    tape = current_tape()
    if tape is not None and any(p.tape is tape for p in parents):
        out.parents = parents
        out.backward_fn = backward_fn
        tape.record(out)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_shape(kind, a, b):
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None
    if out != a.shape and out != b.shape:
        raise ShapeError(f"{kind}: two-sided broadcast of {a.shape} and {b.shape} is not allowed")
    return out


# -- elementwise --------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    _binary_shape("add", a, b)
    return _node(a.value + b.value, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    _binary_shape("sub", a, b)
    return _node(a.value - b.value, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    _binary_shape("mul", a, b)
    return _node(a.value * b.value, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def minimum(a, b):
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    _binary_shape("minimum", a, b)
    take_a = a.value <= b.value

    def back(g):
        return (_unbroadcast(np.where(take_a, g, 0), a.shape),
                _unbroadcast(np.where(take_a, 0, g), b.shape))
    return _node(np.minimum(a.value, b.value), "minimum", (a, b), back)


def sigmoid(x):
    x = as_tensor(x)
    v = x.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1 / (1 + e), e / (1 + e)).astype(v.dtype, copy=False)
    return _node(y, "sigmoid", (x,), lambda g: (g * y * (1 - y),))


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.value)
    return _node(y, "tanh", (x,), lambda g: (g * (1 - y * y),))


def relu(x):
    x = as_tensor(x)
    pos = x.value > 0
    return _node(np.where(pos, x.value, 0).astype(x.dtype), "relu", (x,), lambda g: (g * pos,))


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.value)
    return _node(y, "exp", (x,), lambda g: (g * y,))


def log(x, eps=EPS):
    """Natural log.  With ``eps`` the input is floored at ``eps`` first (no gradient below it);
    with ``eps=None`` a non-positive input is an error."""
    x = as_tensor(x)
    v = x.value
    if eps is None:
        if np.any(v <= 0):
            raise ValueError(f"log of non-positive value (min {v.min()!r}) without an epsilon floor")
        return _node(np.log(v), "log", (x,), lambda g: (g / v,))
    live = v > eps
    y = np.log(np.maximum(v, eps))
    return _node(y, "log", (x,), lambda g: (np.where(live, g / np.where(live, v, 1), 0),))


def power(x, exponent: float):
    x = as_tensor(x)
    v = x.value
    y = v ** exponent
    return _node(y, "power", (x,), lambda g: (g * exponent * v ** (exponent - 1),))


# -- linear algebra and shape -----------------------------------------------

def matmul(a, b):
    """``a @ b`` for ndim >= 2 operands; leading batch axes broadcast one-sidedly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ in {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents differ in {a.shape} @ {b.shape}") from None
    if batch != a.shape[:-2] and batch != b.shape[:-2]:
        raise ShapeError(f"matmul: two-sided batch broadcast of {a.shape} @ {b.shape}")

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
        return ga, gb
    return _node(a.value @ b.value, "matmul", (a, b), back)


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat along {axis}: shapes {[t.shape for t in xs]}")
    sizes = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=ax))
    return _node(np.concatenate([x.value for x in xs], axis=ax), "concat", tuple(xs), back)


def stack(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))
    return _node(np.stack([x.value for x in xs], axis=axis), "stack", tuple(xs), back)


def getitem(x, index):
    x = as_tensor(x)
    y = x.value[index]

    basic = all(isinstance(i, (int, slice, type(Ellipsis), type(None)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def back(g):
        out = np.zeros_like(x.value)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)
    return _node(np.array(y, copy=True), "slice", (x,), back)


def reshape(x, shape):
    x = as_tensor(x)
    return _node(x.value.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _node(np.transpose(x.value, axes), "transpose", (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x, shape):
    x = as_tensor(x)
    return _node(np.broadcast_to(x.value, shape).copy(), "broadcast", (x,),
                 lambda g: (_unbroadcast(g, x.shape),))


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _node(np.asarray(x.value.sum(axis=axis, keepdims=keepdims)), "sum", (x,), back)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), np.asarray(1.0 / n, dtype=x.dtype))


def embed(table, ids):
    """Row gather ``table[ids]`` (embedding lookup)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids outside [0, {table.shape[0]})")

    def back(g):
        out = np.zeros_like(table.value)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)
    return _node(table.value[ids], "gather", (table,), back)


def pick(x, idx):
    """``x[..., idx[...]]`` along the last axis; ``idx`` has ``x``'s leading shape."""
    x = as_tensor(x)
    idx = np.asarray(idx)[..., None]
    if idx.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"pick: index shape {idx.shape[:-1]} vs value shape {x.shape}")

    def back(g):
        out = np.zeros_like(x.value)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)
    return _node(np.take_along_axis(x.value, idx, axis=-1)[..., 0], "pick", (x,), back)


def scatter_add(src, ids, size):
    """``out[b, ..., ids[b, i]] += src[b, ..., i]`` with ``out`` last extent ``size``."""
    src = as_tensor(src)
    ids = np.asarray(ids)
    if ids.shape != (src.shape[0], src.shape[-1]):
        raise ShapeError(f"scatter_add: ids {ids.shape} do not match src {src.shape}")
    out = np.zeros(src.shape[:-1] + (size,), dtype=src.dtype)
    for b in range(src.shape[0]):
        np.add.at(out[b], (Ellipsis, ids[b]), src.value[b])

    def back(g):
        return (np.stack([g[b][..., ids[b]] for b in range(src.shape[0])]),)
    return _node(out, "scatter_add", (src,), back)


# -- distributions ------------------------------------------------------------

def masked_softmax(logits, mask=None):
    """Softmax over the last axis restricted to ``mask == 1``; exactly 0 elsewhere."""
    logits = as_tensor(logits)
    v = logits.value
    if mask is None:
        m = np.ones(v.shape, dtype=bool)
    else:
        m = np.broadcast_to(np.asarray(mask) > 0, v.shape)
    if not m.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has an all-zero mask (no admissible positions)")
    shifted = np.where(m, v, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(shifted), 0).astype(v.dtype, copy=False)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return _node(y, "softmax", (logits,), back)


def softmax(logits):
    return masked_softmax(logits, None)


def _check_normalized(name, t, tol):
    s = t.value.sum(axis=-1)
    bad = np.abs(s - 1) > tol
    if np.any(bad):
        raise ValueError(f"kl_divergence: {name} is not normalized (row sums {np.atleast_1d(s)[np.atleast_1d(bad)][:5]})")


def kl_divergence(p, q, eps=EPS):
    """KL(p || q) along the last axis in nats; both floored at ``eps`` inside the log."""
    p, q = as_tensor(p), as_tensor(q)
    tol = 1e-6 if p.dtype == np.float64 else 1e-4
    _check_normalized("p", p, tol)
    _check_normalized("q", q, tol)
    return sum_(p * (log(p, eps) - log(q, eps)), axis=-1)


# -- gradient checking ----------------------------------------------------------

def relative_error(analytic, numeric, floor=1e-8):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_gradients(fn, params, eps=1e-5, max_entries=None, seed=0):
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` builds and returns a scalar loss Tensor (it is called both inside and
    outside a tape).  With ``max_entries`` only that many randomly chosen
    coordinates of each parameter are perturbed.  Returns ``{name: max relative
    error}``; a non-finite loss gives ``nan`` for the parameter being checked.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape():
        loss = fn()
        if not np.isfinite(loss.value).all():
            return {p.name: float("nan") for p in params}
        backward(loss)
    rng = np.random.default_rng(seed)
    report = {}
    for p in params:
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = fn().value[()]
            flat[i] = orig - eps
            down = fn().value[()]
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                logger.warning("non-finite loss while perturbing %s[%d]; check aborted", p.name, i)
                worst = float("nan")
                break
            numeric = (up - down) / (2 * eps)
            worst = max(worst, float(relative_error(p.grad.reshape(-1)[i], numeric)))
        report[p.name] = worst
    return report

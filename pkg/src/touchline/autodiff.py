"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every op produces a :class:`Tensor` that remembers its inputs, a pure numpy
forward (used for replay) and a vector-Jacobian product. ``backward`` walks the
graph in reverse topological order.

Broadcasting is deliberately narrow: binary elementwise ops need equal shapes,
except that the second operand may be a trailing vector (bias add) or a python
scalar. ``expand`` is the only other way to grow a tensor.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64
_grad_enabled = True


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name",
                 "_parents", "_vjp", "_fwd", "_op", "_kink")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._fwd = None
        self._op = "leaf"
        self._kink = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (evaluation)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _record(out_data, parents, op, fwd, vjp, kink=None) -> Tensor:
    """Wrap an op result; only keeps graph state when some input needs grads."""
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out._fwd = fwd
        out._op = op
        out._kink = kink
    return out


def _apply(op, fwd, vjp, *inputs, kink=None):
    arrays = [t.data for t in inputs]
    out = fwd(*arrays)
    return _record(out, inputs, op, fwd, lambda g: vjp(g, out, *arrays), kink)


# ---------------------------------------------------------------------------
# elementwise binary

def _is_bias(a: np.ndarray, b: np.ndarray) -> bool:
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0] and a.ndim > 1


def _check_binary(op, a: np.ndarray, b: np.ndarray):
    if a.shape == b.shape or _is_bias(a, b):
        return
    raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _unbias(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _apply("add_scalar", lambda x: x + c, lambda g, o, x: (g,), a)
    _check_binary("add", a.data, b.data)
    return _apply("add", np.add,
                  lambda g, o, x, y: (g, _unbias(g, y.shape)), a, b)


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_binary("sub", a.data, b.data)
    return _apply("sub", np.subtract,
                  lambda g, o, x, y: (g, -_unbias(g, y.shape)), a, b)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _apply("mul_scalar", lambda x: x * c, lambda g, o, x: (g * c,), a)
    _check_binary("mul", a.data, b.data)
    return _apply("mul", np.multiply,
                  lambda g, o, x, y: (g * y, _unbias(g * x, y.shape)), a, b)


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    _check_binary("div", a.data, b.data)
    return _apply("div", np.divide,
                  lambda g, o, x, y: (g / y, _unbias(-g * o / y, y.shape)), a, b)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    _check_same(a, b, "maximum")
    mask = a.data >= b.data
    return _apply("maximum", np.maximum,
                  lambda g, o, x, y: (g * mask, g * ~mask), a, b, kink=mask)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    _check_same(a, b, "minimum")
    mask = a.data <= b.data
    return _apply("minimum", np.minimum,
                  lambda g, o, x, y: (g * mask, g * ~mask), a, b, kink=mask)


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise unary

def neg(a: Tensor) -> Tensor:
    return _apply("neg", np.negative, lambda g, o, x: (-g,), a)


def reciprocal(a: Tensor) -> Tensor:
    return _apply("reciprocal", lambda x: 1.0 / x, lambda g, o, x: (-g * o * o,), a)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return _apply("pow", lambda x: x ** p,
                  lambda g, o, x: (g * p * x ** (p - 1),), a)


def exp(a: Tensor) -> Tensor:
    return _apply("exp", np.exp, lambda g, o, x: (g * o,), a)


def log(a: Tensor) -> Tensor:
    return _apply("log", np.log, lambda g, o, x: (g / x,), a)


def sqrt(a: Tensor) -> Tensor:
    return _apply("sqrt", np.sqrt, lambda g, o, x: (g * 0.5 / o,), a)


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.data > 0
    return _apply("relu", lambda x: np.maximum(x, 0.0),
                  lambda g, o, x: (g * mask,), a, kink=mask)


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _apply("abs", np.abs, lambda g, o, x: (g * sign,), a, kink=sign)


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    return _apply("sigmoid", _sigmoid, lambda g, o, x: (g * o * (1.0 - o),), a)


# ---------------------------------------------------------------------------
# reductions and normalizers

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def vjp(g, o, x):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _apply("sum", lambda x: np.sum(x, axis=axis, keepdims=keepdims), vjp, a)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def _softmax(x, axis):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    def vjp(g, o, x):
        return (o * (g - np.sum(g * o, axis=axis, keepdims=True)),)
    return _apply("softmax", lambda x: _softmax(x, axis), vjp, a)


def _log_softmax(x, axis):
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    def vjp(g, o, x):
        return (g - np.exp(o) * np.sum(g, axis=axis, keepdims=True),)
    return _apply("log_softmax", lambda x: _log_softmax(x, axis), vjp, a)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm: gain/bias must be ({d},)")

    def fwd(x, gm, bt):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        return xc * inv * gm + bt

    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx, _unbias(g * xhat, (d,)), _unbias(g, (d,)))

    return _record(out, (a, gamma, beta), "layer_norm", fwd, vjp)


# ---------------------------------------------------------------------------
# shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``b`` either 2-D (shared weight) or matching batch dims."""
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ShapeMismatch(f"matmul: {x.shape} @ {y.shape}")
    if y.ndim != 2 and x.shape[:-2] != y.shape[:-2]:
        raise ShapeMismatch(f"matmul: batch dims {x.shape[:-2]} vs {y.shape[:-2]}")

    if y.ndim == 2:
        # fold batch dims into one 2-D BLAS call; stacked matmul is much slower
        def fwd(x, y):
            return (x.reshape(-1, x.shape[-1]) @ y).reshape(x.shape[:-1] + (y.shape[1],))

        def vjp(g, o, x, y):
            g2 = g.reshape(-1, g.shape[-1])
            gx = (g2 @ y.T).reshape(x.shape)
            gy = x.reshape(-1, x.shape[-1]).T @ g2
            return (gx, gy)

        return _apply("matmul", fwd, vjp, a, b)

    def vjp(g, o, x, y):
        return (g @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ g)

    return _apply("matmul", np.matmul, vjp, a, b)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _apply("transpose", lambda x: np.transpose(x, axes),
                  lambda g, o, x: (np.transpose(g, inv),), a)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out_shape = np.reshape(a.data, shape).shape
    except ValueError as e:
        raise ShapeMismatch(f"reshape {old} -> {shape}") from e
    return _apply("reshape", lambda x: np.reshape(x, out_shape),
                  lambda g, o, x: (g.reshape(old),), a)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeMismatch(f"concat: {ref} vs {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fwd(*xs):
        return np.concatenate(xs, axis=ax)

    def vjp(g, o, *xs):
        return tuple(np.split(g, splits, axis=ax))

    return _apply("concat", fwd, vjp, *tensors)


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def index(a: Tensor, idx) -> Tensor:
    """Basic slicing and integer-array gathering; gradients scatter-add back."""
    shape = a.shape
    adv = _has_advanced(idx)

    def vjp(g, o, x):
        gx = np.zeros(shape, dtype=DTYPE)
        if adv:
            np.add.at(gx, idx, g)
        else:
            gx[idx] = g
        return (gx,)

    return _apply("index", lambda x: x[idx], vjp, a)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch(f"embedding ids outside table of {table.shape[0]} rows")
    shape = table.shape

    def vjp(g, o, t):
        gt = np.zeros(shape, dtype=DTYPE)
        np.add.at(gt, ids, g)
        return (gt,)

    return _apply("embedding", lambda t: t[ids], vjp, table)


def expand(a: Tensor, lead: tuple[int, ...]) -> Tensor:
    """Repeat ``a`` along new leading axes; the gradient sums them back."""
    lead = tuple(lead)
    shape = lead + a.shape
    n = len(lead)
    return _apply("expand", lambda x: np.broadcast_to(x, shape).copy(),
                  lambda g, o, x: (g.sum(axis=tuple(range(n))),), a)


def expand_last(a: Tensor, n: int) -> Tensor:
    """Repeat a trailing singleton axis ``n`` times: (..., 1) -> (..., n)."""
    if a.shape[-1] != 1:
        raise ShapeMismatch(f"expand_last needs a trailing axis of 1, got {a.shape}")
    shape = a.shape[:-1] + (n,)
    return _apply("expand_last", lambda x: np.broadcast_to(x, shape).copy(),
                  lambda g, o, x: (g.sum(axis=-1, keepdims=True),), a)


# ---------------------------------------------------------------------------
# traversal

def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every producer before its consumers."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


@dataclass
class Tape:
    """The executed ops feeding one output, in topological order."""
    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def of(cls, root: Tensor) -> Tape:
        return cls(topo_order(root))

    @property
    def ops(self) -> list[Tensor]:
        return [n for n in self.nodes if n._parents]

    def replay(self) -> bool:
        """Recompute every op from current leaf values; True if all match bit-exactly."""
        fresh: dict[int, np.ndarray] = {}
        ok = True
        for n in self.nodes:
            if not n._parents:
                fresh[id(n)] = n.data
                continue
            val = n._fwd(*(fresh[id(p)] for p in n._parents))
            fresh[id(n)] = val
            ok = ok and np.array_equal(val, n.data)
        return ok

    def kink_signature(self) -> list[np.ndarray]:
        return [n._kink for n in self.nodes if n._kink is not None]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers, like most frameworks.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._vjp(g)):
            if not p.requires_grad or gp is None:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + gp
            else:
                grads[k] = gp


# ---------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: int
    excluded: list[tuple[str, tuple[int, ...]]]
    worst: tuple[str, tuple[int, ...]] | None = None

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def gradcheck(f, params: dict[str, Tensor] | list[Tensor], step: float = 1e-5,
              tolerance: float = 1e-4, samples_per_param: int | None = 8,
              seed: int = 0) -> GradcheckResult:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    Error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    Coordinates whose +/- probes flip a relu/abs/max/min branch sit on a kink
    and are reported in ``excluded`` instead of being scored.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    loss = f()
    backward(loss)
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
                for k, p in params.items()}

    rng = np.random.default_rng(seed)
    worst_err, worst, checked, excluded = 0.0, None, 0, []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=samples_per_param, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = f()
            sig_up = Tape.of(up).kink_signature()
            flat[c] = orig - step
            down = f()
            sig_down = Tape.of(down).kink_signature()
            flat[c] = orig
            where = tuple(int(i) for i in np.unravel_index(c, p.shape))
            if len(sig_up) != len(sig_down) or any(
                    not np.array_equal(a, b) for a, b in zip(sig_up, sig_down)):
                excluded.append((name, where))
                continue
            numeric = (up.item() - down.item()) / (2 * step)
            err = abs(analytic[name].reshape(-1)[c] - numeric) / max(1.0, abs(numeric))
            checked += 1
            if worst is None or err > worst_err:
                worst_err, worst = err, (name, where)
    return GradcheckResult(worst_err, checked, excluded, worst)

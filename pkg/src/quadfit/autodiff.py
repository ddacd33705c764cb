"""Reverse-mode automatic differentiation on dense float64 arrays.

A Tape records every operation; backward() replays it once in reverse
topological order. Tapes are single-use and confined to one thread.
"""

import numpy as np


class Tape:
    """Recording of one forward evaluation."""

    def __init__(self):
        self._parents = []  # per node: tuple of parent node ids
        self._vjps = []     # per node: callable(upstream grad) -> parent grads, None for leaves

    def __len__(self):
        return len(self._parents)

    def leaf(self, value):
        """Register a differentiable input."""
        return self._emit(np.asarray(value, dtype=np.float64), (), None)

    def record(self, value, parents, vjp):
        """Register a custom operation.

        parents: the Vars the op consumed; vjp(grad) must return one array
        per parent, shaped like that parent's value.
        """
        return self._emit(np.asarray(value, dtype=np.float64),
                          tuple(p._idx for p in parents), vjp)

    def _emit(self, value, parent_ids, vjp):
        idx = len(self._parents)
        self._parents.append(parent_ids)
        self._vjps.append(vjp)
        return Var(value, self, idx)


class Var:
    """A tensor tracked on a tape."""

    __slots__ = ("value", "tape", "_idx")

    def __init__(self, value, tape, idx):
        self.value = value
        self.tape = tape
        self._idx = idx

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, id={self._idx})"

    # arithmetic sugar
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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*args):
    """Tape shared by the Var operands, or None when all operands are plain.

    Every op degrades to a plain numpy computation when no Var is involved,
    so model code can be written once and run with or without recording.
    """
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary(a, b, out, da, db):
    """Record a broadcasting binary op; da/db map upstream grad to operand grads."""
    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents, slots = [], []
    if isinstance(a, Var):
        parents.append(a)
        slots.append("a")
    if isinstance(b, Var):
        parents.append(b)
        slots.append("b")
    ashape = value_of(a).shape
    bshape = value_of(b).shape

    def vjp(g):
        grads = []
        for s in slots:
            if s == "a":
                grads.append(_unbroadcast(da(g), ashape))
            else:
                grads.append(_unbroadcast(db(g), bshape))
        return tuple(grads)

    return tape.record(out, tuple(parents), vjp)


def _unary(x, out, dx):
    if not isinstance(x, Var):
        return out
    return x.tape.record(out, (x,), lambda g: (dx(g),))


# ---------------------------------------------------------------------------
# primitives

def add(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av + bv, lambda g: g, lambda g: g)


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av - bv, lambda g: g, lambda g: -g)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(a, b):
    av, bv = value_of(a), value_of(b)
    if np.any(bv == 0.0):
        raise ZeroDivisionError("division by zero in div")
    return _binary(a, b, av / bv,
                   lambda g: g / bv,
                   lambda g: -g * av / (bv * bv))


def matmul(a, b):
    """Matrix product with numpy stacking semantics; operands must be >= 2-d."""
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    out = av @ bv

    def da(g):
        return g @ np.swapaxes(bv, -1, -2)

    def db(g):
        return np.swapaxes(av, -1, -2) @ g

    return _binary(a, b, out, da, db)


def exp(x):
    y = np.exp(value_of(x))
    return _unary(x, y, lambda g: g * y)


def log(x):
    xv = value_of(x)
    if np.any(xv <= 0.0):
        raise ValueError("log of non-positive value")
    return _unary(x, np.log(xv), lambda g: g / xv)


def sqrt(x):
    xv = value_of(x)
    if np.any(xv < 0.0):
        raise ValueError("sqrt of negative value")
    y = np.sqrt(xv)
    return _unary(x, y, lambda g: g * 0.5 / y)


def tanh(x):
    y = np.tanh(value_of(x))
    return _unary(x, y, lambda g: g * (1.0 - y * y))


def sigmoid(x):
    xv = value_of(x)
    y = np.empty_like(xv)
    pos = xv >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    e = np.exp(xv[~pos])
    y[~pos] = e / (1.0 + e)
    return _unary(x, y, lambda g: g * y * (1.0 - y))


def relu(x):
    """max(x, 0); gradient 0 at the kink."""
    xv = value_of(x)
    mask = xv > 0.0
    return _unary(x, np.where(mask, xv, 0.0), lambda g: g * mask)


def clamp_max(x, hi):
    """min(x, hi) with constant hi; gradient 0 where clamped."""
    xv = value_of(x)
    mask = xv < hi
    return _unary(x, np.where(mask, xv, hi), lambda g: g * mask)


def power(x, p):
    """x**p with constant exponent p."""
    xv = value_of(x)
    y = xv ** p
    return _unary(x, y, lambda g: g * p * xv ** (p - 1))


def sin(x):
    xv = value_of(x)
    return _unary(x, np.sin(xv), lambda g: g * np.cos(xv))


def cos(x):
    xv = value_of(x)
    return _unary(x, np.cos(xv), lambda g: -g * np.sin(xv))


def arctan2(y, x):
    yv, xv = value_of(y), value_of(x)
    denom = xv * xv + yv * yv
    return _binary(y, x, np.arctan2(yv, xv),
                   lambda g: g * xv / denom,
                   lambda g: -g * yv / denom)


def sum_(x, axis=None, keepdims=False):
    xv = value_of(x)
    out = xv.sum(axis=axis, keepdims=keepdims)

    def dx(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape).copy()

    return _unary(x, out, dx)


def mean(x, axis=None, keepdims=False):
    xv = value_of(x)
    n = xv.size if axis is None else xv.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(parts, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    var_parts = [(i, p) for i, p in enumerate(parts) if isinstance(p, Var)]
    sizes = [v.shape[axis] for v in vals]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        grads = []
        for i, _ in var_parts:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(np.array(g[tuple(sl)], dtype=np.float64))
        return tuple(grads)

    return tape.record(out, tuple(p for _, p in var_parts), vjp)


def stack(parts, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.stack(vals, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    var_parts = [(i, p) for i, p in enumerate(parts) if isinstance(p, Var)]

    def vjp(g):
        return tuple(np.array(np.take(g, i, axis=axis), dtype=np.float64)
                     for i, _ in var_parts)

    return tape.record(out, tuple(p for _, p in var_parts), vjp)


def reshape(x, shape):
    xv = value_of(x)
    return _unary(x, xv.reshape(shape), lambda g: np.asarray(g).reshape(xv.shape))


def swapaxes(x, a, b):
    xv = value_of(x)
    return _unary(x, np.swapaxes(xv, a, b), lambda g: np.swapaxes(g, a, b))


def _is_basic_index(key):
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice, type(None), type(Ellipsis)))
               for k in items)


def take(x, key):
    """numpy indexing; duplicate fancy indices accumulate on backward."""
    xv = value_of(x)
    out = xv[key]
    basic = _is_basic_index(key)

    def dx(g):
        gx = np.zeros_like(xv)
        if basic:
            gx[key] += g
        else:
            np.add.at(gx, key, g)
        return gx

    return _unary(x, np.asarray(out, dtype=np.float64), dx)


def detach(x):
    """Value of x as a constant (no gradient flows)."""
    return np.array(value_of(x), copy=True)


# ---------------------------------------------------------------------------
# composites (no dedicated nodes, built from primitives)

def square(x):
    return mul(x, x)


def dot(a, b):
    return sum_(mul(a, b))


def norm(x, axis=-1, keepdims=False, eps=0.0):
    """L2 norm along an axis; eps > 0 smooths the origin."""
    s = sum_(square(x), axis=axis, keepdims=keepdims)
    if eps:
        s = add(s, eps)
    return sqrt(s)


def logsumexp(x, axis=-1, keepdims=False):
    shift = np.max(value_of(x), axis=axis, keepdims=True)
    s = log(sum_(exp(sub(x, shift)), axis=axis, keepdims=True))
    out = add(s, shift)
    if not keepdims:
        out = reshape(out, np.sum(exp(value_of(x)), axis=axis).shape)
    return out


def softmax(x, axis=-1):
    return exp(sub(x, logsumexp(x, axis=axis, keepdims=True)))


# ---------------------------------------------------------------------------
# reverse pass

class Gradients:
    """Gradient lookup for the leaves of one backward pass."""

    def __init__(self, grads, tape):
        self._grads = grads
        self._tape = tape

    def wrt(self, var):
        if var.tape is not self._tape:
            raise ValueError("Var does not belong to the differentiated tape")
        g = self._grads[var._idx]
        if g is None:
            return np.zeros_like(var.value)
        return g


def backward(output):
    """Accumulate d(output)/d(leaf) for every leaf on output's tape.

    output must be scalar. Deterministic: fixed reverse traversal order.
    """
    if output.value.ndim != 0 and output.value.size != 1:
        raise ValueError("backward requires a scalar output")
    tape = output.tape
    grads = [None] * len(tape)
    grads[output._idx] = np.ones_like(output.value)
    for idx in range(output._idx, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        vjp = tape._vjps[idx]
        if vjp is None:
            continue
        for pid, pg in zip(tape._parents[idx], vjp(g)):
            if grads[pid] is None:
                grads[pid] = np.array(pg, dtype=np.float64, copy=True)
            else:
                grads[pid] += pg
    return Gradients(grads, tape)


def grad_check(f, xs, eps=1e-5):
    """Max relative error between reverse-mode and central finite differences.

    f takes a list of Vars (one per array in xs) and returns a scalar Var.
    """
    xs = [np.asarray(x, dtype=np.float64) for x in xs]

    def run(arrays):
        tape = Tape()
        leaves = [tape.leaf(a) for a in arrays]
        out = f(leaves)
        return out, leaves

    out, leaves = run(xs)
    grads = backward(out)
    ad = [grads.wrt(leaf) for leaf in leaves]

    worst = 0.0
    for i, x in enumerate(xs):
        flat = x.reshape(-1)
        for j in range(flat.size):
            bump = [a.copy() for a in xs]
            bump[i].reshape(-1)[j] = flat[j] + eps
            hi = float(value_of(run(bump)[0]))
            bump[i].reshape(-1)[j] = flat[j] - eps
            lo = float(value_of(run(bump)[0]))
            fd = (hi - lo) / (2.0 * eps)
            g = float(ad[i].reshape(-1)[j])
            err = abs(g - fd) / max(1.0, abs(g), abs(fd))
            if err > worst:
                worst = err
    return worst

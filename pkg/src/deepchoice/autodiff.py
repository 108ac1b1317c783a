"""Small reverse-mode automatic differentiation engine over numpy arrays.

A :class:`Tape` records every operation applied to its nodes in execution
order.  Leaves are either parameters, inputs or constants; gradients can be
requested for any leaf, which is what lets the inference code differentiate
utilities with respect to alternative attributes.

Example
-------
>>> tape = Tape()
>>> x = tape.leaf(np.array([-1.0, 2.0]), kind="input")
>>> loss = tape.reduce_sum(tape.relu(x))
>>> tape.backward(loss, [x])[x]
array([0., 1.])
"""

from __future__ import annotations

import numpy as np

BN_EPS = 1e-5

OPERATORS = (
    "matmul",
    "add",
    "scale",
    "concat",
    "relu",
    "tanh",
    "power",
    "softmax",
    "log_softmax",
    "batchnorm_nonaffine",
    "embed_select",
    "reduce_sum",
    "nll_loss",
    "reshape",
    "transpose",
)


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operator's shape rule."""

    def __init__(self, op, detail, shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: {detail} (operand shapes {list(self.shapes)})")


class NonFiniteError(FloatingPointError):
    pass


def check_finite(value, what="array"):
    """Raise :class:`NonFiniteError` if ``value`` holds NaN or Inf."""
    value = np.asarray(value)
    if not np.all(np.isfinite(value)):
        bad = int(np.size(value) - np.count_nonzero(np.isfinite(value)))
        raise NonFiniteError(f"{what} contains {bad} non-finite value(s)")
    return value


def batchnorm_stats_update(running, batch, momentum):
    """Blend running (mean, var) toward batch (mean, var).

    ``running <- (1 - momentum) * running + momentum * batch`` per feature.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
    r_mean, r_var = running
    b_mean, b_var = batch
    mean = (1.0 - momentum) * np.asarray(r_mean, dtype=np.float64) + momentum * np.asarray(b_mean)
    var = (1.0 - momentum) * np.asarray(r_var, dtype=np.float64) + momentum * np.asarray(b_var)
    return mean, var


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    """One value on a tape: a leaf or the output of an operator."""

    __slots__ = ("tape", "id", "op", "inputs", "value", "kind", "backward_fn", "extra")

    def __init__(self, tape, id, op, inputs, value, kind=None, backward_fn=None, extra=None):
        self.tape = tape
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.kind = kind
        self.backward_fn = backward_fn
        self.extra = extra

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op}, shape={self.value.shape})"


# Each operator returns (value, backward, extra); backward maps the output
# gradient to a tuple of input gradients.


def _op_matmul(vals, attrs):
    a, b = vals
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul", "operands must be at least 1-D", [a.shape, b.shape])
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != inner_b:
        raise ShapeError(
            "matmul", f"inner extents differ ({a.shape[-1]} vs {inner_b})", [a.shape, b.shape]
        )
    if b.ndim == 1:
        out = a @ b

        def back(g):
            ga = g[..., None] * b
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1)
            return ga, gb

        return out, back, None
    try:
        out = np.matmul(a, b)
    except ValueError as exc:
        raise ShapeError("matmul", str(exc), [a.shape, b.shape]) from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g) if a.ndim > 1 else np.multiply.outer(a, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, back, None


def _op_add(vals, attrs):
    a, b = vals
    try:
        out = a + b
    except ValueError:
        raise ShapeError("add", "operands do not broadcast", [a.shape, b.shape]) from None

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return out, back, None


def _op_scale(vals, attrs):
    if len(vals) == 1:
        (a,) = vals
        c = float(attrs["factor"])
        return a * c, lambda g: (g * c,), None
    a, s = vals
    if s.size != 1:
        raise ShapeError("scale", "scale operand must hold a single value", [a.shape, s.shape])
    c = s.reshape(())

    def back(g):
        return g * c, np.sum(g * a).reshape(s.shape)

    return a * c, back, None


def _op_concat(vals, attrs):
    axis = attrs.get("axis", -1)
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError("concat", f"extents off axis {axis} differ", [v.shape for v in vals]) from None
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return out, back, None


def _op_relu(vals, attrs):
    (a,) = vals
    mask = a > 0
    return np.where(mask, a, 0.0), lambda g: (g * mask,), None


def _op_tanh(vals, attrs):
    (a,) = vals
    y = np.tanh(a)
    return y, lambda g: (g * (1.0 - y * y),), None


def _op_power(vals, attrs):
    (a,) = vals
    p = attrs["exponent"]
    return a**p, lambda g: (g * p * a ** (p - 1),), None


def _softmax(a):
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _op_softmax(vals, attrs):
    (a,) = vals
    y = _softmax(a)

    def back(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return y, back, None


def _op_log_softmax(vals, attrs):
    (a,) = vals
    z = a - a.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def back(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return y, back, None


def _op_batchnorm(vals, attrs):
    (x,) = vals
    axes = tuple(attrs.get("axes", (0,)))
    eps = attrs.get("eps", BN_EPS)
    if attrs.get("training", True):
        if x.shape[0] < 2:
            raise ShapeError(
                "batchnorm_nonaffine", "training mode needs a batch of at least 2", [x.shape]
            )
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = np.mean(centered * centered, axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv

        def back(g):
            gm = g.mean(axis=axes, keepdims=True)
            gxh = np.mean(g * xhat, axis=axes, keepdims=True)
            return (inv * (g - gm - xhat * gxh),)

        stats = (np.squeeze(mean, axis=axes), np.squeeze(var, axis=axes))
        return xhat, back, stats
    r_mean, r_var = attrs["running"]
    shape = [1 if i in [a % x.ndim for a in axes] else n for i, n in enumerate(x.shape)]
    r_mean = np.reshape(r_mean, shape)
    inv = 1.0 / np.sqrt(np.reshape(r_var, shape) + eps)
    return (x - r_mean) * inv, lambda g: (g * inv,), None


def _op_embed_select(vals, attrs):
    (a,) = vals
    index = attrs["index"]
    axis = attrs.get("axis", 0)
    try:
        out = np.take(a, index, axis=axis)
    except IndexError:
        raise ShapeError("embed_select", f"index {index!r} out of range on axis {axis}", [a.shape]) from None

    def back(g):
        ga = np.zeros_like(a)
        sl = [slice(None)] * a.ndim
        if np.ndim(index) == 0:
            sl[axis] = index
            ga[tuple(sl)] += g
        else:
            moved = np.moveaxis(ga, axis, 0)
            np.add.at(moved, np.asarray(index), np.moveaxis(g, axis, 0))
        return (ga,)

    return out, back, None


def _op_reduce_sum(vals, attrs):
    (a,) = vals
    axis = attrs.get("axis")
    out = np.sum(a, axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return out, back, None


def _op_nll_loss(vals, attrs):
    (logp,) = vals
    y = np.asarray(attrs["target"])
    if logp.ndim != 2 or y.shape != (logp.shape[0],):
        raise ShapeError("nll_loss", "expects (N, J) log-probabilities and N targets", [logp.shape, y.shape])
    rows = np.arange(logp.shape[0])
    out = -np.sum(logp[rows, y])

    def back(g):
        ga = np.zeros_like(logp)
        ga[rows, y] = -g
        return (ga,)

    return np.asarray(out), back, None


def _op_reshape(vals, attrs):
    (a,) = vals
    shape = attrs["shape"]
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape to {shape}", [a.shape]) from None
    return out, lambda g: (g.reshape(a.shape),), None


def _op_transpose(vals, attrs):
    (a,) = vals
    axes = attrs["axes"]
    inverse = np.argsort(axes)
    return np.transpose(a, axes), lambda g: (np.transpose(g, inverse),), None


_IMPL = {
    "matmul": _op_matmul,
    "add": _op_add,
    "scale": _op_scale,
    "concat": _op_concat,
    "relu": _op_relu,
    "tanh": _op_tanh,
    "power": _op_power,
    "softmax": _op_softmax,
    "log_softmax": _op_log_softmax,
    "batchnorm_nonaffine": _op_batchnorm,
    "embed_select": _op_embed_select,
    "reduce_sum": _op_reduce_sum,
    "nll_loss": _op_nll_loss,
    "reshape": _op_reshape,
    "transpose": _op_transpose,
}


class Tape:
    """Append-only record of a computation.

    Nodes are stored in execution order, so every node's inputs precede it
    and the reverse pass is a single sweep.
    """

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, kind="param"):
        if kind not in ("param", "input", "const"):
            raise ValueError(f"unknown leaf kind {kind!r}")
        value = np.asarray(value, dtype=np.float64)
        node = Node(self, len(self.nodes), "leaf", (), value, kind=kind)
        self.nodes.append(node)
        return node

    def forward(self, op, inputs, **attrs):
        """Apply ``op`` to ``inputs`` (nodes on this tape) and record it."""
        try:
            impl = _IMPL[op]
        except KeyError:
            raise ValueError(f"unknown operator {op!r}") from None
        for node in inputs:
            if node.tape is not self:
                raise ValueError(f"{op}: operand {node!r} belongs to another tape")
        value, back, extra = impl([n.value for n in inputs], attrs)
        node = Node(self, len(self.nodes), op, tuple(inputs), np.asarray(value), backward_fn=back, extra=extra)
        self.nodes.append(node)
        return node

    # Thin wrappers so model code reads like ordinary array code.
    def matmul(self, a, b):
        return self.forward("matmul", (a, b))

    def add(self, a, b):
        return self.forward("add", (a, b))

    def scale(self, a, s):
        if isinstance(s, Node):
            return self.forward("scale", (a, s))
        return self.forward("scale", (a,), factor=s)

    def concat(self, nodes, axis=-1):
        return self.forward("concat", tuple(nodes), axis=axis)

    def relu(self, a):
        return self.forward("relu", (a,))

    def tanh(self, a):
        return self.forward("tanh", (a,))

    def power(self, a, exponent):
        return self.forward("power", (a,), exponent=exponent)

    def softmax(self, a):
        return self.forward("softmax", (a,))

    def log_softmax(self, a):
        return self.forward("log_softmax", (a,))

    def batchnorm(self, a, axes=(0,), training=True, running=None, eps=BN_EPS):
        if not training and running is None:
            raise ValueError("batchnorm in eval mode needs running statistics")
        return self.forward(
            "batchnorm_nonaffine", (a,), axes=axes, training=training, running=running, eps=eps
        )

    def embed_select(self, a, index, axis=0):
        return self.forward("embed_select", (a,), index=index, axis=axis)

    def reduce_sum(self, a, axis=None):
        return self.forward("reduce_sum", (a,), axis=axis)

    def nll_loss(self, logp, target):
        return self.forward("nll_loss", (logp,), target=target)

    def reshape(self, a, shape):
        return self.forward("reshape", (a,), shape=tuple(shape))

    def transpose(self, a, axes):
        return self.forward("transpose", (a,), axes=tuple(axes))

    def backward(self, loss, wrt):
        """Reverse-mode gradients of scalar ``loss`` with respect to ``wrt``.

        Returns a dict keyed by the requested nodes.  Leaves that do not
        influence ``loss`` get a zero gradient.  Nothing is accumulated on the
        nodes themselves, so repeated calls (for example once per alternative
        when differentiating utilities) are independent.
        """
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        wrt = list(wrt)
        targets = {n.id for n in wrt}
        nodes = self.nodes[: loss.id + 1]
        needed = bytearray(len(nodes))
        for node in nodes:
            if node.id in targets or any(needed[i.id] for i in node.inputs):
                needed[node.id] = 1
        grads = {loss.id: np.ones_like(loss.value)}
        for node in reversed(nodes):
            if not node.inputs or not needed[node.id]:
                continue
            g = grads.get(node.id) if node.id in targets else grads.pop(node.id, None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, in_grads):
                if not needed[inp.id]:
                    continue
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + gi
                else:
                    grads[inp.id] = gi
        return {n: grads.get(n.id, np.zeros_like(n.value)).reshape(n.value.shape) for n in wrt}

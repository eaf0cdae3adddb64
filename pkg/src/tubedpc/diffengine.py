"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every operation computes its forward value immediately and,
when an input lives on a tape, records a node so the whole computation can
be differentiated backwards or replayed. The primitive set is deliberately
small: exactly what a feed-forward policy, an encoder-only transformer and
the rollout losses need.

Elementwise ops broadcast numpy-style (gradients are summed back over the
broadcast axes), matmul handles stacked 3-D operands, and reductions /
row-wise ops act along a chosen or the last axis. Everything is float64.
"""

from __future__ import annotations

import numpy as np

_LN_EPS = 1e-10  # layernorm variance floor; small so normalized rows keep unit variance


class Node:
    """One recorded operation: kind, input node ids, saved forward value."""

    __slots__ = ("op", "inputs", "value", "attrs")

    def __init__(self, op, inputs, value, attrs=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.attrs = attrs


class Tensor:
    """Dense float64 array, optionally attached to a Tape node."""

    __slots__ = ("value", "tape", "node_id")

    def __init__(self, value, tape=None, node_id=None):
        self.value = value
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = "leaf" if self.tape is not None and self.tape.nodes[self.node_id].op == "leaf" else "tensor"
        return f"Tensor({tag}, shape={self.value.shape})"

    # -- operator sugar ------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    # -- unary / shape methods -----------------------------------------
    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def square(self):
        return square(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis=axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis=axis)

    def scale(self, c):
        return scale(self, c)

    def slice(self, start, stop):
        return slice_last(self, start, stop)

    def transpose(self):
        return transpose_last(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def softmax_rows(self):
        return softmax_rows(self)

    def layernorm_rows(self):
        return layernorm_rows(self)


class Tape:
    """Topologically ordered record of one forward computation.

    Nodes are appended in execution order, so the list order is already a
    valid topological order for the backward sweep. A tape is confined to
    one worker; parameters entered as leaves are never mutated while the
    tape is alive.
    """

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value):
        """Enter a differentiable leaf (parameter or input)."""
        arr = _as_array(value)
        self.nodes.append(Node("leaf", (), arr))
        return Tensor(arr, self, len(self.nodes) - 1)

    def constant(self, value):
        """Enter a non-differentiable value (prices, targets, masks)."""
        arr = _as_array(value)
        self.nodes.append(Node("const", (), arr))
        return Tensor(arr, self, len(self.nodes) - 1)

    def backward(self, output):
        """Gradient of a scalar output w.r.t. every leaf.

        Returns {leaf node id: ndarray}. Fan-out accumulates by summation.
        """
        if output.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.value.shape}")
        seed = np.ones_like(output.value)
        return self.backward_seeded(output, seed)

    def backward_seeded(self, output, seed):
        """Backward sweep from `output` with an arbitrary cotangent seed."""
        if output.tape is not self:
            raise ValueError("tensor is detached from this tape")
        seed = _as_array(seed)
        if seed.shape != output.value.shape:
            raise ValueError(f"seed shape {seed.shape} != output shape {output.value.shape}")
        grads = [None] * len(self.nodes)
        grads[output.node_id] = seed
        for nid in range(output.node_id, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.op in ("leaf", "const"):
                continue
            in_vals = [self.nodes[i].value for i in node.inputs]
            for iid, ig in zip(node.inputs, _VJPS[node.op](node.value, in_vals, node.attrs, g)):
                if ig is None:
                    continue
                if grads[iid] is None:
                    grads[iid] = ig
                else:
                    grads[iid] = grads[iid] + ig
        out = {}
        for nid, node in enumerate(self.nodes):
            if node.op == "leaf":
                g = grads[nid]
                out[nid] = np.zeros_like(node.value) if g is None else g
        return out

    def replay(self):
        """Recompute every node's forward value from the recorded leaves.

        Deterministic kernels make this bit-for-bit identical to the
        original pass; returns the list of recomputed values.
        """
        values = []
        for node in self.nodes:
            if node.op in ("leaf", "const"):
                values.append(node.value)
            else:
                values.append(_forward(node.op, [values[i] for i in node.inputs], node.attrs))
        return values


def _as_array(x):
    arr = np.asarray(x, dtype=np.float64)
    return arr


def _check_finite(op, value):
    if not np.all(np.isfinite(value)):
        raise ValueError(f"non-finite output from op '{op}'")
    return value


def _find_tape(args):
    for a in args:
        if isinstance(a, Tensor) and a.tape is not None:
            return a.tape
    return None


def _lift(x, tape, differentiable=False):
    """Coerce an operand to a Tensor, recording constants on `tape` if set."""
    if isinstance(x, Tensor):
        if tape is not None and x.tape is None:
            return tape.constant(x.value)
        if tape is not None and x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    if tape is None:
        return Tensor(_as_array(x))
    return tape.constant(x)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# forward kernels (pure; shared by the op constructors and Tape.replay)
# ---------------------------------------------------------------------------

def _softmax_last(x):
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _layernorm_last(x):
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.var(x, axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + _LN_EPS)


def _forward(op, vals, attrs):
    if op == "add":
        return vals[0] + vals[1]
    if op == "sub":
        return vals[0] - vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    if op == "matmul":
        return vals[0] @ vals[1]
    if op == "relu":
        return np.maximum(vals[0], 0.0)
    if op == "exp":
        return np.exp(vals[0])
    if op == "log":
        return np.log(vals[0])
    if op == "square":
        return vals[0] * vals[0]
    if op == "sum":
        return np.sum(vals[0], axis=attrs["axis"])
    if op == "mean":
        return np.mean(vals[0], axis=attrs["axis"])
    if op == "concat":
        return np.concatenate(vals, axis=attrs["axis"])
    if op == "slice":
        return vals[0][..., attrs["start"]:attrs["stop"]]
    if op == "transpose":
        return np.swapaxes(vals[0], -1, -2)
    if op == "softmax-rows":
        return _softmax_last(vals[0])
    if op == "layernorm-rows":
        return _layernorm_last(vals[0])
    if op == "scale":
        return vals[0] * attrs["c"]
    if op == "reshape":
        return vals[0].reshape(attrs["shape"])
    raise ValueError(f"unknown op kind '{op}'")


# ---------------------------------------------------------------------------
# vector-Jacobian products, one per op kind
# ---------------------------------------------------------------------------

def _vjp_add(out, vals, attrs, g):
    return [_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)]


def _vjp_sub(out, vals, attrs, g):
    return [_unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape)]


def _vjp_mul(out, vals, attrs, g):
    return [_unbroadcast(g * vals[1], vals[0].shape), _unbroadcast(g * vals[0], vals[1].shape)]


def _vjp_matmul(out, vals, attrs, g):
    a, b = vals
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


def _vjp_relu(out, vals, attrs, g):
    return [g * (vals[0] > 0.0)]


def _vjp_exp(out, vals, attrs, g):
    return [g * out]


def _vjp_log(out, vals, attrs, g):
    return [g / vals[0]]


def _vjp_square(out, vals, attrs, g):
    return [g * 2.0 * vals[0]]


def _expand_reduced(g, x_shape, axis):
    if axis is None:
        return np.broadcast_to(np.asarray(g), x_shape).copy()
    g = np.expand_dims(g, axis=axis)
    return np.broadcast_to(g, x_shape).copy()


def _vjp_sum(out, vals, attrs, g):
    return [_expand_reduced(g, vals[0].shape, attrs["axis"])]


def _vjp_mean(out, vals, attrs, g):
    x = vals[0]
    axis = attrs["axis"]
    n = x.size if axis is None else x.shape[axis]
    return [_expand_reduced(g, x.shape, axis) / n]


def _vjp_concat(out, vals, attrs, g):
    axis = attrs["axis"]
    grads = []
    start = 0
    for v in vals:
        n = v.shape[axis]
        idx = [np.s_[:]] * g.ndim
        idx[axis] = np.s_[start:start + n]
        grads.append(g[tuple(idx)])
        start += n
    return grads


def _vjp_slice(out, vals, attrs, g):
    full = np.zeros_like(vals[0])
    full[..., attrs["start"]:attrs["stop"]] = g
    return [full]


def _vjp_transpose(out, vals, attrs, g):
    return [np.swapaxes(g, -1, -2)]


def _vjp_softmax(out, vals, attrs, g):
    dot = np.sum(g * out, axis=-1, keepdims=True)
    return [out * (g - dot)]


def _vjp_layernorm(out, vals, attrs, g):
    x = vals[0]
    var = np.var(x, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    gm = np.mean(g, axis=-1, keepdims=True)
    gym = np.mean(g * out, axis=-1, keepdims=True)
    return [inv_std * (g - gm - out * gym)]


def _vjp_scale(out, vals, attrs, g):
    return [g * attrs["c"]]


def _vjp_reshape(out, vals, attrs, g):
    return [g.reshape(vals[0].shape)]


_VJPS = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "matmul": _vjp_matmul,
    "relu": _vjp_relu,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "square": _vjp_square,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "concat": _vjp_concat,
    "slice": _vjp_slice,
    "transpose": _vjp_transpose,
    "softmax-rows": _vjp_softmax,
    "layernorm-rows": _vjp_layernorm,
    "scale": _vjp_scale,
    "reshape": _vjp_reshape,
}


# ---------------------------------------------------------------------------
# op constructors
# ---------------------------------------------------------------------------

def _make(op, operands, attrs=None):
    tape = _find_tape(operands)
    tensors = [_lift(x, tape) for x in operands]
    vals = [t.value for t in tensors]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = _check_finite(op, _forward(op, vals, attrs))
    if tape is None:
        return Tensor(out)
    tape.nodes.append(Node(op, tuple(t.node_id for t in tensors), out, attrs))
    return Tensor(out, tape, len(tape.nodes) - 1)


def add(a, b):
    return _make("add", [a, b])


def sub(a, b):
    return _make("sub", [a, b])


def mul(a, b):
    return _make("mul", [a, b])


def matmul(a, b):
    av = a.value if isinstance(a, Tensor) else _as_array(a)
    bv = b.value if isinstance(b, Tensor) else _as_array(b)
    if av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    return _make("matmul", [a, b])


def relu(x):
    return _make("relu", [x])


def exp(x):
    return _make("exp", [x])


def log(x):
    return _make("log", [x])


def square(x):
    return _make("square", [x])


def reduce_sum(x, axis=None):
    return _make("sum", [x], {"axis": axis})


def reduce_mean(x, axis=None):
    return _make("mean", [x], {"axis": axis})


def concat(xs, axis=-1):
    return _make("concat", list(xs), {"axis": axis})


def slice_last(x, start, stop):
    return _make("slice", [x], {"start": start, "stop": stop})


def transpose_last(x):
    return _make("transpose", [x])


def softmax_rows(x):
    return _make("softmax-rows", [x])


def layernorm_rows(x):
    return _make("layernorm-rows", [x])


def scale(x, c):
    return _make("scale", [x], {"c": float(c)})


def reshape(x, shape):
    return _make("reshape", [x], {"shape": tuple(shape)})


#: op-kind dispatch for the generic entry point
_APPLY = {
    "add": add,
    "sub": sub,
    "mul-elementwise": mul,
    "matmul": matmul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "square": square,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "slice": slice_last,
    "transpose": transpose_last,
    "softmax-rows": softmax_rows,
    "layernorm-rows": layernorm_rows,
    "scale": scale,
    "reshape": reshape,
}


def apply(op_kind, *inputs, **attrs):
    """Generic dispatch: apply('matmul', a, b) == matmul(a, b)."""
    if op_kind not in _APPLY:
        raise ValueError(f"unknown op kind '{op_kind}'")
    return _APPLY[op_kind](*inputs, **attrs)


def value_of(x):
    """Plain ndarray of a Tensor or array-like."""
    return x.value if isinstance(x, Tensor) else _as_array(x)


def jacobian(f, point):
    """Jacobian matrix (n_out, n_in) of a vector map at `point`.

    Row i is the backward pass seeded with the unit cotangent e_i.
    """
    point = _as_array(point)
    if point.ndim != 1:
        raise ValueError("jacobian expects a 1-D evaluation point")
    tape = Tape()
    x = tape.leaf(point)
    y = f(x)
    yv = y.value.reshape(-1)
    jac = np.empty((yv.size, point.size))
    for i in range(yv.size):
        seed = np.zeros_like(y.value)
        seed.reshape(-1)[i] = 1.0
        jac[i, :] = tape.backward_seeded(y, seed)[x.node_id].reshape(-1)
    if not np.all(np.isfinite(jac)):
        raise ValueError("non-finite entries in jacobian")
    return jac

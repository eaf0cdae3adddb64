import numpy as np
import pytest

from tubedpc import diffengine as de

from util import central_diff_grad, rel_err


def test_matmul_identity():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(3, 3))
    out = de.matmul(de.Tensor(np.eye(3)), de.Tensor(m))
    assert np.array_equal(out.value, m)


def test_relu_definition():
    out = de.relu(de.Tensor(np.array([-1.0, 0.0, 2.0])))
    assert np.array_equal(out.value, [0.0, 0.0, 2.0])


def test_softmax_symmetry():
    out = de.softmax_rows(de.Tensor(np.array([[0.0, 0.0]])))
    assert np.allclose(out.value, [[0.5, 0.5]])


def test_backward_square():
    tape = de.Tape()
    x = tape.leaf(3.0)
    y = de.square(x)
    grads = tape.backward(y)
    assert grads[x.node_id] == pytest.approx(6.0)


def test_backward_sum_relu():
    tape = de.Tape()
    x = tape.leaf(np.array([-1.0, 2.0]))
    y = de.reduce_sum(de.relu(x))
    grads = tape.backward(y)
    assert np.array_equal(grads[x.node_id], [0.0, 1.0])


def test_fanout_sums_exactly():
    tape = de.Tape()
    x = tape.leaf(np.array([1.5]))
    y = de.reduce_sum(de.add(x, x))
    grads = tape.backward(y)
    assert grads[x.node_id][0] == 2.0


def test_backward_requires_scalar():
    tape = de.Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        tape.backward(de.relu(x))


def test_detached_tensor_rejected():
    tape = de.Tape()
    other = de.Tape()
    x = tape.leaf(np.array(1.0))
    with pytest.raises(ValueError):
        other.backward(de.square(x))


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        de.matmul(de.Tensor(np.zeros((2, 3))), de.Tensor(np.zeros((2, 3))))


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        de.log(de.Tensor(np.array([0.0])))


# every primitive against the central-difference oracle on inputs in [-2, 2]
_UNARY_CASES = [
    ("relu", lambda x: de.relu(x), (4, 5), None),
    ("exp", lambda x: de.exp(x), (3, 4), None),
    ("log", lambda x: de.log(x), (3, 4), "positive"),
    ("square", lambda x: de.square(x), (4,), None),
    ("sum-all", lambda x: de.reduce_sum(x), (3, 4), None),
    ("sum-axis", lambda x: de.reduce_sum(x, axis=0), (3, 4), None),
    ("mean-all", lambda x: de.reduce_mean(x), (3, 4), None),
    ("mean-axis", lambda x: de.reduce_mean(x, axis=-2), (2, 3, 4), None),
    ("slice", lambda x: x.slice(1, 3), (2, 5), None),
    ("transpose", lambda x: x.transpose(), (3, 4), None),
    ("softmax", lambda x: de.softmax_rows(x), (3, 4), None),
    ("layernorm", lambda x: de.layernorm_rows(x), (3, 6), None),
    ("scale", lambda x: de.scale(x, -2.5), (3, 4), None),
    ("reshape", lambda x: de.reshape(x, (4, 3)), (3, 4), None),
]


@pytest.mark.parametrize("name,op,shape,domain", _UNARY_CASES, ids=[c[0] for c in _UNARY_CASES])
def test_unary_primitive_gradients(name, op, shape, domain):
    rng = np.random.default_rng(hash(name) % 2**32)
    x0 = rng.uniform(0.5, 2.0, size=shape) if domain == "positive" else rng.uniform(-2.0, 2.0, size=shape)
    if name == "relu":
        x0 += 0.05 * np.sign(x0)  # keep clear of the kink
    w = rng.normal(size=shape if name not in ("sum-axis", "transpose", "slice", "mean-axis", "reshape") else ())

    def run(x):
        tape = de.Tape()
        xt = tape.leaf(x)
        y = op(xt)
        s = de.reduce_sum(de.mul(y, de.Tensor(np.full(y.value.shape, 1.0) if np.ndim(w) == 0 else w)))
        return tape, xt, s

    tape, xt, s = run(x0)
    g = tape.backward(s)[xt.node_id]

    def scalar(x):
        _, _, out = run(x)
        return float(out.value)

    g_fd = central_diff_grad(scalar, x0)
    assert rel_err(g, g_fd) < 1e-5


_BINARY_CASES = [
    ("add", de.add, (3, 4), (3, 4)),
    ("add-broadcast", de.add, (3, 4), (4,)),
    ("sub", de.sub, (3, 4), (3, 4)),
    ("mul", de.mul, (3, 4), (3, 4)),
    ("mul-broadcast", de.mul, (2, 3, 1), (3, 4)),
    ("matmul", de.matmul, (3, 4), (4, 2)),
    ("matmul-stacked", de.matmul, (2, 3, 4), (4, 2)),
    ("matmul-both-stacked", de.matmul, (2, 3, 4), (2, 4, 3)),
]


@pytest.mark.parametrize("name,op,sa,sb", _BINARY_CASES, ids=[c[0] for c in _BINARY_CASES])
def test_binary_primitive_gradients(name, op, sa, sb):
    rng = np.random.default_rng(hash(name) % 2**32)
    a0 = rng.uniform(-2.0, 2.0, size=sa)
    b0 = rng.uniform(-2.0, 2.0, size=sb)

    def run(a, b):
        tape = de.Tape()
        at = tape.leaf(a)
        bt = tape.leaf(b)
        s = de.reduce_sum(de.square(op(at, bt)))
        return tape, at, bt, s

    tape, at, bt, s = run(a0, b0)
    grads = tape.backward(s)

    ga_fd = central_diff_grad(lambda a: float(run(a, b0)[3].value), a0)
    gb_fd = central_diff_grad(lambda b: float(run(a0, b)[3].value), b0)
    assert rel_err(grads[at.node_id], ga_fd) < 1e-5
    assert rel_err(grads[bt.node_id], gb_fd) < 1e-5


def test_concat_gradient():
    rng = np.random.default_rng(7)
    a0 = rng.uniform(-2, 2, size=(2, 3))
    b0 = rng.uniform(-2, 2, size=(2, 2))
    w = rng.normal(size=(2, 5))

    def run(a, b):
        tape = de.Tape()
        at = tape.leaf(a)
        bt = tape.leaf(b)
        s = de.reduce_sum(de.mul(de.concat([at, bt], axis=-1), de.Tensor(w)))
        return tape, at, bt, s

    tape, at, bt, s = run(a0, b0)
    grads = tape.backward(s)
    ga_fd = central_diff_grad(lambda a: float(run(a, b0)[3].value), a0)
    gb_fd = central_diff_grad(lambda b: float(run(a0, b)[3].value), b0)
    assert rel_err(grads[at.node_id], ga_fd) < 1e-5
    assert rel_err(grads[bt.node_id], gb_fd) < 1e-5


def test_two_layer_net_gradient_vs_fd():
    rng = np.random.default_rng(42)
    w1 = rng.normal(size=(4, 6)) / 2.0
    b1 = rng.normal(size=(6,)) / 2.0
    w2 = rng.normal(size=(6, 2)) / 2.0
    x = rng.uniform(-2, 2, size=(3, 4))

    def net(w1v, b1v, w2v):
        tape = de.Tape()
        w1t, b1t, w2t = tape.leaf(w1v), tape.leaf(b1v), tape.leaf(w2v)
        h = de.relu(de.add(de.matmul(de.Tensor(x), w1t), b1t))
        out = de.reduce_sum(de.square(de.matmul(h, w2t)))
        return tape, (w1t, b1t, w2t), out

    tape, leaves, out = net(w1, b1, w2)
    grads = tape.backward(out)
    for leaf, arr, name in zip(leaves, (w1, b1, w2), ("w1", "b1", "w2")):
        def scalar(v, name=name):
            vals = {"w1": w1, "b1": b1, "w2": w2}
            vals[name] = v
            return float(net(vals["w1"], vals["b1"], vals["w2"])[2].value)

        fd = central_diff_grad(scalar, arr)
        assert rel_err(grads[leaf.node_id], fd) < 1e-5, name


def test_jacobian_linear_map_exact():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    jac = de.jacobian(lambda x: de.matmul(de.Tensor(a), de.reshape(x, (2, 1))), np.array([0.3, -0.7]))
    assert np.allclose(jac, a, atol=1e-12)


def test_jacobian_identity():
    jac = de.jacobian(lambda x: x, np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(jac, np.eye(3))


def test_jacobian_vs_fd_on_mlp():
    rng = np.random.default_rng(11)
    w1 = rng.normal(size=(3, 5)) * 0.7
    w2 = rng.normal(size=(5, 2)) * 0.7

    def f(x):
        h = de.relu(de.matmul(de.reshape(x, (1, 3)), de.Tensor(w1)))
        return de.reshape(de.matmul(h, de.Tensor(w2)), (2,))

    x0 = rng.uniform(-1, 1, size=3)
    jac = de.jacobian(f, x0)

    from util import central_diff_jacobian

    def f_np(x):
        h = np.maximum(x.reshape(1, 3) @ w1, 0.0)
        return (h @ w2).reshape(-1)

    assert rel_err(jac, central_diff_jacobian(f_np, x0)) < 1e-6


def test_tape_replay_bit_for_bit():
    rng = np.random.default_rng(3)
    tape = de.Tape()
    x = tape.leaf(rng.uniform(-2, 2, size=(3, 4)))
    w = tape.leaf(rng.normal(size=(4, 4)))
    h = de.layernorm_rows(de.matmul(de.relu(x), w))
    s = de.softmax_rows(h)
    de.reduce_mean(de.square(s))
    replayed = tape.replay()
    assert len(replayed) == len(tape.nodes)
    for val, node in zip(replayed, tape.nodes):
        assert np.array_equal(val, node.value), node.op


def test_apply_dispatch():
    out = de.apply("mul-elementwise", de.Tensor(np.array([2.0])), de.Tensor(np.array([3.0])))
    assert out.value[0] == 6.0
    with pytest.raises(ValueError):
        de.apply("conv2d", de.Tensor(np.zeros(1)))


def test_layernorm_rows_zero_mean_unit_var():
    rng = np.random.default_rng(9)
    x = de.Tensor(rng.uniform(-5, 5, size=(6, 8)))
    y = de.layernorm_rows(x).value
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-9)
    assert np.all(np.abs(y.var(axis=-1) - 1.0) < 1e-6)

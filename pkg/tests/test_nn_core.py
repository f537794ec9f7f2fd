import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqvc.nn import AdamState, ConfigError, GraphError, Parameter, ShapeError, Tensor, adam_step
from vqvc.nn import functional as F
from vqvc.nn.gradcheck import numerical_grad, rel_error


def check_op(op, inputs, rng, tol=1e-4):
    """Gradient of sum(op(*inputs) * R) in float32 storage vs float64 central differences."""
    out64 = op(*[Tensor(x.astype(np.float64)) for x in inputs]).data
    proj = rng.standard_normal(out64.shape)
    ts = [Parameter(x.astype(np.float32), f"x{i}") for i, x in enumerate(inputs)]
    F.total_sum(F.mul(op(*ts), proj.astype(np.float32))).backward()
    errs = []
    for i, x in enumerate(inputs):
        x64 = x.astype(np.float64).copy()

        def f(v, i=i):
            args = [Tensor(v if j == i else inputs[j].astype(np.float64)) for j in range(len(inputs))]
            return float(np.sum(op(*args).data * proj))

        errs.append(rel_error(ts[i].grad, numerical_grad(f, x64)))
    assert max(errs) < tol, errs
    return errs


def test_linear_form_gradient():
    w = Parameter(np.array([1.0, 2.0, 3.0]), "w")
    x = np.array([0.5, -1.0, 4.0], dtype=np.float32)
    F.total_sum(F.mul(w, x)).backward()
    np.testing.assert_array_equal(w.grad, x)


def test_backward_requires_forward():
    with pytest.raises(GraphError):
        Parameter(np.ones(3), "p").backward()


def test_grads_accumulate_over_uses():
    w = Parameter(np.array([2.0]), "w")
    F.total_sum(F.add(F.mul(w, w), w)).backward()
    np.testing.assert_allclose(w.grad, [5.0])


OPS = {
    "add_broadcast": (lambda a, b: F.add(a, b), lambda r: [r.standard_normal((3, 4, 5)), r.standard_normal((4, 1))]),
    "mul": (lambda a, b: F.mul(a, b), lambda r: [r.standard_normal((4, 6)), r.standard_normal((4, 6))]),
    "sub": (lambda a, b: F.sub(a, b), lambda r: [r.standard_normal((2, 5)), r.standard_normal((5,))]),
    "tanh": (F.tanh, lambda r: [r.standard_normal((3, 7)) * 2]),
    "sigmoid": (F.sigmoid, lambda r: [r.standard_normal((3, 7)) * 3]),
    "relu": (F.relu, lambda r: [np.sign(x := r.standard_normal((4, 9))) * (np.abs(x) + 0.1)]),
    "gated": (F.gated, lambda r: [r.standard_normal((2, 3, 8)), r.standard_normal((2, 3, 8))]),
    "dense": (lambda x, w, b: F.dense(x, w, b),
              lambda r: [r.standard_normal((2, 5, 7)), r.standard_normal((4, 5)), r.standard_normal(4)]),
    "dense_vec": (lambda x, w, b: F.dense(x, w, b),
                  lambda r: [r.standard_normal(5), r.standard_normal((3, 5)), r.standard_normal(3)]),
    "mean": (lambda x: F.mean(x), lambda r: [r.standard_normal((3, 4))]),
    "concat": (lambda a, b: F.concat([a, b], axis=-2), lambda r: [r.standard_normal((2, 3, 5)), r.standard_normal((2, 4, 5))]),
    "time_slice": (lambda a: F.time_slice(a, 2, 7), lambda r: [r.standard_normal((3, 9))]),
    "index": (lambda a: a[1:, ::2], lambda r: [r.standard_normal((3, 9))]),
    "upsample": (lambda a: F.upsample_repeat(a, 3, 10), lambda r: [r.standard_normal((2, 4, 4))]),
    "embedding": (lambda t: F.embedding(t, np.array([[0, 3, 3, 1], [2, 2, 0, 4]])), lambda r: [r.standard_normal((5, 6))]),
    "xent": (lambda z: F.softmax_xent(z, np.array([[1, 0, 5, 2], [3, 3, 7, 0]])), lambda r: [r.standard_normal((2, 8, 4)) * 2]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    op, make = OPS[name]
    for seed in range(20):
        r = np.random.default_rng(seed)
        check_op(op, make(r), r)


CONV_CASES = [
    dict(k=3, stride=1, dilation=1, padding="same"),
    dict(k=4, stride=2, dilation=1, padding="same"),
    dict(k=2, stride=1, dilation=4, padding="causal"),
    dict(k=3, stride=3, dilation=2, padding="same"),
    dict(k=2, stride=2, dilation=1, padding="valid"),
]


def conv_instance(case, r):
    t = int(r.integers(case["k"] * case["dilation"], 14))
    b = int(r.integers(1, 3))
    inputs = [r.standard_normal((b, 3, t)), r.standard_normal((2, 3, case["k"])), r.standard_normal(2)]
    return (lambda x, w, bb: F.conv1d(x, w, bb, case["stride"], case["dilation"], case["padding"])), inputs


@pytest.mark.parametrize("case", CONV_CASES, ids=lambda c: "-".join(map(str, c.values())))
def test_conv1d_gradients(case):
    for seed in range(20):
        r = np.random.default_rng(seed)
        op, inputs = conv_instance(case, r)
        check_op(op, inputs, r)


def conv_dependency_matrix(t, w, stride, dilation, padding):
    """A with vec(y) = A vec(x) + bias, built straight from the index formula."""
    c_out, c_in, k = w.shape
    t_out = F.conv_output_length(t, k, stride, dilation, padding)
    left, _ = F.conv_padding(t, k, stride, dilation, padding)
    a = np.zeros((c_out * t_out, c_in * t))
    for o in range(c_out):
        for tt in range(t_out):
            for i in range(c_in):
                for kk in range(k):
                    src = stride * tt + dilation * kk - left
                    if 0 <= src < t:
                        a[o * t_out + tt, i * t + src] += w[o, i, kk]
    return a, t_out


@pytest.mark.parametrize("case", CONV_CASES, ids=lambda c: "-".join(map(str, c.values())))
def test_conv1d_matches_dependency_matrix(case, rng):
    t = 11
    x = rng.standard_normal((3, t)).astype(np.float32)
    w = rng.standard_normal((2, 3, case["k"])).astype(np.float32)
    a, t_out = conv_dependency_matrix(t, w.astype(np.float64), case["stride"], case["dilation"], case["padding"])
    xt = Parameter(x, "x")
    y = F.conv1d(xt, Tensor(w), None, case["stride"], case["dilation"], case["padding"])
    np.testing.assert_allclose(y.data.reshape(-1), a @ x.reshape(-1), atol=1e-5)
    g = rng.standard_normal(y.shape)
    F.total_sum(F.mul(y, g.astype(np.float32))).backward()
    # input gradient is the transposed (fractionally strided) convolution
    np.testing.assert_allclose(xt.grad.reshape(-1), a.T @ g.reshape(-1), atol=1e-5)


def test_conv_identity_and_shapes(rng):
    x = rng.standard_normal((4, 10)).astype(np.float32)
    w = np.eye(4, dtype=np.float32)[:, :, None]
    np.testing.assert_array_equal(F.conv1d(Tensor(x), Tensor(w), padding="same").data, x)
    y = F.conv1d(Tensor(x), Tensor(rng.standard_normal((4, 4, 4))), stride=2, padding="same")
    assert y.shape == (4, 5)
    with pytest.raises(ConfigError):
        F.conv1d(Tensor(x), Tensor(w), stride=2, padding="causal")
    with pytest.raises(ShapeError):
        F.conv1d(Tensor(x), Tensor(np.ones((2, 3, 1))))


def test_conv_1x1_is_dense(rng):
    x = rng.standard_normal((2, 5, 9)).astype(np.float32)
    w = rng.standard_normal((3, 5)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    np.testing.assert_allclose(F.conv1d(Tensor(x), Tensor(w[:, :, None]), Tensor(b)).data,
                               F.dense(Tensor(x), Tensor(w), Tensor(b)).data, rtol=1e-6)


def test_causal_dilated_dependency():
    t, d = 1100, 512
    w = np.ones((1, 1, 2), np.float32)
    x = np.zeros((1, t), np.float32)
    base = F.conv1d(Tensor(x), Tensor(w), dilation=d, padding="causal").data
    for idx in (0, 100, 600, 1099):
        xp = x.copy()
        xp[0, idx] = 1.0
        changed = np.nonzero(F.conv1d(Tensor(xp), Tensor(w), dilation=d, padding="causal").data != base)[1]
        expect = [s for s in (idx, idx + d) if s < t]
        assert list(changed) == expect


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 64), st.integers(1, 3), st.integers(1, 8), st.integers(0, 10 ** 6))
def test_causal_conv_never_looks_ahead(t, k, d, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, t)).astype(np.float32)
    w = Tensor(r.standard_normal((2, 2, k)))
    base = F.conv1d(Tensor(x), w, dilation=d, padding="causal").data
    for s in range(t):
        xp = x.copy()
        xp[:, s] += 1.0
        diff = np.any(F.conv1d(Tensor(xp), w, dilation=d, padding="causal").data != base, axis=0)
        assert not diff[:s].any()


def test_dense_examples(rng):
    x = rng.standard_normal((4, 6)).astype(np.float32)
    np.testing.assert_array_equal(F.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    c = np.array([1.0, -2.0, 3.0], np.float32)
    y = F.dense(Tensor(x), Tensor(np.zeros((3, 4), np.float32)), Tensor(c)).data
    np.testing.assert_array_equal(y, np.broadcast_to(c[:, None], (3, 6)))
    w = rng.standard_normal((3, 4))
    b = rng.standard_normal(3)
    ref = np.zeros((3, 6))
    for o in range(3):
        for t in range(6):
            ref[o, t] = b[o] + sum(w[o, i] * float(x[i, t]) for i in range(4))
    np.testing.assert_allclose(F.dense(Tensor(x), Tensor(w.astype(np.float32)), Tensor(b.astype(np.float32))).data,
                               ref, rtol=1e-5, atol=1e-6)
    with pytest.raises(ShapeError):
        F.dense(Tensor(x), Tensor(np.ones((3, 5))))


def test_activation_examples(rng):
    np.testing.assert_array_equal(F.relu(Tensor(np.array([-1.0, 2.0]))).data, [0.0, 2.0])
    assert F.gated(Tensor(np.zeros(1)), Tensor(np.zeros(1))).data[0] == 0.0
    x = rng.standard_normal(1000) * 10
    s = F.sigmoid(Tensor(x)).data + F.sigmoid(Tensor(-x)).data
    np.testing.assert_allclose(s, 1.0, atol=1e-7)
    assert np.all(np.isfinite(F.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data))


def test_xent_examples(rng):
    loss, _ = F.softmax_xent_np(np.zeros((128, 10)), rng.integers(0, 128, 10))
    assert loss == pytest.approx(math.log(128))
    targets = rng.integers(0, 128, 10)
    z = np.zeros((128, 10))
    z[targets, np.arange(10)] = 30.0
    assert F.softmax_xent_np(z, targets)[0] < 1e-9
    with pytest.raises(ValueError):
        F.softmax_xent_np(z, np.full(10, 128))


def test_xent_grad_finite_differences(rng):
    z = rng.standard_normal((128, 6))
    t = rng.integers(0, 128, 6)
    _, g = F.softmax_xent_np(z, t)
    fd = numerical_grad(lambda v: F.softmax_xent_np(v, t)[0], z.copy(), h=1e-5)
    assert rel_error(g, fd) < 1e-6


def test_straight_through_gradient_is_identity(rng):
    h = Parameter(rng.standard_normal((3, 5)), "h")
    q = rng.standard_normal((3, 5)).astype(np.float32)
    out = F.straight_through(h, q)
    np.testing.assert_array_equal(out.data, q)
    F.total_sum(out).backward()
    np.testing.assert_array_equal(h.grad, np.ones((3, 5)))


def test_adam_first_step_closed_form():
    g = np.array([0.5, -2.0, 1e-3])
    p = Parameter(np.zeros(3), "p", dtype=np.float64)
    p.grad = g.copy()
    adam_step([p], AdamState(), 1e-3)
    np.testing.assert_allclose(p.data, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_zero_gradient_keeps_params(rng):
    init = rng.standard_normal(4).astype(np.float32)
    p = Parameter(init, "p")
    st_ = AdamState()
    for _ in range(5):
        p.grad = np.zeros(4, np.float32)
        adam_step([p], st_, 2.5e-4)
    np.testing.assert_array_equal(p.data, init)
    with pytest.raises(ConfigError):
        adam_step([p], st_, 0.0)


def test_adam_two_step_trace():
    g, lr, b1, b2, eps = 0.3, 2.5e-4, 0.9, 0.999, 1e-8
    theta, m, v = 1.0, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p = Parameter(np.array([1.0]), "p", dtype=np.float64)
    st_ = AdamState()
    for _ in range(2):
        p.grad = np.array([g])
        adam_step([p], st_, lr)
    assert abs(p.data[0] - theta) < 1e-7


def test_forward_determinism(rng):
    x = rng.standard_normal((2, 4, 30)).astype(np.float32)
    w = rng.standard_normal((4, 4, 3)).astype(np.float32)
    a = F.conv1d(Tensor(x), Tensor(w), dilation=2, padding="causal").data
    b = F.conv1d(Tensor(x), Tensor(w), dilation=2, padding="causal").data
    assert a.tobytes() == b.tobytes()

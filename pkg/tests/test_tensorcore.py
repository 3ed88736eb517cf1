import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eadro.tensorcore import (
    CheckpointError, NonFiniteError, ParameterStore, ShapeError, grad_check, load_checkpoint,
    ops, save_checkpoint, tensor,
)


def rand_param(rng, shape):
    return tensor(rng.normal(size=shape), requires_grad=True)


def test_softmax_single_element():
    assert ops.softmax(tensor([3.7])).data.tolist() == [1.0]


def test_sigmoid_zero():
    assert ops.sigmoid(tensor([0.0])).data[0] == 0.5


def test_matmul_identity():
    x = tensor(np.arange(12.0).reshape(3, 4))
    assert np.array_equal(ops.matmul(x, tensor(np.eye(4))).data, x.data)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(tensor(np.ones((2, 3))), tensor(np.ones((4, 5))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_trips():
    with pytest.raises(NonFiniteError):
        ops.mul(tensor([1e30]), tensor([1e30]))


# conv hand cases: y[t] = sum_j w[j] x[t - d(K-1-j)]
@pytest.mark.parametrize("k,d,x,expected", [
    (3, 1, [1, 2, 3, 4], [1, 3, 6, 9]),
    (2, 2, [1, 2, 3, 4], [1, 2, 4, 6]),
])
def test_conv1d_causal_hand(k, d, x, expected):
    y = ops.conv1d_causal(tensor([x]), tensor(np.ones((1, 1, k))), dilation=d)
    assert y.data.tolist() == [expected]


def test_conv1d_zero_in_zero_out():
    y = ops.conv1d_causal(tensor(np.zeros((3, 10))), tensor(np.random.default_rng(0).normal(size=(5, 3, 3))), 2)
    assert not y.data.any()


def test_conv1d_kernel_taps_placement():
    # kernel [a, b, c] with d=1: y[t] = a x[t-2] + b x[t-1] + c x[t]
    x = np.zeros(6)
    x[2] = 1.0
    y = ops.conv1d_causal(tensor([x]), tensor([[[10.0, 20.0, 30.0]]]), dilation=1).data[0]
    assert y.tolist() == [0, 0, 30, 20, 10, 0]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(2, 12), st.data())
def test_conv1d_causality(k, d, c_in, t, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**16)))
    w = tensor(rng.normal(size=(4, c_in, k)))
    x = rng.normal(size=(2, c_in, t)).astype(np.float32)
    cut = data.draw(st.integers(0, t - 1))
    y0 = ops.conv1d_causal(tensor(x), w, d).data
    x2 = x.copy()
    x2[:, :, cut + 1:] += rng.normal(size=x2[:, :, cut + 1:].shape).astype(np.float32) * 10
    y1 = ops.conv1d_causal(tensor(x2), w, d).data
    assert np.array_equal(y0[:, :, : cut + 1], y1[:, :, : cut + 1])


def test_conv1d_matches_direct_sum():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 9))
    w = rng.normal(size=(4, 3, 3))
    d = 2
    y = ops.conv1d_causal(tensor(x), tensor(w), d).data
    ref = np.zeros((2, 4, 9))
    for n in range(2):
        for c in range(4):
            for t in range(9):
                for i in range(3):
                    for j in range(3):
                        src = t - d * (3 - 1 - j)
                        if src >= 0:
                            ref[n, c, t] += w[c, i, j] * x[n, i, src]
    np.testing.assert_allclose(y, ref, rtol=1e-5, atol=1e-5)


def test_batchnorm_eval_is_affine_and_frozen():
    rng = np.random.default_rng(1)
    rm, rv = tensor(rng.normal(size=4)), tensor(rng.uniform(0.5, 2, size=4))
    before = (rm.data.copy(), rv.data.copy())
    gamma, beta = tensor(rng.normal(size=4)), tensor(rng.normal(size=4))
    x = rng.normal(size=(3, 4, 5))
    f = lambda z: ops.batchnorm_1d(tensor(z), gamma, beta, rm, rv, training=False).data
    # affine: f(a x + b y) = a f(x) + b f(y) + (1 - a - b) f(0)
    y = rng.normal(size=x.shape)
    lhs = f(2 * x - 0.5 * y)
    rhs = 2 * f(x) - 0.5 * f(y) + (1 - 2 + 0.5) * f(np.zeros_like(x))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-4, atol=1e-4)
    assert np.array_equal(rm.data, before[0]) and np.array_equal(rv.data, before[1])


def test_batchnorm_train_updates_running_stats():
    rm, rv = tensor(np.zeros(2)), tensor(np.ones(2))
    x = np.stack([np.full((1, 4), 5.0), np.full((1, 4), -1.0)], axis=1).repeat(3, axis=0)
    ops.batchnorm_1d(tensor(x), tensor(np.ones(2)), tensor(np.zeros(2)), rm, rv, training=True)
    np.testing.assert_allclose(rm.data, [0.5, -0.1], rtol=1e-6)
    np.testing.assert_allclose(rv.data, [0.9, 0.9], rtol=1e-6)


def test_glu_example():
    out = ops.glu(tensor([1.0, 2.0, 0.0, 0.0]))
    assert out.data.tolist() == [0.5, 1.0]


def test_masked_softmax_zeroes_masked_entries():
    x = tensor(np.random.default_rng(0).normal(size=(3, 4)))
    mask = np.array([[1, 0, 1, 1], [0, 0, 1, 0], [1, 1, 1, 1]], dtype=bool)
    p = ops.softmax(x, axis=-1, mask=mask).data
    assert np.all(p[~mask] == 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1, atol=1e-6)
    assert p[1, 2] == 1.0


def test_ordered_sum_is_permutation_exact():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 37)).astype(np.float32) * 1e3
    perm = rng.permutation(37)
    a = ops.sum(tensor(x), axis=1, ordered=True).data
    b = ops.sum(tensor(x[:, perm]), axis=1, ordered=True).data
    assert np.array_equal(a, b)


# -- gradient checks per operator over randomized shapes --------------------------

shape_2d = st.tuples(st.integers(1, 4), st.integers(1, 5))
seed = st.integers(0, 2**16)


def _check(fn, params, tol=1e-3):
    err = grad_check(fn, params)
    assert err < tol, err


@settings(max_examples=100, deadline=None)
@given(shape_2d, st.integers(1, 4), seed)
def test_grad_matmul(shape, m, s):
    rng = np.random.default_rng(s)
    a, b = rand_param(rng, shape), rand_param(rng, (shape[1], m))
    w = rng.normal(size=(shape[0], m))
    _check(lambda: ops.sum(ops.mul(ops.matmul(a, b), w)), [a, b])


@settings(max_examples=100, deadline=None)
@given(shape_2d, seed)
def test_grad_add_mul_broadcast(shape, s):
    rng = np.random.default_rng(s)
    a, b, c = rand_param(rng, shape), rand_param(rng, (shape[1],)), rand_param(rng, (shape[0], 1))
    w = rng.normal(size=shape)
    _check(lambda: ops.sum(ops.mul(ops.mul(ops.add(a, b), c), w)), [a, b, c])


@settings(max_examples=100, deadline=None)
@given(shape_2d, st.integers(1, 3), seed)
def test_grad_concat(shape, extra, s):
    rng = np.random.default_rng(s)
    a, b = rand_param(rng, shape), rand_param(rng, (shape[0], extra))
    w = rng.normal(size=(shape[0], shape[1] + extra))
    _check(lambda: ops.sum(ops.mul(ops.concat([a, b], axis=1), w)), [a, b])


@settings(max_examples=100, deadline=None)
@given(shape_2d, seed, st.sampled_from(["sigmoid", "relu", "leaky_relu"]))
def test_grad_activations(shape, s, name):
    rng = np.random.default_rng(s)
    a = rand_param(rng, shape)
    # keep inputs away from the relu kink so central differences are valid
    a.data = a.data + np.where(a.data >= 0, 0.05, -0.05).astype(a.data.dtype)
    w = rng.normal(size=shape)
    fn = {"sigmoid": ops.sigmoid, "relu": ops.relu, "leaky_relu": lambda x: ops.leaky_relu(x, 0.2)}[name]
    _check(lambda: ops.sum(ops.mul(fn(a), w)), [a])


@settings(max_examples=100, deadline=None)
@given(st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 3)), st.integers(0, 2), seed)
def test_grad_softmax_and_mean(shape, axis, s):
    rng = np.random.default_rng(s)
    a = rand_param(rng, shape)
    w = rng.normal(size=shape)
    w_mean = rng.normal(size=tuple(n for i, n in enumerate(shape) if i != axis))
    _check(lambda: ops.add(ops.sum(ops.mul(ops.softmax(a, axis=axis, ordered=True), w)),
                           ops.sum(ops.mul(ops.mean(a, axis=axis), w_mean))), [a])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(1, 8), seed)
def test_grad_conv1d(c_in, c_out, k, d, t, s):
    rng = np.random.default_rng(s)
    x, w, b = rand_param(rng, (2, c_in, t)), rand_param(rng, (c_out, c_in, k)), rand_param(rng, (c_out,))
    g = rng.normal(size=(2, c_out, t))
    _check(lambda: ops.sum(ops.mul(ops.conv1d_causal(x, w, d, bias=b), g)), [x, w, b])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 4), st.integers(1, 3), st.integers(2, 6), st.booleans(), seed)
def test_grad_batchnorm(n, c, t, training, s):
    rng = np.random.default_rng(s)
    x = rand_param(rng, (n, c, t))
    gamma, beta = rand_param(rng, (c,)), rand_param(rng, (c,))
    rm, rv = tensor(rng.normal(size=c)), tensor(rng.uniform(0.5, 2.0, size=c))
    g = rng.normal(size=(n, c, t))

    def fn():
        return ops.sum(ops.mul(ops.batchnorm_1d(x, gamma, beta, rm, rv, training=training), g))

    _check(fn, [x, gamma, beta])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), seed)
def test_grad_glu_log_clamp(rows, half, s):
    rng = np.random.default_rng(s)
    a = rand_param(rng, (rows, 2 * half))
    w = rng.normal(size=(rows, half))
    _check(lambda: ops.sum(ops.mul(ops.log(ops.clamp(ops.sigmoid(ops.glu(a)), 1e-7, 1.0)), w)), [a])


def test_grad_check_linear_and_constant():
    rng = np.random.default_rng(0)
    w = rand_param(rng, (3, 4))
    x = rng.normal(size=(4, 2))
    assert grad_check(lambda: ops.sum(ops.matmul(w, tensor(x))), [w]) < 1e-4
    w.grad = None
    out = ops.sum(ops.mul(w, 0.0))
    out.backward()
    assert not w.grad.any()


# -- checkpoint ------------------------------------------------------------------

def _store(rng):
    s = ParameterStore()
    s.add("b.weight", rng.normal(size=(3, 4)))
    s.add("a.bias", rng.normal(size=(4,)))
    s.add("c.bn.running_var", rng.uniform(size=(2,)))
    s.add("scalar", np.array(1.5))
    return s


def test_checkpoint_roundtrip(tmp_path):
    s = _store(np.random.default_rng(0))
    save_checkpoint(s, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.equals(s)
    assert (tmp_path / "m.ckpt").read_bytes() == back.to_bytes()
    assert not back["c.bn.running_var"].requires_grad and back["a.bias"].requires_grad


def test_checkpoint_empty(tmp_path):
    save_checkpoint(ParameterStore(), tmp_path / "e.ckpt")
    assert len(load_checkpoint(tmp_path / "e.ckpt")) == 0


def test_checkpoint_truncated_and_bad_magic(tmp_path):
    blob = _store(np.random.default_rng(0)).to_bytes()
    (tmp_path / "t.ckpt").write_bytes(blob[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"X" + blob[1:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt")
    bad_version = blob[:9] + (99).to_bytes(4, "little") + blob[13:]
    with pytest.raises(CheckpointError, match="version"):
        ParameterStore.from_bytes(bad_version)


def test_store_iteration_sorted():
    assert list(_store(np.random.default_rng(0))) == ["a.bias", "b.weight", "c.bn.running_var", "scalar"]


def test_batched_one_column_matmul_is_row_position_exact():
    # BLAS GEMV results can depend on a row's position; equivariance needs them not to
    rng = np.random.default_rng(12)
    a = rng.normal(size=(64, 4, 10, 32)).astype(np.float32)
    b = rng.normal(size=(4, 32, 1)).astype(np.float32)
    perm = rng.permutation(10)
    base = ops.matmul(tensor(a), tensor(b)).data
    assert np.array_equal(ops.matmul(tensor(a[:, :, perm]), tensor(b)).data, base[:, :, perm])
    np.testing.assert_allclose(base, np.matmul(a, b), rtol=1e-5, atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 5), seed)
def test_grad_batched_matmul_one_column(h, n, k, s):
    rng = np.random.default_rng(s)
    a, b = rand_param(rng, (2, h, n, k)), rand_param(rng, (h, k, 1))
    w = rng.normal(size=(2, h, n, 1))
    _check(lambda: ops.sum(ops.mul(ops.matmul(a, b), w)), [a, b])

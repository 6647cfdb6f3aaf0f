import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import param, project
from itkd.autodiff import (
    CheckpointError,
    OptimizerState,
    Parameter,
    ShapeError,
    adam_step,
    apply_primitive,
    backward,
    cosine_lr,
    finalize_grads,
    finite_diff_check,
    load_parameters,
    no_grad,
    ops,
    parameter_hash,
    save_parameters,
    zero_grads,
)
from itkd.autodiff.checkpoint import assign_parameters, decode_parameters, encode_parameters
from itkd.autodiff.tensor import Tensor

TOL = 1e-4


def random_shape(rng, ndim, lo=1, hi=5):
    return tuple(int(v) for v in rng.integers(lo, hi, size=ndim))


def check(build, params, **kw):
    report = finite_diff_check(build, params, tolerance=TOL, **kw)
    assert report.passed, report.summary()
    return report


# ---------------------------------------------------------------- primitive gradients

UNARY = {
    "relu": lambda a: ops.relu(a),
    "sigmoid": lambda a: ops.sigmoid(a),
    "exp": lambda a: ops.exp(a),
    "abs": lambda a: ops.abs(a),
    "clamp": lambda a: ops.clamp(a, -0.5, 0.7),
    "square": lambda a: ops.square(a),
    "mean": lambda a: ops.mean(a),
    "sum": lambda a: ops.sum(a),
    "scalar_mul": lambda a: ops.scalar_mul(a, -1.7),
    "add_scalar": lambda a: ops.add_scalar(a, 0.3),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_over_random_shapes(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    for trial in range(20):
        a = param(rng, random_shape(rng, int(rng.integers(1, 4))), "a")
        w = rng.normal(size=UNARY[name](Tensor(a.data)).shape)
        check(lambda: ops.sum(ops.mul(UNARY[name](a), Tensor(w))), [a])


def test_log_gradient_on_positive_inputs():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = Parameter(rng.uniform(0.2, 3.0, size=random_shape(rng, 2)), "a")
        w = rng.normal(size=a.shape)
        check(lambda: ops.sum(ops.mul(ops.log(a), Tensor(w))), [a])


@pytest.mark.parametrize("name", ["add", "sub", "mul"])
def test_binary_gradients(name):
    rng = np.random.default_rng(7)
    fn = getattr(ops, name)
    for _ in range(20):
        shape = random_shape(rng, int(rng.integers(1, 4)))
        a, b = param(rng, shape, "a"), param(rng, shape, "b")
        w = rng.normal(size=shape)
        check(lambda: ops.sum(ops.mul(fn(a, b), Tensor(w))), [a, b])


@pytest.mark.parametrize("axis", [0, 1, -1])
def test_softmax_and_log_softmax_gradients(axis):
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = param(rng, random_shape(rng, 3, 2, 5), "a")
        w = rng.normal(size=a.shape)
        check(lambda: ops.sum(ops.mul(ops.softmax(a, axis), Tensor(w))), [a])
        check(lambda: ops.sum(ops.mul(ops.log_softmax(a, axis), Tensor(w))), [a])


def test_matmul_transpose_gradients():
    rng = np.random.default_rng(4)
    for _ in range(20):
        m, k, n = random_shape(rng, 3, 1, 6)
        a, b = param(rng, (m, k), "a"), param(rng, (k, n), "b")
        w = rng.normal(size=(n, m))
        check(lambda: ops.sum(ops.mul(ops.transpose2d(ops.matmul(a, b)), Tensor(w))), [a, b])


def test_concat_split_slice_gather_gradients():
    rng = np.random.default_rng(5)
    for _ in range(20):
        axis = int(rng.integers(0, 3))
        base = list(random_shape(rng, 3, 1, 4))
        parts = []
        for i in range(3):
            shape = list(base)
            shape[axis] = int(rng.integers(1, 4))
            parts.append(param(rng, tuple(shape), f"p{i}"))
        sizes = [p.shape[axis] for p in parts]
        wr = np.random.default_rng(int(rng.integers(1 << 30)))

        def build():
            cat = ops.concat(parts, axis=axis)
            pieces = ops.split(cat, sizes[::-1], axis=axis)
            sl = ops.slice_axis(cat, 0, 1, axis=axis)
            return ops.add(sum_proj(pieces, wr), project(sl, np.random.default_rng(9)))

        check(build, parts)
    for _ in range(20):
        a = param(rng, random_shape(rng, 2, 2, 6), "a")
        idx = rng.integers(0, a.shape[0], size=int(rng.integers(1, 6)))
        w = rng.normal(size=(idx.size, a.shape[1]))
        check(lambda: ops.sum(ops.mul(ops.gather_rows(a, idx), Tensor(w))), [a])


def sum_proj(tensors, rng):
    state = rng.bit_generator.state
    total = None
    local = np.random.default_rng()
    local.bit_generator.state = state
    for t in tensors:
        term = project(t, local)
        total = term if total is None else ops.add(total, term)
    return total


def test_reshape_permute_sum_axis_bias_add_gradients():
    rng = np.random.default_rng(6)
    for _ in range(20):
        shape = random_shape(rng, 4, 1, 4)
        a = param(rng, shape, "a")
        bias = param(rng, (shape[1],), "bias")
        perm = tuple(int(v) for v in rng.permutation(4))
        ax = int(rng.integers(0, 4))
        w1 = np.random.default_rng(11)

        def build():
            x = ops.bias_add(a, bias, axis=1)
            y = ops.permute(x, perm)
            z = ops.reshape(y, (-1,))
            return ops.add(project(z, np.random.default_rng(1)), project(ops.sum_axis(x, ax), np.random.default_rng(2)))

        check(build, [a, bias])


@pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2), (1, 2)])
def test_conv2d_gradients(k, stride):
    rng = np.random.default_rng(10 + k + stride)
    for _ in range(20):
        n = int(rng.integers(1, 3))
        c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h = int(rng.integers(2, 5)) * 2
        w = int(rng.integers(2, 5)) * 2
        x = param(rng, (n, c_in, h, w), "x")
        wt = param(rng, (c_out, c_in, k, k), "w", 0.5)
        b = param(rng, (c_out,), "b")
        check(lambda: project(ops.conv2d(x, wt, b, stride=stride), np.random.default_rng(0)), [x, wt, b])


def test_upsample_gradient():
    rng = np.random.default_rng(12)
    for _ in range(20):
        x = param(rng, (1, 2, int(rng.integers(1, 5)), int(rng.integers(1, 5))), "x")
        check(lambda: project(ops.upsample2x(x), np.random.default_rng(0)), [x])


def test_every_primitive_kind_dispatches():
    rng = np.random.default_rng(0)
    a = Tensor(rng.uniform(0.5, 1.5, size=(2, 3)))
    b = Tensor(rng.uniform(0.5, 1.5, size=(3, 2)))
    attrs = {
        "matmul": ([a, b], {}),
        "conv2d": ([Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(rng.normal(size=(3, 2, 3, 3)))], {}),
        "upsample2x": ([Tensor(rng.normal(size=(1, 1, 2, 2)))], {}),
        "softmax": ([a], {"axis": 1}),
        "scalar_mul": ([a], {"c": 2.0}),
        "concat": ([a, a], {"axis": 0}),
        "gather_rows": ([a], {"index": [1, 0]}),
        "clamp": ([a], {"lo": 0.8, "hi": 1.2}),
    }
    for kind in ("relu", "sigmoid", "exp", "log", "abs", "mean", "sum", "transpose2d"):
        attrs[kind] = ([a], {})
    for kind in ("add", "sub", "mul"):
        attrs[kind] = ([a, a], {})
    assert set(attrs) == set(ops.PRIMITIVE_KINDS)
    for kind, (inputs, kw) in attrs.items():
        assert isinstance(apply_primitive(kind, inputs, kw), Tensor)
    with pytest.raises(ValueError):
        apply_primitive("nope", [a])


# ---------------------------------------------------------------- engine behaviour

def test_shared_subexpression_accumulates():
    a = Parameter(np.array([1.5, -2.0]), "a")
    y = ops.sum(ops.mul(a, a))  # d/da = 2a, reached through two parents
    backward(y)
    np.testing.assert_allclose(a.grad, 2 * a.data)


def test_backward_requires_scalar():
    a = Parameter(np.ones((2, 2)), "a")
    with pytest.raises(ShapeError) as err:
        backward(ops.relu(a))
    assert err.value.primitive == "backward"


def test_shape_errors_name_the_primitive():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError) as err:
        ops.matmul(a, b)
    assert err.value.primitive == "matmul"
    with pytest.raises(ShapeError):
        ops.add(a, Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        ops.softmax(a, axis=2)


def test_no_grad_records_nothing():
    a = Parameter(np.ones(3), "a")
    with no_grad():
        y = ops.sum(ops.exp(a))
    assert not y.requires_grad and y._parents == ()


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError):
        ops.log(Tensor(np.array([1.0, 0.0])))


def test_gradcheck_detects_wrong_gradient():
    a = Parameter(np.array([0.3, 1.2]), "a")

    def bad():
        out = ops.mul(a, a)
        from itkd.autodiff.tensor import make_result
        wrong = make_result(out.data, (a,), lambda g: (g * 3.0 * a.data,), "bad")
        return ops.sum(wrong)

    report = finite_diff_check(bad, [a])
    assert not report.passed


def test_gradcheck_excludes_kink_crossings():
    a = Parameter(np.array([1e-7, 1.0]), "a")
    report = finite_diff_check(lambda: ops.sum(ops.relu(a)), [a])
    assert report.excluded["a"] == 1 and report.passed


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_softmax_normalizes(rows, cols, seed):
    x = np.random.default_rng(seed).normal(0, 30, size=(rows, cols))
    out = ops.softmax(Tensor(x), axis=1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------- optimizer

def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 0.003) == pytest.approx(0.003)
    assert cosine_lr(50, 100, 0.003) == pytest.approx(0.0015)
    assert cosine_lr(100, 100, 0.003) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(100, 100, 0.003, 1e-4) == pytest.approx(1e-4)


def test_adam_matches_scalar_recurrence():
    p = Parameter(np.array([0.5, -1.0]), "p")
    state = OptimizerState(total_steps=10)
    grads = [np.array([0.1, -0.3]), np.array([0.2, 0.05]), np.array([-0.4, 0.1])]
    m = np.zeros(2)
    v = np.zeros(2)
    expected = p.data.copy()
    for t, g in enumerate(grads, start=1):
        lr = 0.003 * 0.5 * (1 + math.cos(math.pi * (t - 1) / 10))
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        expected = expected - lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        p.grad = g.copy()
        adam_step(state, [p])
    np.testing.assert_allclose(p.data, expected, rtol=1e-14)
    assert state.step_count == 3


def test_adam_skips_frozen_and_requires_grad():
    p = Parameter(np.ones(2), "p")
    p.frozen = True
    state = OptimizerState(total_steps=1)
    finalize_grads([p])
    adam_step(state, [p])
    np.testing.assert_array_equal(p.data, np.ones(2))
    q = Parameter(np.ones(2), "q")
    with pytest.raises(ValueError):
        adam_step(state, [q])


def test_frozen_parameter_gets_zero_gradient():
    t = Parameter(np.ones(3), "t")
    t.frozen = True
    s = Parameter(np.ones(3), "s")
    zero_grads([t, s])
    backward(ops.sum(ops.mul(t, s)))
    finalize_grads([t, s])
    np.testing.assert_array_equal(t.grad, 0.0)
    np.testing.assert_array_equal(s.grad, 1.0)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = [Parameter(rng.normal(size=(2, 3)), "x/w"), Parameter(rng.normal(size=4), "x/b"),
              Parameter(np.array(2.5), "scalar")]
    save_parameters(tmp_path / "c.ckpt", params)
    values = load_parameters(tmp_path / "c.ckpt")
    for p in params:
        np.testing.assert_array_equal(values[p.id], p.data)
    # identical parameter sets give identical bytes and hashes regardless of order
    assert encode_parameters(params) == encode_parameters(params[::-1])
    assert parameter_hash(params) == parameter_hash(params[::-1])
    fresh = [Parameter(np.zeros_like(p.data), p.id.replace("x/", "y/")) for p in params]
    assign_parameters(fresh, values, {"x/": "y/"})
    assert parameter_hash([Parameter(p.data, q.id) for p, q in zip(fresh, params)]) == parameter_hash(params)


def test_checkpoint_rejects_bad_input():
    blob = encode_parameters([Parameter(np.ones(3), "a")])
    with pytest.raises(CheckpointError):
        decode_parameters(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError):
        decode_parameters(blob[:-4])
    with pytest.raises(CheckpointError):
        assign_parameters([Parameter(np.ones(2), "a")], decode_parameters(blob))

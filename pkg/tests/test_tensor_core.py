import numpy as np
import pytest

from utils.errors import ChecksumError, FileFormatError, TruncatedFileError
from utils.tensor_core import (Adam, NonScalarRootError, ShapeMismatchError, Tape, Tensor, UnknownOpError, backward,
                               decode_checkpoint, encode_checkpoint, execute, finite_difference_check,
                               load_checkpoint, named_grads, no_grad, save_checkpoint)
from utils.tensor_core import ops

TOL = 1e-4


def weighted_sum(y, seed=99):
    # Contract with fixed random weights so every output element matters
    w = np.random.default_rng(seed).standard_normal(y.shape)
    return ops.sum(ops.mul(y, Tensor.wrap(w)))


def away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.sign(x) * (0.1 + np.abs(x))


def const(rng, shape):
    return Tensor.wrap(rng.standard_normal(shape))


# (name, input shape, function of the input Tensor built from a seeded rng)
CASES = [
    ('identity', (3, 4), lambda r: lambda x: ops.identity(x)),
    ('add', (3, 4), lambda r: (lambda c: lambda x: ops.add(x, c))(const(r, (3, 4)))),
    ('sub', (3, 4), lambda r: (lambda c: lambda x: ops.sub(c, x))(const(r, (3, 4)))),
    ('mul', (3, 4), lambda r: (lambda c: lambda x: ops.mul(x, c))(const(r, (3, 4)))),
    ('mul_self', (3, 4), lambda r: lambda x: ops.mul(x, x)),
    ('scale', (3, 4), lambda r: lambda x: ops.scale(x, -1.7)),
    ('add_scalar', (3, 4), lambda r: lambda x: ops.mul(ops.add_scalar(x, 0.3), ops.add_scalar(x, 0.3))),
    ('scale_per_sample', (3, 2, 2), lambda r: lambda x: ops.scale_per_sample(x, np.array([0.5, -1.0, 2.0]))),
    ('channel_shift', (2, 3, 4), lambda r: (lambda s: lambda x: ops.mul(ops.channel_shift(x, s), x))(
        const(r, (2, 3)))),
    ('repeat_rows', (2, 3), lambda r: lambda x: ops.repeat_rows(x, 3)),
    ('reshape', (2, 6), lambda r: lambda x: ops.reshape(x, (3, 4))),
    ('transpose', (2, 3, 4), lambda r: lambda x: ops.transpose(x, (2, 0, 1))),
    ('concat', (2, 3, 2), lambda r: (lambda c: lambda x: ops.concat(x, ops.mul(x, c), axis=1))(
        const(r, (2, 3, 2)))),
    ('mean', (3, 4), lambda r: lambda x: ops.mean(ops.mul(x, x))),
    ('mse', (3, 4), lambda r: (lambda c: lambda x: ops.mse(x, c))(const(r, (3, 4)))),
    ('softplus', (3, 4), lambda r: lambda x: ops.softplus(x)),
    ('silu', (3, 4), lambda r: lambda x: ops.silu(x)),
    ('linear', (3, 4), lambda r: (lambda w, b: lambda x: ops.linear(x, w, b))(const(r, (5, 4)), const(r, (5,)))),
    ('linear_weight', (5, 4), lambda r: (lambda x_: lambda w: ops.linear(x_, w))(const(r, (3, 4)))),
    ('conv2d', (2, 2, 5, 5), lambda r: (lambda w, b: lambda x: ops.conv2d(x, w, b, padding=1))(
        const(r, (3, 2, 3, 3)), const(r, (3,)))),
    ('conv2d_stride2', (1, 2, 5, 5), lambda r: (lambda w: lambda x: ops.conv2d(x, w, stride=2, padding=1))(
        const(r, (2, 2, 3, 3)))),
    ('conv2d_weight', (3, 2, 3, 3), lambda r: (lambda x_: lambda w: ops.conv2d(x_, w, padding=1))(
        const(r, (2, 2, 4, 4)))),
    ('conv1d', (2, 3, 5), lambda r: (lambda w, b: lambda x: ops.conv1d(x, w, b, padding=1))(
        const(r, (4, 3, 3)), const(r, (4,)))),
    ('conv1d_weight', (4, 3, 3), lambda r: (lambda x_: lambda w: ops.conv1d(x_, w, padding=1))(
        const(r, (2, 3, 5)))),
    ('group_norm', (2, 8, 3), lambda r: (lambda g, b: lambda x: ops.group_norm(x, g, b, 4))(
        const(r, (8,)), const(r, (8,)))),
    ('attention_q', (2, 3, 4), lambda r: (lambda k, v: lambda q: ops.attention(q, k, v))(
        const(r, (2, 3, 4)), const(r, (2, 3, 4)))),
    ('attention_self', (2, 3, 4), lambda r: lambda x: ops.attention(x, x, x)),
    ('upsample2x', (1, 2, 2, 3), lambda r: lambda x: ops.upsample2x(x)),
    ('avgpool2x', (1, 2, 4, 4), lambda r: lambda x: ops.avgpool2x(x)),
]


@pytest.mark.parametrize('name, shape, make', CASES, ids=[c[0] for c in CASES])
@pytest.mark.parametrize('seed', [s if s < 3 else pytest.param(s, marks=pytest.mark.slow) for s in range(100)])
def test_op_gradients_match_finite_differences(name, shape, make, seed):
    rng = np.random.default_rng(seed)
    f = make(rng)
    x = rng.standard_normal(shape)
    report = finite_difference_check(lambda t: weighted_sum(f(t)), x)
    assert report.max_rel_error <= TOL


@pytest.mark.parametrize('seed', range(4))
def test_relu_gradient_away_from_kink(seed):
    rng = np.random.default_rng(seed)
    report = finite_difference_check(lambda t: weighted_sum(ops.relu(t)), away_from_zero(rng, (4, 5)))
    assert report.max_rel_error <= TOL


@pytest.mark.slow
@pytest.mark.parametrize('seed', range(100))
def test_composite_gradient_over_many_points(seed):
    rng = np.random.default_rng(seed)
    w = const(rng, (4, 3, 3, 3))
    g, b = const(rng, (4,)), const(rng, (4,))

    def f(x):
        h = ops.silu(ops.group_norm(ops.conv2d(x, w, padding=1), g, b, 4))
        return ops.mean(ops.softplus(h))

    report = finite_difference_check(f, rng.standard_normal((1, 3, 4, 4)))
    assert report.max_rel_error <= TOL


def test_constant_function_has_zero_gradient():
    report = finite_difference_check(lambda t: ops.sum(Tensor.wrap(np.ones((2, 2)))), np.zeros((2, 2)))
    assert np.all(report.analytic == 0)
    assert report.max_rel_error == 0.0


def test_gradients_accumulate_over_reuse():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.add(ops.scale(x, 2.0), ops.mul(x, x)))
    grads = backward(tape, y)
    np.testing.assert_allclose(grads[x].data, 2.0 + 2.0 * np.array([1.0, 2.0, 3.0]))


def test_backward_needs_a_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ops.scale(x, 2.0)
    with pytest.raises(NonScalarRootError):
        backward(tape, y)


def test_no_grad_blocks_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with no_grad():
            y = ops.scale(x, 2.0)
    assert len(tape) == 0
    assert not y.requires_grad


def test_shape_rules_are_checked_in_forward():
    with pytest.raises(ShapeMismatchError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeMismatchError):
        ops.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeMismatchError):
        ops.group_norm(Tensor(np.ones((1, 6, 2))), Tensor(np.ones(6)), Tensor(np.zeros(6)), 4)
    with pytest.raises(UnknownOpError):
        execute('fft', Tensor(np.ones(2)))


def test_tensors_are_immutable_and_constructor_copies():
    source = np.arange(4.0)
    t = Tensor(source)
    source[0] = 10.0
    assert t.data[0] == 0.0
    with pytest.raises(ValueError):
        t.data[0] = 1.0


def test_operator_sugar():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
    np.testing.assert_array_equal((a + b).data, [4.0, 7.0])
    np.testing.assert_array_equal((b - a).data, [2.0, 3.0])
    np.testing.assert_array_equal((a * 2.0).data, [2.0, 4.0])
    np.testing.assert_array_equal((-a).data, [-1.0, -2.0])


def test_softplus_is_finite_for_large_inputs():
    y = ops.softplus(Tensor([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(y.data))
    assert y.data[1] == pytest.approx(np.log(2.0), abs=1e-12)
    assert y.data[2] == pytest.approx(1000.0)


def test_attention_rows_are_convex_combinations():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((1, 5, 3))
    out = ops.attention(Tensor(rng.standard_normal((1, 5, 3))), Tensor(rng.standard_normal((1, 5, 3))), Tensor(v))
    assert np.all(out.data <= v.max(axis=1, keepdims=True) + 1e-12)
    assert np.all(out.data >= v.min(axis=1, keepdims=True) - 1e-12)


def test_adam_moves_parameters_downhill():
    w = Tensor([3.0, -2.0], requires_grad=True)
    params, opt = {'w': w}, Adam(lr=0.1)
    for _ in range(50):
        with Tape() as tape:
            loss = ops.mse(params['w'], Tensor.wrap(np.zeros(2)))
        params = opt.step(params, named_grads(backward(tape, loss), params))
    assert np.all(np.abs(params['w'].data) < np.array([3.0, 2.0]))
    assert params['w'].requires_grad


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {'a.weight': rng.standard_normal((3, 2, 3, 3)), 'a.bias': rng.standard_normal(3),
               'scalar': np.array(1.5)}
    path = str(tmp_path / 'model.vdmk')
    save_checkpoint(path, tensors, {'config_hash': 'abc', 'step': 3})
    loaded, meta = load_checkpoint(path)
    assert meta == {'config_hash': 'abc', 'step': 3}
    assert list(loaded) == list(tensors)
    for name, value in tensors.items():
        assert loaded[name].tobytes() == np.ascontiguousarray(value, dtype='<f8').tobytes()
    assert encode_checkpoint(loaded, meta) == encode_checkpoint(tensors, meta)


def test_checkpoint_detects_every_single_byte_corruption():
    blob = encode_checkpoint({'w': np.arange(6.0).reshape(2, 3)}, {'k': 1})
    for i in range(len(blob)):
        corrupted = bytearray(blob)
        corrupted[i] ^= 0xFF
        with pytest.raises(FileFormatError):
            decode_checkpoint(bytes(corrupted))


def test_checkpoint_truncation_and_checksum_errors():
    blob = encode_checkpoint({'w': np.ones(4)})
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(blob[:-9])
    corrupted = bytearray(blob)
    corrupted[-5] ^= 0x01
    with pytest.raises(ChecksumError):
        decode_checkpoint(bytes(corrupted))

'''
Op registry and the differentiable op set.

Every op is a class with forward(arrays, attrs) -> (out, ctx) and
backward(ctx, grad) -> one gradient (or None) per input. Shape rules are
checked in forward. No broadcasting beyond bias/channel adds and
scalar or per-sample scaling.
'''

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.tensor_core.tensor import (Tensor, ShapeMismatchError, UnknownOpError,
                                      TensorError, active_tape, as_tensor)

OPS = {}


def register(name):
    def wrap(cls):
        cls.name = name
        OPS[name] = cls
        return cls
    return wrap


def execute(op_kind, *inputs, **attrs):
    if op_kind not in OPS:
        raise UnknownOpError('unknown op kind: %r' % (op_kind,))
    op = OPS[op_kind]
    inputs = [as_tensor(t) for t in inputs]
    out, ctx = op.forward([t.data for t in inputs], attrs)
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor.wrap(out, requires_grad=track)
    if track:
        result.tape_id = tape.record(op_kind, inputs, result, ctx, op.backward)
    return result


def _require_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError(op, a.shape, b.shape)


def sigmoid(x):
    # tanh form stays finite for any input
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@register('identity')
class Identity:
    @staticmethod
    def forward(xs, attrs):
        return xs[0], None

    @staticmethod
    def backward(ctx, g):
        return (g,)


@register('add')
class Add:
    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        _require_same('add', a, b)
        return a + b, None

    @staticmethod
    def backward(ctx, g):
        return g, g


@register('sub')
class Sub:
    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        _require_same('sub', a, b)
        return a - b, None

    @staticmethod
    def backward(ctx, g):
        return g, -g


@register('mul')
class Mul:
    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        _require_same('mul', a, b)
        return a * b, (a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx
        return g * b, g * a


@register('scale')
class Scale:
    @staticmethod
    def forward(xs, attrs):
        factor = float(attrs['factor'])
        return xs[0] * factor, factor

    @staticmethod
    def backward(factor, g):
        return (g * factor,)


@register('add_scalar')
class AddScalar:
    @staticmethod
    def forward(xs, attrs):
        return xs[0] + float(attrs['value']), None

    @staticmethod
    def backward(ctx, g):
        return (g,)


@register('scale_per_sample')
class ScalePerSample:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        factors = np.asarray(attrs['factors'], dtype=np.float64).reshape(-1)
        if factors.shape[0] != x.shape[0]:
            raise ShapeMismatchError('scale_per_sample', x.shape, factors.shape)
        f = factors.reshape((-1,) + (1,) * (x.ndim - 1))
        return x * f, f

    @staticmethod
    def backward(f, g):
        return (g * f,)


@register('channel_shift')
class ChannelShift:
    # x (N, C, ...) + s (N, C) broadcast over trailing axes
    @staticmethod
    def forward(xs, attrs):
        x, s = xs
        if x.ndim < 2 or s.shape != x.shape[:2]:
            raise ShapeMismatchError('channel_shift', x.shape, s.shape)
        return x + s.reshape(s.shape + (1,) * (x.ndim - 2)), x.ndim

    @staticmethod
    def backward(ndim, g):
        return g, g.sum(axis=tuple(range(2, ndim)))


@register('repeat_rows')
class RepeatRows:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        repeats = int(attrs['repeats'])
        return np.repeat(x, repeats, axis=0), (x.shape, repeats)

    @staticmethod
    def backward(ctx, g):
        shape, repeats = ctx
        return (g.reshape((shape[0], repeats) + shape[1:]).sum(axis=1),)


@register('reshape')
class Reshape:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        shape = tuple(int(d) for d in attrs['shape'])
        if int(np.prod(shape)) != x.size:
            raise ShapeMismatchError('reshape', x.shape, shape)
        return x.reshape(shape), x.shape

    @staticmethod
    def backward(shape, g):
        return (g.reshape(shape),)


@register('transpose')
class Transpose:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        axes = tuple(int(a) for a in attrs['axes'])
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeMismatchError('transpose', x.shape, axes, 'axes are not a permutation')
        return np.ascontiguousarray(x.transpose(axes)), np.argsort(axes)

    @staticmethod
    def backward(inverse, g):
        return (np.ascontiguousarray(g.transpose(inverse)),)


@register('concat')
class Concat:
    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        axis = int(attrs.get('axis', 1))
        sa = a.shape[:axis] + a.shape[axis + 1:]
        sb = b.shape[:axis] + b.shape[axis + 1:]
        if a.ndim != b.ndim or sa != sb:
            raise ShapeMismatchError('concat', a.shape, b.shape)
        return np.concatenate([a, b], axis=axis), (axis, a.shape[axis])

    @staticmethod
    def backward(ctx, g):
        axis, split = ctx
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb


@register('sum')
class Sum:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        return np.asarray(x.sum()), x.shape

    @staticmethod
    def backward(shape, g):
        return (np.full(shape, float(g)),)


@register('mean')
class Mean:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        if x.size == 0:
            raise TensorError('mean of an empty tensor')
        return np.asarray(x.mean()), x.shape

    @staticmethod
    def backward(shape, g):
        return (np.full(shape, float(g) / int(np.prod(shape))),)


@register('mse')
class MSE:
    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        _require_same('mse', a, b)
        if a.size == 0:
            raise TensorError('mse of empty tensors')
        diff = a - b
        return np.asarray(np.mean(diff * diff)), diff

    @staticmethod
    def backward(diff, g):
        ga = diff * (2.0 * float(g) / diff.size)
        return ga, -ga


@register('relu')
class ReLU:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        return np.maximum(x, 0.0), x > 0

    @staticmethod
    def backward(mask, g):
        return (g * mask,)


@register('softplus')
class Softplus:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        return np.logaddexp(0.0, x), x

    @staticmethod
    def backward(x, g):
        return (g * sigmoid(x),)


@register('silu')
class SiLU:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        s = sigmoid(x)
        return x * s, (x, s)

    @staticmethod
    def backward(ctx, g):
        x, s = ctx
        return (g * (s * (1.0 + x * (1.0 - s))),)


@register('linear')
class Linear:
    # x (M, Din), w (Dout, Din), optional b (Dout,)
    @staticmethod
    def forward(xs, attrs):
        x, w = xs[0], xs[1]
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeMismatchError('linear', x.shape, w.shape)
        out = x @ w.T
        if len(xs) == 3:
            b = xs[2]
            if b.shape != (w.shape[0],):
                raise ShapeMismatchError('linear', w.shape, b.shape, 'bias')
            out = out + b
        return out, (x, w, len(xs) == 3)

    @staticmethod
    def backward(ctx, g):
        x, w, has_bias = ctx
        grads = (g @ w, g.T @ x)
        return grads + (g.sum(axis=0),) if has_bias else grads


def _pair(value):
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def _conv2d_forward(x, w, stride, ph, pw):
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    kh, kw = w.shape[2], w.shape[3]
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeMismatchError('conv2d', x.shape, w.shape, 'kernel larger than padded input')
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum('nchwij,ocij->nohw', windows, w, optimize=True)
    return out, windows, xp.shape


def _conv2d_backward(g, w, windows, xp_shape, x_shape, stride, ph, pw):
    kh, kw = w.shape[2], w.shape[3]
    gw = np.einsum('nchwij,nohw->ocij', windows, g, optimize=True)
    gxp = np.zeros(xp_shape)
    ho, wo = g.shape[2], g.shape[3]
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                'nohw,oc->nchw', g, w[:, :, i, j], optimize=True)
    gx = gxp[:, :, ph:ph + x_shape[2], pw:pw + x_shape[3]]
    return np.ascontiguousarray(gx), gw


@register('conv2d')
class Conv2d:
    # x (N, C, H, W), w (O, C, kh, kw), optional b (O,)
    @staticmethod
    def forward(xs, attrs):
        x, w = xs[0], xs[1]
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeMismatchError('conv2d', x.shape, w.shape)
        stride = int(attrs.get('stride', 1))
        if stride < 1:
            raise TensorError('conv2d: stride must be >= 1')
        ph, pw = _pair(attrs.get('padding', 0))
        out, windows, xp_shape = _conv2d_forward(x, w, stride, ph, pw)
        has_bias = len(xs) == 3
        if has_bias:
            if xs[2].shape != (w.shape[0],):
                raise ShapeMismatchError('conv2d', w.shape, xs[2].shape, 'bias')
            out = out + xs[2].reshape(1, -1, 1, 1)
        return out, (w, windows, xp_shape, x.shape, stride, ph, pw, has_bias)

    @staticmethod
    def backward(ctx, g):
        w, windows, xp_shape, x_shape, stride, ph, pw, has_bias = ctx
        gx, gw = _conv2d_backward(g, w, windows, xp_shape, x_shape, stride, ph, pw)
        return (gx, gw, g.sum(axis=(0, 2, 3))) if has_bias else (gx, gw)


@register('conv1d')
class Conv1d:
    # x (N, C, L), w (O, C, k), optional b (O,); runs as a height-1 conv2d
    @staticmethod
    def forward(xs, attrs):
        x, w = xs[0], xs[1]
        if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
            raise ShapeMismatchError('conv1d', x.shape, w.shape)
        pad = int(attrs.get('padding', 0))
        x4, w4 = x[:, :, None, :], w[:, :, None, :]
        out, windows, xp_shape = _conv2d_forward(x4, w4, 1, 0, pad)
        has_bias = len(xs) == 3
        if has_bias:
            if xs[2].shape != (w.shape[0],):
                raise ShapeMismatchError('conv1d', w.shape, xs[2].shape, 'bias')
            out = out + xs[2].reshape(1, -1, 1, 1)
        return out[:, :, 0, :], (w4, windows, xp_shape, x4.shape, pad, has_bias)

    @staticmethod
    def backward(ctx, g):
        w4, windows, xp_shape, x4_shape, pad, has_bias = ctx
        gx, gw = _conv2d_backward(g[:, :, None, :], w4, windows, xp_shape, x4_shape, 1, 0, pad)
        grads = (gx[:, :, 0, :], gw[:, :, 0, :])
        return grads + (g.sum(axis=(0, 2)),) if has_bias else grads


@register('group_norm')
class GroupNorm:
    # x (N, C, ...), gamma (C,), beta (C,); groups of `group_width` channels
    @staticmethod
    def forward(xs, attrs):
        x, gamma, beta = xs
        group_width = int(attrs.get('group_width', 4))
        eps = float(attrs.get('eps', 1e-5))
        n, c = x.shape[0], x.shape[1]
        if c % group_width or gamma.shape != (c,) or beta.shape != (c,):
            raise ShapeMismatchError('group_norm', x.shape, gamma.shape,
                                     'channels must split into groups of %d' % group_width)
        xg = x.reshape(n, c // group_width, -1)
        mu = xg.mean(axis=-1, keepdims=True)
        centered = xg - mu
        var = np.mean(centered * centered, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (centered * inv).reshape(x.shape)
        cshape = (1, c) + (1,) * (x.ndim - 2)
        out = xhat * gamma.reshape(cshape) + beta.reshape(cshape)
        return out, (xhat, inv, gamma, cshape, group_width)

    @staticmethod
    def backward(ctx, g):
        xhat, inv, gamma, cshape, group_width = ctx
        axes = (0,) + tuple(range(2, xhat.ndim))
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        n, c = xhat.shape[0], xhat.shape[1]
        dxhat = (g * gamma.reshape(cshape)).reshape(n, c // group_width, -1)
        xh = xhat.reshape(n, c // group_width, -1)
        m = xh.shape[-1]
        dx = inv / m * (m * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xh * (dxhat * xh).sum(axis=-1, keepdims=True))
        return dx.reshape(xhat.shape), ggamma, gbeta


@register('attention')
class Attention:
    # q, k, v (N, T, d): exact softmax(q k^T / sqrt(d)) v, no mask
    @staticmethod
    def forward(xs, attrs):
        q, k, v = xs
        _require_same('attention', q, k)
        _require_same('attention', k, v)
        if q.ndim != 3:
            raise ShapeMismatchError('attention', q.shape, (None, None, None), 'expected (N, T, d)')
        scale = 1.0 / np.sqrt(q.shape[-1])
        s = np.matmul(q, k.transpose(0, 2, 1)) * scale
        s = s - s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p = p / p.sum(axis=-1, keepdims=True)
        return np.matmul(p, v), (q, k, v, p, scale)

    @staticmethod
    def backward(ctx, g):
        q, k, v, p, scale = ctx
        dv = np.matmul(p.transpose(0, 2, 1), g)
        dp = np.matmul(g, v.transpose(0, 2, 1))
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = np.matmul(ds, k) * scale
        dk = np.matmul(ds.transpose(0, 2, 1), q) * scale
        return dq, dk, dv


@register('upsample2x')
class Upsample2x:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        if x.ndim != 4:
            raise ShapeMismatchError('upsample2x', x.shape, (None,) * 4)
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3), x.shape

    @staticmethod
    def backward(shape, g):
        n, c, h, w = shape
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)


@register('avgpool2x')
class AvgPool2x:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeMismatchError('avgpool2x', x.shape, (None,) * 4, 'needs even H and W')
        n, c, h, w = x.shape
        return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)), None

    @staticmethod
    def backward(ctx, g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)


def identity(x):
    return execute('identity', x)


def add(a, b):
    return execute('add', a, b)


def sub(a, b):
    return execute('sub', a, b)


def mul(a, b):
    return execute('mul', a, b)


def scale(x, factor):
    return execute('scale', x, factor=factor)


def add_scalar(x, value):
    return execute('add_scalar', x, value=value)


def scale_per_sample(x, factors):
    return execute('scale_per_sample', x, factors=factors)


def channel_shift(x, shift):
    return execute('channel_shift', x, shift)


def repeat_rows(x, repeats):
    return execute('repeat_rows', x, repeats=repeats)


def reshape(x, shape):
    return execute('reshape', x, shape=shape)


def transpose(x, axes):
    return execute('transpose', x, axes=axes)


def concat(a, b, axis=1):
    return execute('concat', a, b, axis=axis)


def sum(x):
    return execute('sum', x)


def mean(x):
    return execute('mean', x)


def mse(a, b):
    return execute('mse', a, b)


def relu(x):
    return execute('relu', x)


def softplus(x):
    return execute('softplus', x)


def silu(x):
    return execute('silu', x)


def linear(x, w, b=None):
    return execute('linear', x, w) if b is None else execute('linear', x, w, b)


def conv2d(x, w, b=None, stride=1, padding=0):
    inputs = (x, w) if b is None else (x, w, b)
    return execute('conv2d', *inputs, stride=stride, padding=padding)


def conv1d(x, w, b=None, padding=0):
    inputs = (x, w) if b is None else (x, w, b)
    return execute('conv1d', *inputs, padding=padding)


def group_norm(x, gamma, beta, group_width=4, eps=1e-5):
    return execute('group_norm', x, gamma, beta, group_width=group_width, eps=eps)


def attention(q, k, v):
    return execute('attention', q, k, v)


def upsample2x(x):
    return execute('upsample2x', x)


def avgpool2x(x):
    return execute('avgpool2x', x)

'''
Immutable dense tensors and the append-only gradient tape.

Tensors hold float64 numpy arrays flagged read-only. An op run while a
Tape is active, with at least one input requiring grad, appends a node
to the tape; backward() walks the nodes in strict reverse append order.
'''

import itertools
import threading

import numpy as np

from utils.errors import VdminiError

_tape_serials = itertools.count(1)
_local = threading.local()


class TensorError(VdminiError):
    kind = 'tensor'


class ShapeMismatchError(TensorError):
    def __init__(self, op, shape_a, shape_b, detail=''):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        message = '%s: shape mismatch %s vs %s' % (op, self.shape_a, self.shape_b)
        if detail:
            message += ' (%s)' % detail
        super(ShapeMismatchError, self).__init__(message)


class UnknownOpError(TensorError):
    pass


class NonScalarRootError(TensorError):
    pass


def _readonly(arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.flags.writeable:
        arr.setflags(write=False)
    return arr


class Tensor:
    __slots__ = ('data', 'requires_grad', 'tape_id', 'name')

    def __init__(self, data, requires_grad=False, name=None):
        # Always copy: the caller's array must not be frozen under them
        self.data = _readonly(np.array(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.tape_id = None
        self.name = name

    @classmethod
    def wrap(cls, arr, requires_grad=False):
        # No copy; used for freshly computed op outputs
        t = cls.__new__(cls)
        t.data = _readonly(arr)
        t.requires_grad = requires_grad
        t.tape_id = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def numpy(self):
        return np.array(self.data)

    def detach(self):
        return Tensor.wrap(self.data)

    def __repr__(self):
        return 'Tensor(shape=%s, requires_grad=%s%s)' % (
            self.shape, self.requires_grad, ', name=%r' % self.name if self.name else '')

    def __add__(self, other):
        from utils.tensor_core import ops
        if isinstance(other, (int, float)):
            return ops.add_scalar(self, other)
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from utils.tensor_core import ops
        if isinstance(other, (int, float)):
            return ops.add_scalar(self, -other)
        return ops.sub(self, other)

    def __mul__(self, other):
        from utils.tensor_core import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from utils.tensor_core import ops
        return ops.scale(self, -1.0)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class _Node:
    __slots__ = ('op', 'inputs', 'output', 'ctx', 'backward_fn')

    def __init__(self, op, inputs, output, ctx, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.ctx = ctx
        self.backward_fn = backward_fn


def _stack():
    if not hasattr(_local, 'tapes'):
        _local.tapes = []
    return _local.tapes


class Tape:
    def __init__(self):
        self.serial = next(_tape_serials)
        self.nodes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, output, ctx, backward_fn):
        self.nodes.append(_Node(op, tuple(inputs), output, ctx, backward_fn))
        return (self.serial, len(self.nodes) - 1)


class no_grad:
    # Masks any enclosing tape for the duration of the block
    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


def backward(tape, root):
    if root.ndim != 0:
        raise NonScalarRootError('backward root must be a scalar, got shape %s' % (root.shape,))
    if not root.requires_grad:
        return {}

    def on_this_tape(t):
        return t.tape_id is not None and t.tape_id[0] == tape.serial

    grads = {id(root): np.ones((), dtype=np.float64)}
    leaves = {} if on_this_tape(root) else {id(root): root}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward_fn(node.ctx, g)
        for inp, gi in zip(node.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ShapeMismatchError(node.op + '.backward', gi.shape, inp.shape)
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
            if not on_this_tape(inp):
                leaves[key] = inp

    return {leaves[k]: Tensor.wrap(grads[k]) for k in leaves}

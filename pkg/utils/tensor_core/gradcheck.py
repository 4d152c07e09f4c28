'''
Central finite-difference oracle for analytic gradients.
'''

from dataclasses import dataclass

import numpy as np

from utils.errors import NumericError
from utils.tensor_core.tensor import Tape, Tensor, TensorError, as_tensor, backward, no_grad


class GradientCheckError(NumericError):
    pass


@dataclass
class GradCheckReport:
    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray

    @property
    def max_rel_error(self):
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0


def _evaluate(f, values):
    with no_grad():
        out = as_tensor(f(Tensor(values)))
    value = float(out.data.reshape(-1)[0])
    if not np.isfinite(value):
        raise GradientCheckError('f is not finite at a perturbed point')
    return value


def finite_difference_check(f, x, eps=1e-5, indices=None, floor=1e-6):
    # rel error = |a - n| / max(|a|, |n|, floor); `indices` restricts the check to flat positions
    if not 0.0 < eps <= 1e-2:
        raise TensorError('eps must lie in (0, 1e-2], got %r' % (eps,))
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        y = as_tensor(f(leaf))
    if not np.all(np.isfinite(y.data)):
        raise GradientCheckError('f is not finite at x')
    grads = backward(tape, y)
    analytic_full = grads[leaf].data.reshape(-1) if leaf in grads else np.zeros(x0.size)

    flat_indices = np.arange(x0.size) if indices is None else np.asarray(indices, dtype=np.int64)
    numeric = np.zeros(len(flat_indices))
    for k, i in enumerate(flat_indices):
        plus = x0.copy().reshape(-1)
        plus[i] += eps
        minus = x0.copy().reshape(-1)
        minus[i] -= eps
        f_plus = _evaluate(f, plus.reshape(x0.shape))
        f_minus = _evaluate(f, minus.reshape(x0.shape))
        numeric[k] = (f_plus - f_minus) / (2.0 * eps)

    analytic = analytic_full[flat_indices]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return GradCheckReport(indices=flat_indices, analytic=analytic, numeric=numeric,
                           rel_errors=np.abs(analytic - numeric) / denom)

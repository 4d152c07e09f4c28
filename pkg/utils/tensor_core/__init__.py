from .tensor import (Tensor, Tape, backward, no_grad, active_tape, as_tensor,
                     TensorError, ShapeMismatchError, UnknownOpError, NonScalarRootError)
from .ops import execute, OPS
from .gradcheck import finite_difference_check, GradCheckReport, GradientCheckError
from .checkpoint import save_checkpoint, load_checkpoint, encode_checkpoint, decode_checkpoint
from .optim import Adam, named_grads

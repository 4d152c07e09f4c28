import numpy as np

from utils.tensor_core.tensor import Tensor


def named_grads(grads, params):
    # backward() keys gradients by leaf tensor; optimizers want parameter names
    return {name: grads[t].data for name, t in params.items() if t in grads}


class Adam:
    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        # Returns a new name -> Tensor dict; parameters without a gradient pass through
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        updated = {}
        for name, param in params.items():
            g = grads.get(name)
            if g is None:
                updated[name] = param
                continue
            m = self.m.get(name, np.zeros_like(param.data))
            v = self.v.get(name, np.zeros_like(param.data))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            new = param.data - self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            updated[name] = Tensor.wrap(new, requires_grad=param.requires_grad)
        return updated

    def state_dict(self):
        state = {'adam.t': np.array([float(self.t)])}
        for name in sorted(self.m):
            state['adam.m.' + name] = self.m[name]
            state['adam.v.' + name] = self.v[name]
        return state

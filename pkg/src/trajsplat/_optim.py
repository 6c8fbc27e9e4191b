import numpy as np


class Adam:
    """Adam over a dict of named numpy arrays, updated in place."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr if isinstance(lr, dict) else {k: lr for k in params}
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            self.params[k] -= self.lr[k] * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return dict(
            params={k: v.copy() for k, v in self.params.items()},
            m={k: v.copy() for k, v in self.m.items()},
            v={k: v.copy() for k, v in self.v.items()},
            t=self.t,
        )

    def load_state_dict(self, state):
        for k in self.params:
            self.params[k][...] = state["params"][k]
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]
        self.t = state["t"]

    def scale_lr(self, factor, cap=None):
        for k in self.lr:
            self.lr[k] *= factor
            if cap is not None:
                self.lr[k] = min(self.lr[k], cap[k])

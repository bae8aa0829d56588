"""Small numpy building blocks: activations with derivatives, softmax, AdamW."""

from __future__ import annotations

import numpy as np

from .errors import NumericalError

_K = np.sqrt(2.0 / np.pi)


# tanh forms written in place: scipy's ndtr/expit and fresh temporaries
# dominate the step time for the small MLPs used here
def gelu(x):
    t = x * x
    t *= 0.044715 * _K
    t += _K
    t *= x
    np.tanh(t, out=t)
    t += 1.0
    t *= x
    t *= 0.5
    return t


def gelu_grad(x):
    x2 = x * x
    t = x2 * (0.044715 * _K)
    t += _K
    t *= x
    np.tanh(t, out=t)
    # 0.5 (1 + t) + 0.5 x (1 - t^2) K (1 + 3 * 0.044715 x^2)
    x2 *= 3 * 0.044715 * _K
    x2 += _K
    x2 *= x
    x2 *= 0.5
    out = t * t
    np.subtract(1.0, out, out=out)
    out *= x2
    t += 1.0
    t *= 0.5
    out += t
    return out


def gelu_and_grad(x):
    """``(gelu(x), gelu'(x))`` sharing one tanh evaluation."""
    x2 = x * x
    t = x2 * (0.044715 * _K)
    t += _K
    t *= x
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5
    x2 *= 3 * 0.044715 * _K
    x2 += _K
    x2 *= x
    x2 *= 0.5
    d = t * t
    np.subtract(1.0, d, out=d)
    d *= x2
    t += 1.0
    t *= 0.5
    d += t
    return y, d


def silu(x):
    t = x * 0.5
    np.tanh(t, out=t)
    t += 1.0
    t *= x
    t *= 0.5
    return t


def silu_grad(x):
    s = x * 0.5
    np.tanh(s, out=s)
    s += 1.0
    s *= 0.5
    out = 1.0 - s
    out *= x
    out += 1.0
    out *= s
    return out


def softmax(logits, temperature: float = 1.0, axis: int = -1):
    """Temperature softmax with max-subtraction."""
    z = np.asarray(logits, dtype=np.float64) / temperature
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite logits")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, temperature: float = 1.0, axis: int = -1):
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


class AdamW:
    """Adam with decoupled weight decay over a dict of parameter arrays.

    Weight decay only touches the names listed in ``decay``.
    """

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, decay=()):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = set(decay)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        for g in grads.values():
            if not np.all(np.isfinite(g)):
                raise NumericalError("non-finite gradient")
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p = params[k]
            if self.weight_decay and k in self.decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> tuple[dict, dict]:
        meta = {"t": self.t, "lr": self.lr, "betas": [self.b1, self.b2], "eps": self.eps,
                "weight_decay": self.weight_decay, "decay": sorted(self.decay)}
        tensors = {f"m.{k}": v for k, v in self.m.items()}
        tensors.update({f"v.{k}": v for k, v in self.v.items()})
        return meta, tensors

    @classmethod
    def from_state(cls, meta: dict, tensors: dict) -> AdamW:
        opt = cls(meta["lr"], tuple(meta["betas"]), meta["eps"], meta["weight_decay"], meta["decay"])
        opt.t = meta["t"]
        for k, v in tensors.items():
            kind, name = k.split(".", 1)
            (opt.m if kind == "m" else opt.v)[name] = np.array(v, dtype=np.float64)
        return opt

"""Small MLP encoder with classification and projection heads.

Backprop is written out by hand. Parameters live in an ordered dict of
float64 arrays keyed by name (``enc0.W``, ``enc0.b``, ..., ``head.W``,
``proj.W``); gradients, optimizer moments and the EMA shadow use the same
keys.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import softmax

log = logging.getLogger(__name__)


class NetworkParams:
    def __init__(self, arrays, n_layers):
        self.arrays = dict(arrays)
        self.n_layers = n_layers

    @classmethod
    def init(cls, d_in, hidden, num_classes, d_proj, rng, n_layers=2, zero=False):
        widths = [d_in] + [hidden] * n_layers
        arrays = {}

        def dense(name, fan_in, fan_out):
            if zero:
                arrays[name + ".W"] = np.zeros((fan_in, fan_out))
            else:
                scale = np.sqrt(2.0 / (fan_in + fan_out))
                arrays[name + ".W"] = scale * rng.gen.standard_normal((fan_in, fan_out))
            arrays[name + ".b"] = np.zeros(fan_out)

        for i in range(n_layers):
            dense(f"enc{i}", widths[i], widths[i + 1])
        dense("head", hidden, num_classes)
        dense("proj", hidden, d_proj)
        return cls(arrays, n_layers)

    @property
    def d_in(self):
        return self.arrays["enc0.W"].shape[0]

    @property
    def num_classes(self):
        return self.arrays["head.W"].shape[1]

    @property
    def d_proj(self):
        return self.arrays["proj.W"].shape[1]

    def names(self):
        return list(self.arrays)

    def copy(self):
        return NetworkParams({k: v.copy() for k, v in self.arrays.items()}, self.n_layers)

    def __getitem__(self, name):
        return self.arrays[name]

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


@dataclass
class ForwardResult:
    logits: np.ndarray
    probs: np.ndarray
    z: np.ndarray
    cache: list = field(repr=False, default_factory=list)


def forward(params, x):
    """probs = softmax(h(f(x))), z = g(f(x)); caches activations for backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise ValueError(f"forward: expected (n, {params.d_in}) input, got {x.shape}")
    acts = [x]
    a = x
    for i in range(params.n_layers):
        a = np.tanh(a @ params[f"enc{i}.W"] + params[f"enc{i}.b"])
        acts.append(a)
    logits = a @ params["head.W"] + params["head.b"]
    z = a @ params["proj.W"] + params["proj.b"]
    return ForwardResult(logits=logits, probs=softmax(logits), z=z, cache=acts)


def backward(params, result, dlogits=None, dz=None):
    """Gradients of a scalar loss given its derivatives w.r.t. logits and z.

    Either head may be absent; the encoder receives the sum of whatever
    flows back from the heads that are present.
    """
    acts = result.cache
    feat = acts[-1]
    grads = {}
    dfeat = np.zeros_like(feat)
    if dlogits is not None:
        grads["head.W"] = feat.T @ dlogits
        grads["head.b"] = dlogits.sum(axis=0)
        dfeat += dlogits @ params["head.W"].T
    else:
        grads["head.W"] = np.zeros_like(params["head.W"])
        grads["head.b"] = np.zeros_like(params["head.b"])
    if dz is not None:
        grads["proj.W"] = feat.T @ dz
        grads["proj.b"] = dz.sum(axis=0)
        dfeat += dz @ params["proj.W"].T
    else:
        grads["proj.W"] = np.zeros_like(params["proj.W"])
        grads["proj.b"] = np.zeros_like(params["proj.b"])
    da = dfeat
    for i in reversed(range(params.n_layers)):
        out = acts[i + 1]
        dpre = da * (1.0 - out * out)
        grads[f"enc{i}.W"] = acts[i].T @ dpre
        grads[f"enc{i}.b"] = dpre.sum(axis=0)
        if i > 0:
            da = dpre @ params[f"enc{i}.W"].T
    return {k: grads[k] for k in params.names()}


def add_grads(*grad_dicts):
    out = {}
    for g in grad_dicts:
        for k, v in g.items():
            out[k] = out[k] + v if k in out else v.copy()
    return out


class OptimizerState:
    """AdamW: bias-corrected moments with decoupled weight decay."""

    def __init__(self, params, lr=1e-3, weight_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}


def backward_apply(params, optimizer, grads):
    """One AdamW step. Returns new params; a non-finite gradient skips the step."""
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.error("backward_apply: non-finite gradient at step %d, update skipped", optimizer.step)
        return params
    opt = optimizer
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    new = {}
    for k, w in params.arrays.items():
        g = grads[k]
        opt.m[k] = b1 * opt.m[k] + (1.0 - b1) * g
        opt.v[k] = b2 * opt.v[k] + (1.0 - b2) * g * g
        step = opt.lr * (opt.m[k] / c1) / (np.sqrt(opt.v[k] / c2) + opt.eps)
        new[k] = w - opt.lr * opt.weight_decay * w - step
    return NetworkParams(new, params.n_layers)


@dataclass
class EmaState:
    shadow: NetworkParams
    alpha: float = 0.999

    @classmethod
    def from_params(cls, params, alpha):
        if not 0 <= alpha < 1:
            raise ValueError("EMA momentum must lie in [0, 1)")
        return cls(shadow=params.copy(), alpha=alpha)


def ema_update(ema, params):
    """shadow <- alpha * shadow + (1 - alpha) * params, elementwise."""
    a = ema.alpha
    if set(ema.shadow.arrays) != set(params.arrays):
        raise ValueError("ema_update: parameter sets differ")
    shadow = {
        k: a * ema.shadow.arrays[k] + (1.0 - a) * params.arrays[k] for k in ema.shadow.arrays
    }
    return EmaState(shadow=NetworkParams(shadow, params.n_layers), alpha=a)

"""Small dense kernel: activations, affine layers with explicit backward,
ReLU towers, AdamW and a finite-difference gradient checker.

Arrays are plain ``numpy.ndarray``; trainable state lives in :class:`Param`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

_EXACT = False


class ConfigurationError(ValueError):
    """Raised for shape or hyperparameter mismatches."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


@contextlib.contextmanager
def exact_arithmetic(enabled: bool = True):
    """Evaluate affine products in plain left-to-right summation order.

    BLAS reorders and fuses the inner products, so its results can differ
    from a sequential loop in the last bit. Inside this context the forward
    product is accumulated one input column at a time instead.
    """
    global _EXACT
    prev, _EXACT = _EXACT, enabled
    try:
        yield
    finally:
        _EXACT = prev


@dataclass
class Param:
    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


# activations -----------------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, x):
    return dout * (x > 0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


def softmax(x, axis=-1):
    """Softmax along ``axis``; ``-inf`` entries are masked out and map to 0."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise ValueError("softmax input has no finite entry (empty support)")
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(dout, p, axis=-1):
    """Vector-Jacobian product of softmax given its output ``p``."""
    return p * (dout - np.sum(dout * p, axis=axis, keepdims=True))


# affine ----------------------------------------------------------------

def affine(x, W, b):
    """``x @ W + b`` for ``x`` of shape (batch, n)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != W.shape[0] or W.shape[1] != np.shape(b)[-1]:
        raise ConfigurationError(
            f"affine shapes do not conform: x{x.shape} W{W.shape} b{np.shape(b)}"
        )
    if not _EXACT:
        return x @ W + b
    if W.shape[0] == 0:
        return np.zeros((x.shape[0], W.shape[1])) + b
    acc = x[:, 0:1] * W[0]
    for i in range(1, W.shape[0]):
        acc = acc + x[:, i : i + 1] * W[i]
    return acc + b


def affine_backward(dout, x, W):
    """Return ``(dx, dW, db)`` for ``out = x @ W + b``."""
    return dout @ W.T, x.T @ dout, dout.sum(axis=0)


class MLP:
    """Stack of affine layers with ReLU between them; last layer is linear."""

    def __init__(self, params: list[tuple[Param, Param]]):
        self.layers = params
        self.forward_calls = 0
        self.rows_seen = 0

    @classmethod
    def init(cls, rng, widths, name="mlp"):
        layers = []
        for li, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            W = Param(glorot_uniform(rng, fan_in, fan_out), f"{name}.W{li}")
            b = Param(np.zeros(fan_out), f"{name}.b{li}")
            layers.append((W, b))
        return cls(layers)

    def parameters(self):
        for W, b in self.layers:
            yield W
            yield b

    def forward(self, x):
        """Return ``(out, cache)``; ``out`` has shape (batch, last width)."""
        self.forward_calls += 1
        self.rows_seen += len(x)
        cache = []
        h = x
        for li, (W, b) in enumerate(self.layers):
            z = affine(h, W.value, b.value)
            cache.append((h, z))
            h = relu(z) if li < len(self.layers) - 1 else z
        return h, cache

    def backward(self, dout, cache):
        """Accumulate parameter grads; return grad w.r.t. the input."""
        d = dout
        for li in range(len(self.layers) - 1, -1, -1):
            W, b = self.layers[li]
            h, z = cache[li]
            if li < len(self.layers) - 1:
                d = relu_backward(d, z)
            dx, dW, db = affine_backward(d, h, W.value)
            W.grad += dW
            b.grad += db
            d = dx
        return d


# optimizer -------------------------------------------------------------

def adamw_step(p: Param, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
    """One AdamW update with decoupled weight decay, in place."""
    if not np.all(np.isfinite(p.grad)):
        raise NonFiniteGradientError(p.name)
    b1, b2 = betas
    p.step_count += 1
    t = p.step_count
    if weight_decay:
        p.value *= 1.0 - lr * weight_decay
    p.adam_m *= b1
    p.adam_m += (1.0 - b1) * p.grad
    p.adam_v *= b2
    p.adam_v += (1.0 - b2) * p.grad * p.grad
    m_hat = p.adam_m / (1.0 - b1**t)
    v_hat = p.adam_v / (1.0 - b2**t)
    p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return p


class AdamW:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        # validate every grad before touching any value so a bad batch is atomic
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(p.name)
        for p in self.params:
            adamw_step(p, self.lr, self.betas, self.eps, self.weight_decay)


# gradient checking -----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tol: float

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def violations(self):
        return {k: v for k, v in self.max_rel_error.items() if v >= self.tol}

    @property
    def ok(self):
        return not self.violations


def grad_check(loss_fn, params, h=1e-5, tol=1e-4, analytic=None, floor=1e-8):
    """Compare analytic grads against central differences, entry by entry.

    ``loss_fn()`` must be deterministic and return a scalar for the current
    parameter values. ``analytic`` maps parameter name to gradient array; by
    default each ``Param.grad`` is taken as already populated. Relative error
    is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = list(params)
    if analytic is None:
        analytic = {p.name: p.grad.copy() for p in params}
    errors = {}
    for p in params:
        a = analytic[p.name]
        worst = 0.0
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ai = a.reshape(-1)[i]
            err = abs(ai - num) / max(abs(ai), abs(num), floor)
            worst = max(worst, err)
        errors[p.name] = worst
    return GradCheckReport(errors, tol)

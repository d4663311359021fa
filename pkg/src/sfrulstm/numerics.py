"""Dense double-precision building blocks: affine maps, activations, losses,
named parameter storage with gradient buffers, and a central-difference
gradient oracle.

Every forward helper that other modules differentiate through comes with a
matching ``*_backward``; caches are plain tuples.
"""

from __future__ import annotations

import zlib
from typing import Callable, Iterable

import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes are incompatible."""


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def affine(W, b, x) -> np.ndarray:
    """Return ``W @ x + b``.

    ``x`` may carry leading batch axes; the last axis is contracted.
    """
    W, b, x = _as_f64(W), _as_f64(b), _as_f64(x)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1:] != (W.shape[1],):
        raise ShapeError(
            f"affine: W{W.shape}, b{b.shape} incompatible with x{x.shape}")
    return x @ W.T + b


def affine_backward(dout, W, x):
    """Gradients of ``affine`` wrt (x, W, b), batch axes summed for W, b."""
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dx = dout @ W
    return dx, d2.T @ x2, d2.sum(axis=0)


def sigmoid(x):
    # split on sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0.0)


def softmax(v, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``."""
    v = _as_f64(v)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of empty input")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dp, p, axis: int = -1):
    """Vector-Jacobian product of softmax given its output ``p``."""
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


def log_softmax(v, axis: int = -1):
    v = _as_f64(v)
    shifted = v - v.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits, label) -> float:
    """``-log softmax(logits)[label]`` for a single logit vector."""
    logits = _as_f64(logits)
    if logits.ndim != 1 or logits.size == 0:
        raise ShapeError(f"cross_entropy expects a non-empty vector, got {logits.shape}")
    if not 0 <= int(label) < logits.size:
        raise ValueError(f"label {label} out of range for {logits.size} classes")
    return float(-log_softmax(logits)[int(label)])


def cross_entropy_batch(logits, labels):
    """Per-row cross entropy and its gradient wrt the logits.

    ``logits`` has shape (..., C); ``labels`` broadcasts against the leading
    axes. Returns (losses, dlogits) where dlogits is ``softmax - onehot``.
    """
    logits = _as_f64(logits)
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), logits.shape[:-1])
    C = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels out of range for {C} classes")
    lsm = log_softmax(logits)
    picked = np.take_along_axis(lsm, labels[..., None], axis=-1)[..., 0]
    grad = np.exp(lsm)
    np.put_along_axis(grad, labels[..., None],
                      np.take_along_axis(grad, labels[..., None], axis=-1) - 1.0, axis=-1)
    return -picked, grad


def mlp_forward(x, W1, b1, W2, b2):
    """One hidden rectifier layer: ``W2 relu(W1 x + b1) + b2``."""
    a = affine(W1, b1, x)
    hid = relu(a)
    return affine(W2, b2, hid), (x, a, hid, W1, W2)


def mlp_backward(dout, cache):
    """Returns (dx, dW1, db1, dW2, db2)."""
    x, a, hid, W1, W2 = cache
    dhid, dW2, db2 = affine_backward(dout, W2, hid)
    da = dhid * (a > 0)
    dx, dW1, db1 = affine_backward(da, W1, x)
    return dx, dW1, db1, dW2, db2


def dropout_mask(shape, keep: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: Bernoulli(keep) / keep."""
    if not 0.0 < keep <= 1.0:
        raise ValueError(f"keep probability must be in (0, 1], got {keep}")
    return (rng.random(shape) < keep) / keep


def rel_error(a, b) -> np.ndarray:
    """Elementwise ``|a - b| / max(1e-8, |a| + |b|)``."""
    a, b = _as_f64(a), _as_f64(b)
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


class ParamStore:
    """Named float64 tensors, each with a same-shape gradient accumulator.

    Iteration order is insertion order. Gradients accumulate additively;
    call :meth:`zero_grad` explicitly between minibatches.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def add_uniform(self, name: str, shape, fan_in: int, seed: int) -> np.ndarray:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init.

        The stream is keyed on (seed, name), so a tensor's initial value does
        not depend on which other tensors exist.
        """
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def accumulate(self, name: str, g) -> None:
        self.grads[name] += g

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, v in self.params.items():
            out.add(n, v.copy())
        return out

    def update_from(self, other: "ParamStore", names: Iterable[str] | None = None) -> None:
        """Copy values for ``names`` (default: all shared names) from ``other``."""
        for n in (names if names is not None else [n for n in other if n in self]):
            if self.params[n].shape != other.params[n].shape:
                raise ShapeError(f"{n}: {self.params[n].shape} vs {other.params[n].shape}")
            self.params[n][...] = other.params[n]

    def num_scalars(self) -> int:
        return sum(v.size for v in self.params.values())


def finite_diff_grad(f: Callable[[ParamStore], float], store: ParamStore,
                     eps: float = 1e-5, names: Iterable[str] | None = None
                     ) -> dict[str, np.ndarray]:
    """Central-difference estimate of df/dtheta for every scalar entry.

    ``f`` must be pure in the store's values. Entries are perturbed in place
    and restored afterwards.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = {}
    for n in (names if names is not None else list(store)):
        p = store[n]
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(store)
            flat[i] = orig - eps
            fm = f(store)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite objective while perturbing {n}[{i}]")
            gflat[i] = (fp - fm) / (2.0 * eps)
        out[n] = g
    return out

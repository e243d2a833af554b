"""Numeric substrate: parameter store, Adam, clipping, dropout, softmax, gradient checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

DTYPE = np.float64


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def masked_softmax(logits, mask):
    """Softmax over the last axis restricted to ``mask == 1``.

    Masked entries get exactly 0; a row whose mask is all zero returns all zeros.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    keep = np.asarray(mask) > 0
    shifted = np.where(keep, logits, -np.inf)
    row_max = shifted.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    ex = np.where(keep, np.exp(np.where(keep, logits - row_max, 0.0)), 0.0)
    total = ex.sum(axis=-1, keepdims=True)
    return np.divide(ex, total, out=np.zeros_like(ex), where=total > 0)


class ParamStore:
    """Named parameters with matching gradient buffers."""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.is_embedding: Dict[str, bool] = {}

    def add(self, name: str, value, is_embedding: bool = False) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=DTYPE)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.is_embedding[name] = is_embedding
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> List[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self.params.items():
            out.add(name, value.copy(), self.is_embedding[name])
            out.grads[name][...] = self.grads[name]
        return out

    def num_values(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class AdamState:
    lr: float = 0.0025
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for name, value in params.params.items():
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        return state


def adam_step(params: ParamStore, state: AdamState) -> None:
    """One bias-corrected Adam update, in place. Gradients are left untouched."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, value in params.params.items():
        g = params.grads[name]
        m, v = state.m[name], state.v[name]
        if not (g.shape == m.shape == v.shape == value.shape):
            raise RuntimeError(f"shape mismatch for {name}: param {value.shape}, grad {g.shape}, moment {m.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        value -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_frobenius(params: ParamStore, threshold: float, target: str = "grad") -> Dict[str, float]:
    """Rescale every non-embedding matrix whose Frobenius norm exceeds ``threshold``.

    ``target="grad"`` clips gradients (the default); ``target="weight"``
    renormalizes the parameter values themselves. Returns the scale factor
    applied per parameter name (1.0 where nothing changed).
    """
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    if target not in ("grad", "weight"):
        raise ValueError(f"unknown clip target {target!r}")
    source = params.grads if target == "grad" else params.params
    scales: Dict[str, float] = {}
    for name, arr in source.items():
        scale = 1.0
        if not params.is_embedding[name]:
            norm = float(np.sqrt(np.sum(arr * arr)))
            if norm > threshold:
                scale = threshold / norm
                arr *= scale
        scales[name] = scale
    return scales


def dropout_mask(shape, rate: float, rng) -> np.ndarray:
    """Inverted dropout: kept units are scaled by ``1/(1-rate)``.

    ``rng`` is a ``numpy.random.Generator`` or an integer seed.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=DTYPE)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = rng.random(shape) >= rate
    return keep.astype(DTYPE) / (1.0 - rate)


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def finite_diff_check(
    loss_and_grad: Callable[[ParamStore], Tuple[float, Dict[str, np.ndarray]]],
    params: ParamStore,
    eps: float = 1e-5,
    names: Optional[List[str]] = None,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_and_grad(params)`` must be deterministic and return the loss plus a
    gradient array per parameter name.
    """
    loss, analytic = loss_and_grad(params)
    if not math.isfinite(loss):
        raise FloatingPointError("loss is not finite")
    analytic = {k: np.array(v, dtype=DTYPE) for k, v in analytic.items()}
    worst = 0.0
    for name in names if names is not None else params.names():
        value = params.params[name]
        flat = value.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up, _ = loss_and_grad(params)
            flat[i] = orig - eps
            down, _ = loss_and_grad(params)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(f"loss is not finite while perturbing {name}[{i}]")
            numeric[i] = (up - down) / (2.0 * eps)
        if flat.size:
            err = float(relative_error(analytic[name].reshape(-1), numeric).max())
            worst = max(worst, err)
    return worst

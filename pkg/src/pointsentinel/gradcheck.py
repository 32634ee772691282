"""Central finite-difference gradient checks for graph functions."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad

DEFAULT_H = 1e-3
DENOM_CLAMP = 1e-6


def numeric_grad(fn: Callable[[Sequence[np.ndarray]], float], inputs: Sequence[np.ndarray], h: float = DEFAULT_H) -> list[np.ndarray]:
    """Central differences of scalar ``fn`` w.r.t. every element of ``inputs``."""
    xs = [np.array(x, dtype=np.float64) for x in inputs]
    grads = []
    for x in xs:
        g = np.zeros_like(x)
        flat, gflat = x.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(xs)
            flat[i] = orig - h
            fm = fn(xs)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, clamp: float = DENOM_CLAMP) -> float:
    """max |a - n| / max(|a|, |n|, clamp) over all elements."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), clamp)
        if a.size:
            worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def check_gradients(build: Callable[..., ad.Tensor], inputs: Sequence[np.ndarray], h: float = DEFAULT_H,
                    dtype=np.float64) -> float:
    """Compare backward() against central differences for ``build(*tensors)``.

    ``build`` maps input tensors to an output tensor; non-scalar outputs are
    contracted with a fixed random weighting so every output element matters.
    Returns the maximum relative error.
    """
    weights: dict[tuple, np.ndarray] = {}

    def scalar_of(out: ad.Tensor) -> ad.Tensor:
        if out.data.size == 1:
            return ad.reshape(out, ())
        w = weights.get(out.shape)
        if w is None:
            w = np.random.default_rng(1234).uniform(0.5, 1.5, size=out.shape)
            weights[out.shape] = w
        return ad.sum(ad.mul(out, ad.Tensor(w)))

    with ad.precision(dtype):
        ts = [ad.Tensor(np.asarray(x, dtype=dtype), requires_grad=True) for x in inputs]
        loss = scalar_of(build(*ts))
        ad.backward(loss)
        analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for t in ts]

        def f(xs):
            return scalar_of(build(*[ad.Tensor(x) for x in xs])).item()

        numeric = numeric_grad(f, inputs, h)
    return max_relative_error(analytic, numeric)

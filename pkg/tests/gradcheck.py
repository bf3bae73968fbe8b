"""Finite-difference gradient checking used across the op tests.

The oracle never touches the backward pass: it re-evaluates the forward
function with perturbed float64 inputs and compares central differences
against whatever the tape produced.
"""

import numpy as np

from kneegrade import tensor as T


def numeric_grad(f, arrays, index, h=1e-5):
    """Central-difference gradient of scalar ``f(*arrays)`` w.r.t. one input."""
    base = [a.copy() for a in arrays]
    target = base[index]
    g = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + h
        hi = f(*base)
        target[idx] = orig - h
        lo = f(*base)
        target[idx] = orig
        g[idx] = (hi - lo) / (2.0 * h)
        it.iternext()
    return g


def max_rel_error(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_param_gradients(forward, tensors, h=1e-5, tol=1e-4):
    """Gradient check against live module parameters.

    ``forward`` takes no arguments and rebuilds the loss from the current
    ``.data`` of every tensor in ``tensors`` (module parameters plus inputs).
    It must be deterministic across calls: reseed any rng it consumes.
    """
    for t in tensors:
        t.grad = None
        assert t.data.dtype == np.float64, "gradient checks need float64 tensors"
    loss = forward()
    T.backward(loss)
    worst = 0.0
    for i, t in enumerate(tensors):
        assert t.grad is not None, f"tensor {i} received no gradient"
        num = np.zeros_like(t.data)
        it = np.nditer(t.data, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = t.data[idx]
            t.data[idx] = orig + h
            hi = float(forward().data)
            t.data[idx] = orig - h
            lo = float(forward().data)
            t.data[idx] = orig
            num[idx] = (hi - lo) / (2.0 * h)
            it.iternext()
        err = max_rel_error(t.grad, num)
        assert err < tol, f"tensor {i}: max relative error {err:.3e} >= {tol:g}"
        worst = max(worst, err)
    return worst


def check_gradients(build, arrays, h=1e-5, tol=1e-4):
    """Compare tape gradients with central differences for every input.

    ``build`` maps a list of Tensors to a scalar Tensor; it is re-invoked
    from scratch for every numeric evaluation so stateful ops (dropout and
    friends) must be seeded inside it.

    Returns the worst relative error seen.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [T.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    loss = build(tensors)
    T.backward(loss)

    def forward(*vals):
        ts = [T.Tensor(v, dtype=np.float64) for v in vals]
        ts[0].requires_grad = True  # keep the graph alive without gradients mattering
        return float(build(ts).data)

    worst = 0.0
    for i, t in enumerate(tensors):
        assert t.grad is not None, f"input {i} received no gradient"
        num = numeric_grad(forward, arrays, i, h=h)
        err = max_rel_error(t.grad, num)
        assert err < tol, f"input {i}: max relative error {err:.3e} >= {tol:g}"
        worst = max(worst, err)
    return worst

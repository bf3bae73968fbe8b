"""Reverse-mode autodiff on a hand-size expression, checked against
central finite differences."""

import numpy as np

from kneegrade import tensor as T


def build(a, b):
    h = T.relu(T.linear(a, b))
    return T.add(T.reduce_sum(h), T.mean_all(a))


if __name__ == "__main__":
    rng = np.random.default_rng(0)
    a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    b = T.Tensor(rng.normal(size=(2, 4)), requires_grad=True, dtype=np.float64)

    loss = build(a, b)
    loss.backward()
    print("loss  ", loss.item())
    print("da[0] ", a.grad[0])
    print("db[0] ", b.grad[0])

    # slope check: nudge one entry both ways, compare with the tape
    h = 1e-5
    worst = 0.0
    for t in (a, b):
        it = np.nditer(t.data, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            keep = t.data[idx]
            t.data[idx] = keep + h
            hi = build(a, b).item()
            t.data[idx] = keep - h
            lo = build(a, b).item()
            t.data[idx] = keep
            num = (hi - lo) / (2 * h)
            err = abs(num - t.grad[idx]) / max(abs(num), abs(t.grad[idx]), 1e-3)
            worst = max(worst, err)
            it.iternext()
    print("worst rel err vs finite differences:", f"{worst:.2e}")
    assert worst < 1e-4

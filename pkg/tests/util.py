"""Shared test helpers: finite-difference gradient checking."""

import numpy as np


def numeric_grad(f, tensor, indices, h=1e-6):
    """Central-difference gradient of scalar-valued f at the given flat indices.

    `f` is re-evaluated from scratch on each probe, so it must be a pure
    function of the tensor contents.
    """
    flat = tensor.data.reshape(-1)
    out = np.zeros(len(indices), dtype=np.float64)
    for k, idx in enumerate(indices):
        orig = flat[idx]
        flat[idx] = orig + h
        fp = f()
        flat[idx] = orig - h
        fm = f()
        flat[idx] = orig
        out[k] = (fp - fm) / (2.0 * h)
    return out


def check_grads(f, tensor, rng, n_probe=10, rtol=1e-6, atol=1e-8, h=1e-6):
    """Compare tensor.grad (already populated) against central differences."""
    assert tensor.grad is not None, "no gradient reached this tensor"
    size = tensor.data.size
    idx = rng.choice(size, size=min(n_probe, size), replace=False)
    num = numeric_grad(f, tensor, idx, h=h)
    ana = tensor.grad.reshape(-1)[idx]
    np.testing.assert_allclose(ana, num, rtol=rtol, atol=atol)


def rel_err(a, b):
    denom = max(abs(a), abs(b), 1e-12)
    return abs(a - b) / denom

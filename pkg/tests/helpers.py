"""Shared test utilities: finite-difference oracles and checksums."""

import hashlib

import numpy as np


def central_difference(scalar_fn, array, eps=1e-5):
    """Gradient of scalar_fn() w.r.t. `array`, perturbing it in place.

    scalar_fn must recompute its value from the current contents of
    `array` on every call (float64 recommended).
    """
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = array[idx]
        array[idx] = orig + eps
        f_plus = scalar_fn()
        array[idx] = orig - eps
        f_minus = scalar_fn()
        array[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * eps)
        it.iternext()
    return grad


def relative_error(a, b):
    """Max abs difference scaled by the largest magnitude involved."""
    a = np.asarray(a)
    b = np.asarray(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_gradients(make_scalar, tensors, tol, eps=1e-5):
    """Analytic grads of make_scalar() vs central differences, per tensor.

    make_scalar builds the scalar from the tensors' current .data, so the
    same closure serves both the tape and the numeric oracle.
    """
    out = make_scalar()
    for t in tensors:
        t.grad = None
    out.backward()
    errors = {}
    for i, t in enumerate(tensors):
        numeric = central_difference(lambda: make_scalar().item(), t.data, eps=eps)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        errors[i] = relative_error(analytic, numeric)
    worst = max(errors.values())
    assert worst < tol, f"gradient mismatch: worst relative error {worst:.3e} >= {tol}"
    return worst


def param_checksum(model):
    digest = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()

"""Shared test helpers: central finite differences and gradient checking."""

import numpy as np
import pytest

from ofoh.tensor import Tensor


def finite_difference(f, arrays, eps=1e-5):
    """Central-difference gradient of scalar f(*arrays) w.r.t. each array."""
    grads = []
    for k in range(len(arrays)):
        a = arrays[k]
        g = np.zeros_like(a)
        flat, gf = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(*arrays)
            flat[i] = orig - eps
            fm = f(*arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    return float((np.abs(analytic - numeric) / denom).max())


def grad_check(make_loss, arrays, eps=1e-5):
    """Max relative error between backward() gradients and central FD.

    ``make_loss`` maps one Tensor per array to a scalar Tensor.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = make_loss(*tensors)
    loss.backward(tensors)
    analytic = [t.grad.copy() for t in tensors]

    def f(*arrs):
        return make_loss(*[Tensor(a) for a in arrs]).item()

    numeric = finite_difference(f, [a.copy() for a in arrays], eps)
    return max(max_rel_err(a, n) for a, n in zip(analytic, numeric))

"""Central finite-difference gradient checking, shared by several test modules.

The checker re-runs the forward function from scratch for every perturbed
element, so it never touches the tape machinery it is used to validate.
"""

import numpy as np

from spyglass.autodiff import Tape, backward

REL_TOL = 1e-5
FD_STEP = 1e-4


def finite_difference(fn, tensors, step=FD_STEP):
    """d fn() / d t for each tensor, by central differences on t.data."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn()
            flat[i] = orig - step
            f_minus = fn()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric):
    return np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8))


def check_gradients(build_loss, params, step=FD_STEP, tol=REL_TOL):
    """Assert analytic gradients of a scalar-valued graph match central FD.

    build_loss() must construct the forward graph from the current values in
    `params` (float64 tensors with requires_grad=True) and return the scalar
    loss tensor. Returns the worst relative error observed.
    """
    for p in params:
        assert p.data.dtype == np.float64, "gradient checks run in float64"
        p.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    backward(loss, tape)
    analytic = [p.grad.copy() for p in params]
    numeric = finite_difference(lambda: build_loss().item(), params, step=step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = max_relative_error(a, n)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return worst

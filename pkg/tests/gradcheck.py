"""Central finite-difference gradient oracle shared by the test suite."""

import numpy as np

from polyg2p.tensor import Tensor


def numeric_grad(scalar_fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar_fn() with respect to x, perturbed in place."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = scalar_fn()
        x[idx] = orig - h
        fm = scalar_fn()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    if num < 1e-8:
        # both sides are zero up to finite-difference noise
        return 0.0
    den = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return num / den


def check_op(build_scalar, inputs, tol: float = 1e-4, h: float = 1e-5) -> float:
    """Check analytic vs finite-difference gradients for every input tensor.

    ``build_scalar(*inputs)`` must return a scalar Tensor built from the given
    input Tensors; gradients are compared against central differences on each
    input's raw array.  Returns the worst relative error seen.
    """
    for t in inputs:
        t.zero_grad()
    out = build_scalar(*inputs)
    out.backward()
    worst = 0.0
    for t in inputs:
        assert t.grad is not None, "input received no gradient"
        numeric = numeric_grad(lambda: float(build_scalar(*inputs).data), t.data, h=h)
        err = rel_error(t.grad, numeric)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch: rel error {err:.3e} >= {tol}"
    return worst


def projection_loss(out: Tensor, proj: np.ndarray) -> Tensor:
    """Random fixed projection turning any output into a scalar."""
    from polyg2p import tensor as T

    return T.sum_(T.mul(out, Tensor(proj)))

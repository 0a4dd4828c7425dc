"""Shared test oracles, independent of the library's backward pass."""

import numpy as np

from crossdet.tensor import Tensor


def numeric_grad(f, x, step=1e-5):
    """Central finite differences of scalar-valued f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = f(x)
        flat[i] = old - step
        lo = f(x)
        flat[i] = old
        gf[i] = (hi - lo) / (2.0 * step)
    return g


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def gradcheck(build_loss, arrays, step=1e-5, tol=1e-4):
    """Compare backward() grads of build_loss(tensors...) against finite differences.

    ``build_loss`` receives one Tensor per input array and returns a scalar
    Tensor.  Returns the worst relative error over all inputs.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    loss.backward()

    worst = 0.0
    for i, base in enumerate(arrays):
        def f(perturbed, i=i):
            probe = [Tensor(perturbed if j == i else arrays[j]) for j in range(len(arrays))]
            return build_loss(*probe).item()

        fd = numeric_grad(f, base.copy(), step)
        ad = tensors[i].grad
        assert ad is not None, f"input {i} received no gradient"
        worst = max(worst, rel_err(ad, fd))
    assert worst < tol, f"gradient mismatch: worst rel err {worst:.3e} >= {tol}"
    return worst


def subsampled_param_gradcheck(loss_fn, params, step=1e-5, tol=1e-4, max_per_tensor=48):
    """Finite-difference check of d loss / d param for named parameter tensors.

    ``loss_fn`` recomputes the scalar loss from current parameter values (a
    fresh forward each call).  ``params`` maps name -> Tensor whose ``grad``
    holds the autodiff result.  Elements are probed on an evenly strided
    subset of at most ``max_per_tensor`` entries per tensor.
    """
    report = {}
    for name, p in params.items():
        assert p.grad is not None, f"{name} received no gradient"
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        n = flat.size
        stride = max(1, n // max_per_tensor)
        worst = 0.0
        for i in range(0, n, stride):
            old = flat[i]
            flat[i] = old + step
            hi = loss_fn()
            flat[i] = old - step
            lo = loss_fn()
            flat[i] = old
            fd = (hi - lo) / (2.0 * step)
            worst = max(worst, rel_err(gflat[i], fd))
        report[name] = worst
        assert worst < tol, f"{name}: rel err {worst:.3e} >= {tol}"
    return report

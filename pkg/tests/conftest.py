import numpy as np
import pytest

from ortho_debias import autodiff as ad


def numeric_grads(fn, arrays, h=1e-5):
    """Central differences of scalar ``fn(*tensors)`` wrt each array."""
    out = []
    for i in range(len(arrays)):

        def f(v, i=i):
            args = [ad.Tensor(v if j == i else a) for j, a in enumerate(arrays)]
            with ad.no_grad():
                return fn(*args).item()

        out.append(ad.finite_difference_gradient(f, arrays[i], h))
    return out


def analytic_grads(fn, arrays):
    ts = [ad.Tensor(a, requires_grad=True) for a in arrays]
    return [g.data for g in ad.grad(fn(*ts), ts)]


def assert_grads_match(fn, arrays, rtol=1e-5, atol=1e-7):
    for a, n in zip(analytic_grads(fn, arrays), numeric_grads(fn, arrays)):
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_wrt_tensors(f, tensors, h=1e-5):
    """Central differences of scalar ``f()`` wrt each tensor's data, perturbed in place."""
    out = []
    for t in tensors:
        g = np.zeros(t.shape)
        flat, gflat = t.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def max_rel_err(a, b, floor=1e-6):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))

"""Shared oracle utilities for the test suite.

Everything here is deliberately independent of the library's fast paths:
finite differences for gradients, direct-loop reimplementations for geometry.
"""

import numpy as np

from gssd.tensor import Tensor


def rel_err(a, b):
    """|a-b| / max(1e-8, |a|+|b|), elementwise max over arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1e-8, np.abs(a) + np.abs(b))
    return float(np.max(np.abs(a - b) / denom))


def numeric_grad(fn, tensors, eps=1e-6):
    """Central finite differences of scalar fn() w.r.t. every element of each
    tensor in `tensors`. Tensors must be float64 for the stated tolerances."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn()
            flat[i] = orig - eps
            lo = fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def numeric_grad_sampled(fn, tensor, positions, eps=1e-3):
    """Central differences at selected flat positions of a single tensor."""
    flat = tensor.data.reshape(-1)
    out = []
    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        out.append((hi - lo) / (2 * eps))
    return np.array(out)


def check_grads(build_loss, tensors, eps=1e-6, tol=1e-6):
    """Gradcheck: analytic backward vs central differences, max rel err < tol.

    build_loss() must construct the graph from the tensors' current .data and
    return the scalar loss Tensor.
    """
    for t in tensors:
        t.grad = None
    loss = build_loss()
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = numeric_grad(lambda: build_loss().item(), tensors, eps=eps)
    worst = max(rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, f"gradcheck failed: max rel err {worst:.3e} >= {tol}"
    return worst


def conv2d_naive(x, w, bias=None, stride=1, padding=0):
    """Direct-loop ungrouped cross-correlation oracle (slow, small inputs only)."""
    n, c, h, ww = x.shape
    f, cin, kh, kw = w.shape
    assert cin == c
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (ww + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo), dtype=np.float64)
    for b in range(n):
        for of in range(f):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, of, i, j] = np.sum(patch * w[of])
            if bias is not None:
                out[b, of] += bias[of]
    return out


def param_tensor(rng, shape, scale=1.0):
    t = Tensor(rng.standard_normal(shape) * scale, requires_grad=True)
    return t

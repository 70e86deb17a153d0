"""Central finite-difference oracle used across the gradient tests.

Independent of the tape: it only calls the forward function, perturbing
one input coordinate at a time with a two-sided stencil (h=1e-3, float64).
"""

import numpy as np


def numeric_grad(fn, arrays, h=1e-3):
    """d fn / d arrays via central differences; fn maps arrays -> scalar."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = base.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = fn(arrays)
            flat[i] = keep - h
            dn = fn(arrays)
            flat[i] = keep
            gf[i] = (up - dn) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-3):
    """Worst-case relative disagreement, floored so near-zero grads compare sanely."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check_grads(fn, tensors, h=1e-3):
    """Run fn on tape tensors, backprop, and compare against the stencil."""
    out = fn(tensors)
    for t in tensors:
        t.zero_grad()
    out.backward()
    analytic = [t.grad.astype(np.float64).copy() for t in tensors]

    def forward_only(arrays):
        return float(fn(tensors).data)

    numeric = numeric_grad(forward_only, [t.data for t in tensors], h=h)
    return max_rel_error(analytic, numeric)

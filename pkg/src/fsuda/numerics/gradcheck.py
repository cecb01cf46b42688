"""Central-difference verification of autodiff gradients."""

import numpy as np

from . import tensor as _t


def gradient_check(f, params, step=1e-3):
    """Largest relative error between autodiff and central-difference gradients.

    ``f`` takes no arguments and returns a scalar :class:`Tensor` built from
    ``params``. Relative error per coordinate is
    ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``. Must run in 64-bit mode.
    """
    params = list(params)
    if _t.get_dtype() is not np.float64 or any(p.dtype != np.float64 for p in params):
        raise ValueError("gradient_check requires 64-bit verification mode")

    def evaluate():
        value = float(np.asarray(f().data).reshape(()))
        if not np.isfinite(value):
            raise FloatingPointError("gradient_check: loss is not finite")
        return value

    for p in params:
        p.grad = None
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("gradient_check: loss is not finite")
    loss.backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, g_ad in zip(params, analytic):
        flat = p.data.reshape(-1)
        g_flat = g_ad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = evaluate()
            flat[i] = orig - step
            down = evaluate()
            flat[i] = orig
            g_fd = (up - down) / (2 * step)
            err = abs(g_flat[i] - g_fd) / max(1.0, abs(g_flat[i]), abs(g_fd))
            worst = max(worst, err)
    return worst

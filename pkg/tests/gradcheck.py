"""Central finite differences against the tape's analytic gradients."""

import numpy as np

from jointseg import dense
from jointseg.autodiff import Tape, Tensor


def project(out, weights):
    """Scalar <out, weights> so any tensor output can be checked."""
    return dense.total(dense.mul(out, Tensor(weights)))


def relative_error(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)), initial=0.0))


def check_gradients(fn, inputs, eps=1e-6, entries=None, rng=None):
    """
    ``fn(*tensors)`` returns a scalar tensor. Returns the worst relative error over
    every entry of every input (or ``entries`` random entries per input).
    """
    tensors = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    with Tape() as tape:
        loss = fn(*tensors)
        tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if entries is not None and flat.size > entries:
            idx = rng.choice(flat.size, size=entries, replace=False)
        numeric = np.zeros(len(idx))
        for n, i in enumerate(idx):
            keep = flat[i]
            flat[i] = keep + eps
            up = fn(*tensors).item()
            flat[i] = keep - eps
            down = fn(*tensors).item()
            flat[i] = keep
            numeric[n] = (up - down) / (2 * eps)
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], numeric))
    return worst

"""Central finite-difference gradient checking for scalar probes.

Run modules in float64 before checking; the probes compare analytic
autograd gradients against (f(w+eps) - f(w-eps)) / 2eps at sampled
coordinates, so float32 roundoff would swamp the comparison.
"""

import numpy as np
import torch


def central_difference(fn, tensor, flat_index, eps):
    """d fn / d tensor[flat_index] by central differences. fn() -> scalar tensor."""
    flat = tensor.reshape(-1)
    orig = flat[flat_index].item()
    with torch.no_grad():
        flat[flat_index] = orig + eps
        hi = float(fn())
        flat[flat_index] = orig - eps
        lo = float(fn())
        flat[flat_index] = orig
    return (hi - lo) / (2.0 * eps)


def check_gradients(fn, tensors, n_probes=10, eps=1e-6, rng=None, floor=1e-7):
    """Compare autograd and finite-difference gradients at random coords.

    Returns the largest relative error over the probes. Coordinates
    where both gradients sit below `floor` are skipped (their relative
    error is all roundoff); a replacement coordinate is drawn.
    """
    rng = rng or np.random.default_rng(0)
    tensors = list(tensors)
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    loss = fn()
    loss.backward()
    grads = [t.grad.detach().clone() for t in tensors]

    worst = 0.0
    done = 0
    attempts = 0
    while done < n_probes and attempts < 20 * n_probes:
        attempts += 1
        ti = int(rng.integers(len(tensors)))
        fi = int(rng.integers(tensors[ti].numel()))
        analytic = float(grads[ti].reshape(-1)[fi])
        numeric = central_difference(fn, tensors[ti].data, fi, eps)
        scale = max(abs(analytic), abs(numeric))
        if scale < floor:
            continue
        worst = max(worst, abs(analytic - numeric) / scale)
        done += 1
    if done == 0:
        raise RuntimeError("no probe found a coordinate with non-negligible gradient")
    return worst

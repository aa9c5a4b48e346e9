"""Shared test oracles."""

import numpy as np
import torch


def fd_check_parameters(model, loss_fn, count=10, seed=0, h=1e-6, min_grad=1e-7):
    """Worst relative error between analytic and central-difference gradients.

    Samples ``count`` scalar parameters whose analytic gradient is not
    negligible (a zero gradient gives no information about correctness).
    """
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss_fn().backward()
    grads = [p.grad.detach().clone() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    tries = 0
    while checked < count:
        tries += 1
        if tries > 5000:
            raise AssertionError("could not find enough parameters with non-negligible gradient")
        k = int(rng.integers(len(params)))
        p = params[k]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = float(grads[k][idx])
        if abs(analytic) < min_grad:
            continue
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = float(loss_fn())
            p[idx] = orig - h
            down = float(loss_fn())
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
        checked += 1
    return worst

"""Central finite-difference verification of autograd gradients.

The model under test supplies analytic gradients via backward(); this module
recomputes them coordinate by coordinate with central differences and compares
at a relative tolerance.  Run everything in float64.
"""
from __future__ import annotations

import torch

FD_STEP = 1e-4
REL_TOL = 1e-3
ABS_FLOOR = 1e-6


def central_difference(fn, leaf, index, step=FD_STEP):
    """d fn / d leaf[index] via (f(x+h) - f(x-h)) / 2h, restoring the leaf."""
    coord = torch.unravel_index(torch.tensor(index), leaf.shape)
    with torch.no_grad():
        orig = leaf[coord].item()
        leaf[coord] = orig + step
        plus = float(fn())
        leaf[coord] = orig - step
        minus = float(fn())
        leaf[coord] = orig
    return (plus - minus) / (2.0 * step)


def check_gradients(fn, leaves, *, step=FD_STEP, rel_tol=REL_TOL,
                    abs_floor=ABS_FLOOR, max_coords_per_leaf=None, generator=None):
    """Compare autograd gradients of scalar ``fn()`` against central differences.

    leaves: iterable of (name, tensor) with requires_grad True.  When
    ``max_coords_per_leaf`` is set, a seeded subset of coordinates is checked
    in each tensor (used for the end-to-end pass where full Jacobians are
    too slow).  Returns the number of coordinates checked; raises
    AssertionError on the first mismatch.
    """
    leaves = list(leaves)
    for _, t in leaves:
        if t.grad is not None:
            t.grad = None
    out = fn()
    if out.dim() != 0:
        raise ValueError("check_gradients expects a scalar objective")
    out.backward()
    analytic = {}
    for name, t in leaves:
        analytic[name] = torch.zeros_like(t) if t.grad is None else t.grad.detach().clone()

    checked = 0
    for name, t in leaves:
        n = t.numel()
        if max_coords_per_leaf is not None and n > max_coords_per_leaf:
            idx = torch.randperm(n, generator=generator)[:max_coords_per_leaf].tolist()
        else:
            idx = range(n)
        flat = analytic[name].reshape(-1)
        for i in idx:
            fd = central_difference(fn, t, i, step=step)
            an = flat[i].item()
            scale = max(abs(an), abs(fd), abs_floor)
            if abs(an - fd) > rel_tol * scale:
                raise AssertionError(
                    f"gradient mismatch at {name}[{i}]: analytic {an:.8g}, finite-diff {fd:.8g}")
            checked += 1
    return checked


def module_leaves(module, prefix=""):
    """Named parameters of a module as (name, tensor) pairs for check_gradients."""
    return [(prefix + n, p) for n, p in module.named_parameters() if p.requires_grad]

"""Central finite-difference gradient checking.

This is the independent oracle for every differentiable operation: it
re-evaluates the loss as a black box and never touches the reverse-mode
machinery, so agreement between the two is meaningful evidence.
"""

from __future__ import annotations

import numpy as np

from .autodiff import KinkMonitor, Tensor

__all__ = ["finite_difference_gradient", "max_relative_error", "check_gradients"]

# central differences at h=1e-5 balance truncation against float64 rounding
DEFAULT_H = 1e-5
DEFAULT_RTOL = 1e-4


def finite_difference_gradient(f, x: np.ndarray, h: float = DEFAULT_H) -> np.ndarray:
    """d f / d x elementwise via (f(x+h) - f(x-h)) / 2h."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a-n| / max(|a|, |n|, 1); the unit floor keeps near-zero
    gradients from inflating the ratio past what h=1e-5 can resolve."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(build_loss, leaves, rng, probes: int = 50,
                    h: float = DEFAULT_H, rtol: float = DEFAULT_RTOL,
                    kink_margin: float = 1e-6, max_redraws: int = 20,
                    redraw=None) -> float:
    """Compare reverse-mode gradients of ``build_loss(leaves)`` with
    central differences on ``probes`` randomly chosen leaf entries.

    ``build_loss`` must return a scalar Tensor and be a pure function of
    the leaf values. If a forward pass lands within ``kink_margin`` of a
    relu/max/sort kink, ``redraw(rng)`` is called to resample the leaves
    and the attempt is repeated (the kink set has measure zero).

    Returns the worst relative error seen; raises AssertionError if it
    exceeds ``rtol``.
    """
    leaves = list(leaves)
    for attempt in range(max_redraws + 1):
        with KinkMonitor() as mon:
            loss = build_loss()
        if mon.margin >= kink_margin:
            break
        if redraw is None or attempt == max_redraws:
            raise RuntimeError(
                f"forward pass stuck near a kink (margin {mon.margin:.2e})")
        redraw(rng)
    for leaf in leaves:
        leaf.zero_grad()
    loss.backward()

    entries = []
    for li, leaf in enumerate(leaves):
        for j in range(leaf.data.size):
            entries.append((li, j))
    take = min(probes, len(entries))
    chosen = [entries[i] for i in rng.choice(len(entries), size=take, replace=False)]

    worst = 0.0
    for li, j in chosen:
        leaf = leaves[li]
        flat = leaf.data.ravel()
        orig = flat[j]
        flat[j] = orig + h
        fp = build_loss().item()
        flat[j] = orig - h
        fm = build_loss().item()
        flat[j] = orig
        numeric = (fp - fm) / (2.0 * h)
        analytic = 0.0 if leaf.grad is None else leaf.grad.ravel()[j]
        err = max_relative_error(np.array(analytic), np.array(numeric))
        worst = max(worst, err)
    if worst >= rtol:
        raise AssertionError(
            f"gradient check failed: max relative error {worst:.3e} >= {rtol:.0e}")
    return worst

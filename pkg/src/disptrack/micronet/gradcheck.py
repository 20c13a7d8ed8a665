"""Central-difference verification of analytic gradients.

The closure under test maps a parameter dict to (scalar loss, gradient dict).
Probed entries are chosen uniformly at random over all scalar parameters with
a seeded generator, so a given check is reproducible.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

LossFn = Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]]


def gradient_check(loss_fn: LossFn, params: dict[str, np.ndarray],
                   probe_count: int = 50, epsilon: float = 1e-5,
                   seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per probe is |g_a - g_n| / max(|g_a|, |g_n|, 1e-8).
    Raises ValueError if any evaluated loss is non-finite.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be at least 1")
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")

    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise ValueError("loss is non-finite at the evaluation point")

    keys = sorted(params)
    sizes = np.array([params[k].size for k in keys])
    total = int(sizes.sum())
    if total == 0:
        raise ValueError("no parameters to probe")
    rng = np.random.default_rng(seed)
    flat_choices = rng.choice(total, size=min(probe_count, total), replace=False)
    offsets = np.cumsum(sizes) - sizes

    worst = 0.0
    for flat in flat_choices:
        key_idx = int(np.searchsorted(offsets, flat, side="right") - 1)
        key = keys[key_idx]
        local = int(flat - offsets[key_idx])
        idx = np.unravel_index(local, params[key].shape)

        def perturbed(delta):
            trial = {k: (v.copy() if k == key else v) for k, v in params.items()}
            trial[key][idx] += delta
            value, _ = loss_fn(trial)
            if not np.isfinite(value):
                raise ValueError("loss is non-finite at a probe point")
            return value

        numeric = (perturbed(epsilon) - perturbed(-epsilon)) / (2.0 * epsilon)
        analytic = float(grads[key][idx])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst

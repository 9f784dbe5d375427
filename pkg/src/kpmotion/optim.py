"""SGD with momentum and optional global-norm clipping, shared by both stages."""

from __future__ import annotations

import numpy as np

from kpmotion.autograd import Tensor


def clip_scale(grads: dict[str, np.ndarray], clip_norm: float | None) -> float:
    """Factor that brings the global gradient norm down to ``clip_norm``."""
    if not clip_norm:
        return 1.0
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    return 1.0 if norm <= clip_norm else clip_norm / norm


def sgd_momentum(params: dict[str, np.ndarray], velocity: dict[str, np.ndarray],
                 tensors: dict[str, Tensor], lr: float, momentum: float = 0.9,
                 clip_norm: float | None = None) -> list[str]:
    """Apply ``v = m v + g; p -= lr v`` in place; returns names of non-finite params.

    Keys iterate in sorted order so updates do not depend on dict construction.
    """
    grads = {k: (tensors[k].grad if tensors[k].grad is not None
                 else np.zeros_like(tensors[k].data)) for k in sorted(tensors)}
    scale = clip_scale(grads, clip_norm)
    bad = []
    for k, g in grads.items():
        v = velocity[k]
        v *= momentum
        v += scale * g
        params[k] = params[k] - lr * v
        if not np.all(np.isfinite(params[k])):
            bad.append(k)
    return bad

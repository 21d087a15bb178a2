"""SGD with optional momentum on local parameter shards."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def scaled_lr(base_lr: float, global_batch: int, reference_batch: int) -> float:
    """base_lr * sqrt(global_batch / reference_batch)."""
    if global_batch < 1 or reference_batch < 1:
        raise ValueError("batch sizes must be positive")
    return base_lr * math.sqrt(global_batch / reference_batch)


def schedule_factor(kind: str, step: int, total_steps: int) -> float:
    """lr multiplier for 0-based ``step``; linear decays to 1/total at the last step."""
    if kind == "constant":
        return 1.0
    if kind == "linear":
        if total_steps < 1:
            raise ValueError("linear schedule needs a positive step count")
        return max(total_steps - step, 1) / total_steps
    raise ValueError(f"unknown lr schedule {kind!r}")


@dataclass
class SGD:
    lr: float
    momentum: float = 0.0

    def update(self, param: np.ndarray, grad: np.ndarray, buf: np.ndarray | None = None):
        """Return (new param, new momentum buffer); arithmetic stays in the param dtype."""
        dt = param.dtype
        g = grad.astype(dt, copy=False)
        if self.momentum:
            buf = g.copy() if buf is None else dt.type(self.momentum) * buf + g
            step = buf
        else:
            step = g
        return param - dt.type(self.lr) * step, buf


def all_finite(grads) -> bool:
    return all(bool(np.all(np.isfinite(g))) for g in grads)

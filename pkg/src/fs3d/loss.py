"""Multi-task loss with per-task z-score soft-threshold weighting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class MissingLabelError(ValueError):
    pass


@dataclass
class TaskLossConfig:
    w_energy: float = 1.0
    w_force: float = 10.0
    w_stress: float = 0.1
    w_magmom: float = 1.0
    kind: str = "l1"
    delta: float = 1.0
    tau: float = 2.0
    kappa: float = 4.0
    floor: float = 1e-8

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if min(self.w_energy, self.w_force, self.w_stress, self.w_magmom) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.kind not in ("l1", "huber"):
            raise ValueError(f"unknown base loss {self.kind!r}")
        if self.kind == "huber" and not self.delta > 0:
            raise ValueError("huber delta must be positive")


def elementwise(err: Tensor, cfg: TaskLossConfig) -> Tensor:
    """l(err) applied per element."""
    a = T.abs_(err)
    if cfg.kind == "l1":
        return a
    quad = np.abs(err.data) <= cfg.delta
    m = T.Tensor(quad.astype(err.dtype))
    lin = T.Tensor((~quad).astype(err.dtype))
    return m * (err * err * 0.5) + lin * ((a - 0.5 * cfg.delta) * cfg.delta)


def elementwise_np(err, cfg: TaskLossConfig) -> np.ndarray:
    err = np.asarray(err, dtype=np.float64)
    a = np.abs(err)
    if cfg.kind == "l1":
        return a
    return np.where(a <= cfg.delta, 0.5 * err * err, cfg.delta * (a - 0.5 * cfg.delta))


def base_loss(pred: dict, label: dict, cfg: TaskLossConfig) -> float:
    """L_i for one sample from plain arrays.

    ``pred``/``label`` hold ``energy`` (scalar), ``forces`` (N x 3), ``stress``
    (3 x 3) and ``magmoms`` (N). Components with zero weight, or optional
    components without a label, are skipped.
    """
    total = 0.0
    n = None
    if "forces" in pred and pred["forces"] is not None:
        n = len(pred["forces"])
    if cfg.w_energy > 0:
        if label.get("energy") is None:
            raise MissingLabelError("energy label required")
        n = n or label.get("n_atoms") or 1
        total += cfg.w_energy * float(elementwise_np(pred["energy"] - label["energy"], cfg)) / n
    if cfg.w_force > 0 and pred.get("forces") is not None:
        if label.get("forces") is None:
            raise MissingLabelError("force label required")
        total += cfg.w_force * float(elementwise_np(pred["forces"] - label["forces"], cfg).mean())
    if cfg.w_stress > 0 and pred.get("stress") is not None and label.get("stress") is not None:
        total += cfg.w_stress * float(elementwise_np(pred["stress"] - label["stress"], cfg).mean())
    if cfg.w_magmom > 0 and pred.get("magmoms") is not None and label.get("magmoms") is not None:
        total += cfg.w_magmom * float(elementwise_np(pred["magmoms"] - label["magmoms"], cfg).mean())
    return total


def logistic(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def soft_threshold(z, tau=2.0, kappa=4.0):
    """W(z) = 1 - logistic(kappa (z - tau)), evaluated as logistic(kappa (tau - z))
    so the tail z >> tau keeps full relative precision."""
    return logistic(kappa * (tau - np.asarray(z, dtype=np.float64)))


@dataclass
class BatchLossStats:
    mean: dict
    std: dict
    z: np.ndarray


def batch_stats(losses, tasks, cfg: TaskLossConfig) -> BatchLossStats:
    losses = np.asarray(losses, dtype=np.float64)
    tasks = np.asarray(tasks)
    z = np.zeros_like(losses)
    mean, std = {}, {}
    for t in np.unique(tasks):
        sel = tasks == t
        mu = float(losses[sel].mean())
        sd = max(float(losses[sel].std()), cfg.floor)
        mean[int(t)], std[int(t)] = mu, sd
        z[sel] = (losses[sel] - mu) / sd
    return BatchLossStats(mean, std, z)


def robust_weights(losses, tasks, cfg: TaskLossConfig) -> np.ndarray:
    """Per-sample W^2; samples of tasks with fewer than two members get 1."""
    losses = np.asarray(losses, dtype=np.float64)
    tasks = np.asarray(tasks)
    st = batch_stats(losses, tasks, cfg)
    w = soft_threshold(st.z, cfg.tau, cfg.kappa)
    for t in np.unique(tasks):
        sel = tasks == t
        if sel.sum() < 2:
            w[sel] = 1.0
    return w * w


def robust_loss(losses, tasks, cfg: TaskLossConfig) -> float:
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("empty batch")
    return float(np.mean(robust_weights(losses, tasks, cfg) * losses))


# ---------------------------------------------------------------------------
# differentiable form used in training


@dataclass
class LossTerms:
    """Per-configuration component losses as (configs, 1) tensors."""

    energy: Tensor | None
    force: Tensor | None
    stress: Tensor | None
    magmom: Tensor | None

    def values(self) -> dict[str, np.ndarray]:
        out = {}
        for k in ("energy", "force", "stress", "magmom"):
            t = getattr(self, k)
            if t is not None:
                out[k] = t.data.reshape(-1).astype(np.float64)
        return out


def weighted_split(terms: LossTerms, tasks, cfg: TaskLossConfig):
    """Robust loss split into (force+stress part, energy+magmom part).

    The two parts sum to the robust loss; the weights W^2 are computed from
    the detached per-sample totals.
    """
    w = {"energy": cfg.w_energy, "force": cfg.w_force, "stress": cfg.w_stress, "magmom": cfg.w_magmom}
    vals = terms.values()
    n = len(tasks)
    totals = np.zeros(n)
    for k, v in vals.items():
        totals += w[k] * v
    ww = robust_weights(totals, tasks, cfg)

    def part(keys):
        out = None
        for k in keys:
            t = getattr(terms, k)
            if t is None or w[k] == 0:
                continue
            coef = T.Tensor((ww * w[k] / n).reshape(-1, 1).astype(t.dtype))
            s = T.sum_(t * coef)
            out = s if out is None else out + s
        return out

    return part(("force", "stress")), part(("energy", "magmom")), totals, ww

"""Loss primitives; each returns ``(value, gradient w.r.t. the prediction)``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cmsc.errors import ContractError
from cmsc.nn import sigmoid

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


def _log_sigmoid(z: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -z)


def focal_cls_loss(logits: np.ndarray, targets: np.ndarray, *, alpha: float = FOCAL_ALPHA,
                   gamma: float = FOCAL_GAMMA) -> tuple[float, np.ndarray]:
    """Sigmoid focal loss averaged over every cell."""
    if logits.shape != targets.shape:
        msg = f"focal loss: logits {logits.shape} vs targets {targets.shape}"
        raise ContractError(msg)
    s = 2.0 * targets - 1.0
    z = s * logits
    pt = sigmoid(z)
    log_pt = _log_sigmoid(z)
    a_t = np.where(targets > 0.5, alpha, 1.0 - alpha)
    one_minus = 1.0 - pt
    loss = -a_t * one_minus ** gamma * log_pt
    grad = -a_t * s * (one_minus ** (gamma + 1.0) - gamma * one_minus ** gamma * pt * log_pt)
    n = logits.size
    return float(loss.sum() / n), grad / n


def smooth_l1(x: np.ndarray, delta: float = 1.0) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < delta, 0.5 * x * x / delta, ax - 0.5 * delta)


def smooth_l1_reg_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray, *,
                       delta: float = 1.0) -> tuple[float, np.ndarray]:
    """Smooth-L1 averaged over the positive cells and the regression dims (0 if none)."""
    mask = np.asarray(mask, dtype=bool)
    npos = int(mask.sum())
    grad = np.zeros_like(pred)
    if npos == 0:
        return 0.0, grad
    diff = (pred - target) * mask[..., None]
    denom = npos * pred.shape[-1]
    value = float(smooth_l1(diff, delta).sum() / denom)
    grad = np.clip(diff / delta, -1.0, 1.0) / denom
    return value, grad


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


@dataclass
class LossReport:
    total: float
    components: dict[str, float]
    weights: dict[str, float] = field(default_factory=dict)
    stage: str = ""
    step: int = 0

    def weighted_sum(self) -> float:
        return float(sum(self.weights.get(k, 1.0) * v for k, v in self.components.items()))

    def check(self, tol: float = 1e-9) -> None:
        if abs(self.total - self.weighted_sum()) > tol * max(1.0, abs(self.total)):
            msg = f"loss report total {self.total} != weighted sum {self.weighted_sum()}"
            raise ContractError(msg)


def compose(components: dict[str, float], weights: dict[str, float], stage: str = "",
            step: int = 0) -> LossReport:
    total = float(sum(weights.get(k, 1.0) * v for k, v in components.items()))
    return LossReport(total, dict(components), dict(weights), stage, step)

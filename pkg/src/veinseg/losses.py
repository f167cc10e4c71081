"""Segmentation losses on two-class logits.

All pixel losses are averaged over pixels (and batch) so their scale does not
depend on image resolution. Channel 1 is the vein (foreground) class.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _result, _accumulate, log_softmax_channels, softmax_channels

__all__ = ["LossWeights", "bce_loss", "focal_loss", "consistency_mse", "total_loss", "ramp_weight"]


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    M: int = 1
    N: int = 0
    gamma: float = 2.0
    alpha: float = 0.25

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be nonnegative")
        if self.M < 0 or self.N < 0:
            raise ValueError("M and N must be nonnegative")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")


def _check_target(logits: Tensor, target) -> np.ndarray:
    t = np.asarray(target)
    if logits.data.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"logits must be (B, 2, H, W), got {logits.shape}")
    if t.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"target shape {t.shape} does not match logits {logits.shape}")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("target values must be 0 or 1")
    return t.astype(np.intp)


def _pick_true_class(logp: Tensor, t: np.ndarray) -> Tensor:
    """log p_t per pixel, shape (B, H, W)."""
    idx = t[:, None]
    out = np.take_along_axis(logp.data, idx, axis=1)[:, 0]

    def backward(g: np.ndarray) -> None:
        full = np.zeros(logp.shape, dtype=g.dtype)
        np.put_along_axis(full, idx, g[:, None], axis=1)
        _accumulate(logp, full)

    return _result(out, [logp], backward, "pick")


def _mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(g / n, x.shape))

    return _result(out, [x], backward, "mean")


def bce_loss(logits: Tensor, target_mask) -> Tensor:
    """Mean two-class cross-entropy of the softmaxed logits."""
    t = _check_target(logits, target_mask)
    logpt = _pick_true_class(log_softmax_channels(logits), t)
    return _mean(logpt) * -1.0


def focal_loss(logits: Tensor, target_mask, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Mean of ``-alpha (1 - p_t)^gamma log p_t`` over pixels.

    ``alpha`` is a uniform weight (class imbalance is handled by the
    modulating factor), so ``gamma=0, alpha=1`` is exactly :func:`bce_loss`.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    t = _check_target(logits, target_mask)
    logpt = _pick_true_class(log_softmax_channels(logits), t)
    lp = logpt.data
    pt = np.exp(lp)
    at = lp.dtype.type(alpha)
    one_m = np.clip(1.0 - pt, 0.0, None)
    mod = one_m ** gamma
    per_pixel = -at * mod * lp

    def backward(g: np.ndarray) -> None:
        # d/dlp of -(1-e^lp)^gamma * lp
        if gamma == 0:
            dmod = 0.0
        else:
            dmod = -gamma * one_m ** (gamma - 1) * pt
        _accumulate(logpt, g * (-at) * (mod + dmod * lp))

    return _mean(_result(per_pixel, [logpt], backward, "focal"))


def consistency_mse(student_probs: Tensor, teacher_probs) -> Tensor:
    """Mean squared difference; the teacher side is a constant target."""
    s = student_probs
    tp = np.asarray(teacher_probs.data if isinstance(teacher_probs, Tensor) else teacher_probs)
    if s.shape != tp.shape:
        raise ShapeError(f"shape mismatch {s.shape} vs {tp.shape}")
    diff = s.data - tp.astype(s.dtype)
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=s.dtype)

    def backward(g: np.ndarray) -> None:
        _accumulate(s, g * 2.0 * diff / n)

    return _result(out, [s], backward, "mse")


def total_loss(L_sup, L_semisup, w: LossWeights):
    """``(lambda1 * M * L_sup + lambda2 * N * L_semisup) / (M + N)``.

    Works on floats or scalar Tensors.
    """
    if w.M + w.N <= 0:
        raise ValueError("M + N must be positive")
    denom = float(w.M + w.N)
    if not (isinstance(L_sup, Tensor) or isinstance(L_semisup, Tensor)):
        return (w.lambda1 * w.M * L_sup + w.lambda2 * w.N * L_semisup) / denom
    a = w.lambda1 * w.M / denom
    b = w.lambda2 * w.N / denom
    out = None
    const = 0.0
    for value, coef in ((L_sup, a), (L_semisup, b)):
        if isinstance(value, Tensor):
            out = value * coef if out is None else out + value * coef
        else:
            const += coef * value
    return out + const if const else out


def ramp_weight(step: int, total_steps: int, target: float, fraction: float = 0.1) -> float:
    """Linear ramp from 0 to ``target`` over the first ``fraction`` of steps."""
    ramp = int(round(fraction * total_steps))
    if ramp <= 0 or step >= ramp:
        return float(target)
    return float(target) * (step + 1) / ramp


def foreground_probs(logits: Tensor) -> Tensor:
    return softmax_channels(logits)

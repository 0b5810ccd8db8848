"""Student objective terms and the consistency ramp-up.

Every ``*_and_grad`` function returns ``(value, d value / d pred)`` so the
trainer can feed the pixel gradient straight into :func:`segnet.backward`.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidConfig, InvalidInput
from .slices import check_binary

ENTROPY_CLAMP = 1e-7


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInput(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def dice_loss_and_grad(pred, gt, eps=1e-6):
    """1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)."""
    p, g = _pair(pred, gt)
    g = check_binary(g, "ground truth").astype(np.float64)
    num = 2.0 * np.sum(p * g) + eps
    den = np.sum(p) + np.sum(g) + eps
    if den == 0:
        # empty prediction and mask with eps = 0: perfect agreement
        return 0.0, np.zeros_like(p)
    grad = -(2.0 * g * den - num) / den**2
    return float(1.0 - num / den), grad


def dice_loss(pred, gt, eps=1e-6) -> float:
    return dice_loss_and_grad(pred, gt, eps)[0]


def consistency_loss_and_grad(student_pred, teacher_pred_warped, reduction="mean"):
    """Squared residual; the teacher side is a constant, so only one gradient is returned."""
    a, b = _pair(student_pred, teacher_pred_warped)
    r = a - b
    if reduction == "sum":
        return float(np.sum(r * r)), 2.0 * r
    if reduction == "mean":
        return float(np.mean(r * r)), 2.0 * r / r.size
    raise InvalidConfig(f"unknown reduction {reduction!r}")


def consistency_loss(student_pred, teacher_pred_warped, reduction="mean") -> float:
    return consistency_loss_and_grad(student_pred, teacher_pred_warped, reduction)[0]


def entropy_loss_and_grad(pred, form="binary_full"):
    """Pixel-mean entropy of a probability map clamped to [1e-7, 1 - 1e-7].

    ``binary_full`` counts both classes; ``positive_only`` keeps just the
    -p log p term. The gradient is zero wherever the clamp is active.
    """
    p = np.asarray(pred, dtype=np.float64)
    q = np.clip(p, ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP)
    inside = (p >= ENTROPY_CLAMP) & (p <= 1.0 - ENTROPY_CLAMP)
    n = p.size
    if form == "binary_full":
        h = -(q * np.log(q) + (1 - q) * np.log1p(-q))
        grad = np.log1p(-q) - np.log(q)
    elif form == "positive_only":
        h = -q * np.log(q)
        grad = -(np.log(q) + 1.0)
    else:
        raise InvalidConfig(f"unknown entropy form {form!r}")
    return float(max(np.mean(h), 0.0)), np.where(inside, grad / n, 0.0)


def entropy_loss(pred, form="binary_full") -> float:
    return entropy_loss_and_grad(pred, form)[0]


def lambda_schedule(p: float, lambda_max: float = 1.5, ramp_coeff: float = 5.0) -> float:
    """Sigmoid-shaped ramp-up lambda_max * exp(-ramp_coeff * (1 - p)^2)."""
    if not 0.0 <= p <= 1.0:
        raise InvalidConfig(f"progress must be in [0, 1], got {p}")
    return lambda_max * math.exp(-ramp_coeff * (1.0 - p) ** 2)

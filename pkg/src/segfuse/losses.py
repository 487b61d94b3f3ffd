"""Loss functions with analytic gradients.

Each loss returns a :class:`LossValue` holding the value and the gradient
with respect to the loss input, so external training code can be checked
against these numbers.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .geometry import iou_3d


@dataclass
class LossValue:
    value: object
    grad: object = None


def focal_loss(p, alpha=0.25, gamma=2.0):
    """-alpha * (1 - p)**gamma * ln p, elementwise in ``p``."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0) or np.any(p > 1):
        raise DomainError("focal loss needs 0 < p <= 1")
    if alpha < 0 or gamma < 0:
        raise DomainError("alpha and gamma must be non-negative")
    q = 1.0 - p
    logp = np.log(p)
    value = -alpha * q**gamma * logp
    if gamma == 0:
        focus = np.zeros_like(p)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            focus = np.where(q > 0, gamma * q ** (gamma - 1.0) * logp, 0.0)
    grad = alpha * focus - alpha * q**gamma / p
    return LossValue(_scalar(value), _scalar(grad))


def smooth_l1(residual, beta=1.0):
    if beta <= 0:
        raise DomainError("beta must be positive")
    r = np.asarray(residual, dtype=np.float64)
    a = np.abs(r)
    quad = a < beta
    value = np.where(quad, 0.5 * r * r / beta, a - 0.5 * beta)
    grad = np.where(quad, r / beta, np.sign(r))
    return LossValue(_scalar(value), _scalar(grad))


def weighted_cross_entropy(probs, target, weights=None):
    """-w[t] * ln probs[t] for a single probability vector."""
    probs = np.asarray(probs, dtype=np.float64)
    k = probs.shape[-1]
    if not 0 <= target < k:
        raise DomainError(f"target {target} outside [0, {k})")
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    pt = probs[target]
    if pt <= 0:
        raise DomainError("zero probability at the target class")
    grad = np.zeros(k)
    grad[target] = -w[target] / pt
    return LossValue(float(-w[target] * np.log(pt)), grad)


def weighted_cross_entropy_mean(probs, labels, weights=None):
    """Mean over points of the weighted cross-entropy; probs is (N, k)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    if n == 0:
        return LossValue(0.0, np.zeros_like(probs))
    rows = np.arange(n)
    pt = probs[rows, labels]
    if np.any(pt <= 0):
        raise DomainError("zero probability at a target class")
    grad = np.zeros_like(probs)
    grad[rows, labels] = -w[labels] / pt / n
    return LossValue(float(np.mean(-w[labels] * np.log(pt))), grad)


def lovasz_grad(gt_sorted):
    """Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs, labels):
    """Lovasz-softmax averaged over the classes present in ``labels``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    grad = np.zeros_like(probs)
    present = [c for c in range(k) if np.any(labels == c)]
    if not present:
        return LossValue(0.0, grad)
    total = 0.0
    for c in present:
        fg = (labels == c).astype(np.float64)
        errors = np.abs(fg - probs[:, c])
        perm = np.argsort(-errors, kind="stable")
        g = lovasz_grad(fg[perm])
        total += float(errors[perm] @ g)
        # d|fg - p| / dp is -1 on foreground points and +1 elsewhere
        grad[perm, c] += g * np.where(fg[perm] > 0, -1.0, 1.0)
    m = len(present)
    return LossValue(total / m, grad / m)


def total_seg_loss(probs, labels, weights=None):
    """Weighted cross-entropy (mean) plus Lovasz-softmax, unit coefficients."""
    ce = weighted_cross_entropy_mean(probs, labels, weights)
    lz = lovasz_softmax(probs, labels)
    return LossValue(ce.value + lz.value, ce.grad + lz.grad)


def direction_loss(logits, gt_direction):
    """Softmax cross-entropy over the two heading bins."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape != (2,):
        raise DomainError("direction logits must be a 2-vector")
    t = int(gt_direction)
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    soft = np.exp(z - lse)
    grad = soft.copy()
    grad[t] -= 1.0
    return LossValue(float(lse - z[t]), grad)


def assign_proposal_labels(proposals, gts, threshold=0.55):
    """Positive mask (max 3D IoU >= threshold) and the max IoU per proposal."""
    best = np.zeros(len(proposals))
    for i, prop in enumerate(proposals):
        for gt in gts:
            best[i] = max(best[i], iou_3d(prop, gt))
    return best >= threshold, best


def numeric_grad(fn, x, h=1e-5):
    """Central finite differences of scalar ``fn`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(x)
        flat[i] = old - h
        down = fn(x)
        flat[i] = old
        g[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-12):
    """||a - n|| / max(||a||, ||n||); 0 when both gradients vanish below ``floor``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale <= floor:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x

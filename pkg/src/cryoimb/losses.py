"""Training objectives and mixup.

All losses take probabilities (softmax output, or a sigmoid logit for the
binary forms) plus soft targets, and return ``(loss, grad)`` where ``grad``
is the derivative with respect to the *logits*.  Batched inputs ``(B, n)``
give the batch-mean loss and the gradient of that mean.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ShapeError

PROB_FLOOR = 1e-12


@dataclass
class FocalConfig:
    gamma: float = 2.0
    alpha: np.ndarray | float = 0.25  # scalar broadcasts over classes

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")
        a = np.asarray(self.alpha, dtype=np.float64)
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError("focal alpha entries must lie in (0, 1]")

    def alpha_vector(self, n_classes):
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.ndim == 0:
            return np.full(n_classes, float(a))
        if a.shape != (n_classes,):
            raise ShapeError(f"alpha has {a.size} entries for {n_classes} classes")
        return a


def inverse_frequency_alpha(counts):
    """Per-class alpha proportional to 1/count, normalised to sum to one."""
    inv = 1.0 / np.asarray(counts, dtype=np.float64)
    return inv / inv.sum()


@dataclass
class MixupConfig:
    alpha_beta: float = 0.2
    enabled: bool = True

    def __post_init__(self):
        if not self.alpha_beta > 0:
            raise ValueError("mixup Beta concentration must be > 0")

    @classmethod
    def preset(cls, name):
        presets = {"default": 0.2, "beta0.1": 0.1}
        return cls(alpha_beta=presets[name])


def _reduce(per_row, grad, batched):
    if batched:
        n = per_row.shape[0]
        return float(per_row.mean()), grad / n
    return float(per_row[0]), grad[0]


def _as_rows(probs, target):
    p = np.asarray(probs)
    y = np.asarray(target)
    if p.shape != y.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {y.shape}")
    batched = p.ndim == 2
    if not batched:
        p, y = p[None], y[None]
    return p, y, batched


def cross_entropy(probs, target):
    """-sum(y * log p) with p clamped at 1e-12; logit gradient ``p - y``."""
    p, y, batched = _as_rows(probs, target)
    pc = np.clip(p, PROB_FLOOR, 1.0)
    per_row = np.sum(y * -np.log(pc), axis=-1)
    return _reduce(per_row, p - y, batched)


def _focal_terms(p, logp, y, gamma, alpha):
    """Per-row focal loss and g_c = p_c * dL/dp_c."""
    one_minus = 1.0 - p
    weight = alpha * one_minus**gamma
    per_row = np.sum(y * (weight * -logp), axis=-1)
    modulator = one_minus**gamma
    if gamma > 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            extra = gamma * p * one_minus ** (gamma - 1.0) * logp
        modulator = modulator - np.where(one_minus > 0, extra, 0.0)
    g = -y * alpha * modulator
    return per_row, g


def focal_loss(probs, target, cfg):
    """Soft-target alpha-balanced focal loss over softmax probabilities.

    Per row: ``sum_c y_c * (-alpha_c * (1 - p_c)**gamma * log p_c)``.  With
    ``gamma=0`` and ``alpha=1`` this is exactly :func:`cross_entropy`.
    """
    p, y, batched = _as_rows(probs, target)
    alpha = cfg.alpha_vector(p.shape[-1]).astype(p.dtype)
    pc = np.clip(p, PROB_FLOOR, 1.0)
    per_row, g = _focal_terms(pc, np.log(pc), y, cfg.gamma, alpha)
    grad = g - p * g.sum(axis=-1, keepdims=True)
    return _reduce(per_row, grad, batched)


def _binary_rows(logits, target):
    z = np.asarray(logits)
    t = np.asarray(target, dtype=z.dtype)
    if z.shape != t.shape:
        raise ShapeError(f"logit shape {z.shape} != target shape {t.shape}")
    batched = z.ndim == 1
    z = z.reshape(-1)
    t = t.reshape(-1)
    s = expit(z)
    p = np.stack([1.0 - s, s], axis=-1)
    # log-sigmoid forms avoid log(0) for saturated logits
    logp = np.stack([-np.logaddexp(0.0, z), -np.logaddexp(0.0, -z)], axis=-1)
    y = np.stack([1.0 - t, t], axis=-1)
    return s, p, logp, y, batched


def _binary_reduce(per_row, grad, batched):
    if batched:
        n = per_row.shape[0]
        return float(per_row.mean()), grad / n
    return float(per_row[0]), grad.reshape(())


def binary_focal_loss(logits, target, gamma=2.0, alpha=(0.75, 0.25)):
    """Sigmoid focal loss with the sigmoid folded into the loss.

    ``alpha`` is ``(alpha_negative, alpha_positive)``.  Returns the loss and
    its gradient with respect to the logits.
    """
    s, p, logp, y, batched = _binary_rows(logits, target)
    a = np.asarray(alpha, dtype=p.dtype)
    per_row, g = _focal_terms(p, logp, y, gamma, a)
    grad = g[:, 1] * (1.0 - s) - g[:, 0] * s
    return _binary_reduce(per_row, grad, batched)


def binary_cross_entropy(logits, target):
    s, p, logp, y, batched = _binary_rows(logits, target)
    per_row = np.sum(y * -logp, axis=-1)
    return _binary_reduce(per_row, s - y[:, 1], batched)


# ---------------------------------------------------------------------------
# mixup


def mixup_pair(x1, y1, x2, y2, lam):
    x1, x2 = np.asarray(x1), np.asarray(x2)
    y1, y2 = np.asarray(y1), np.asarray(y2)
    if x1.shape != x2.shape:
        raise ShapeError(f"mixup inputs differ in shape: {x1.shape} vs {x2.shape}")
    if y1.shape != y2.shape:
        raise ShapeError(f"mixup labels differ in class count: {y1.shape} vs {y2.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("mixup lambda must lie in [0, 1]")
    return lam * x1 + (1 - lam) * x2, lam * y1 + (1 - lam) * y2


def sample_mixup_lambda(cfg, rng, size=None):
    return np.clip(rng.beta(cfg.alpha_beta, cfg.alpha_beta, size=size), 0.0, 1.0)


def mixup_plan(n, cfg, rng):
    """Partner index and lambda for each of ``n`` items (partners drawn with replacement)."""
    if n == 0:
        raise ValueError("mixup needs a non-empty batch")
    partner = rng.integers(0, n, size=n)
    lam = sample_mixup_lambda(cfg, rng, size=n)
    return partner, lam


def apply_mixup(arr, partner, lam):
    """Mix ``arr`` (B, ...) along its first axis; self-paired items stay unchanged."""
    n = len(arr)
    lam = lam.reshape((n,) + (1,) * (arr.ndim - 1)).astype(arr.dtype)
    out = lam * arr + (1 - lam) * arr[partner]
    same = partner == np.arange(n)
    out[same] = arr[same]
    return out


def mixup_batch(xs, ys, cfg, rng):
    """Mix every item with a partner drawn uniformly (with replacement).

    ``xs`` is ``(B, ...)`` and ``ys`` is ``(B, n_classes)``.  Each item gets
    its own lambda.  Items paired with themselves come back unchanged.
    """
    if not cfg.enabled:
        return xs, ys
    partner, lam = mixup_plan(len(xs), cfg, rng)
    return apply_mixup(xs, partner, lam), apply_mixup(ys, partner, lam)


def one_hot(labels, n_classes, dtype=np.float32):
    labels = np.asarray(labels)
    out = np.zeros((labels.size, n_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out

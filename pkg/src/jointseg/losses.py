"""Weighted cross-entropy and the uncertainty-weighted two-task loss."""

import math

import numpy as np

from .autodiff import as_tensor, record
from .errors import ContractError

SEG_IGNORE = -1
VOXEL_IGNORE = 255


def weighted_ce(logits, targets, weights, ignore_index=None):
    """
    Mean over non-ignored rows of weights[t] * -log softmax(logits)[t].

    ``logits`` is (..., K); ``targets`` holds indices into the last axis.
    """
    logits = as_tensor(logits)
    k = logits.shape[-1]
    z = logits.data.reshape(-1, k)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if len(t) != len(z):
        raise ContractError(f"{len(t)} targets for {len(z)} logit rows")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (k,) or np.any(weights <= 0) or not np.all(np.isfinite(weights)):
        raise ContractError(f"class weights must be {k} positive finite values")
    keep = np.ones(len(t), dtype=bool) if ignore_index is None else t != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ContractError("every element is ignored; the loss is undefined")
    tk = t[keep]
    if tk.min() < 0 or tk.max() >= k:
        raise ContractError(f"targets outside 0..{k - 1}")
    zk = z[keep]
    shifted = zk - zk.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(n), tk]
    wt = weights[tk]
    value = float((wt * nll).sum() / n)

    def back(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), tk] -= 1.0
        full = np.zeros_like(z)
        full[keep] = p * (wt / n)[:, None] * g
        return (full.reshape(logits.shape),)

    return record(np.array(value), (logits,), back)


def seg_loss(logits, labels, weights):
    """Point labels 1..C against logits N x C; label 0 is ignored."""
    labels = np.asarray(labels, dtype=np.int64)
    return weighted_ce(logits, labels - 1, weights, ignore_index=SEG_IGNORE)


def completion_loss(logits, volume_labels, weights):
    """Voxel labels 0..C against logits (..., C + 1); 255 cells are ignored."""
    return weighted_ce(logits, np.asarray(volume_labels, dtype=np.int64), weights,
                       ignore_index=VOXEL_IGNORE)


def uncertainty_loss(l_seg, l_complet, s1, s2):
    """
    L_seg / (2 sigma1^2) + L_complet / (2 sigma2^2) + log sigma1 + log sigma2,
    with sigma_i = exp(s_i / 2) so the log-variances s_i are unconstrained.
    """
    l_seg, l_complet, s1, s2 = (as_tensor(v) for v in (l_seg, l_complet, s1, s2))
    a = 0.5 * math.exp(-s1.item())
    b = 0.5 * math.exp(-s2.item())
    value = a * l_seg.item() + b * l_complet.item() + 0.5 * s1.item() + 0.5 * s2.item()

    def back(g):
        g = float(g)
        return (np.array(g * a), np.array(g * b),
                np.full(s1.shape, g * (0.5 - a * l_seg.item())),
                np.full(s2.shape, g * (0.5 - b * l_complet.item())))

    return record(np.array(value), (l_seg, l_complet, s1, s2), back)


def uncertainty_closed_form(l_seg, l_complet, sigma1, sigma2):
    return (l_seg / (2 * sigma1 ** 2) + l_complet / (2 * sigma2 ** 2)
            + math.log(sigma1) + math.log(sigma2))


def sigma_from_log_variance(s):
    """The standard deviation for log-variance ``s``; inf once it overflows."""
    with np.errstate(over="ignore"):
        return float(np.exp(0.5 * float(np.asarray(s).reshape(-1)[0])))


class LossState:
    """The two trainable log-variances plus both class-weight vectors."""

    def __init__(self, store, seg_weights, complet_weights, rng=None, sigma_range=(0.8, 1.2)):
        rng = rng if rng is not None else np.random.default_rng(0)
        sig = rng.uniform(*sigma_range, size=2)
        self.s1 = store.add("loss.s1", np.array([2 * math.log(sig[0])]), seg=False, lr_mult=10.0)
        self.s2 = store.add("loss.s2", np.array([2 * math.log(sig[1])]), seg=False, lr_mult=10.0)
        self.seg_weights = np.asarray(seg_weights, dtype=np.float64)
        self.complet_weights = np.asarray(complet_weights, dtype=np.float64)

    @property
    def sigmas(self):
        return sigma_from_log_variance(self.s1.data), sigma_from_log_variance(self.s2.data)


def class_weights(counts):
    """Inverse square-root frequency, normalized to mean 1. Unseen classes count as one sample."""
    counts = np.maximum(np.asarray(counts, dtype=np.float64), 1.0)
    w = 1.0 / np.sqrt(counts / counts.sum())
    return w / w.mean()

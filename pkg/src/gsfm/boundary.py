"""Boundary targets, mask/boundary losses and mask<->boundary fusion."""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from . import tensor as T
from .nn import Conv2d, Module
from .tensor import Tensor

LAPLACIAN_4 = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def laplacian_response(mask: np.ndarray) -> np.ndarray:
    """4-neighbour Laplacian over the last two axes with replicate padding."""
    m = np.asarray(mask, dtype=np.float64)
    pad = [(0, 0)] * (m.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(m, pad, mode="edge")
    return p[..., :-2, 1:-1] + p[..., 2:, 1:-1] + p[..., 1:-1, :-2] + p[..., 1:-1, 2:] - 4.0 * m


def laplacian_boundary(mask, threshold: float = 0.1) -> np.ndarray:
    """Binary boundary map: ``|laplacian(mask)| > threshold`` (float array of 0/1)."""
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    return (np.abs(laplacian_response(m)) > threshold).astype(np.float64)


def dice_loss(p: Tensor, q, eps: float = 1e-5, axis=None) -> Tensor:
    """``1 - 2 sum(pq) / (sum(p^2) + sum(q^2) + eps)``.

    With ``axis`` the loss is computed per slice over those axes and averaged.
    """
    q = T.as_tensor(q, like=p)
    inter = T.tsum(p * q, axis=axis)
    denom = T.tsum(p * p, axis=axis) + T.tsum(q * q, axis=axis) + eps
    # (denom - 2 inter) / denom rather than 1 - 2 inter / denom: exact for small rational cases
    loss = (denom - inter * 2.0) / denom
    return loss if axis is None else T.mean(loss)


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy computed from logits without overflow."""
    x = logits.data
    q = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=x.dtype)
    per = np.maximum(x, 0) - x * q + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def bw(g):
        return ((expit(x) - q) * (g / n)).astype(x.dtype),

    return T.make_op(np.asarray(per.mean(), dtype=x.dtype), (logits,), bw, "bce_with_logits")


def boundary_loss(pred_logits: Tensor, gt, eps: float = 1e-5, per_sample: bool = True) -> Tensor:
    """Dice on sigmoid(pred) plus BCE on the logits (unweighted sum).

    ``per_sample`` averages the dice term over the leading batch axis instead
    of pooling all pixels, which matters when several frames are stacked.
    """
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if pred_logits.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred_logits.shape} vs {gt.shape}")
    p = T.sigmoid(pred_logits)
    axis = tuple(range(1, p.ndim)) if per_sample and p.ndim > 3 else None
    return dice_loss(p, gt, eps, axis=axis) + bce_with_logits(pred_logits, gt)


class FusionBlock(Module):
    """Residual injection ``relu(conv1x1(src)) + dst``."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float64):
        self.proj = Conv2d(channels, channels, 1, rng, dtype=dtype)

    def __call__(self, f_src: Tensor, f_dst: Tensor) -> Tensor:
        return fuse(f_src, f_dst, self)


def fuse(f_src: Tensor, f_dst: Tensor, block: FusionBlock) -> Tensor:
    if f_src.shape != f_dst.shape:
        raise ValueError(f"fusion shape mismatch: {f_src.shape} vs {f_dst.shape}")
    if f_src.shape[-3] != block.proj.in_channels:
        raise ValueError(f"fusion block expects {block.proj.in_channels} channels, got {f_src.shape[-3]}")
    return T.relu(block.proj(f_src)) + f_dst


def pixel_cross_entropy(mask_logits: Tensor, gt_labels) -> Tensor:
    """Per-pixel CE; logits ``[..., K, H, W]``, integer labels ``[..., H, W]``."""
    labels = np.asarray(gt_labels.data if isinstance(gt_labels, Tensor) else gt_labels).astype(np.intp)
    k = mask_logits.shape[-3]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError("label outside [0, K)")
    onehot = (labels[..., None, :, :] == np.arange(k)[:, None, None]).astype(mask_logits.dtype)
    logp = T.log_softmax(mask_logits, axis=-3)
    return -T.tsum(logp * onehot, axis=-3)


def bootstrapped_ce(mask_logits: Tensor, gt_labels, keep_fraction: float = 1.0) -> Tensor:
    """Mean CE over the hardest ``keep_fraction`` of pixels."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must be in (0, 1]")
    per = pixel_cross_entropy(mask_logits, gt_labels).reshape(-1)
    n = per.shape[0]
    keep = max(1, int(np.ceil(keep_fraction * n - 1e-9)))
    if keep >= n:
        return T.mean(per)
    idx = np.sort(np.argpartition(-per.data, keep - 1)[:keep])
    return T.mean(T.getitem(per, idx))


def keep_fraction_schedule(step: int, total_steps: int, final: float = 0.2, anneal_frac: float = 0.25) -> float:
    """1.0 at the start, linearly down to ``final`` by ``anneal_frac`` of training."""
    end = max(1.0, anneal_frac * total_steps)
    if step >= end:
        return final
    return 1.0 + (final - 1.0) * step / end

"""Pretraining and fine-tuning objectives.

Batched inputs carry a leading batch axis; per-image losses are averaged over
the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nncore import ops
from .nncore.tensor import Tensor

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossReport:
    name: str
    value: float


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def contrastive_loss(p, labels, tau: float = 0.07, reduction: str = "sum") -> Tensor:
    """Multi-positive InfoNCE summed over patches.

    For patch ``i`` the positives are the other patches with the same label and
    the denominator runs over every ``k != i``::

        l_i = -log( sum_{j in pos(i)} exp(p_i.p_j / tau) / sum_{k != i} exp(p_i.p_k / tau) )

    ``p`` is ``(N, D)`` or ``(B, N, D)`` with unit rows; ``labels`` is ``(N,)``
    or ``(B, N)``.  ``reduction="none"`` returns the per-patch terms.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    p = _as_tensor(p)
    labels = np.asarray(labels)
    single = p.ndim == 2
    if single:
        p = p.reshape(1, *p.shape)
        labels = labels[None]
    b, n, _ = p.shape
    if labels.shape != (b, n):
        raise ValueError(f"labels shape {labels.shape} does not match {b} x {n}")
    for row in labels:
        counts = np.bincount(row)
        if np.any(counts == 1):
            raise ValueError("every label class needs at least two members")
    eye = np.eye(n, dtype=bool)
    others = ~eye
    positives = (labels[:, :, None] == labels[:, None, :]) & others
    sim = (p @ p.permute(0, 2, 1)) * (1.0 / tau)
    log_num = ops.logsumexp(sim, axis=-1, where=positives)
    log_den = ops.logsumexp(sim, axis=-1, where=np.broadcast_to(others, sim.shape))
    per_patch = log_den - log_num
    if reduction == "none":
        return per_patch.reshape((n,)) if single else per_patch
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    per_image = per_patch.sum(axis=-1)
    return per_image.reshape(()) if single else per_image.mean()


def position_loss(logits, labels) -> Tensor:
    """Softmax cross-entropy summed over patches, ``(N, C)`` or ``(B, N, C)`` logits."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    c = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label outside [0, {c})")
    logp = ops.log_softmax(logits, axis=-1)
    nll = -ops.take_along(logp, labels[..., None], axis=-1).reshape(labels.shape)
    return nll.sum() if nll.ndim == 1 else nll.sum(axis=-1).mean()


def flow_loss(f_b, f_gt, m_gt, reduction: str = "mean") -> Tensor:
    """L1 distance between the masked prediction and the (zero-outside-mask) ground truth.

    ``mean`` divides by the number of valid flow components (2 per valid pixel),
    pooled over the whole batch; ``sum`` returns the raw L1 norm.
    """
    f_b = _as_tensor(f_b)
    m = np.asarray(m_gt, dtype=np.float64).reshape(f_b.shape[:-1] + (1,))
    gt = np.asarray(f_gt, dtype=np.float64) * m
    diff = ops.abs(f_b * m - gt).sum()
    if reduction == "sum":
        return diff
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    return diff * (1.0 / max(2.0 * m.sum(), 1.0))


def mask_loss(confidence, m_gt, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy between confidence map and ground-truth mask."""
    conf = _as_tensor(confidence)
    y = np.asarray(m_gt, dtype=np.float64).reshape(conf.shape)
    q = ops.clamp(conf, BCE_CLAMP, 1.0 - BCE_CLAMP)
    total = -(ops.log(q) * y + ops.log(1.0 - q) * (1.0 - y)).sum()
    if reduction == "sum":
        return total
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total * (1.0 / y.size)


def pretrain_objective(features, logits, labels, tau: float) -> tuple[Tensor, list[LossReport]]:
    l_con = contrastive_loss(features, labels, tau)
    l_pos = position_loss(logits, labels)
    total = l_con + l_pos
    return total, [LossReport("L_con", l_con.item()), LossReport("L_pos", l_pos.item()),
                   LossReport("L_pre", total.item())]


def finetune_objective(flow, conf, flow_gt, mask_gt, reduction: str = "mean") -> tuple[Tensor, list[LossReport]]:
    l_flow = flow_loss(flow, flow_gt, mask_gt, reduction)
    l_mask = mask_loss(conf, mask_gt, reduction)
    total = l_flow + l_mask
    return total, [LossReport("L_flow", l_flow.item()), LossReport("L_mask", l_mask.item()),
                   LossReport("L_ft", total.item())]

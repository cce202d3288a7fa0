"""Loss quantities: per-class sigmoid cross-entropy, distillation against the
memory network's soft targets, their sum (the adaptation loss), and the
remembering loss on rehearsal patches.

Public functions are stated in probability space; the *_from_logits variants
use the numerically stable log-sigmoid formulation and also return the
gradient w.r.t. the logits, normalized the same way as the loss (mean over
samples, channels, and pixels).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nnops import sigmoid

EPS = 1e-7


@dataclass
class LossValue:
    total: float
    components: dict[str, float] = field(default_factory=dict)


def binary_ce(targets, probs) -> float:
    """Mean of -[y log p + (1-y) log(1-p)] over every element.

    Targets may be soft (distillation) or binary; probs are clamped to
    [EPS, 1-EPS] before the logs.
    """
    y = np.asarray(targets, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if y.shape != p.shape:
        raise ValueError(f"target shape {y.shape} != prediction shape {p.shape}")
    p = np.clip(p, EPS, 1.0 - EPS)
    return float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean())


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def binary_ce_from_logits(targets, logits):
    """(loss, d loss / d logits) without forming probabilities in the log."""
    y = np.asarray(targets)
    z = np.asarray(logits)
    if y.shape != z.shape:
        raise ValueError(f"target shape {y.shape} != logit shape {z.shape}")
    loss = float((_softplus(z) - y * z).mean())
    dz = (sigmoid(z) - y) / z.size
    return loss, dz


def adaptation_loss(y_curr, p_up_curr, p_mem, p_up_prev) -> LossValue:
    """Classification term on the new classes plus distillation term that pins
    old-class outputs to the memory network's soft targets; empty old-class
    sets degenerate to plain training (distil = 0)."""
    l_class = binary_ce(y_curr, p_up_curr)
    if p_mem is None or np.asarray(p_mem).shape[-1] == 0:
        l_distil = 0.0
    else:
        l_distil = binary_ce(p_mem, p_up_prev)
    return LossValue(
        total=l_class + l_distil,
        components={"class": l_class, "distil": l_distil},
    )


def adaptation_loss_from_logits(y_curr, logits, n_prev: int, p_mem=None):
    """Adaptation loss for an updated-network logit stack whose first n_prev
    channels are the previously learned classes.

    Returns (LossValue, d loss / d logits). Gradients flow only through the
    updated network's logits; p_mem is a constant target.
    """
    z = np.asarray(logits)
    k = z.shape[-1]
    if not 0 <= n_prev <= k:
        raise ValueError(f"n_prev {n_prev} out of range for {k} channels")
    if np.asarray(y_curr).shape != z[..., n_prev:].shape:
        raise ValueError("new-class target shape does not match logit channels")
    dz = np.zeros_like(z)
    l_class, dz_curr = binary_ce_from_logits(y_curr, z[..., n_prev:])
    dz[..., n_prev:] = dz_curr
    l_distil = 0.0
    if n_prev > 0:
        if p_mem is None:
            raise ValueError("memory soft targets required when n_prev > 0")
        if np.asarray(p_mem).shape != z[..., :n_prev].shape:
            raise ValueError("memory target shape does not match old channels")
        l_distil, dz_prev = binary_ce_from_logits(p_mem, z[..., :n_prev])
        dz[..., :n_prev] = dz_prev
    value = LossValue(
        total=l_class + l_distil,
        components={"class": l_class, "distil": l_distil},
    )
    return value, dz


def remembering_loss(y_prev_j, p_up_prev_j) -> float:
    """Cross-entropy against stored true labels, restricted to one previous
    stage's class channels."""
    y = np.asarray(y_prev_j)
    p = np.asarray(p_up_prev_j)
    if y.shape != p.shape:
        raise ValueError(
            f"stage target shape {y.shape} != prediction shape {p.shape}"
        )
    return binary_ce(y, p)


def remembering_loss_from_logits(y_prev_j, logits_j):
    if np.asarray(y_prev_j).shape != np.asarray(logits_j).shape:
        raise ValueError("stage target channels do not match logit channels")
    return binary_ce_from_logits(y_prev_j, logits_j)

"""Training objectives.

All losses take row-stacked embeddings as :class:`~viewforge.autodiff.Tensor`
objects and return scalar tensors, so they can be differentiated end to end.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_TEMPERATURE = 0.07
MIN_NORM = 1e-12


def _check_temperature(tau: float) -> float:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return float(tau)


def _check_norms(norm: Tensor, what: str) -> None:
    if np.any(norm.data <= MIN_NORM):
        raise ValueError(f"{what}: embedding norm below {MIN_NORM}; cosine similarity undefined")


def normalize_rows(z: Tensor) -> Tensor:
    """Scale each row of a (..., D) tensor to unit l2 norm."""
    z = ad.as_tensor(z)
    norm = ad.l2norm(z, axes=-1, keepdims=True)
    _check_norms(norm, "normalize_rows")
    return ad.div(z, ad.broadcast_to(norm, z.shape))


def cosine_similarity(z: Tensor, z2: Tensor) -> Tensor:
    """Row-wise cosine similarity of two (..., D) tensors; returns shape (...)."""
    z, z2 = ad.as_tensor(z), ad.as_tensor(z2)
    if z.shape != z2.shape:
        raise ad.ShapeError(f"cosine_similarity: shapes {z.shape} and {z2.shape} differ")
    dot = ad.sum(ad.mul(z, z2), axes=-1)
    n1, n2 = ad.l2norm(z, axes=-1), ad.l2norm(z2, axes=-1)
    _check_norms(n1, "cosine_similarity")
    _check_norms(n2, "cosine_similarity")
    return ad.div(dot, ad.mul(n1, n2))


def pair_affinity(z: Tensor, z2: Tensor, tau: float = DEFAULT_TEMPERATURE) -> Tensor:
    """``exp(cos(z, z2) / tau)``."""
    tau = _check_temperature(tau)
    return ad.exp(ad.mul(cosine_similarity(z, z2), 1.0 / tau))


def divmaker_loss(anchor: Tensor, views: Sequence[Tensor], tau: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Diversity objective for the view generator, averaged over the batch.

    For each anchor ``z`` with views ``z_1..z_K`` the per-anchor value is::

        -sum_k log( h(z_k, z) / (h(z_k, z) + sum_{l != k} h(z_k, z_l)) )

    with ``h = exp(cos / tau)``. The inner sum runs over the same anchor's views
    only. ``anchor`` is B×D and ``views`` holds K tensors of shape B×D.
    """
    tau = _check_temperature(tau)
    K = len(views)
    if K < 2:
        raise ValueError(f"divmaker_loss needs at least 2 views per anchor, got {K}")
    anchor = ad.as_tensor(anchor)
    if anchor.ndim != 2:
        raise ad.ShapeError(f"anchor embeddings must be B×D, got {anchor.shape}")
    for v in views:
        if ad.as_tensor(v).shape != anchor.shape:
            raise ad.ShapeError(f"view embeddings {v.shape} do not match anchor {anchor.shape}")
    B = anchor.shape[0]

    za = normalize_rows(anchor)
    zs = [normalize_rows(v) for v in views]
    inv_tau = 1.0 / tau

    pos = [ad.mul(ad.sum(ad.mul(zk, za), axes=1), inv_tau) for zk in zs]
    total = None
    for k in range(K):
        terms = [ad.exp(pos[k])]
        for l in range(K):
            if l != k:
                terms.append(ad.exp(ad.mul(ad.sum(ad.mul(zs[k], zs[l]), axes=1), inv_tau)))
        denom = terms[0]
        for t in terms[1:]:
            denom = ad.add(denom, t)
        # -log(exp(pos)/denom) = log(denom) - pos
        term = ad.sub(ad.log(denom), pos[k])
        total = term if total is None else ad.add(total, term)
    return ad.mul(ad.sum(total), 1.0 / B)


def ntxent_loss(embeddings: Tensor, tau: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Normalized-temperature cross entropy over 2B rows; rows i and i+B are positives."""
    tau = _check_temperature(tau)
    z = ad.as_tensor(embeddings)
    if z.ndim != 2 or z.shape[0] % 2:
        raise ad.ShapeError(f"ntxent_loss expects a 2B×D tensor, got {z.shape}")
    n = z.shape[0]
    B = n // 2
    if B < 2:
        raise ValueError(f"ntxent_loss needs B >= 2 positive pairs (negatives required), got B={B}")

    zn = normalize_rows(z)
    logits = ad.mul(ad.matmul(zn, ad.transpose(zn)), 1.0 / tau)  # n×n
    off_diag = Tensor(1.0 - np.eye(n), dtype=z.dtype)
    denom = ad.sum(ad.mul(ad.exp(logits), off_diag), axes=1)  # n
    pos_idx = np.concatenate([np.arange(B, n), np.arange(0, B)])
    pos_mask = Tensor(np.eye(n)[pos_idx], dtype=z.dtype)
    pos = ad.sum(ad.mul(logits, pos_mask), axes=1)
    return ad.mean(ad.sub(ad.log(denom), pos))


def viewmaker_generator_loss(encoder_loss: Tensor) -> Tensor:
    """The generator's objective: the negated encoder loss.

    The gradient path that realises it during training is
    :func:`~viewforge.autodiff.gradient_reversal` placed between the views and
    the encoder, so one backward pass of ``encoder_loss`` serves both
    networks. The returned tensor is detached and only carries the value.
    """
    return Tensor(-encoder_loss.data)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy of N×L logits against N integer labels."""
    logits = ad.as_tensor(logits)
    n, L = logits.shape
    shift = Tensor(np.broadcast_to(logits.data.max(axis=1, keepdims=True), logits.shape).copy())
    shifted = ad.sub(logits, shift)
    lse = ad.log(ad.sum(ad.exp(shifted), axes=1))
    onehot = np.zeros((n, L), dtype=logits.dtype)
    onehot[np.arange(n), np.asarray(labels, dtype=np.int64)] = 1
    picked = ad.sum(ad.mul(shifted, Tensor(onehot)), axes=1)
    return ad.mean(ad.sub(lse, picked))


def sigmoid_binary_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean per-cell binary cross entropy, in the overflow-free softplus form."""
    logits = ad.as_tensor(logits)
    y = Tensor(np.asarray(targets, dtype=logits.dtype))
    # softplus(x) - y*x with softplus(x) = relu(x) + log(1 + exp(-|x|))
    softplus = ad.add(ad.relu(logits), ad.log(ad.add(ad.exp(ad.neg(ad.abs(logits))), 1.0)))
    return ad.mean(ad.sub(softplus, ad.mul(y, logits)))

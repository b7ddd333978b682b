"""Fusion, masked mean pooling, the feed-forward classifier and its loss."""

from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatchError, Tensor

__all__ = [
    "AllMaskedError",
    "NUM_CLASSES",
    "PROB_FLOOR",
    "init_head_params",
    "fuse",
    "masked_mean_pool",
    "classify",
    "smoothed_ce",
]

NUM_CLASSES = 4
PROB_FLOOR = 1e-12

# The pooled inputs are deliberately small (see ssm.LN_GAIN_INIT), and training
# runs at a tiny learning rate, so the head starts loud: larger weights both
# amplify the forward logits and scale up the gradients reaching w1.
W1_GAIN_INIT = 10.0
W2_GAIN_INIT = 3.0


class AllMaskedError(ValueError):
    pass


def init_head_params(rng, hidden: int, head_hidden: int | None = None) -> dict[str, Tensor]:
    dh = head_hidden if head_hidden is not None else hidden
    return {
        "head.w1": Tensor(
            rng.normal(scale=W1_GAIN_INIT / np.sqrt(hidden), size=(hidden, dh)),
            requires_grad=True,
        ),
        "head.b1": Tensor(np.zeros(dh), requires_grad=True),
        "head.w2": Tensor(
            rng.normal(scale=W2_GAIN_INIT / np.sqrt(dh), size=(dh, NUM_CLASSES)),
            requires_grad=True,
        ),
        "head.b2": Tensor(np.zeros(NUM_CLASSES), requires_grad=True),
    }


def fuse(h_seq: Tensor, h_graph: Tensor, alpha: float = 0.3) -> Tensor:
    """Residual fusion: h_seq + alpha * h_graph."""
    if h_seq.shape != h_graph.shape:
        raise ShapeMismatchError(f"{h_seq.shape} vs {h_graph.shape}")
    if alpha == 0.0:
        return h_seq
    return h_seq + alpha * h_graph


def masked_mean_pool(H: Tensor, M: np.ndarray) -> Tensor:
    """Mean of unmasked rows per example: B x L x d -> B x d."""
    if H.ndim != 3 or M.shape != H.shape[:2]:
        raise ShapeMismatchError(f"H {H.shape} does not match mask {M.shape}")
    counts = M.sum(axis=1)
    if (counts == 0).any():
        raise AllMaskedError("every example needs at least one unmasked node")
    masked = H * Tensor(M[:, :, None])
    return masked.sum(axis=1) / Tensor(counts[:, None])


def classify(z: Tensor, params: dict[str, Tensor]) -> Tensor:
    """softmax(W2 @ relu(W1 z + b1) + b2), rows summing to one."""
    w1, b1 = params["head.w1"], params["head.b1"]
    w2, b2 = params["head.w2"], params["head.b2"]
    if z.ndim != 2 or z.shape[1] != w1.shape[0]:
        raise ShapeMismatchError(f"pooled input {z.shape} does not match {w1.shape}")
    hidden = ad.relu(ad.matmul(z, w1) + b1.reshape(1, -1))
    logits = ad.matmul(hidden, w2) + b2.reshape(1, -1)
    return ad.softmax(logits, axis=-1)


def smoothed_ce(probs: Tensor, y: np.ndarray, smoothing: float = 0.1) -> Tensor:
    """Cross-entropy against the label-smoothed target distribution.

    Target q = (1 - eps) * onehot(y) + eps / 4; the batch loss is the mean of
    -sum_k q_k log p_k.  Probabilities are floored at 1e-12 (with a warning)
    so a confidently wrong model yields a large finite loss, not an infinity.
    """
    if probs.ndim != 2 or probs.shape[1] != NUM_CLASSES:
        raise ShapeMismatchError(f"expected B x {NUM_CLASSES} probs, got {probs.shape}")
    y = np.asarray(y)
    if y.shape != (probs.shape[0],):
        raise ShapeMismatchError(f"labels {y.shape} do not match batch {probs.shape[0]}")
    if not (0.0 <= smoothing < 1.0):
        raise ValueError("smoothing must be in [0, 1)")

    target = np.full((probs.shape[0], NUM_CLASSES), smoothing / NUM_CLASSES)
    target[np.arange(probs.shape[0]), y] += 1.0 - smoothing

    if (probs.data < PROB_FLOOR).any():
        warnings.warn("probabilities clamped at 1e-12 in smoothed_ce", stacklevel=2)
    log_probs = ad.log(ad.clip_min(probs, PROB_FLOOR))
    return -(Tensor(target) * log_probs).sum() / probs.shape[0]

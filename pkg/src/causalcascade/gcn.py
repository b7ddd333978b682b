"""Single-layer graph convolution over per-cascade reply graphs.

Directed reply edges are symmetrized, self-loops added, and the adjacency is
degree-normalized (D^-1/2 (A+I) D^-1/2).  Each graph in a batch is convolved
independently; padded rows stay zero and no message crosses graph boundaries.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatchError, Tensor

__all__ = ["IndexOutOfRangeError", "init_gcn_params", "normalize_adjacency", "gcn_forward"]


class IndexOutOfRangeError(ValueError):
    pass


def init_gcn_params(rng, hidden: int) -> dict[str, Tensor]:
    scale = 1.0 / np.sqrt(hidden)
    return {
        "gcn.weight": Tensor(rng.normal(scale=scale, size=(hidden, hidden)), requires_grad=True),
        "gcn.bias": Tensor(np.zeros(hidden), requires_grad=True),
    }


def normalize_adjacency(edges: list[tuple[int, int]], n: int) -> np.ndarray:
    """Symmetrized adjacency with self-loops under symmetric degree scaling."""
    if n < 1:
        raise IndexOutOfRangeError("graph must have at least one node")
    a = np.eye(n)
    for i, j in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise IndexOutOfRangeError(f"edge ({i}, {j}) outside [0, {n})")
        if i == j:
            raise IndexOutOfRangeError(f"self-loop ({i}, {j}) in input edges")
        a[i, j] = 1.0
        a[j, i] = 1.0
    inv_sqrt_deg = 1.0 / np.sqrt(a.sum(axis=1))
    return a * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]


def gcn_forward(
    H: Tensor,
    edges_per_graph: list[list[tuple[int, int]]],
    M: np.ndarray,
    params: dict[str, Tensor],
) -> Tensor:
    """ReLU(N @ H @ W + b) per graph on real nodes; padding stays zero."""
    if H.ndim != 3:
        raise ShapeMismatchError(f"expected B x L x d input, got {H.shape}")
    B, L, d = H.shape
    if len(edges_per_graph) != B or M.shape != (B, L):
        raise ShapeMismatchError("edges/mask do not match the batch")
    weight = params["gcn.weight"]
    bias = params["gcn.bias"]
    if weight.shape[0] != d:
        raise ShapeMismatchError(f"weight rows {weight.shape[0]} != hidden {d}")

    rows = []
    for b in range(B):
        n = int(M[b].sum())
        h_real = H[b, :n, :]
        adj = Tensor(normalize_adjacency(edges_per_graph[b], n))
        mixed = ad.relu(ad.matmul(ad.matmul(adj, h_real), weight) + bias.reshape(1, d))
        if n < L:
            mixed = ad.concat([mixed, Tensor(np.zeros((L - n, d)))], axis=0)
        rows.append(mixed)
    return ad.stack(rows, axis=0)

"""Influence ranking and counterfactual node removal on learned causal graphs.

The soft adjacency is thresholded into a digraph, nodes are ranked by
PageRank (uniform teleport, dangling mass spread uniformly), and removing the
top-k nodes is scored by how connectivity degrades: weak components, largest
component size, and brute-force reachable ordered pairs.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass

import numpy as np

from .causal import CausalGraph

__all__ = [
    "KTooLargeError",
    "MaxIterWarning",
    "PageRankConfig",
    "InterventionReport",
    "extract_digraph",
    "graph_from_soft_adjacency",
    "pagerank",
    "weak_components",
    "reachable_pairs",
    "intervene",
    "export_dot",
    "report_to_json",
]


class KTooLargeError(ValueError):
    pass


class MaxIterWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PageRankConfig:
    damping: float = 0.85
    tol: float = 1e-10
    max_iter: int = 1000
    weighted: bool = False

    def validate(self) -> None:
        if not (0.0 < self.damping < 1.0):
            raise ValueError("damping must be in (0, 1)")


@dataclass
class InterventionReport:
    removed_nodes: list[dict]  # {"index", "id", "score"}
    n_before: int
    n_after: int
    edge_count_before: int
    edge_count_after: int
    components_before: int
    components_after: int
    largest_component_before: int
    largest_component_after: int
    reachable_pairs_before: int
    reachable_pairs_after: int


def extract_digraph(w: np.ndarray, tau: float | None = None) -> list[tuple[int, int]]:
    """Edges where |W_ij| clears the threshold, diagonal ignored.

    The default threshold is 10% of the largest off-diagonal magnitude, so a
    uniformly weak matrix still yields its relatively strongest edges.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"expected a square matrix, got {w.shape}")
    n = w.shape[0]
    scores = np.abs(w).copy()
    np.fill_diagonal(scores, 0.0)
    if tau is None:
        tau = 0.1 * scores.max()
    return [
        (i, j) for i in range(n) for j in range(n) if i != j and scores[i, j] > tau
    ]


def graph_from_soft_adjacency(
    w: np.ndarray, tau: float | None = None, node_ids: list[str] | None = None
) -> CausalGraph:
    edges = extract_digraph(w, tau)
    scores = np.abs(np.asarray(w, dtype=np.float64)).copy()
    np.fill_diagonal(scores, 0.0)
    resolved_tau = 0.1 * scores.max() if tau is None else tau
    return CausalGraph(
        weights=np.asarray(w, dtype=np.float64),
        threshold=float(resolved_tau),
        edges=edges,
        node_ids=node_ids or [str(i) for i in range(w.shape[0])],
    )


def pagerank(
    edges: list[tuple[int, int]],
    n: int,
    config: PageRankConfig = PageRankConfig(),
    weights: dict[tuple[int, int], float] | None = None,
) -> np.ndarray:
    """Power iteration on the (out-degree or weight) normalized walk.

    Dangling nodes donate their mass uniformly; scores always sum to one.
    """
    config.validate()
    if n < 1:
        raise ValueError("graph must have at least one node")
    transition = np.zeros((n, n))
    for edge in set(edges):
        i, j = edge
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise ValueError(f"bad edge {edge}")
        transition[j, i] = (
            abs(weights[edge]) if (config.weighted and weights is not None) else 1.0
        )
    out_mass = transition.sum(axis=0)
    dangling = out_mass == 0
    columns = np.where(dangling, 1.0, out_mass)
    transition = transition / columns

    scores = np.full(n, 1.0 / n)
    teleport = (1.0 - config.damping) / n
    for _ in range(config.max_iter):
        walked = transition @ scores + dangling @ scores / n
        updated = config.damping * walked + teleport
        if np.abs(updated - scores).sum() <= config.tol:
            return updated
        scores = updated
    warnings.warn(
        f"pagerank did not converge in {config.max_iter} iterations",
        MaxIterWarning,
        stacklevel=2,
    )
    return scores


def _adjacency_lists(edges, nodes: set[int]) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {node: [] for node in nodes}
    for i, j in edges:
        if i in nodes and j in nodes:
            out[i].append(j)
    return out


def weak_components(edges: list[tuple[int, int]], nodes: set[int]) -> list[set[int]]:
    neighbors: dict[int, set[int]] = {node: set() for node in nodes}
    for i, j in edges:
        if i in nodes and j in nodes:
            neighbors[i].add(j)
            neighbors[j].add(i)
    seen: set[int] = set()
    components = []
    for start in sorted(nodes):
        if start in seen:
            continue
        stack = [start]
        component = set()
        while stack:
            node = stack.pop()
            if node in component:
                continue
            component.add(node)
            stack.extend(neighbors[node] - component)
        seen |= component
        components.append(component)
    return components


def reachable_pairs(edges: list[tuple[int, int]], nodes: set[int]) -> int:
    """Count of ordered pairs (a, b), a != b, with a directed path a -> b."""
    adjacency = _adjacency_lists(edges, nodes)
    total = 0
    for start in nodes:
        seen = {start}
        stack = [start]
        while stack:
            node = stack.pop()
            for child in adjacency[node]:
                if child not in seen:
                    seen.add(child)
                    stack.append(child)
        total += len(seen) - 1
    return total


def intervene(
    graph: CausalGraph, k: int, config: PageRankConfig = PageRankConfig()
) -> InterventionReport:
    """Remove the k top-PageRank nodes (ties: lower index first) and measure
    how the graph's connectivity degrades."""
    n = graph.n
    if not (0 <= k < n):
        raise KTooLargeError(f"k={k} must satisfy 0 <= k < n={n}")
    weights = {(i, j): float(graph.weights[i, j]) for i, j in graph.edges}
    scores = pagerank(graph.edges, n, config, weights=weights)
    ranking = sorted(range(n), key=lambda i: (-scores[i], i))
    removed = ranking[:k]
    removed_set = set(removed)
    kept = set(range(n)) - removed_set
    kept_edges = [
        (i, j) for i, j in graph.edges if i not in removed_set and j not in removed_set
    ]

    before_components = weak_components(graph.edges, set(range(n)))
    after_components = weak_components(kept_edges, kept)
    return InterventionReport(
        removed_nodes=[
            {
                "index": i,
                "id": graph.node_ids[i] if graph.node_ids else str(i),
                "score": float(scores[i]),
            }
            for i in removed
        ],
        n_before=n,
        n_after=n - k,
        edge_count_before=len(graph.edges),
        edge_count_after=len(kept_edges),
        components_before=len(before_components),
        components_after=len(after_components),
        largest_component_before=max((len(c) for c in before_components), default=0),
        largest_component_after=max((len(c) for c in after_components), default=0),
        reachable_pairs_before=reachable_pairs(graph.edges, set(range(n))),
        reachable_pairs_after=reachable_pairs(kept_edges, kept),
    )


def export_dot(
    graph: CausalGraph,
    path: str,
    highlights: list[int] | None = None,
    excluded: list[int] | None = None,
) -> None:
    """Deterministic DOT rendering; highlighted nodes are filled red.

    ``excluded`` nodes (and their edges) are omitted, which is how the
    post-intervention graph is drawn.
    """
    highlights = set(highlights or [])
    excluded_set = set(excluded or [])
    nodes = [i for i in range(graph.n) if i not in excluded_set]
    lines = ["digraph causal {"]
    for i in nodes:
        label = graph.node_ids[i] if graph.node_ids else str(i)
        if i in highlights:
            lines.append(f'  "{label}" [style=filled, fillcolor=red];')
        else:
            lines.append(f'  "{label}";')
    for i, j in sorted(graph.edges):
        if i in excluded_set or j in excluded_set:
            continue
        src = graph.node_ids[i] if graph.node_ids else str(i)
        dst = graph.node_ids[j] if graph.node_ids else str(j)
        lines.append(f'  "{src}" -> "{dst}";')
    lines.append("}")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")


def report_to_json(report: InterventionReport) -> str:
    return json.dumps(dataclasses.asdict(report), indent=2)

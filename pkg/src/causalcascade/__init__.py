"""Cascade veracity classification with differentiable causal graph discovery.

The package couples a selective state-space sequence encoder and a graph
convolution over reply trees with an acyclicity-penalised causal adjacency
learner, then ranks influential nodes by PageRank and simulates their removal.
"""

from . import autodiff, causal, data, gcn, head, intervention, model, ssm, train

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "causal",
    "data",
    "gcn",
    "head",
    "intervention",
    "model",
    "ssm",
    "train",
    "__version__",
]

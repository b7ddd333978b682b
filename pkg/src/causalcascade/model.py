"""Full pipeline assembly: encoders, fusion, classifier, causal adjacency.

The model is a flat dict of named parameter tensors plus pure forward
functions, so the trainer can treat optimization generically and checkpoints
are just name -> array maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gcn, head, ssm
from .autodiff import Tensor
from .causal import CausalHyper, notears_loss
from .data import Batch
from .ssm import EncoderConfig

__all__ = ["ModelConfig", "init_model_params", "model_forward", "ForwardResult", "variant_name"]


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion_alpha: float = 0.3
    head_hidden: int | None = None
    causal: CausalHyper = field(default_factory=CausalHyper)
    use_gcn: bool = True
    use_causal: bool = True

    def validate(self) -> None:
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if self.fusion_alpha < 0:
            raise ValueError("fusion_alpha must be nonnegative")
        self.encoder.validate()
        self.causal.validate()


def variant_name(use_gcn: bool, use_causal: bool) -> str:
    if not use_gcn:
        return "mamba"
    return "causalmamba" if use_causal else "mamba-gcn"


def init_model_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0DE)))
    params = ssm.init_encoder_params(rng, cfg.feature_dim, cfg.encoder)
    params.update(gcn.init_gcn_params(rng, cfg.encoder.hidden))
    params.update(head.init_head_params(rng, cfg.encoder.hidden, cfg.head_hidden))
    return params


@dataclass
class ForwardResult:
    probs: Tensor  # B x 4
    fused: Tensor  # B x L x d
    first_graph_hidden: Tensor  # n_0 x d, real rows of the first example


def model_forward(
    batch: Batch,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    rng=None,
) -> ForwardResult:
    """Run the pipeline on one padded batch; ``rng`` enables dropout."""
    h_seq = ssm.encoder_forward(batch.X, batch.M, params, cfg.encoder, rng=rng)
    if cfg.use_gcn:
        h_graph = gcn.gcn_forward(h_seq, batch.edges_per_graph, batch.M, params)
        fused = head.fuse(h_seq, h_graph, cfg.fusion_alpha)
    else:
        fused = h_seq
    z = head.masked_mean_pool(fused, batch.M)
    probs = head.classify(z, params)
    n0 = int(batch.n_per_graph[0])
    return ForwardResult(
        probs=probs, fused=fused, first_graph_hidden=fused[0, :n0, :]
    )


def causal_loss_for_batch(result: ForwardResult, cfg: ModelConfig) -> Tensor:
    """Adjacency loss on the first graph of the batch (padding-free rows)."""
    return notears_loss(result.first_graph_hidden, cfg.causal)

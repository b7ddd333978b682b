"""Two-layer selective state-space encoder over masked node sequences.

Each layer projects its input, runs a content-dependent linear recurrence
(the step size and the input/output mixing vectors are functions of the
current input), adds a skip path, and finishes with dropout, a residual
connection and layer norm.  Masked positions emit zeros and leave the
recurrent state untouched, so padding cannot leak into real nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatchError, Tensor

__all__ = [
    "EncoderConfig",
    "init_encoder_params",
    "selective_scan",
    "ssm_layer_forward",
    "encoder_forward",
]

LN_EPS = 1e-5

# Hidden states feed a Gram-matrix adjacency downstream whose reconstruction
# and acyclicity terms grow quadratically-to-exponentially with state norm, so
# the norm gain starts small to keep that loss from drowning the classifier.
LN_GAIN_INIT = 0.2


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    hidden: int = 32  # 128 at full scale
    state: int = 16
    dropout: float = 0.2

    def validate(self) -> None:
        if self.layers < 1 or self.hidden < 1 or self.state < 1:
            raise ValueError("layers, hidden and state must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")


def init_layer_params(rng, f_in: int, cfg: EncoderConfig, prefix: str) -> dict[str, Tensor]:
    d, s = cfg.hidden, cfg.state
    scale_in = 1.0 / np.sqrt(f_in)
    scale_d = 1.0 / np.sqrt(d)

    def param(values):
        return Tensor(values, requires_grad=True)

    return {
        f"{prefix}.w_in": param(rng.normal(scale=scale_in, size=(f_in, d))),
        f"{prefix}.w_delta": param(rng.normal(scale=scale_d, size=(d, d))),
        f"{prefix}.b_delta": param(np.zeros(d)),
        # A = -exp(a_log) keeps the recurrence strictly decaying.
        f"{prefix}.a_log": param(rng.normal(loc=-1.0, scale=0.2, size=(d, s))),
        f"{prefix}.w_b": param(rng.normal(scale=scale_d, size=(d, s))),
        f"{prefix}.w_c": param(rng.normal(scale=scale_d, size=(d, s))),
        f"{prefix}.skip": param(np.ones(d)),
        f"{prefix}.ln_scale": param(np.full(d, LN_GAIN_INIT)),
        f"{prefix}.ln_shift": param(np.zeros(d)),
    }


def init_encoder_params(rng, feature_dim: int, cfg: EncoderConfig) -> dict[str, Tensor]:
    cfg.validate()
    params: dict[str, Tensor] = {}
    f_in = feature_dim
    for layer in range(cfg.layers):
        params.update(init_layer_params(rng, f_in, cfg, f"encoder.layer{layer}"))
        f_in = cfg.hidden
    return params


def _layer_norm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered / ad.sqrt(var + LN_EPS)
    return normed * scale + shift


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return x * Tensor(keep)


def selective_scan(
    u: Tensor, M: np.ndarray, params: dict[str, Tensor], prefix: str
) -> Tensor:
    """The core recurrence on projected inputs u (B x L x d), pre-norm.

    Per position t:
        delta_t = softplus(u_t @ W_delta + b_delta)          (B x d)
        h_t     = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t
        y_t     = <C_t, h_t> + skip * u_t
    where B_t = u_t @ W_b and C_t = u_t @ W_c select what enters and leaves
    the state.  Masked steps keep h_{t-1} and emit zero rows.
    """
    B, L, d = u.shape
    s = params[f"{prefix}.a_log"].shape[1]
    a = -ad.exp(params[f"{prefix}.a_log"])  # d x s, strictly negative
    w_delta = params[f"{prefix}.w_delta"]
    b_delta = params[f"{prefix}.b_delta"]
    w_b = params[f"{prefix}.w_b"]
    w_c = params[f"{prefix}.w_c"]
    skip = params[f"{prefix}.skip"]

    h = Tensor(np.zeros((B, d, s)))
    outputs = []
    for t in range(L):
        u_t = u[:, t, :]  # B x d
        m_t = M[:, t].reshape(B, 1)
        delta = ad.softplus(ad.matmul(u_t, w_delta) + b_delta.reshape(1, d))
        decay = ad.exp(delta.reshape(B, d, 1) * a.reshape(1, d, s))
        b_t = ad.matmul(u_t, w_b)  # B x s
        update = delta.reshape(B, d, 1) * b_t.reshape(B, 1, s) * u_t.reshape(B, d, 1)
        h_new = decay * h + update
        # state carries through masked steps unchanged
        m3 = Tensor(m_t.reshape(B, 1, 1))
        h = m3 * h_new + (1.0 - m3) * h
        c_t = ad.matmul(u_t, w_c)  # B x s
        y_t = (h * c_t.reshape(B, 1, s)).sum(axis=2) + skip.reshape(1, d) * u_t
        outputs.append(y_t * Tensor(m_t))
    return ad.stack(outputs, axis=1)  # B x L x d


def ssm_layer_forward(
    X: Tensor,
    M: np.ndarray,
    params: dict[str, Tensor],
    prefix: str,
    dropout: float = 0.0,
    rng=None,
) -> Tensor:
    """One layer: project, scan, dropout, residual, layer norm, re-mask."""
    w_in = params[f"{prefix}.w_in"]
    if X.ndim != 3:
        raise ShapeMismatchError(f"expected B x L x F input, got {X.shape}")
    if M.shape != X.shape[:2]:
        raise ShapeMismatchError(f"mask {M.shape} does not match input {X.shape[:2]}")
    if X.shape[-1] != w_in.shape[0]:
        raise ShapeMismatchError(
            f"input width {X.shape[-1]} != projection rows {w_in.shape[0]}"
        )
    B, L, _ = X.shape
    u = ad.matmul(X, w_in)  # B x L x d
    y = selective_scan(u, M, params, prefix)
    out = _layer_norm(
        u + _dropout(y, dropout, rng),
        params[f"{prefix}.ln_scale"],
        params[f"{prefix}.ln_shift"],
    )
    return out * Tensor(M.reshape(B, L, 1))


def encoder_forward(
    X: Tensor | np.ndarray,
    M: np.ndarray,
    params: dict[str, Tensor],
    cfg: EncoderConfig,
    rng=None,
) -> Tensor:
    """Stacked layers; pass ``rng`` to enable dropout (training mode)."""
    h = X if isinstance(X, Tensor) else Tensor(X)
    for layer in range(cfg.layers):
        h = ssm_layer_forward(
            h, M, params, f"encoder.layer{layer}", dropout=cfg.dropout, rng=rng
        )
    return h

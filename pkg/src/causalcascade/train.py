"""Joint optimization: AdamW with decoupled decay, global-norm clipping,
macro-F1 early stopping, metrics, and bit-exact checkpointing."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .causal import CausalHyper, notears_loss
from .data import Batch, Cascade, make_batches
from .head import NUM_CLASSES, smoothed_ce
from .model import ModelConfig, init_model_params, model_forward, variant_name
from .ssm import EncoderConfig

__all__ = [
    "TrainConfig",
    "ModelState",
    "NonFiniteLossError",
    "BadCheckpointError",
    "LengthMismatchError",
    "joint_loss",
    "fit",
    "evaluate",
    "predict",
    "macro_f1",
    "confusion_matrix",
    "clip_gradients",
    "adamw_step",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    pass


class BadCheckpointError(ValueError):
    pass


class LengthMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    batch_size: int = 16
    causal_weight: float = 0.1
    label_smoothing: float = 0.1
    patience: int = 10
    max_epochs: int = 100
    seed: int = 42
    use_gcn: bool = True
    use_causal: bool = True

    def validate(self) -> None:
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ValueError("label_smoothing must be in [0, 1)")

    @property
    def variant(self) -> str:
        return variant_name(self.use_gcn, self.use_causal)


@dataclass
class ModelState:
    params: dict[str, Tensor]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    epoch: int
    rng: np.random.Generator
    model_cfg: ModelConfig
    best_params: dict[str, np.ndarray] = field(default_factory=dict)
    best_metric: float = -np.inf
    best_epoch: int = -1
    epochs_since_best: int = 0

    def snapshot_params(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}


def _init_state(model_cfg: ModelConfig, seed: int) -> ModelState:
    params = init_model_params(model_cfg, seed)
    return ModelState(
        params=params,
        m={name: np.zeros_like(p.data) for name, p in params.items()},
        v={name: np.zeros_like(p.data) for name, p in params.items()},
        step=0,
        epoch=0,
        rng=np.random.default_rng(np.random.SeedSequence((seed, 0xD80A))),
        model_cfg=model_cfg,
    )


def joint_loss(
    batch: Batch,
    params: dict[str, Tensor],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    rng=None,
) -> tuple[Tensor, dict[str, float]]:
    """Classification loss plus the weighted causal loss of the first graph.

    With ``use_causal`` off the causal weight is treated as zero and the
    adjacency is never built; with ``use_gcn`` off the fusion reduces to the
    sequence encoding alone.
    """
    effective_cfg = dataclasses.replace(
        model_cfg, use_gcn=cfg.use_gcn, use_causal=cfg.use_causal
    )
    result = model_forward(batch, params, effective_cfg, rng=rng)
    cls_loss = smoothed_ce(result.probs, batch.y, cfg.label_smoothing)
    if cfg.use_causal and cfg.causal_weight != 0.0:
        causal_loss = notears_loss(result.first_graph_hidden, model_cfg.causal)
        total = cls_loss + cfg.causal_weight * causal_loss
        components = {"cls": float(cls_loss.data), "causal": float(causal_loss.data)}
    else:
        total = cls_loss
        components = {"cls": float(cls_loss.data), "causal": 0.0}
    return total, components


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for name in grads:
            grads[name] = grads[name] * factor
    return total


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    m: dict[str, np.ndarray],
    v: dict[str, np.ndarray],
    step: int,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One decoupled-decay Adam update; ``step`` is 1-based."""
    b1, b2 = betas
    for name, p in params.items():
        g = grads[name]
        m[name] = b1 * m[name] + (1.0 - b1) * g
        v[name] = b2 * v[name] + (1.0 - b2) * g * g
        m_hat = m[name] / (1.0 - b1**step)
        v_hat = v[name] / (1.0 - b2**step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps) + lr * weight_decay * p.data


def _train_one_epoch(
    state: ModelState, train: list[Cascade], cfg: TrainConfig
) -> dict[str, float]:
    order = np.random.default_rng(
        np.random.SeedSequence((cfg.seed, state.epoch, 0x5F0E))
    ).permutation(len(train))
    batches = make_batches([train[i] for i in order], cfg.batch_size)

    sums = {"loss": 0.0, "cls": 0.0, "causal": 0.0}
    for batch in batches:
        for p in state.params.values():
            p.zero_grad()
        try:
            loss, components = joint_loss(
                batch, state.params, state.model_cfg, cfg, rng=state.rng
            )
            loss.backward()
        except NonFiniteError as exc:
            raise NonFiniteLossError(
                f"non-finite loss at epoch {state.epoch} step {state.step}: {exc}"
            ) from exc
        grads = {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in state.params.items()
        }
        clip_gradients(grads, cfg.clip_norm)
        state.step += 1
        adamw_step(
            state.params, grads, state.m, state.v, state.step, cfg.lr, cfg.weight_decay
        )
        sums["loss"] += float(loss.data)
        sums["cls"] += components["cls"]
        sums["causal"] += components["causal"]
    n = max(len(batches), 1)
    return {key: value / n for key, value in sums.items()}


def fit(
    train: list[Cascade],
    val: list[Cascade],
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    state: ModelState | None = None,
    restore_best: bool = True,
) -> tuple[ModelState, list[dict]]:
    """Train until val macro-F1 stops improving for ``patience`` epochs.

    Resuming: pass a loaded ``state`` to continue exactly where a previous
    run left off (the live parameters, optimizer moments, RNG stream and
    best-snapshot tracking all round-trip through checkpoints).  Set
    ``restore_best=False`` to keep the live parameters instead of the best
    validation snapshot, e.g. when saving a mid-run checkpoint.
    """
    cfg.validate()
    if not train or not val:
        raise ValueError("train and val splits must be nonempty")
    if state is None:
        if model_cfg is None:
            model_cfg = ModelConfig(feature_dim=train[0].features.shape[1])
        # Ablation flags from the training config are authoritative.
        model_cfg = dataclasses.replace(
            model_cfg, use_gcn=cfg.use_gcn, use_causal=cfg.use_causal
        )
        model_cfg.validate()
        state = _init_state(model_cfg, cfg.seed)

    history: list[dict] = []
    while state.epoch < cfg.max_epochs:
        train_stats = _train_one_epoch(state, train, cfg)
        state.epoch += 1
        val_metrics = evaluate(state, val, batch_size=cfg.batch_size, use_cfg=cfg)
        row = {
            "epoch": state.epoch,
            "train_loss": train_stats["loss"],
            "train_cls": train_stats["cls"],
            "train_causal": train_stats["causal"],
            "val_accuracy": val_metrics["accuracy"],
            "val_macro_f1": val_metrics["macro_f1"],
        }
        history.append(row)

        # Ties keep the earlier epoch's snapshot.
        if val_metrics["macro_f1"] > state.best_metric:
            state.best_metric = val_metrics["macro_f1"]
            state.best_epoch = state.epoch
            state.best_params = state.snapshot_params()
            state.epochs_since_best = 0
        else:
            state.epochs_since_best += 1
            if state.epochs_since_best >= cfg.patience:
                break

    if restore_best and state.best_params:
        for name, values in state.best_params.items():
            state.params[name] = Tensor(values.copy(), requires_grad=True)
    return state, history


def predict(state: ModelState, data: list[Cascade], batch_size: int = 16,
            use_cfg: TrainConfig | None = None) -> np.ndarray:
    """Deterministic argmax predictions (dropout off)."""
    effective = state.model_cfg
    if use_cfg is not None:
        effective = dataclasses.replace(
            effective, use_gcn=use_cfg.use_gcn, use_causal=use_cfg.use_causal
        )
    preds = []
    with ad.no_grad():
        for batch in make_batches(data, batch_size):
            result = model_forward(batch, state.params, effective, rng=None)
            preds.append(result.probs.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(state: ModelState, data: list[Cascade], batch_size: int = 16,
             use_cfg: TrainConfig | None = None) -> dict:
    if not data:
        raise ValueError("evaluate needs a nonempty dataset")
    labels = np.array([c.label_index for c in data], dtype=np.int64)
    preds = predict(state, data, batch_size=batch_size, use_cfg=use_cfg)
    per_class = per_class_f1(preds, labels)
    return {
        "accuracy": float((preds == labels).mean()),
        "macro_f1": macro_f1(preds, labels),
        "per_class_f1": per_class,
        "confusion": confusion_matrix(preds, labels).tolist(),
    }


def confusion_matrix(preds, labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise LengthMismatchError(f"{preds.shape} vs {labels.shape}")
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(labels, preds):
        matrix[t, p] += 1
    return matrix


def per_class_f1(preds, labels, num_classes: int = NUM_CLASSES) -> list[float]:
    matrix = confusion_matrix(preds, labels, num_classes)
    scores = []
    for k in range(num_classes):
        tp = matrix[k, k]
        fp = matrix[:, k].sum() - tp
        fn = matrix[k, :].sum() - tp
        denom = 2 * tp + fp + fn
        scores.append(float(2 * tp / denom) if denom > 0 else 0.0)
    return scores


def macro_f1(preds, labels, num_classes: int = NUM_CLASSES) -> float:
    """Unweighted mean F1 over the classes that occur in preds or labels.

    A class on one side only scores 0; classes absent from both sides are
    left out of the mean entirely (so perfect predictions score 1.0 even on
    a subset of the label space).
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise LengthMismatchError(f"{preds.shape} vs {labels.shape}")
    scores = per_class_f1(preds, labels, num_classes)
    present = [
        k for k in range(num_classes) if (preds == k).any() or (labels == k).any()
    ]
    if not present:
        return 0.0
    return float(np.mean([scores[k] for k in present]))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _config_to_dict(model_cfg: ModelConfig, train_cfg: TrainConfig | None) -> dict:
    return {
        "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(train_cfg) if train_cfg else None,
    }


def _model_cfg_from_dict(payload: dict) -> ModelConfig:
    payload = dict(payload)
    payload["encoder"] = EncoderConfig(**payload["encoder"])
    payload["causal"] = CausalHyper(**payload["causal"])
    return ModelConfig(**payload)


def save_checkpoint(
    path: str, state: ModelState, train_cfg: TrainConfig | None = None
) -> None:
    arrays = {}
    for name, p in state.params.items():
        arrays[f"param/{name}"] = p.data
    for name, values in state.m.items():
        arrays[f"m/{name}"] = values
    for name, values in state.v.items():
        arrays[f"v/{name}"] = values
    for name, values in state.best_params.items():
        arrays[f"best/{name}"] = values
    meta = {
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "epoch": state.epoch,
        "best_metric": None if np.isneginf(state.best_metric) else state.best_metric,
        "best_epoch": state.best_epoch,
        "epochs_since_best": state.epochs_since_best,
        "rng_state": state.rng.bit_generator.state,
        "config": _config_to_dict(state.model_cfg, train_cfg),
    }
    np.savez_compressed(path, meta=json.dumps(meta), **arrays)


def load_checkpoint(path: str) -> tuple[ModelState, TrainConfig | None]:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise BadCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta" not in archive:
        raise BadCheckpointError(f"{path} is missing checkpoint metadata")
    meta = json.loads(str(archive["meta"]))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise BadCheckpointError(
            f"unsupported checkpoint version {meta.get('version')!r}"
        )
    params, m, v, best = {}, {}, {}, {}
    for key in archive.files:
        if key.startswith("param/"):
            params[key[6:]] = Tensor(archive[key].copy(), requires_grad=True)
        elif key.startswith("m/"):
            m[key[2:]] = archive[key].copy()
        elif key.startswith("v/"):
            v[key[2:]] = archive[key].copy()
        elif key.startswith("best/"):
            best[key[5:]] = archive[key].copy()
    if not params or set(params) != set(m) or set(params) != set(v):
        raise BadCheckpointError(f"{path} has inconsistent parameter arrays")

    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    model_cfg = _model_cfg_from_dict(meta["config"]["model"])
    train_cfg = (
        TrainConfig(**meta["config"]["train"]) if meta["config"]["train"] else None
    )
    state = ModelState(
        params=params,
        m=m,
        v=v,
        step=meta["step"],
        epoch=meta["epoch"],
        rng=rng,
        model_cfg=model_cfg,
        best_params=best,
        best_metric=-np.inf if meta["best_metric"] is None else meta["best_metric"],
        best_epoch=meta["best_epoch"],
        epochs_since_best=meta["epochs_since_best"],
    )
    return state, train_cfg

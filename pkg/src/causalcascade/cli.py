"""Command-line entry point: generate / train / eval / discover / intervene / export.

Runs are driven by a JSON config file with sections mirroring the library's
config dataclasses; individual flags override file values.  Every command
writes a ``run.json`` capturing the fully resolved configuration and content
hashes of its inputs, so two runs with equal ``run.json`` produce equal
outputs.

Exit codes: 0 success, 1 internal failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import data as data_mod
from . import intervention as iv
from . import train as train_mod
from .causal import CausalHyper, notears_fit
from .data import ClassParams, SyntheticConfig
from .model import ModelConfig
from .ssm import EncoderConfig
from .train import TrainConfig

__all__ = ["main", "UsageError", "load_run_config"]


class UsageError(Exception):
    pass


_SECTIONS = {
    "train": TrainConfig,
    "encoder": EncoderConfig,
    "causal": CausalHyper,
    "synthetic": SyntheticConfig,
}
_PATH_KEYS = {"data", "output", "tree_dir", "label_file", "checkpoint", "csv"}


def load_run_config(path: str | None) -> dict:
    """Parse and validate the sectioned JSON config file."""
    resolved: dict = {name: {} for name in _SECTIONS}
    resolved["paths"] = {}
    if path is None:
        return resolved
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config root must be a JSON object")
    unknown_sections = set(raw) - set(_SECTIONS) - {"paths"}
    if unknown_sections:
        raise UsageError(f"unknown config sections: {sorted(unknown_sections)}")
    for section, cls in _SECTIONS.items():
        body = raw.get(section, {})
        if not isinstance(body, dict):
            raise UsageError(f"config section {section!r} must be an object")
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(body) - allowed
        if unknown:
            raise UsageError(f"unknown keys in {section!r}: {sorted(unknown)}")
        resolved[section] = dict(body)
    paths = raw.get("paths", {})
    unknown = set(paths) - _PATH_KEYS
    if unknown:
        raise UsageError(f"unknown keys in 'paths': {sorted(unknown)}")
    resolved["paths"] = dict(paths)
    return resolved


def _build(section_cls, body: dict):
    if section_cls is SyntheticConfig and "class_params" in body:
        body = dict(body)
        body["class_params"] = tuple(ClassParams(**cp) for cp in body["class_params"])
    try:
        return section_cls(**body)
    except TypeError as exc:
        raise UsageError(str(exc)) from None


def _file_hash(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_run_record(out_dir: str, command: str, resolved: dict, inputs: list[str]) -> None:
    record = {
        "command": command,
        "config": resolved,
        "input_hashes": {path: _file_hash(path) for path in inputs if os.path.exists(path)},
    }
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as handle:
        json.dump(record, handle, indent=2, default=str)


def _print_resolved(command: str, objects: dict) -> None:
    print(f"[{command}] resolved configuration:")
    for name, obj in objects.items():
        print(f"  {name}: {obj}")


def _resolved_dict(objects: dict) -> dict:
    return {
        name: dataclasses.asdict(obj) if dataclasses.is_dataclass(obj) else obj
        for name, obj in objects.items()
    }


def _prepare_dataset(path: str, d_text: int = 64, d_user: int = 16, expect_width=None):
    cascades = data_mod.load_jsonl(path)
    if not cascades:
        raise UsageError(f"no usable cascades in {path}")
    provider = data_mod.HashedTrigramEmbedder(d_text=d_text)
    cascades = data_mod.attach_features(cascades, provider, d_user=d_user)
    width = cascades[0].features.shape[1]
    if expect_width is not None and width != expect_width:
        raise UsageError(
            f"feature width {width} does not match the checkpoint's {expect_width}; "
            "the default embedding dims are d_text=64, d_user=16"
        )
    return cascades


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    resolved = load_run_config(args.config)
    synth = _build(SyntheticConfig, resolved["synthetic"])
    if args.seed is not None:
        synth = dataclasses.replace(synth, seed=args.seed)
    if args.num_events is not None:
        synth = dataclasses.replace(synth, num_events=args.num_events)
    synth.validate()
    out_dir = args.output or resolved["paths"].get("output") or "generated"
    os.makedirs(out_dir, exist_ok=True)
    _print_resolved("generate", {"synthetic": synth, "output": out_dir})

    cascades, planted = data_mod.generate_synthetic(synth)
    data_path = os.path.join(out_dir, "cascades.jsonl")
    data_mod.write_jsonl(cascades, data_path)
    data_mod.write_planted_dags(cascades, planted, os.path.join(out_dir, "planted_dags.jsonl"))

    nodes = np.array([c.n for c in cascades])
    edges = np.array([len(c.edges) for c in cascades])
    print("Summary")
    print(f"  Events            {len(cascades)}")
    print(f"  Avg. Nodes/Event  {nodes.mean():.1f}")
    print(f"  Avg. Edges/Event  {edges.mean():.1f}")
    _write_run_record(out_dir, "generate", _resolved_dict({"synthetic": synth}), [])
    return 0


def _load_splits(args, resolved):
    data_path = args.data or resolved["paths"].get("data")
    if not data_path:
        raise UsageError("a dataset path is required (--data or paths.data)")
    if not os.path.exists(data_path):
        raise UsageError(f"dataset not found: {data_path}")
    encoder = _build(EncoderConfig, resolved["encoder"])
    cascades = _prepare_dataset(data_path)
    return data_path, encoder, cascades


def cmd_train(args) -> int:
    resolved = load_run_config(args.config)
    train_cfg = _build(TrainConfig, resolved["train"])
    overrides = {
        name: getattr(args, name)
        for name in ("seed", "max_epochs", "lr", "batch_size")
        if getattr(args, name) is not None
    }
    if args.no_gcn:
        overrides["use_gcn"] = False
    if args.no_causal:
        overrides["use_causal"] = False
    train_cfg = dataclasses.replace(train_cfg, **overrides)
    train_cfg.validate()

    data_path, encoder, cascades = _load_splits(args, resolved)
    causal_hyper = _build(CausalHyper, resolved["causal"])
    out_dir = args.output or resolved["paths"].get("output") or "runs"
    os.makedirs(out_dir, exist_ok=True)
    _print_resolved(
        "train",
        {"train": train_cfg, "encoder": encoder, "causal": causal_hyper, "data": data_path},
    )

    train_set, val_set, test_set = data_mod.split_dataset(cascades, seed=train_cfg.seed)
    model_cfg = ModelConfig(
        feature_dim=cascades[0].features.shape[1], encoder=encoder, causal=causal_hyper
    )
    state, history = train_mod.fit(train_set, val_set, train_cfg, model_cfg=model_cfg)

    with open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8") as handle:
        for row in history:
            handle.write(json.dumps(row) + "\n")
    checkpoint = os.path.join(out_dir, "checkpoint.npz")
    train_mod.save_checkpoint(checkpoint, state, train_cfg)

    report = {
        "variant": train_cfg.variant,
        "epochs_trained": state.epoch,
        "best_epoch": state.best_epoch,
        "splits": {
            "train": train_mod.evaluate(state, train_set, train_cfg.batch_size),
            "val": train_mod.evaluate(state, val_set, train_cfg.batch_size),
            "test": train_mod.evaluate(state, test_set, train_cfg.batch_size)
            if test_set
            else None,
        },
    }
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as handle:
        json.dump(report, handle, indent=2)
    _write_run_record(
        out_dir,
        "train",
        _resolved_dict({"train": train_cfg, "encoder": encoder, "causal": causal_hyper}),
        [data_path],
    )
    print(f"[train] variant={train_cfg.variant} best_epoch={state.best_epoch}")
    print(f"[train] val macro-F1: {report['splits']['val']['macro_f1']:.4f}")
    print(f"[train] wrote {checkpoint}")
    return 0


def cmd_eval(args) -> int:
    resolved = load_run_config(args.config)
    checkpoint_path = args.checkpoint or resolved["paths"].get("checkpoint")
    if not checkpoint_path or not os.path.exists(checkpoint_path):
        raise UsageError(f"checkpoint not found: {checkpoint_path}")
    data_path = args.data or resolved["paths"].get("data")
    if not data_path or not os.path.exists(data_path):
        raise UsageError(f"dataset not found: {data_path}")
    state, _ = train_mod.load_checkpoint(checkpoint_path)
    cascades = _prepare_dataset(data_path, expect_width=state.model_cfg.feature_dim)
    metrics = train_mod.evaluate(state, cascades)
    print(json.dumps(metrics, indent=2))
    return 0


def cmd_discover(args) -> int:
    if not os.path.exists(args.csv):
        raise UsageError(f"csv not found: {args.csv}")
    X = np.loadtxt(args.csv, delimiter=",", ndmin=2)
    if args.standardize:
        X = (X - X.mean(axis=0)) / X.std(axis=0)
    result = notears_fit(X, l1=args.l1, tau=args.tau)
    out_dir = args.output or "discovery"
    os.makedirs(out_dir, exist_ok=True)
    np.savetxt(os.path.join(out_dir, "weights.csv"), result.graph.weights, delimiter=",")
    iv.export_dot(result.graph, os.path.join(out_dir, "graph.dot"))
    summary = {
        "n": result.graph.n,
        "edges": [list(e) for e in result.graph.edges],
        "threshold": result.graph.threshold,
        "h_final": result.h_final,
        "iterations": result.iterations,
        "converged": result.converged,
    }
    with open(os.path.join(out_dir, "discovery.json"), "w", encoding="utf-8") as handle:
        json.dump(summary, handle, indent=2)
    _write_run_record(
        out_dir,
        "discover",
        {"l1": args.l1, "tau": args.tau, "standardize": args.standardize},
        [args.csv],
    )
    print(f"[discover] {len(result.graph.edges)} edges, h={result.h_final:.3e}")
    return 0


def _causal_graph_for_event(args, resolved):
    checkpoint_path = args.checkpoint or resolved["paths"].get("checkpoint")
    if not checkpoint_path or not os.path.exists(checkpoint_path):
        raise UsageError(f"checkpoint not found: {checkpoint_path}")
    data_path = args.data or resolved["paths"].get("data")
    if not data_path or not os.path.exists(data_path):
        raise UsageError(f"dataset not found: {data_path}")
    state, _ = train_mod.load_checkpoint(checkpoint_path)
    cascades = _prepare_dataset(data_path, expect_width=state.model_cfg.feature_dim)
    matches = [c for c in cascades if c.event_id == args.event_id]
    if not matches:
        raise UsageError(f"unknown event id: {args.event_id}")
    cascade = matches[0]

    from . import autodiff as ad
    from .causal import causal_adjacency
    from .data import make_batches
    from .model import model_forward

    with ad.no_grad():
        batch = make_batches([cascade], 1)[0]
        result = model_forward(batch, state.params, state.model_cfg)
        soft = causal_adjacency(result.first_graph_hidden).data
    return iv.graph_from_soft_adjacency(soft, node_ids=list(cascade.node_ids))


def cmd_intervene(args) -> int:
    resolved = load_run_config(args.config)
    graph = _causal_graph_for_event(args, resolved)
    try:
        report = iv.intervene(graph, args.k)
    except iv.KTooLargeError as exc:
        raise UsageError(str(exc)) from None
    out_dir = args.output or resolved["paths"].get("output") or "intervention"
    os.makedirs(out_dir, exist_ok=True)
    removed = [node["index"] for node in report.removed_nodes]
    iv.export_dot(graph, os.path.join(out_dir, "before.dot"), highlights=removed)
    iv.export_dot(graph, os.path.join(out_dir, "after.dot"), excluded=removed)
    with open(os.path.join(out_dir, "intervention.json"), "w", encoding="utf-8") as handle:
        handle.write(iv.report_to_json(report))
    _write_run_record(
        out_dir, "intervene", {"event_id": args.event_id, "k": args.k}, [args.data or ""]
    )
    print(
        f"[intervene] removed {args.k} nodes; components "
        f"{report.components_before} -> {report.components_after}, reachable pairs "
        f"{report.reachable_pairs_before} -> {report.reachable_pairs_after}"
    )
    return 0


def cmd_export(args) -> int:
    resolved = load_run_config(args.config)
    graph = _causal_graph_for_event(args, resolved)
    out_dir = args.output or resolved["paths"].get("output") or "export"
    os.makedirs(out_dir, exist_ok=True)
    iv.export_dot(graph, os.path.join(out_dir, "graph.dot"))
    payload = {
        "event_id": args.event_id,
        "node_ids": graph.node_ids,
        "threshold": graph.threshold,
        "edges": [list(e) for e in graph.edges],
        "weights": graph.weights.tolist(),
    }
    with open(os.path.join(out_dir, "graph.json"), "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2)
    print(f"[export] wrote graph with {len(graph.edges)} edges to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causalcascade",
        description="Cascade classification, causal discovery and intervention analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config file")
    common.add_argument("--output", "-o", help="output directory")

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-events", type=int, dest="num_events")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train a model variant")
    p.add_argument("--data", help="cascades JSONL file")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--no-gcn", action="store_true")
    p.add_argument("--no-causal", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("discover", parents=[common], help="fit a DAG to CSV samples")
    p.add_argument("--csv", required=True, help="m x n sample matrix")
    p.add_argument("--l1", type=float, default=0.1)
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--standardize", action="store_true")
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("intervene", parents=[common], help="remove top-k causal nodes")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--event-id", required=True, dest="event_id")
    p.add_argument("--k", type=int, default=3)
    p.set_defaults(func=cmd_intervene)

    p = sub.add_parser("export", parents=[common], help="export a learned causal graph")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--event-id", required=True, dest="event_id")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, train_mod.BadCheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # internal failure
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Cascades: ingestion, feature engineering, synthetic generation, batching.

A cascade is one propagation event: a source post plus the tree of replies it
triggered.  Nodes are kept in propagation-time order (node 0 is the source),
edges point parent -> child, and every node carries a feature row built from
its text embedding, its log-delay from the source, and a hashed user vector.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "LABELS",
    "RawNode",
    "Cascade",
    "Batch",
    "SyntheticConfig",
    "ClassParams",
    "EmbeddingProvider",
    "HashedTrigramEmbedder",
    "CascadeRejected",
    "CascadeError",
    "MultipleRootsError",
    "DanglingParentError",
    "NegativeTimestampError",
    "SchemaViolationError",
    "MalformedLineError",
    "UnknownLabelError",
    "MixedFeatureWidthError",
    "EmptyClassError",
    "InvalidConfigError",
    "build_cascade",
    "featurize",
    "attach_features",
    "load_jsonl",
    "write_jsonl",
    "cascade_to_record",
    "parse_twitter15_tree",
    "generate_synthetic",
    "write_planted_dags",
    "split_dataset",
    "make_batches",
    "is_acyclic",
]

LABELS = ("true", "false", "unverified", "nonrumor")


class CascadeError(ValueError):
    """Malformed cascade input."""


class MultipleRootsError(CascadeError):
    pass


class DanglingParentError(CascadeError):
    pass


class NegativeTimestampError(CascadeError):
    pass


class SchemaViolationError(CascadeError):
    pass


class MalformedLineError(CascadeError):
    pass


class UnknownLabelError(CascadeError):
    pass


class MixedFeatureWidthError(ValueError):
    pass


class EmptyClassError(ValueError):
    pass


class InvalidConfigError(ValueError):
    pass


class CascadeRejected(Exception):
    """Event filtered out by cleaning rules (not malformed, just excluded)."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class RawNode:
    node_id: str
    timestamp: float
    parent_id: str | None = None
    user: str | None = None
    text: str | None = None


@dataclass
class Cascade:
    event_id: str
    label: str  # one of LABELS
    node_ids: list[str]
    users: list[str]
    timestamps: np.ndarray  # seconds offset from the source, per node
    texts: list[str | None]
    edges: list[tuple[int, int]]  # (parent_index, child_index)
    features: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.node_ids)

    @property
    def label_index(self) -> int:
        return LABELS.index(self.label)


@dataclass
class Batch:
    X: np.ndarray  # B x L x F, padded rows zero
    M: np.ndarray  # B x L binary mask
    edges_per_graph: list[list[tuple[int, int]]]
    y: np.ndarray  # B label indices
    n_per_graph: np.ndarray  # B node counts
    event_ids: list[str]


def build_cascade(event_id: str, label: str, raw_nodes: list[RawNode]) -> Cascade:
    """Validate and normalize one event into a :class:`Cascade`.

    Nodes are sorted by timestamp (source first, then node_id as tie-break),
    self-loop parent links are dropped, and edges are remapped to sorted
    indices.  Events with fewer than two nodes are filtered via
    :class:`CascadeRejected`.
    """
    if label not in LABELS:
        raise UnknownLabelError(f"unknown label {label!r}")
    if not raw_nodes:
        raise CascadeRejected("too_small")

    ids = [rn.node_id for rn in raw_nodes]
    if len(set(ids)) != len(ids):
        raise SchemaViolationError(f"duplicate node ids in event {event_id}")
    known = set(ids)

    roots = []
    for rn in raw_nodes:
        if rn.timestamp < 0:
            raise NegativeTimestampError(
                f"node {rn.node_id} has negative timestamp {rn.timestamp}"
            )
        parent = rn.parent_id
        if parent == rn.node_id:
            parent = None  # self-loop link: treat as a root marker, drop the edge
        if parent is None:
            roots.append(rn.node_id)
        elif parent not in known:
            raise DanglingParentError(
                f"node {rn.node_id} references unknown parent {rn.parent_id}"
            )
    if len(roots) != 1:
        raise MultipleRootsError(
            f"event {event_id} has {len(roots)} parentless nodes, expected 1"
        )
    root_id = roots[0]

    if len(raw_nodes) < 2:
        raise CascadeRejected("too_small")

    # Source stays first even under timestamp ties; other ties break by id.
    ordered = sorted(
        raw_nodes, key=lambda rn: (rn.timestamp, rn.node_id != root_id, rn.node_id)
    )
    if ordered[0].node_id != root_id:
        raise NegativeTimestampError(
            f"event {event_id}: a reply precedes the source in time"
        )
    index = {rn.node_id: i for i, rn in enumerate(ordered)}

    edges = []
    for rn in ordered:
        if rn.parent_id is None or rn.parent_id == rn.node_id:
            continue
        edges.append((index[rn.parent_id], index[rn.node_id]))
    edges.sort()

    return Cascade(
        event_id=event_id,
        label=label,
        node_ids=[rn.node_id for rn in ordered],
        users=[rn.user if rn.user is not None else rn.node_id for rn in ordered],
        timestamps=np.array([rn.timestamp for rn in ordered], dtype=np.float64),
        texts=[rn.text for rn in ordered],
        edges=edges,
    )


# ---------------------------------------------------------------------------
# feature engineering
# ---------------------------------------------------------------------------

class EmbeddingProvider:
    """Contract: ``embed(text_or_id)`` is deterministic and returns ``d_text`` floats."""

    d_text: int

    def embed(self, text_or_id: str) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError


class HashedTrigramEmbedder(EmbeddingProvider):
    """Deterministic text embedding: signed hashing of character trigrams.

    Each trigram lands in a salted hash bucket with a pseudo-random sign; the
    count vector is L2-normalized.  Texts sharing vocabulary therefore map to
    nearby directions, which is what the synthetic generator exploits.
    """

    def __init__(self, d_text: int = 64, salt: str = "trigram-v1"):
        if d_text < 1:
            raise InvalidConfigError("d_text must be positive")
        self.d_text = d_text
        self.salt = salt

    def embed(self, text_or_id: str) -> np.ndarray:
        vec = np.zeros(self.d_text, dtype=np.float64)
        s = text_or_id if len(text_or_id) >= 3 else f"^{text_or_id}$"
        for i in range(len(s) - 2):
            gram = s[i : i + 3]
            digest = hashlib.sha256((self.salt + "\x1f" + gram).encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:8], "big") % self.d_text
            sign = 1.0 if digest[8] % 2 == 0 else -1.0
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        else:
            vec[0] = 1.0
        return vec


def _user_vector(user: str, d_user: int, salt: str) -> np.ndarray:
    """Fixed pseudo-random unit vector derived from the salted user id."""
    digest = hashlib.sha256((salt + "\x1f" + user).encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "big")
    rng = np.random.Generator(np.random.PCG64(seed))
    vec = rng.standard_normal(d_user)
    return vec / np.linalg.norm(vec)


def featurize(
    cascade: Cascade,
    provider: EmbeddingProvider,
    d_user: int = 16,
    salt: str = "user-v1",
) -> np.ndarray:
    """Per-node rows: [text embedding | log(1 + dt) | hashed user unit vector]."""
    n = cascade.n
    width = provider.d_text + 1 + d_user
    out = np.zeros((n, width), dtype=np.float64)
    for i in range(n):
        text = cascade.texts[i]
        out[i, : provider.d_text] = provider.embed(
            text if text is not None else cascade.node_ids[i]
        )
        out[i, provider.d_text] = np.log1p(cascade.timestamps[i])
        out[i, provider.d_text + 1 :] = _user_vector(cascade.users[i], d_user, salt)
    return out


def attach_features(
    cascades: list[Cascade],
    provider: EmbeddingProvider,
    d_user: int = 16,
    salt: str = "user-v1",
) -> list[Cascade]:
    return [
        replace(c, features=featurize(c, provider, d_user=d_user, salt=salt))
        for c in cascades
    ]


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

_NODE_KEYS = {"id", "user", "t", "parent", "text"}


def _cascade_from_record(record: dict) -> Cascade:
    if not isinstance(record, dict):
        raise SchemaViolationError("record is not an object")
    missing = {"event_id", "label", "nodes"} - set(record)
    if missing:
        raise SchemaViolationError(f"missing fields: {sorted(missing)}")
    label = record["label"]
    if label not in LABELS:
        raise UnknownLabelError(f"unknown label {label!r}")
    nodes = record["nodes"]
    if not isinstance(nodes, list):
        raise SchemaViolationError("'nodes' must be a list")
    raw = []
    for node in nodes:
        if not isinstance(node, dict) or not {"id", "user", "t"} <= set(node):
            raise SchemaViolationError("node must carry id, user and t")
        unknown = set(node) - _NODE_KEYS
        if unknown:
            raise SchemaViolationError(f"unknown node fields: {sorted(unknown)}")
        raw.append(
            RawNode(
                node_id=str(node["id"]),
                timestamp=float(node["t"]),
                parent_id=node.get("parent"),
                user=str(node["user"]),
                text=node.get("text"),
            )
        )
    return build_cascade(str(record["event_id"]), label, raw)


def load_jsonl(path: str | os.PathLike) -> list[Cascade]:
    """Read one cascade per line; invalid lines are warned about and skipped."""
    cascades = []
    with open(path, "r", encoding="utf-8") as handle:
        lines = handle.readlines()
    if not lines:
        warnings.warn(f"{path}: empty cascade file", stacklevel=2)
        return cascades
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            warnings.warn(f"{path}:{lineno}: invalid JSON ({exc.msg})", stacklevel=2)
            continue
        try:
            cascades.append(_cascade_from_record(record))
        except CascadeRejected as exc:
            warnings.warn(f"{path}:{lineno}: rejected ({exc.reason})", stacklevel=2)
        except CascadeError as exc:
            warnings.warn(f"{path}:{lineno}: {exc}", stacklevel=2)
    return cascades


def _parent_map(cascade: Cascade) -> list[int | None]:
    parents: list[int | None] = [None] * cascade.n
    for p, c in cascade.edges:
        parents[c] = p
    return parents


def cascade_to_record(cascade: Cascade) -> dict:
    parents = _parent_map(cascade)
    return {
        "event_id": cascade.event_id,
        "label": cascade.label,
        "nodes": [
            {
                "id": cascade.node_ids[i],
                "user": cascade.users[i],
                "t": float(cascade.timestamps[i]),
                "parent": None if parents[i] is None else cascade.node_ids[parents[i]],
                "text": cascade.texts[i],
            }
            for i in range(cascade.n)
        ],
    }


def write_jsonl(cascades: list[Cascade], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for cascade in cascades:
            handle.write(json.dumps(cascade_to_record(cascade)) + "\n")


def parse_twitter15_tree(tree_dir: str, label_file: str) -> list[Cascade]:
    """Parse the public tree layout: one file per event, lines of
    ``['uid','tweet_id',delay]->['uid','tweet_id',delay]`` plus a label index
    file of ``label:event_id`` lines.  Events without labels are skipped.
    """
    labels: dict[str, str] = {}
    with open(label_file, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            if ":" not in line:
                raise MalformedLineError(f"{label_file}: bad label line {line!r}")
            raw_label, event_id = line.split(":", 1)
            label = raw_label.strip().lower().replace("-", "").replace("_", "")
            if label not in LABELS:
                raise UnknownLabelError(f"{label_file}: unknown label {raw_label!r}")
            labels[event_id.strip()] = label

    cascades = []
    skipped_unlabeled = 0
    skipped_small = 0
    for filename in sorted(os.listdir(tree_dir)):
        if not filename.endswith(".txt"):
            continue
        event_id = filename[: -len(".txt")]
        if event_id not in labels:
            skipped_unlabeled += 1
            continue
        path = os.path.join(tree_dir, filename)
        nodes: dict[str, RawNode] = {}
        with open(path, "r", encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    left, right = line.split("->")
                    p_uid, p_tid, _ = _parse_triple(left)
                    c_uid, c_tid, c_delay = _parse_triple(right)
                except (ValueError, SyntaxError):
                    raise MalformedLineError(f"{path}:{lineno}: {line!r}") from None
                parent = None if p_tid == "ROOT" else p_tid
                if c_tid not in nodes:
                    nodes[c_tid] = RawNode(c_tid, c_delay, parent, c_uid)
        try:
            cascades.append(build_cascade(event_id, labels[event_id], list(nodes.values())))
        except CascadeRejected:
            skipped_small += 1
    if skipped_unlabeled or skipped_small:
        warnings.warn(
            f"{tree_dir}: skipped {skipped_unlabeled} unlabeled and "
            f"{skipped_small} too-small events",
            stacklevel=2,
        )
    return cascades


def _parse_triple(text: str) -> tuple[str, str, float]:
    import ast

    value = ast.literal_eval(text.strip())
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise ValueError(f"not a triple: {text!r}")
    uid, tid, delay = value
    return str(uid), str(tid), float(delay)


# ---------------------------------------------------------------------------
# synthetic cascades with planted causal DAGs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassParams:
    """Generative knobs for one veracity class.

    branching: preference exponent for attaching to high-out-degree nodes
        (positive -> hubs/stars, negative -> chains, zero -> random trees).
    decay: mean inter-arrival time in seconds.
    text_separation: probability that a token is drawn from the class's own
        vocabulary rather than the shared pool (0 = classes indistinguishable
        by text).
    """

    branching: float = 0.0
    decay: float = 60.0
    text_separation: float = 0.9


@dataclass(frozen=True)
class SyntheticConfig:
    num_events: int = 400
    nodes_min: int = 6
    nodes_max: int = 14
    d_text: int = 64
    d_user: int = 16
    seed: int = 0
    shortcut_prob: float = 0.1
    tokens_per_text: int = 8
    vocab_size: int = 40
    class_params: tuple[ClassParams, ClassParams, ClassParams, ClassParams] = (
        ClassParams(branching=2.5, decay=20.0, text_separation=0.95),
        ClassParams(branching=-2.5, decay=400.0, text_separation=0.95),
        ClassParams(branching=0.0, decay=80.0, text_separation=0.95),
        ClassParams(branching=0.8, decay=160.0, text_separation=0.95),
    )

    def validate(self) -> None:
        if self.num_events < 1:
            raise InvalidConfigError("num_events must be positive")
        if self.nodes_min < 2:
            raise InvalidConfigError("nodes_min must be at least 2")
        if self.nodes_max < self.nodes_min:
            raise InvalidConfigError("nodes_max must be >= nodes_min")
        if not (0.0 <= self.shortcut_prob <= 1.0):
            raise InvalidConfigError("shortcut_prob must be in [0, 1]")
        if len(self.class_params) != len(LABELS):
            raise InvalidConfigError(f"need {len(LABELS)} class parameter sets")
        for cp in self.class_params:
            if cp.decay <= 0:
                raise InvalidConfigError("decay must be positive")
            if not (0.0 <= cp.text_separation <= 1.0):
                raise InvalidConfigError("text_separation must be in [0, 1]")


# Pool roots share almost no character trigrams, so hashed embeddings of
# different pools land in nearly disjoint bucket sets even at small d_text.
_CLASS_POOLS = ("aurora", "bistro", "cyclone", "dynamo")
_SHARED_POOL = "generic"


def _synthetic_tokens(config: SyntheticConfig, class_index: int, rng) -> str:
    params = config.class_params[class_index]
    tokens = []
    for _ in range(config.tokens_per_text):
        if rng.random() < params.text_separation:
            pool = _CLASS_POOLS[class_index]
        else:
            pool = _SHARED_POOL
        tokens.append(f"{pool}{rng.integers(config.vocab_size)}")
    return " ".join(tokens)


def _generate_one(
    config: SyntheticConfig, event_index: int, class_index: int, seed_seq
) -> tuple[Cascade, list[tuple[int, int]]]:
    rng = np.random.default_rng(seed_seq)
    params = config.class_params[class_index]
    n = int(rng.integers(config.nodes_min, config.nodes_max + 1))

    parents: list[int | None] = [None]
    out_deg = np.zeros(n, dtype=np.int64)
    times = np.zeros(n, dtype=np.float64)
    for j in range(1, n):
        weights = np.exp(params.branching * out_deg[:j].astype(np.float64))
        weights /= weights.sum()
        parent = int(rng.choice(j, p=weights))
        parents.append(parent)
        out_deg[parent] += 1
        times[j] = times[j - 1] + rng.exponential(params.decay)

    event_id = f"syn-{event_index:05d}"
    raw = [
        RawNode(
            node_id=f"{event_id}-n{j:03d}",
            timestamp=float(times[j]),
            parent_id=None if parents[j] is None else f"{event_id}-n{parents[j]:03d}",
            user=f"user{rng.integers(10**9):09d}",
            text=_synthetic_tokens(config, class_index, rng),
        )
        for j in range(n)
    ]
    cascade = build_cascade(event_id, LABELS[class_index], raw)

    # Planted influence DAG: the reply tree plus forward shortcuts.  All edges
    # point from earlier to later nodes, so acyclicity holds by construction.
    planted = list(cascade.edges)
    existing = set(planted)
    for j in range(2, n):
        if rng.random() < config.shortcut_prob:
            i = int(rng.integers(0, j))
            if (i, j) not in existing:
                planted.append((i, j))
                existing.add((i, j))
    planted.sort()
    return cascade, planted


def generate_synthetic(
    config: SyntheticConfig,
) -> tuple[list[Cascade], list[list[tuple[int, int]]]]:
    """Reproducible synthetic corpus plus the planted ground-truth DAGs.

    Every cascade gets its own RNG stream spawned from the master seed, so
    generation order (or parallel generation) cannot change the output.
    Labels rotate round-robin, keeping classes balanced within one event.
    """
    config.validate()
    master = np.random.SeedSequence(config.seed)
    children = master.spawn(config.num_events)
    provider = HashedTrigramEmbedder(d_text=config.d_text)
    cascades = []
    planted_dags = []
    for i in range(config.num_events):
        cascade, planted = _generate_one(config, i, i % len(LABELS), children[i])
        cascade.features = featurize(cascade, provider, d_user=config.d_user)
        cascades.append(cascade)
        planted_dags.append(planted)
    return cascades, planted_dags


def write_planted_dags(
    cascades: list[Cascade],
    planted_dags: list[list[tuple[int, int]]],
    path: str | os.PathLike,
) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for cascade, edges in zip(cascades, planted_dags):
            record = {
                "event_id": cascade.event_id,
                "n": cascade.n,
                "edges": [list(e) for e in edges],
            }
            handle.write(json.dumps(record) + "\n")


def is_acyclic(edges: list[tuple[int, int]], n: int) -> bool:
    """Kahn's topological sort; True when every node can be ordered."""
    indeg = [0] * n
    children: list[list[int]] = [[] for _ in range(n)]
    for a, b in edges:
        indeg[b] += 1
        children[a].append(b)
    queue = [i for i in range(n) if indeg[i] == 0]
    seen = 0
    while queue:
        node = queue.pop()
        seen += 1
        for child in children[node]:
            indeg[child] -= 1
            if indeg[child] == 0:
                queue.append(child)
    return seen == n


# ---------------------------------------------------------------------------
# splitting and batching
# ---------------------------------------------------------------------------

def split_dataset(
    cascades: list[Cascade],
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> tuple[list[Cascade], list[Cascade], list[Cascade]]:
    """Stratified split: per class, floor(r_train) / floor(r_val) / remainder."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidConfigError(f"ratios must sum to 1, got {ratios}")
    if not cascades:
        raise EmptyClassError("no cascades to split")

    by_label: dict[str, list[Cascade]] = {}
    for cascade in cascades:
        by_label.setdefault(cascade.label, []).append(cascade)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    train: list[Cascade] = []
    val: list[Cascade] = []
    test: list[Cascade] = []
    for label in LABELS:
        group = by_label.get(label)
        if group is None:
            continue
        order = rng.permutation(len(group))
        shuffled = [group[i] for i in order]
        # epsilon keeps decimal ratios exact: floor(0.70 * 350) must be 245
        n_train = int(np.floor(ratios[0] * len(group) + 1e-9))
        n_val = int(np.floor(ratios[1] * len(group) + 1e-9))
        train.extend(shuffled[:n_train])
        val.extend(shuffled[n_train : n_train + n_val])
        test.extend(shuffled[n_train + n_val :])
    return train, val, test


def make_batches(cascades: list[Cascade], batch_size: int) -> list[Batch]:
    """Pad each group of ``batch_size`` cascades to its max length."""
    if batch_size < 1:
        raise InvalidConfigError("batch_size must be positive")
    widths = set()
    for cascade in cascades:
        if cascade.features is None:
            raise MixedFeatureWidthError(
                f"cascade {cascade.event_id} has no features; call featurize first"
            )
        widths.add(cascade.features.shape[1])
    if len(widths) > 1:
        raise MixedFeatureWidthError(f"mixed feature widths: {sorted(widths)}")

    batches = []
    for start in range(0, len(cascades), batch_size):
        group = cascades[start : start + batch_size]
        B = len(group)
        L = max(c.n for c in group)
        F = group[0].features.shape[1]
        X = np.zeros((B, L, F), dtype=np.float64)
        M = np.zeros((B, L), dtype=np.float64)
        for b, cascade in enumerate(group):
            X[b, : cascade.n] = cascade.features
            M[b, : cascade.n] = 1.0
        batches.append(
            Batch(
                X=X,
                M=M,
                edges_per_graph=[list(c.edges) for c in group],
                y=np.array([c.label_index for c in group], dtype=np.int64),
                n_per_graph=np.array([c.n for c in group], dtype=np.int64),
                event_ids=[c.event_id for c in group],
            )
        )
    return batches

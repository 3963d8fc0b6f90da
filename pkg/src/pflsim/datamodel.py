"""Core value types: examples, client datasets, parameter vectors, metric records."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

CLASSIFICATION = "classification"
REGRESSION = "regression"
TASK_KINDS = (CLASSIFICATION, REGRESSION)

SPLIT_TAGS = ("train", "valid", "test", "personalization", "evaluation")
CLIENT_ROLES = ("train", "valid", "test")
ALL_ROLES = "all"

DATASET_FORMAT = "pflsim.dataset"
DATASET_FORMAT_VERSION = 1


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: Union[int, float]
    timestamp: Optional[int] = None


@dataclass(frozen=True, eq=False)
class ClientDataset:
    """Examples owned by one client, stored column-wise.

    ``X`` has shape (n, d), ``y`` shape (n,). ``timestamps`` and ``split_tags``
    are optional per-example arrays aligned with ``X``.
    """

    client_id: str
    X: np.ndarray
    y: np.ndarray
    timestamps: Optional[np.ndarray] = None
    split_tags: Optional[tuple] = None

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(len(X), -1) if len(X) else X.reshape(0, 0)
        y = np.array(self.y)
        if y.dtype.kind not in "iuf":
            y = y.astype(np.float64)
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "y", _frozen(y))
        if len(X) != len(y):
            raise ValueError(f"client {self.client_id!r}: {len(X)} feature rows for {len(y)} labels")
        if self.timestamps is not None:
            ts = _frozen(np.asarray(self.timestamps, dtype=np.int64))
            if len(ts) != len(y):
                raise ValueError(f"client {self.client_id!r}: timestamps do not align with examples")
            object.__setattr__(self, "timestamps", ts)
        if self.split_tags is not None:
            tags = tuple(self.split_tags)
            # one tag per example; tag names are checked by validate_dataset
            if len(tags) != len(y):
                raise ValueError(f"client {self.client_id!r}: {len(tags)} split tags for {len(y)} examples")
            object.__setattr__(self, "split_tags", tags)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def examples(self) -> tuple:
        ts = self.timestamps
        return tuple(
            Example(self.X[i], self.y[i].item(), None if ts is None else int(ts[i]))
            for i in range(len(self))
        )

    def indices(self, tag: str) -> np.ndarray:
        if self.split_tags is None:
            raise ValueError(f"client {self.client_id!r} has no split tags")
        return np.array([i for i, t in enumerate(self.split_tags) if t == tag], dtype=np.int64)

    def subset(self, tag: Optional[str] = None) -> tuple:
        """(X, y) for the examples carrying ``tag``; all examples when tag is None."""
        if tag is None:
            return self.X, self.y
        idx = self.indices(tag)
        return self.X[idx], self.y[idx]

    def count(self, tag: str) -> int:
        if self.split_tags is None:
            return 0
        return sum(1 for t in self.split_tags if t == tag)

    def with_tags(self, tags: Optional[Sequence[str]]) -> "ClientDataset":
        return ClientDataset(self.client_id, self.X, self.y, self.timestamps,
                             None if tags is None else tuple(tags))

    def take(self, idx: Sequence[int]) -> "ClientDataset":
        idx = np.asarray(idx, dtype=np.int64)
        ts = None if self.timestamps is None else self.timestamps[idx]
        tags = None if self.split_tags is None else tuple(self.split_tags[i] for i in idx)
        return ClientDataset(self.client_id, self.X[idx], self.y[idx], ts, tags)

    def __eq__(self, other):
        if not isinstance(other, ClientDataset):
            return NotImplemented
        return (
            self.client_id == other.client_id
            and self.X.shape == other.X.shape
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and _opt_equal(self.timestamps, other.timestamps)
            and self.split_tags == other.split_tags
        )

    __hash__ = None


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


@dataclass(frozen=True, eq=False)
class FederatedDataset:
    clients: tuple
    task_kind: str
    feature_dim: int
    num_classes: int = 1
    client_role: Union[str, Mapping[str, str], None] = None

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(self.clients))
        if isinstance(self.client_role, Mapping):
            object.__setattr__(self, "client_role", dict(self.client_role))

    @property
    def client_ids(self) -> list:
        return [c.client_id for c in self.clients]

    def client(self, client_id: str) -> ClientDataset:
        for c in self.clients:
            if c.client_id == client_id:
                return c
        raise KeyError(client_id)

    def by_role(self, role: str) -> list:
        """Clients holding ``role``; in the cross-silo layout every client holds every role."""
        if self.client_role is None or self.client_role == ALL_ROLES:
            return list(self.clients)
        return [c for c in self.clients if self.client_role.get(c.client_id) == role]

    @property
    def is_cross_silo(self) -> bool:
        return self.client_role == ALL_ROLES

    def replace_clients(self, clients: Iterable[ClientDataset], client_role=None) -> "FederatedDataset":
        return FederatedDataset(tuple(clients), self.task_kind, self.feature_dim, self.num_classes,
                                self.client_role if client_role is None else client_role)

    def __eq__(self, other):
        if not isinstance(other, FederatedDataset):
            return NotImplemented
        return (
            self.task_kind == other.task_kind
            and self.feature_dim == other.feature_dim
            and self.num_classes == other.num_classes
            and self.client_role == other.client_role
            and len(self.clients) == len(other.clients)
            and all(a == b for a, b in zip(self.clients, other.clients))
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Flat parameter vector with named contiguous layer slices."""

    values: np.ndarray
    arch: object
    layer_index: Mapping[str, slice] = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).ravel()
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "layer_index", dict(self.layer_index))

    def __len__(self) -> int:
        return len(self.values)

    def layer(self, name: str) -> np.ndarray:
        return self.values[self.layer_index[name]]

    def with_values(self, values: np.ndarray) -> "ModelParams":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ValueError(f"expected {self.values.shape} values, got {values.shape}")
        return ModelParams(values, self.arch, self.layer_index)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True)
class ClientRecord:
    client_id: str
    metric_before: Optional[float]
    metric_after: float
    n_personalization: int
    n_evaluation: int


@dataclass(frozen=True)
class PerClientMetrics:
    records: tuple
    metric_kind: str  # "accuracy" or "mse"

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.metric_kind not in ("accuracy", "mse"):
            raise ValueError(f"unknown metric kind {self.metric_kind!r}")
        for r in self.records:
            for v in (r.metric_before, r.metric_after):
                if v is None:
                    continue
                if self.metric_kind == "accuracy" and not 0.0 <= v <= 1.0:
                    raise ValueError(f"accuracy {v} out of [0, 1] for {r.client_id}")
                if self.metric_kind == "mse" and v < 0:
                    raise ValueError(f"negative mse for {r.client_id}")
            if r.n_evaluation < 1:
                raise ValueError(f"client {r.client_id} has no evaluation examples")

    @property
    def higher_is_better(self) -> bool:
        return self.metric_kind == "accuracy"


@dataclass(frozen=True)
class RoundTrace:
    round: int
    sampled_client_ids: tuple
    params_broadcast: int
    params_uploaded: int
    cluster_assignments: Optional[Mapping[str, int]] = None
    phase: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "sampled_client_ids", tuple(self.sampled_client_ids))


def validate_dataset(ds: FederatedDataset) -> list:
    """Return a list of human-readable invariant violations (empty when valid)."""
    problems = []
    if ds.task_kind not in TASK_KINDS:
        problems.append(f"unknown task_kind {ds.task_kind!r}")
    if ds.task_kind == REGRESSION and ds.num_classes != 1:
        problems.append("regression datasets must declare num_classes = 1")
    seen = set()
    for c in ds.clients:
        cid = c.client_id
        if cid in seen:
            problems.append(f"duplicate client_id {cid!r}")
        seen.add(cid)
        if len(c) and c.X.shape[1] != ds.feature_dim:
            problems.append(f"client {cid!r}: feature dimension {c.X.shape[1]} != {ds.feature_dim}")
        if ds.task_kind == CLASSIFICATION and len(c):
            y = c.y
            if not np.all(np.equal(np.mod(y, 1), 0)) or y.min() < 0 or y.max() >= ds.num_classes:
                problems.append(f"client {cid!r}: class index outside [0, {ds.num_classes})")
        if c.split_tags is not None:
            if len(c.split_tags) != len(c):
                problems.append(f"client {cid!r}: {len(c.split_tags)} split tags for {len(c)} examples")
            bad = sorted({t for t in c.split_tags if t not in SPLIT_TAGS})
            if bad:
                problems.append(f"client {cid!r}: unknown split tags {bad}")
    role = ds.client_role
    if isinstance(role, Mapping):
        missing_ids = [c.client_id for c in ds.clients if c.client_id not in role]
        if missing_ids:
            problems.append(f"clients without a role: {missing_ids}")
        extra = sorted(set(role) - seen)
        if extra:
            problems.append(f"roles assigned to unknown clients: {extra}")
        bad = sorted({r for r in role.values() if r not in CLIENT_ROLES})
        if bad:
            problems.append(f"unknown client roles {bad}")
        for r in CLIENT_ROLES:
            if r not in role.values():
                problems.append(f"missing {r} clients")
    elif role == ALL_ROLES:
        for c in ds.clients:
            if c.split_tags is None or not {"train", "valid", "test"} <= set(c.split_tags):
                problems.append(f"client {c.client_id!r}: cross-silo client lacks train/valid/test tags")
    elif role is not None:
        problems.append(f"client_role must be a mapping or {ALL_ROLES!r}")
    return problems


def write_dataset(ds: FederatedDataset, path) -> None:
    """Write a JSON-lines file: a header line, then one object per client."""
    path = Path(path)
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_FORMAT_VERSION,
        "task_kind": ds.task_kind,
        "feature_dim": ds.feature_dim,
        "num_classes": ds.num_classes,
    }
    if ds.client_role == ALL_ROLES:
        header["client_role"] = ALL_ROLES
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for c in ds.clients:
            examples = []
            for i in range(len(c)):
                ex = {"x": c.X[i].tolist(), "y": c.y[i].item()}
                if c.timestamps is not None:
                    ex["t"] = int(c.timestamps[i])
                examples.append(ex)
            obj = {"client_id": c.client_id, "examples": examples}
            if isinstance(ds.client_role, Mapping) and c.client_id in ds.client_role:
                obj["role"] = ds.client_role[c.client_id]
            if c.split_tags is not None:
                obj["tags"] = list(c.split_tags)
            fh.write(json.dumps(obj) + "\n")


def read_dataset(path, task_kind: Optional[str] = None, num_classes: Optional[int] = None) -> FederatedDataset:
    """Read a file written by :func:`write_dataset`.

    Files without a header line are accepted; the task kind is then inferred
    from the labels (all-integer labels mean classification) unless given.
    """
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    header = {}
    if lines and "format" in json.loads(lines[0]):
        header = json.loads(lines[0])
        if header["format"] != DATASET_FORMAT:
            raise ValueError(f"not a dataset file: format {header['format']!r}")
        if header.get("version") != DATASET_FORMAT_VERSION:
            raise ValueError(f"unsupported dataset version {header.get('version')!r}")
        lines = lines[1:]
    clients, roles = [], {}
    for ln in lines:
        obj = json.loads(ln)
        exs = obj["examples"]
        X = np.array([e["x"] for e in exs], dtype=np.float64)
        y = np.array([e["y"] for e in exs])
        ts = [e.get("t") for e in exs]
        ts = None if any(t is None for t in ts) or not ts else np.array(ts, dtype=np.int64)
        clients.append(ClientDataset(obj["client_id"], X, y, ts, obj.get("tags")))
        if "role" in obj:
            roles[obj["client_id"]] = obj["role"]
    kind = header.get("task_kind", task_kind)
    if kind is None:
        all_int = all(np.all(np.mod(c.y, 1) == 0) for c in clients if len(c))
        kind = CLASSIFICATION if all_int else REGRESSION
    if kind == CLASSIFICATION:
        clients = [ClientDataset(c.client_id, c.X, c.y.astype(np.int64), c.timestamps, c.split_tags)
                   for c in clients]
    else:
        clients = [ClientDataset(c.client_id, c.X, c.y.astype(np.float64), c.timestamps, c.split_tags)
                   for c in clients]
    dim = header.get("feature_dim")
    if dim is None:
        dim = next((c.X.shape[1] for c in clients if len(c)), 0)
    ncls = header.get("num_classes", num_classes)
    if ncls is None:
        ncls = 1 if kind == REGRESSION else int(max(c.y.max() for c in clients if len(c))) + 1
    role = header.get("client_role") or (roles or None)
    return FederatedDataset(tuple(clients), kind, int(dim), int(ncls), role)

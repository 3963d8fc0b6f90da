"""Synthetic federated data, CSV ingestion, and the two split regimes.

Cross-device splits partition *clients* into train/valid/test roles and split
each valid/test client's examples into personalization and evaluation halves.
Cross-silo splits tag every client's examples as train/valid/test.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._rng import rng_for
from .datamodel import (ALL_ROLES, CLASSIFICATION, REGRESSION, ClientDataset,
                        FederatedDataset)

SYNTH_KINDS = ("planted_clusters", "label_skew", "local_shift")


# Separation above which each planted cluster is identifiable from its clients' data:
# with heterogeneity >= this, at least RECOVERY_MIN_EXAMPLES examples per client and
# label_noise <= 0.1, assigning every client to the generating model with the lowest
# error recovers the planted clustering exactly.
RECOVERY_HETEROGENEITY = 2.0
RECOVERY_MIN_EXAMPLES = 30


@dataclass(frozen=True)
class SynthSpec:
    kind: str = "planted_clusters"
    num_clients: int = 40
    examples_per_client: tuple = (60, 20)  # (mean, spread): uniform in mean +/- spread
    feature_dim: int = 10
    num_classes: int = 3
    num_planted_clusters: int = 2
    heterogeneity: float = 4.0
    seed: int = 0
    label_noise: float = 0.0
    task_kind: str = CLASSIFICATION
    noise_std: float = 0.1  # regression target noise
    timestamps: bool = False

    def __post_init__(self):
        if self.kind not in SYNTH_KINDS:
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be positive")
        mean, spread = self.examples_per_client
        if mean - spread < 1 or spread < 0:
            raise ValueError("examples_per_client must keep every client nonempty")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if self.task_kind not in (CLASSIFICATION, REGRESSION):
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        if self.task_kind == CLASSIFICATION and self.num_classes < 2:
            raise ValueError("classification needs at least 2 classes")
        if self.task_kind == REGRESSION and self.kind == "label_skew":
            raise ValueError("label_skew is defined for classification only")
        if self.heterogeneity < 0:
            raise ValueError("heterogeneity must be nonnegative")
        if self.kind == "planted_clusters" and self.num_planted_clusters < 1:
            raise ValueError("num_planted_clusters must be positive")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError("label_noise must lie in [0, 1]")

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.task_kind == CLASSIFICATION else 1

    def client_id(self, i: int) -> str:
        return f"client_{i:05d}"


@dataclass(frozen=True)
class PlantedTruth:
    """Ground truth behind a planted-cluster dataset."""

    assignment: dict       # client_id -> cluster index
    thetas: tuple          # per-cluster (d, out_dim) generating weights

    def predict(self, cluster: int, X: np.ndarray) -> np.ndarray:
        z = X @ self.thetas[cluster]
        return np.argmax(z, axis=1) if z.shape[1] > 1 else z[:, 0]


def _orthonormal_directions(rng, count: int, shape: tuple) -> list:
    size = int(np.prod(shape))
    if count > size:
        raise ValueError("too many planted clusters for the parameter dimension")
    q, _ = np.linalg.qr(rng.standard_normal((size, count)))
    return [q[:, j].reshape(shape) * np.sqrt(size) for j in range(count)]


def planted_truth(spec: SynthSpec) -> PlantedTruth:
    """Recompute the generating models of a planted-cluster spec.

    Cluster ``c`` uses ``(shared + h * U_c) / sqrt(1 + h^2)`` with mutually
    orthogonal directions, so large ``h`` makes the cluster models nearly
    orthogonal and ``h = 0`` makes them identical.
    """
    if spec.kind != "planted_clusters":
        raise ValueError("planted_truth needs a planted_clusters spec")
    rng = rng_for(spec.seed, "planted-thetas")
    shape = (spec.feature_dim, spec.out_dim)
    dirs = _orthonormal_directions(rng, spec.num_planted_clusters + 1, shape)
    shared, own = dirs[0], dirs[1:]
    h = spec.heterogeneity
    thetas = tuple((shared + h * u) / np.sqrt(1.0 + h * h) for u in own)
    assignment = {spec.client_id(i): i % spec.num_planted_clusters for i in range(spec.num_clients)}
    return PlantedTruth(assignment, thetas)


def _client_size(spec: SynthSpec, rng) -> int:
    mean, spread = spec.examples_per_client
    return int(rng.integers(int(mean - spread), int(mean + spread) + 1))


def _labels(spec: SynthSpec, X: np.ndarray, theta: np.ndarray, rng) -> np.ndarray:
    z = X @ theta
    if spec.task_kind == REGRESSION:
        return z[:, 0] + spec.noise_std * rng.standard_normal(len(X))
    y = np.argmax(z, axis=1)
    if spec.label_noise:
        flip = rng.random(len(y)) < spec.label_noise
        y = np.where(flip, rng.integers(0, spec.num_classes, len(y)), y)
    return y.astype(np.int64)


def _label_prior(spec: SynthSpec, rng) -> np.ndarray:
    # Dirichlet concentration 1/h: larger heterogeneity gives more skewed priors
    if spec.heterogeneity > 0:
        return rng.dirichlet(np.full(spec.num_classes, 1.0 / spec.heterogeneity))
    return np.full(spec.num_classes, 1.0 / spec.num_classes)


def label_priors(spec: SynthSpec) -> dict:
    """client_id -> class prior used by a label_skew spec."""
    if spec.kind != "label_skew":
        raise ValueError("label_priors needs a label_skew spec")
    out = {}
    for i in range(spec.num_clients):
        cid = spec.client_id(i)
        rng = rng_for(spec.seed, cid)
        _client_size(spec, rng)
        out[cid] = _label_prior(spec, rng)
    return out


def generate_synthetic(spec: SynthSpec) -> FederatedDataset:
    """Generate a heterogeneous federated dataset, deterministic in ``spec``.

    Each client draws from its own stream keyed by (seed, client_id), so the
    data of one client does not depend on how many others exist.
    """
    clients = []
    d = spec.feature_dim
    if spec.kind == "planted_clusters":
        truth = planted_truth(spec)
    else:
        shared_rng = rng_for(spec.seed, "shared-model")
        theta = shared_rng.standard_normal((d, spec.out_dim))
        class_means = 2.0 * shared_rng.standard_normal((spec.num_classes, d))
    for i in range(spec.num_clients):
        cid = spec.client_id(i)
        rng = rng_for(spec.seed, cid)
        n = _client_size(spec, rng)
        if spec.kind == "planted_clusters":
            X = rng.standard_normal((n, d))
            y = _labels(spec, X, truth.thetas[truth.assignment[cid]], rng)
        elif spec.kind == "local_shift":
            direction = rng.standard_normal(d)
            shift = spec.heterogeneity * direction / np.linalg.norm(direction)
            X = rng.standard_normal((n, d)) + shift
            y = _labels(spec, X, theta, rng)
        else:
            prior = _label_prior(spec, rng)
            y = rng.choice(spec.num_classes, size=n, p=prior).astype(np.int64)
            X = class_means[y] + rng.standard_normal((n, d))
        ts = np.arange(n, dtype=np.int64) if spec.timestamps else None
        clients.append(ClientDataset(cid, X, y, ts))
    ncls = spec.num_classes if spec.task_kind == CLASSIFICATION else 1
    return FederatedDataset(tuple(clients), spec.task_kind, d, ncls, None)


def load_csv_silo(path, client_col: str, label_col: str, feature_cols: Optional[Sequence[str]] = None,
                  task_kind: str = CLASSIFICATION, standardize: bool = True) -> FederatedDataset:
    """One client per distinct value of ``client_col``.

    Features default to every column except the client and label columns.
    Classification labels are mapped to indices in sorted order (so ``-1/+1``
    becomes ``0/1``). Standardization uses the mean/std of the whole file.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    header = [h.strip() for h in header]
    missing = [c for c in [client_col, label_col, *(feature_cols or [])] if c not in header]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    if feature_cols is None:
        feature_cols = [h for h in header if h not in (client_col, label_col)]
    ci, li = header.index(client_col), header.index(label_col)
    fi = [header.index(c) for c in feature_cols]
    ids, X, y = [], [], []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
        try:
            X.append([float(row[j]) for j in fi])
            y.append(float(row[li]))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
        ids.append(row[ci].strip())
    if not rows:
        raise ValueError(f"{path}: no data rows")
    X = np.array(X, dtype=np.float64)
    y = np.array(y)
    if standardize:
        std = X.std(axis=0)
        X = (X - X.mean(axis=0)) / np.where(std > 0, std, 1.0)
    if task_kind == CLASSIFICATION:
        classes, y = np.unique(y, return_inverse=True)
        ncls = max(2, len(classes))
        y = y.astype(np.int64)
    else:
        ncls = 1
    order, seen = [], set()
    for cid in ids:
        if cid not in seen:
            seen.add(cid)
            order.append(cid)
    ids = np.array(ids, dtype=object)
    clients = []
    for cid in order:
        idx = np.flatnonzero(ids == cid)
        if len(idx) == 0:
            raise ValueError(f"client {cid!r} has no rows")
        clients.append(ClientDataset(cid, X[idx], y[idx]))
    return FederatedDataset(tuple(clients), task_kind, X.shape[1], ncls, None)


@dataclass(frozen=True)
class SplitSpec:
    regime: str = "cross_device"
    client_fractions: tuple = (0.6, 0.2, 0.2)
    local_fractions: tuple = (0.7, 0.15, 0.15)
    personalization_fraction: float = 0.5
    sort_by_time: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.regime not in ("cross_device", "cross_silo"):
            raise ValueError(f"unknown regime {self.regime!r}")
        fr = self.client_fractions if self.regime == "cross_device" else self.local_fractions
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions {fr} must be three nonnegative numbers summing to 1")
        if fr[1] <= 0 or fr[2] <= 0:
            raise ValueError("valid and test fractions must be positive")
        if not 0.0 < self.personalization_fraction < 1.0:
            raise ValueError("personalization_fraction must lie in (0, 1)")


def _floor(x: float) -> int:
    return int(np.floor(x + 1e-9))


def split_cross_device(ds: FederatedDataset, spec: SplitSpec) -> FederatedDataset:
    if spec.regime != "cross_device":
        raise ValueError("split_cross_device needs regime = cross_device")
    ids = sorted(ds.client_ids)
    n = len(ids)
    rng = rng_for(spec.seed, "client-roles")
    perm = [ids[i] for i in rng.permutation(n)]
    _, fv, ft = spec.client_fractions
    n_valid, n_test = int(round(fv * n)), int(round(ft * n))
    n_train = n - n_valid - n_test
    if min(n_train, n_valid, n_test) < 1:
        raise ValueError(f"{n} clients cannot fill train/valid/test roles at {spec.client_fractions}")
    roles = {}
    for j, cid in enumerate(perm):
        roles[cid] = "train" if j < n_train else ("valid" if j < n_train + n_valid else "test")
    clients = []
    for c in ds.clients:
        if roles[c.client_id] == "train":
            clients.append(c.with_tags(None))
            continue
        if len(c) < 2:
            raise ValueError(f"{roles[c.client_id]} client {c.client_id!r} has fewer than 2 examples")
        clients.append(c.with_tags(_personalization_tags(c, spec)))
    return ds.replace_clients(clients, client_role=roles)


def _personalization_tags(c: ClientDataset, spec: SplitSpec) -> list:
    n = len(c)
    n_pers = min(n - 1, max(1, _floor(spec.personalization_fraction * n)))
    if spec.sort_by_time and c.timestamps is not None:
        order = np.argsort(c.timestamps, kind="stable")
    else:
        order = rng_for(spec.seed, c.client_id, "personalization").permutation(n)
    tags = ["evaluation"] * n
    for i in order[:n_pers]:
        tags[i] = "personalization"
    return tags


def split_cross_silo(ds: FederatedDataset, spec: SplitSpec) -> FederatedDataset:
    if spec.regime != "cross_silo":
        raise ValueError("split_cross_silo needs regime = cross_silo")
    _, fv, ft = spec.local_fractions
    clients = []
    for c in ds.clients:
        n = len(c)
        if n < 3:
            raise ValueError(f"client {c.client_id!r} has {n} examples; cross-silo needs at least 3")
        n_valid, n_test = max(1, _floor(fv * n)), max(1, _floor(ft * n))
        n_train = n - n_valid - n_test
        if n_train < 1:
            raise ValueError(f"client {c.client_id!r} is too small for fractions {spec.local_fractions}")
        order = rng_for(spec.seed, c.client_id, "silo").permutation(n)
        tags = ["train"] * n
        for i in order[n_train:n_train + n_valid]:
            tags[i] = "valid"
        for i in order[n_train + n_valid:]:
            tags[i] = "test"
        clients.append(c.with_tags(tags))
    return ds.replace_clients(clients, client_role=ALL_ROLES)


def split(ds: FederatedDataset, spec: SplitSpec) -> FederatedDataset:
    return split_cross_device(ds, spec) if spec.regime == "cross_device" else split_cross_silo(ds, spec)


def sample_clients(pool: Sequence[str], n: int, round: int, seed: int) -> list:
    """Uniform draw without replacement; independent across rounds."""
    if n > len(pool):
        raise ValueError(f"cannot sample {n} clients from a pool of {len(pool)}")
    if n < 0:
        raise ValueError("n must be nonnegative")
    idx = rng_for(seed, round, "sample-clients").choice(len(pool), size=n, replace=False)
    return [pool[i] for i in idx]


def build_ood_set(test_clients: Sequence[ClientDataset], n: int, seed: int, tag: str = "evaluation") -> tuple:
    """Sample ``n`` examples from the pooled evaluation sets of the test clients.

    Returns ``(X, y)`` arrays; rows keep their pooled order.
    """
    parts = [c.subset(tag) for c in test_clients]
    X = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, 0))
    y = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0)
    if n > len(y):
        raise ValueError(f"requested {n} OOD examples but only {len(y)} are pooled")
    idx = np.sort(rng_for(seed, "ood-set").choice(len(y), size=n, replace=False))
    return X[idx], y[idx]

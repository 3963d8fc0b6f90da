"""HypCluster / IFCA training and selection, plus the k-FedAvg ensemble baseline."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .. import models
from ..datamodel import ClientDataset, FederatedDataset, ModelParams
from ..engine import EngineConfig, load_checkpoint, run_fedavg, run_rounds, select_model, training_data, with_rounds
from ..models import ArchDescriptor

INITS = ("default", "random")


@dataclass(frozen=True)
class HypClusterSpec:
    k: int = 2
    warmstart_rounds: int = 0   # 0 disables warm start
    init: str = "default"       # "default": init_params(seed + j); "random": gaussian weights
    init_scale: float = 1.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("number of clusters k must be >= 1")
        if self.warmstart_rounds < 0:
            raise ValueError("warmstart_rounds must be >= 0")
        if self.init not in INITS:
            raise ValueError(f"unknown init {self.init!r}")

    @property
    def warmstart(self) -> bool:
        return self.warmstart_rounds > 0


@dataclass
class HypClusterState:
    models: list
    spec: HypClusterSpec
    traces: list = field(default_factory=list, repr=False)
    history: list = field(default_factory=list, repr=False)

    @property
    def k(self) -> int:
        return len(self.models)


def initial_models(arch: ArchDescriptor, seed: int, spec: HypClusterSpec) -> list:
    if spec.init == "random":
        return [models.random_params(arch, seed + j, spec.init_scale) for j in range(spec.k)]
    return [models.init_params(arch, seed + j) for j in range(spec.k)]


def hypcluster_train(ds: FederatedDataset, arch: ArchDescriptor, cfg: EngineConfig, spec: HypClusterSpec,
                     workers: int = 1, evaluate=None, checkpoint_dir=None, resume_from=None) -> HypClusterState:
    """Train ``k`` cluster models; warm start runs ``k`` FedAvg trainings first (seeds seed + j).

    ``resume_from`` names a checkpoint of the clustering phase. Warm start is
    recomputed, which is deterministic, and training continues from the stored round.
    """
    traces = []
    if spec.warmstart:
        start = []
        for j in range(spec.k):
            res = run_fedavg(ds, arch, with_rounds(cfg, spec.warmstart_rounds, cfg.seed + j),
                             workers=workers, phase=f"warmstart_{j}")
            start.append(res.params)
            traces.extend(res.traces)
    else:
        start = initial_models(arch, cfg.seed, spec)
    if resume_from is not None:
        ck = load_checkpoint(resume_from, arch)
        if ck["seed"] != cfg.seed or len(ck["models"]) != spec.k:
            raise ValueError("checkpoint does not match this clustering run")
        res = run_rounds(ds, arch, cfg, ck["models"], ck["states"], ck["round"], evaluate, checkpoint_dir,
                         workers, prior_traces=ck["traces"], prior_history=ck["history"])
    else:
        res = run_rounds(ds, arch, cfg, start, evaluate=evaluate, checkpoint_dir=checkpoint_dir, workers=workers)
    return HypClusterState(res.models, spec, traces + res.traces, res.history)


def hypcluster_select(cluster_models: Sequence[ModelParams], client: ClientDataset,
                      select_tag: str = "personalization", eval_tag: str = "evaluation") -> tuple:
    """Pick the lowest-loss model on ``select_tag`` examples; score it on ``eval_tag``."""
    batch = client.subset(select_tag)
    if len(batch[1]) == 0:
        raise ValueError(f"client {client.client_id!r} has an empty {select_tag} set")
    idx, _ = select_model(cluster_models, batch)
    return idx, models.metric(cluster_models[idx], client.subset(eval_tag))


def train_assignments(cluster_models: Sequence[ModelParams], ds: FederatedDataset) -> dict:
    """Cluster chosen by every training client on its own training data."""
    return {cid: select_model(cluster_models, batch)[0] for cid, batch in training_data(ds).items()}


def ensemble_k_fedavg(ds: FederatedDataset, arch: ArchDescriptor, cfg: EngineConfig, k: int, rounds_each: int,
                      seeds: Optional[Sequence[int]] = None, workers: int = 1) -> tuple:
    """Run FedAvg ``k`` times; returns (models, traces). Seeds default to seed + j."""
    if k < 1:
        raise ValueError("k must be >= 1")
    seeds = [cfg.seed + j for j in range(k)] if seeds is None else list(seeds)
    if len(seeds) != k:
        raise ValueError("need one seed per ensemble member")
    out, traces = [], []
    for j, s in enumerate(seeds):
        res = run_fedavg(ds, arch, with_rounds(cfg, rounds_each, s), workers=workers, phase=f"ensemble_{j}")
        out.append(res.params)
        traces.extend(res.traces)
    return out, traces


def first_cluster_share(traces) -> list:
    """Per clustering round, the fraction of sampled clients that chose cluster 0."""
    out = []
    for t in traces:
        if t.cluster_assignments:
            vals = list(t.cluster_assignments.values())
            out.append(sum(1 for v in vals if v == 0) / len(vals))
    return out


def mode_collapse_detected(traces, window: int = 10) -> bool:
    """True when every sampled client picks the same cluster for ``window`` consecutive rounds."""
    run, prev = 0, None
    for t in traces:
        if not t.cluster_assignments:
            continue
        chosen = set(t.cluster_assignments.values())
        if len(chosen) == 1:
            c = next(iter(chosen))
            run = run + 1 if c == prev else 1
            prev = c
            if run >= window:
                return True
        else:
            run, prev = 0, None
    return False


def purity(assigned: Mapping[str, int], truth: Mapping[str, int]) -> float:
    """Share of clients that sit in the majority ground-truth group of their learned cluster."""
    if not assigned:
        raise ValueError("no assignments")
    groups = {}
    for cid, c in assigned.items():
        groups.setdefault(c, Counter())[truth[cid]] += 1
    return sum(max(cnt.values()) for cnt in groups.values()) / len(assigned)


def largest_cluster_share(assigned: Mapping[str, int]) -> float:
    counts = Counter(assigned.values())
    return max(counts.values()) / len(assigned)

"""Federated round loop shared by FedAvg and the multi-model trainers.

Client work inside a round is independent and may run on a thread pool. Every
random draw is keyed by (seed, round, client_id), and deltas are reduced in
ascending client_id order, so results are bitwise identical at any worker
count.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import models
from ._rng import rng_for
from .data import sample_clients
from .datamodel import FederatedDataset, ModelParams, RoundTrace
from .models import ArchDescriptor
from .optim import ServerOptState, server_apply

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pflsim.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ServerOptSpec:
    kind: str = "avg"
    lr: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-3
    momentum: float = 0.9

    def initial_state(self, size: int) -> ServerOptState:
        return ServerOptState.create(self.kind, self.lr, size, beta1=self.beta1, beta2=self.beta2,
                                     epsilon=self.epsilon, momentum=self.momentum)


@dataclass(frozen=True)
class EngineConfig:
    total_rounds: int = 100
    clients_per_round: int = 10
    client_lr: float = 0.1
    train_batch_size: Optional[int] = 20
    train_epochs: int = 1
    server_opt: ServerOptSpec = field(default_factory=ServerOptSpec)
    weighting: str = "by_example_count"
    rounds_per_evaluation: int = 0
    rounds_per_checkpoint: int = 0
    eval_clients_per_round: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.server_opt, dict):
            object.__setattr__(self, "server_opt", ServerOptSpec(**self.server_opt))
        if self.total_rounds < 0:
            raise ValueError("total_rounds must be >= 0")
        if self.clients_per_round < 1:
            raise ValueError("clients_per_round must be >= 1")
        if self.client_lr < 0:
            raise ValueError("client_lr must be nonnegative")
        if self.train_epochs < 1:
            raise ValueError("train_epochs must be >= 1")
        if self.train_batch_size is not None and self.train_batch_size < 1:
            raise ValueError("train_batch_size must be positive")
        if self.weighting not in ("uniform", "by_example_count"):
            raise ValueError(f"unknown weighting {self.weighting!r}")


def training_data(ds: FederatedDataset) -> dict:
    """client_id -> (X, y) of the examples used for federated training, sorted by id.

    Cross-device: every example of train-role clients. Cross-silo: train-tagged
    examples of every client. Unsplit datasets: every example of every client.
    """
    out = {}
    if ds.client_role is None:
        pool = [(c, None) for c in ds.clients]
    elif ds.is_cross_silo:
        pool = [(c, "train") for c in ds.clients]
    else:
        pool = [(c, None) for c in ds.by_role("train")]
    for c, tag in sorted(pool, key=lambda p: p[0].client_id):
        X, y = c.subset(tag)
        if len(y):
            out[c.client_id] = (X, y)
    return out


def local_sgd(params: ModelParams, X: np.ndarray, y: np.ndarray, epochs: int, batch_size: Optional[int],
              lr: float, rng: np.random.Generator, mask: Optional[np.ndarray] = None,
              extra_grad: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> ModelParams:
    """Mini-batch SGD over reshuffled passes of (X, y).

    ``mask`` freezes coordinates where it is False; ``extra_grad(values)`` adds a
    regularizer gradient at every step.
    """
    n = len(y)
    if n == 0:
        raise ValueError("local SGD on an empty dataset")
    bs = n if batch_size is None else min(batch_size, n)
    current = params
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            g = models.gradient(current, (X[idx], y[idx]))
            if extra_grad is not None:
                g = g + extra_grad(current.values)
            if mask is not None:
                g = np.where(mask, g, 0.0)
            current = current.with_values(current.values - lr * g)
    return current


def client_update(start: ModelParams, local, epochs: int, batch_size: Optional[int], lr: float,
                  rng: np.random.Generator, weighting: str = "by_example_count"):
    """Run local SGD from ``start``; return ``(delta, weight)``."""
    X, y = models.as_arrays(local)
    if len(y) == 0:
        raise ValueError("client_update needs nonempty local data")
    final = local_sgd(start, X, y, epochs, batch_size, lr, rng)
    weight = float(len(y)) if weighting == "by_example_count" else 1.0
    return final.values - start.values, weight


def aggregate(deltas: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted mean of deltas, accumulated in the given order."""
    if len(deltas) != len(weights) or not deltas:
        raise ValueError("need one weight per delta and at least one delta")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = float(w.sum())
    if total == 0.0:
        raise ValueError("weights are all zero")
    size = len(deltas[0])
    acc = np.zeros(size)
    for wi, d in zip(w, deltas):
        d = np.asarray(d, dtype=np.float64)
        if d.shape != (size,):
            raise ValueError("deltas have different lengths")
        acc += wi * d
    return acc / total


def select_model(candidates: Sequence[ModelParams], batch) -> tuple:
    """Index of the lowest-loss candidate (ties to the lowest index) and all losses."""
    losses = [models.loss(m, batch) for m in candidates]
    best = 0
    for j, v in enumerate(losses):
        if v < losses[best]:
            best = j
    return best, losses


@dataclass
class TrainResult:
    models: list
    states: list
    traces: list
    history: list
    rounds_completed: int

    @property
    def params(self) -> ModelParams:
        return self.models[0]


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_rounds(ds: FederatedDataset, arch: ArchDescriptor, cfg: EngineConfig, initial: Sequence[ModelParams],
               states: Optional[Sequence[ServerOptState]] = None, start_round: int = 0,
               evaluate: Optional[Callable] = None, checkpoint_dir=None, workers: int = 1,
               phase: str = "train", train=None, prior_traces: Sequence[RoundTrace] = (),
               prior_history: Sequence[dict] = ()) -> TrainResult:
    """Train one or more server models for rounds ``start_round .. total_rounds - 1``.

    With a single model this is generalized FedAvg. With several, every sampled
    client adopts the model with the lowest loss on its training data and the
    server aggregates per model (clustered training); a model that nobody
    picked in a round keeps its parameters and optimizer state.
    """
    train = training_data(ds) if train is None else train
    pool = sorted(train)
    current = list(initial)
    k = len(current)
    states = [cfg.server_opt.initial_state(arch.num_params) for _ in range(k)] if states is None else list(states)
    traces, history = list(prior_traces), list(prior_history)
    if cfg.total_rounds > start_round and cfg.clients_per_round > len(pool):
        raise ValueError(f"clients_per_round={cfg.clients_per_round} exceeds {len(pool)} training clients")
    size = arch.num_params

    for rnd in range(start_round, cfg.total_rounds):
        sampled = sorted(sample_clients(pool, cfg.clients_per_round, rnd, cfg.seed))
        snapshot = tuple(current)

        def work(cid, rnd=rnd, snapshot=snapshot):
            local = train[cid]
            choice = 0 if k == 1 else select_model(snapshot, local)[0]
            rng = rng_for(cfg.seed, rnd, cid, "client-update")
            delta, weight = client_update(snapshot[choice], local, cfg.train_epochs, cfg.train_batch_size,
                                          cfg.client_lr, rng, cfg.weighting)
            return choice, delta, weight

        results = _map(work, sampled, workers)
        for j in range(k):
            members = [(d, w) for (c, d, w) in results if c == j]
            if not members:
                continue
            mean_delta = aggregate([d for d, _ in members], [w for _, w in members])
            current[j], states[j] = server_apply(states[j], current[j], -mean_delta)
        assignments = {cid: r[0] for cid, r in zip(sampled, results)} if k > 1 else None
        # a client uploads one slot per model (zeros except its chosen cluster), so the
        # server can aggregate per cluster without learning the assignment
        traces.append(RoundTrace(rnd, tuple(sampled), k * size * len(sampled), k * size * len(sampled),
                                 assignments, phase))
        done = rnd + 1
        if evaluate is not None and cfg.rounds_per_evaluation and done % cfg.rounds_per_evaluation == 0:
            for name, value in evaluate(current, done).items():
                history.append({"round": done, "metric": name, "value": value})
        if checkpoint_dir is not None and cfg.rounds_per_checkpoint and done % cfg.rounds_per_checkpoint == 0:
            save_checkpoint(Path(checkpoint_dir) / f"round_{done:06d}.json", done, current, states,
                            cfg.seed, traces, history)
    return TrainResult(current, states, traces, history, max(start_round, cfg.total_rounds))


def run_fedavg(ds: FederatedDataset, arch: ArchDescriptor, cfg: EngineConfig, init: Optional[ModelParams] = None,
               evaluate: Optional[Callable] = None, checkpoint_dir=None, resume_from=None,
               workers: int = 1, phase: str = "train") -> TrainResult:
    """Generalized FedAvg. ``total_rounds=0`` returns the initial model untouched."""
    if resume_from is not None:
        ck = load_checkpoint(resume_from, arch)
        if ck["seed"] != cfg.seed:
            raise ValueError("checkpoint seed does not match the engine config")
        return run_rounds(ds, arch, cfg, ck["models"], ck["states"], ck["round"], evaluate, checkpoint_dir,
                          workers, phase, prior_traces=ck["traces"], prior_history=ck["history"])
    start = models.init_params(arch, cfg.seed) if init is None else init
    return run_rounds(ds, arch, cfg, [start], None, 0, evaluate, checkpoint_dir, workers, phase)


def global_evaluator(ds: FederatedDataset, role: str = "valid", seed: int = 0,
                     subset: Optional[int] = None) -> Callable:
    """Hook computing the mean per-client metric of model 0 on ``role`` clients."""
    if ds.is_cross_silo:
        sets = [c.subset(role) for c in sorted(ds.clients, key=lambda c: c.client_id)]
    else:
        clients = sorted(ds.by_role(role), key=lambda c: c.client_id)
        sets = [c.subset("evaluation") for c in clients]
    sets = [s for s in sets if len(s[1])]

    def evaluate(current, rnd):
        chosen = sets
        if subset is not None and subset < len(sets):
            idx = sorted(rng_for(seed, rnd, "eval-subset").choice(len(sets), subset, replace=False))
            chosen = [sets[i] for i in idx]
        if not chosen:
            return {}
        vals = [models.metric(current[0], s) for s in chosen]
        return {f"{role}_{current[0].arch.metric_kind}": float(np.mean(vals))}

    return evaluate


def save_checkpoint(path, rnd: int, params: Sequence[ModelParams], states: Sequence[ServerOptState],
                    seed: int, traces: Sequence[RoundTrace] = (), history: Sequence[dict] = ()) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arch = params[0].arch
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "round": rnd,
        "arch": arch.__dict__,
        "models": [p.values.tolist() for p in params],
        "server_states": [s.to_dict() for s in states],
        # all randomness is keyed by (seed, round, client), so the seed is the whole RNG state
        "rng": {"seed": seed},
        "traces": [
            {"round": t.round, "sampled": list(t.sampled_client_ids), "broadcast": t.params_broadcast,
             "uploaded": t.params_uploaded, "assignments": t.cluster_assignments, "phase": t.phase}
            for t in traces
        ],
        "history": list(history),
    }
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(blob))
    tmp.replace(path)


def load_checkpoint(path, arch: Optional[ArchDescriptor] = None) -> dict:
    blob = json.loads(Path(path).read_text())
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')!r}")
    stored = ArchDescriptor(**blob["arch"])
    if arch is not None and stored != arch:
        raise ValueError("checkpoint architecture does not match")
    index = stored.layer_index()
    return {
        "round": blob["round"],
        "models": [ModelParams(np.array(v, dtype=np.float64), stored, index) for v in blob["models"]],
        "states": [ServerOptState.from_dict(s) for s in blob["server_states"]],
        "seed": blob["rng"]["seed"],
        "traces": [RoundTrace(t["round"], tuple(t["sampled"]), t["broadcast"], t["uploaded"],
                              t["assignments"], t["phase"]) for t in blob["traces"]],
        "history": blob.get("history", []),
    }


def latest_checkpoint(directory) -> Optional[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        return None
    found = sorted(directory.glob("round_*.json"))
    return found[-1] if found else None


def with_rounds(cfg: EngineConfig, rounds: int, seed: Optional[int] = None) -> EngineConfig:
    return replace(cfg, total_rounds=rounds, seed=cfg.seed if seed is None else seed)

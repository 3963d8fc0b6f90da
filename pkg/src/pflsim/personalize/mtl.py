"""Stateful multi-task personalization for cross-silo settings: Ditto and primal Mocha."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from .. import models
from .._rng import rng_for
from ..datamodel import FederatedDataset, ModelParams, RoundTrace
from ..engine import EngineConfig, local_sgd, run_rounds, training_data
from ..models import ArchDescriptor, LINEAR_FAMILIES


@dataclass(frozen=True)
class DittoConfig:
    lam: float = 0.1
    personal_lr: float = 0.1
    personal_epochs: int = 1
    batch_size: Optional[int] = None   # None: engine train_batch_size

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not self.personal_lr > 0:
            raise ValueError("personal_lr must be positive")
        if self.personal_epochs < 1:
            raise ValueError("personal_epochs must be >= 1")


@dataclass(frozen=True)
class MochaConfig:
    lam: float = 1e-4
    outers: int = 1
    inner_epochs: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.outers < 1 or self.inner_epochs < 1:
            raise ValueError("outers and inner_epochs must be >= 1")


@dataclass
class MtlState:
    variant: str
    lam: float
    personal_models: dict = field(default_factory=dict)
    omega: Optional[np.ndarray] = None
    mocha_outers: int = 1


@dataclass
class MtlResult:
    state: MtlState
    global_model: Optional[ModelParams]
    traces: list


def _require_cross_silo(regime: str, name: str) -> None:
    if regime != "cross_silo":
        raise ValueError(f"{name} is stateful and only runs in the cross_silo regime")


def ditto_round(global_start: ModelParams, mtl: MtlState, sampled: Mapping[str, tuple], rnd: int, seed: int,
                cfg: DittoConfig, batch_size: Optional[int], regime: str = "cross_silo") -> MtlState:
    """Advance the personal models of the sampled clients.

    Each step follows grad F_k(v) + lam * (v - w) with ``w`` the global model
    received at the start of the round. A client's personal model starts as the
    global model of its first participation.
    """
    _require_cross_silo(regime, "ditto")
    if mtl.variant != "ditto":
        raise ValueError("ditto_round needs a ditto state")
    w = global_start.values
    extra = None if mtl.lam == 0 else (lambda v: mtl.lam * (v - w))
    personal = dict(mtl.personal_models)
    for cid in sorted(sampled):
        X, y = sampled[cid]
        v = personal.get(cid, global_start)
        personal[cid] = local_sgd(v, X, y, cfg.personal_epochs, batch_size, cfg.personal_lr,
                                  rng_for(seed, rnd, cid, "ditto"), extra_grad=extra)
    return replace(mtl, personal_models=personal)


def run_ditto(ds: FederatedDataset, arch: ArchDescriptor, cfg: EngineConfig, dcfg: DittoConfig,
              workers: int = 1) -> MtlResult:
    """Global FedAvg exactly as :func:`run_fedavg`, with personal models trained alongside."""
    _require_cross_silo("cross_silo" if ds.is_cross_silo else "cross_device", "ditto")
    train = training_data(ds)
    bs = cfg.train_batch_size if dcfg.batch_size is None else dcfg.batch_size
    w = models.init_params(arch, cfg.seed)
    states, traces = None, []
    mtl = MtlState("ditto", dcfg.lam)
    for rnd in range(cfg.total_rounds):
        res = run_rounds(ds, arch, replace(cfg, total_rounds=rnd + 1), [w], states, rnd, workers=workers,
                         train=train)
        sampled = res.traces[-1].sampled_client_ids
        mtl = ditto_round(w, mtl, {cid: train[cid] for cid in sampled}, rnd, cfg.seed, dcfg, bs)
        w, states = res.models[0], res.states
        traces.extend(res.traces)
    return MtlResult(mtl, w, traces)


def omega_update(W: np.ndarray) -> Optional[np.ndarray]:
    """(W^T W)^{1/2} / tr((W^T W)^{1/2}) via a symmetric eigendecomposition.

    Returns None when W is zero, where the normalization is undefined.
    """
    M = W.T @ W
    M = 0.5 * (M + M.T)
    evals, evecs = np.linalg.eigh(M)
    # eigenvalues at roundoff level are zero; their square roots would not be
    tol = max(float(evals.max(initial=0.0)), 0.0) * len(evals) * np.finfo(float).eps
    root = (evecs * np.sqrt(np.where(evals > tol, evals, 0.0))) @ evecs.T
    root = 0.5 * (root + root.T)
    tr = float(np.trace(root))
    if not tr > 1e-300:
        return None
    return root / tr


def mocha_round(mtl: MtlState, train: Mapping[str, tuple], rnd: int, seed: int, lr: float,
                batch_size: Optional[int], inner_epochs: int = 1, update_omega: bool = True,
                regime: str = "cross_silo") -> MtlState:
    """One round of primal Mocha over all clients.

    ``mocha_outers`` times: each client takes ``inner_epochs`` of SGD on
    ``F_k(w_k) + (lam/2) tr(W Omega^+ W^T)`` holding the other columns at their
    values from the start of the pass. Then Omega is re-estimated from W.
    """
    _require_cross_silo(regime, "mocha")
    if mtl.variant != "mocha":
        raise ValueError("mocha_round needs a mocha state")
    order = sorted(mtl.personal_models)
    arch = mtl.personal_models[order[0]].arch
    if arch.family not in LINEAR_FAMILIES:
        raise ValueError(f"mocha needs a linear model family, got {arch.family}")
    missing = [cid for cid in order if cid not in train]
    if missing:
        raise ValueError(f"mocha needs every client each round; missing {missing}")
    K = len(order)
    omega = np.eye(K) / K if mtl.omega is None else mtl.omega
    omega_pinv = np.linalg.pinv(omega, hermitian=True)
    personal = dict(mtl.personal_models)
    for outer in range(mtl.mocha_outers):
        W = np.stack([personal[cid].values for cid in order], axis=1)
        updated = {}
        for k, cid in enumerate(order):
            diag = omega_pinv[k, k]
            others = W @ omega_pinv[:, k] - W[:, k] * diag
            extra = (lambda v, o=others, dg=diag: mtl.lam * (o + dg * v))
            X, y = train[cid]
            updated[cid] = local_sgd(personal[cid], X, y, inner_epochs, batch_size, lr,
                                     rng_for(seed, rnd, outer, cid, "mocha"), extra_grad=extra)
        personal = updated
    new_omega = omega
    if update_omega:
        est = omega_update(np.stack([personal[cid].values for cid in order], axis=1))
        new_omega = omega if est is None else est
    return replace(mtl, personal_models=personal, omega=new_omega)


def run_mocha(ds: FederatedDataset, arch: ArchDescriptor, cfg: EngineConfig, mcfg: MochaConfig,
              update_omega: bool = True, omega: Optional[np.ndarray] = None) -> MtlResult:
    _require_cross_silo("cross_silo" if ds.is_cross_silo else "cross_device", "mocha")
    if arch.family not in LINEAR_FAMILIES:
        raise ValueError(f"mocha needs a linear model family, got {arch.family}")
    train = training_data(ds)
    order = sorted(train)
    start = models.init_params(arch, cfg.seed)
    mtl = MtlState("mocha", mcfg.lam, {cid: start for cid in order}, omega, mcfg.outers)
    traces = []
    P = arch.num_params
    for rnd in range(cfg.total_rounds):
        mtl = mocha_round(mtl, train, rnd, cfg.seed, cfg.client_lr, cfg.train_batch_size, mcfg.inner_epochs,
                          update_omega)
        # every client downloads the coupling term and uploads its column, once per outer pass
        traces.append(RoundTrace(rnd, tuple(order), P * len(order) * mcfg.outers, P * len(order) * mcfg.outers))
    return MtlResult(mtl, None, traces)

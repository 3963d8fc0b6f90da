"""Client SGD and server optimizers for generalized FedAvg.

The server consumes a pseudo-gradient: the negated weighted mean of client
deltas. With ``kind="avg"`` and ``lr=1`` this is plain model averaging.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .datamodel import ModelParams

SERVER_KINDS = ("avg", "adam", "fedavgm")


def sgd_step(params: ModelParams, grad: np.ndarray, lr: float) -> ModelParams:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise ValueError(f"gradient length {grad.shape} does not match params {params.values.shape}")
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    return params.with_values(params.values - lr * grad)


@dataclass(frozen=True)
class ServerOptState:
    kind: str = "avg"
    lr: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-3
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0
    momentum: float = 0.9
    buffer: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in SERVER_KINDS:
            raise ValueError(f"unknown server optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("server learning rate must be positive")
        if self.kind == "adam" and not self.epsilon > 0:
            raise ValueError("adam epsilon must be positive")
        if self.t < 0:
            raise ValueError("step counter must be nonnegative")
        for name in ("m", "v", "buffer"):
            a = getattr(self, name)
            if a is not None:
                a = np.array(a, dtype=np.float64)
                a.flags.writeable = False
                object.__setattr__(self, name, a)

    @classmethod
    def create(cls, kind: str, lr: float, size: int, **kw) -> "ServerOptState":
        zeros = np.zeros(size)
        if kind == "adam":
            return cls(kind=kind, lr=lr, m=zeros, v=zeros, **kw)
        if kind == "fedavgm":
            return cls(kind=kind, lr=lr, buffer=zeros, **kw)
        return cls(kind=kind, lr=lr, **kw)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
             "epsilon": self.epsilon, "t": self.t, "momentum": self.momentum}
        for name in ("m", "v", "buffer"):
            a = getattr(self, name)
            d[name] = None if a is None else a.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ServerOptState":
        return cls(**d)


def server_apply(state: ServerOptState, current: ModelParams, pseudo_grad: np.ndarray):
    """Apply one server step. Returns ``(new_params, new_state)``; inputs are untouched."""
    g = np.asarray(pseudo_grad, dtype=np.float64)
    x = current.values
    if g.shape != x.shape:
        raise ValueError(f"pseudo-gradient length {g.shape} does not match params {x.shape}")
    if state.kind == "avg":
        return current.with_values(x - state.lr * g), state
    if state.kind == "adam":
        m = np.zeros_like(x) if state.m is None else state.m
        v = np.zeros_like(x) if state.v is None else state.v
        if m.shape != x.shape or v.shape != x.shape:
            raise ValueError("adam moment length does not match params")
        t = state.t + 1
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        new = x - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        return current.with_values(new), replace(state, m=m, v=v, t=t)
    buf = np.zeros_like(x) if state.buffer is None else state.buffer
    if buf.shape != x.shape:
        raise ValueError("momentum buffer length does not match params")
    buf = state.momentum * buf + g
    return current.with_values(x - state.lr * buf), replace(state, buffer=buf, t=state.t + 1)

"""First-order optimisers with the update rules of the common deep-learning frameworks.

    sgd      v <- momentum v + g;             p <- p - lr v
    rmsprop  s <- rho s + (1 - rho) g^2;      p <- p - lr g / (sqrt(s) + eps)
    adam     m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
             p <- p - lr (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    adamw    p <- p - lr wd p, then the adam step
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["OptimizerConfig", "OptimizerState", "OptimizerError", "init", "step", "KINDS"]

KINDS = ("sgd", "rmsprop", "adam", "adamw")


class OptimizerError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "rmsprop"
    lr: float = 1e-2
    momentum: float = 0.0
    rho: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.kind not in KINDS:
            raise OptimizerError(f"unknown optimizer {self.kind!r}, expected one of {KINDS}")
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise OptimizerError(f"lr must be positive, got {self.lr}")
        if not self.momentum >= 0:
            raise OptimizerError(f"momentum must be >= 0, got {self.momentum}")
        for name in ("rho", "beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise OptimizerError(f"{name} must lie in (0, 1), got {getattr(self, name)}")
        if not self.eps > 0:
            raise OptimizerError(f"eps must be positive, got {self.eps}")
        if not self.weight_decay >= 0:
            raise OptimizerError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class OptimizerState:
    cfg: OptimizerConfig
    shape: tuple
    t: int = 0
    m: np.ndarray | None = None  # first moment / momentum buffer
    v: np.ndarray | None = None  # second moment


def init(cfg: OptimizerConfig, param_shape) -> OptimizerState:
    shape = tuple(int(s) for s in param_shape)
    state = OptimizerState(cfg, shape)
    if cfg.kind == "sgd":
        if cfg.momentum > 0:
            state.m = np.zeros(shape)
    elif cfg.kind == "rmsprop":
        state.v = np.zeros(shape)
    else:
        state.m = np.zeros(shape)
        state.v = np.zeros(shape)
    return state


def step(state: OptimizerState, params, grads):
    """Advance ``state`` by one step and return the updated parameters.

    ``params`` is not modified.
    """
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if p.shape != state.shape or g.shape != state.shape:
        raise OptimizerError(f"shape mismatch: state {state.shape}, params {p.shape}, grads {g.shape}")
    if not np.all(np.isfinite(g)):
        raise OptimizerError("non-finite gradient")
    cfg = state.cfg
    state.t += 1

    if cfg.kind == "sgd":
        if cfg.momentum > 0:
            state.m = cfg.momentum * state.m + g
            return p - cfg.lr * state.m
        return p - cfg.lr * g

    if cfg.kind == "rmsprop":
        state.v = cfg.rho * state.v + (1.0 - cfg.rho) * (g * g)
        return p - cfg.lr * g / (np.sqrt(state.v) + cfg.eps)

    if cfg.kind == "adamw":
        p = p - cfg.lr * cfg.weight_decay * p
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * (g * g)
    m_hat = state.m / (1.0 - cfg.beta1 ** state.t)
    v_hat = state.v / (1.0 - cfg.beta2 ** state.t)
    return p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)

"""AdamW and SGD-family updates, gradient clipping and the warmup+cosine schedule.

Update rules, with ``lr`` the scheduled rate and ``wd`` the weight decay
(applied only to trunk weight matrices):

adamw
    m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
sgd
    theta <- theta - lr * (g + wd theta)
sgd-momentum
    w <- mu w + (g + wd theta);  theta <- theta - lr w
sgdw-nesterov
    w <- mu w + g;  theta <- theta - lr (g + mu w);  theta <- (1 - lr wd) theta

``decay`` = "l2" folds ``wd theta`` into the gradient, "decoupled" shrinks
the parameters directly; the defaults above are each kind's usual choice.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from driftscope.trainer.model import is_decayed

KINDS = ("adamw", "sgd", "sgd-momentum", "sgdw-nesterov")
DEFAULT_DECAY = {"adamw": "decoupled", "sgd": "l2", "sgd-momentum": "l2", "sgdw-nesterov": "decoupled"}


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 1e-3
    warmup_frac: float = 0.15
    min_lr_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.5
    decay: str | None = None
    momentum: float = 0.0
    clip: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}; expected one of {KINDS}")
        if self.decay is None:
            object.__setattr__(self, "decay", DEFAULT_DECAY[self.kind])
        if self.decay not in ("decoupled", "l2"):
            raise ValueError(f"decay must be 'decoupled' or 'l2', got {self.decay!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip must be > 0")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in [0, 1)")
        if not 0.0 <= self.min_lr_frac <= 1.0:
            raise ValueError("min_lr_frac must be in [0, 1]")
        if self.kind in ("sgd-momentum", "sgdw-nesterov") and not 0.0 < self.momentum < 1.0:
            raise ValueError(f"{self.kind} needs momentum in (0, 1)")
        if self.kind == "sgd" and self.momentum != 0.0:
            raise ValueError("plain sgd takes no momentum; use sgd-momentum")

    def with_lr(self, lr: float) -> "OptimizerConfig":
        return replace(self, lr=lr)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(cfg: OptimizerConfig, step: int, total: int, warmup: int | None = None) -> float:
    """Rate for optimizer step ``step`` (1-based): linear warmup, cosine to ``min_lr_frac * lr``."""
    if step <= 0:
        return 0.0
    w = int(round(cfg.warmup_frac * total)) if warmup is None else int(warmup)
    if w > 0 and step <= w:
        return cfg.lr * step / w
    floor = cfg.lr * cfg.min_lr_frac
    span = max(1, total - w)
    frac = min(1.0, (step - w) / span)
    return floor + (cfg.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    """Moment buffers (adamw) or velocity (momentum kinds), mirroring the parameters.

    AdamW keeps its moments in bias-corrected form; ``m_hat`` and ``v_hat``
    follow the same recurrences as the raw moments divided by ``1 - beta^t``.
    """

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def fresh_state(cfg: OptimizerConfig, params) -> OptimizerState:
    st = OptimizerState()
    if cfg.kind == "adamw":
        st.m = {k: np.zeros_like(p) for k, p in params.items()}
        st.v = {k: np.zeros_like(p) for k, p in params.items()}
    elif cfg.kind in ("sgd-momentum", "sgdw-nesterov"):
        st.velocity = {k: np.zeros_like(p) for k, p in params.items()}
    return st


def global_norm(grads) -> float:
    return math.sqrt(math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grads(grads, max_norm: float | None):
    """Scale gradients so their global norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}, norm


def optimizer_step(cfg: OptimizerConfig, params, grads, state: OptimizerState, lr: float):
    """Apply one update in place. Gradients must already be clipped."""
    state.step += 1
    t = state.step
    wd = cfg.weight_decay
    for name, p in params.items():
        g = grads[name]
        decayed = wd != 0.0 and is_decayed(name)
        if decayed and cfg.decay == "l2":
            g = g + wd * p
        if cfg.kind == "adamw":
            c1 = (1.0 - cfg.beta1) / (1.0 - cfg.beta1 ** t)
            c2 = (1.0 - cfg.beta2) / (1.0 - cfg.beta2 ** t)
            m, v = state.m[name], state.v[name]
            # c == 1 (t = 1, or beta = 0) must give exactly g and g^2
            if c1 == 1.0:
                m[...] = g
            else:
                m += c1 * (g - m)
            if c2 == 1.0:
                np.multiply(g, g, out=v)
            else:
                v += c2 * (g * g - v)
            upd = m / (np.sqrt(v) + cfg.eps)
            if decayed and cfg.decay == "decoupled":
                upd = upd + wd * p
            p -= lr * upd
        elif cfg.kind == "sgd":
            p -= lr * g
            if decayed and cfg.decay == "decoupled":
                p *= 1.0 - lr * wd
        elif cfg.kind == "sgd-momentum":
            w = state.velocity[name]
            w *= cfg.momentum
            w += g
            p -= lr * w
            if decayed and cfg.decay == "decoupled":
                p *= 1.0 - lr * wd
        else:  # sgdw-nesterov
            w = state.velocity[name]
            w *= cfg.momentum
            w += g
            p -= lr * (g + cfg.momentum * w)
            if decayed and cfg.decay == "decoupled":
                p *= 1.0 - lr * wd
    return params

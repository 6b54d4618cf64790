"""Parameter storage, AdamW, the warmup-cosine schedule, and EMA tracking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Array, NumericError, ShapeError


class ParamStore:
    """Named parameters with lexicographic iteration and frozen shapes."""

    def __init__(self):
        self._params: dict[str, Array] = {}

    def add(self, path: str, array: Array) -> Array:
        if path in self._params:
            raise ValueError(f"duplicate parameter path {path!r}")
        self._params[path] = array
        return array

    def __getitem__(self, path: str) -> Array:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def paths(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for path in self.paths():
            yield path, self._params[path]

    def set_data(self, path: str, data: np.ndarray) -> None:
        arr = self._params[path]
        data = np.asarray(data, dtype=arr.data.dtype)
        if data.shape != arr.data.shape:
            raise ShapeError(
                f"{path}: cannot replace shape {arr.data.shape} with {data.shape}"
            )
        arr.data = data

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def copy(self, requires_grad: bool = False) -> "ParamStore":
        out = ParamStore()
        for path, arr in self.items():
            out.add(path, Array(arr.data.copy(), requires_grad=requires_grad))
        return out

    def n_values(self) -> int:
        return sum(p.data.size for p in self._params.values())


def collect_grads(params: ParamStore) -> dict[str, np.ndarray]:
    """Pull accumulated gradients; parameters never touched get zeros."""
    out = {}
    for path, arr in params.items():
        out[path] = arr.grad if arr.grad is not None else np.zeros_like(arr.data)
    return out


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, **hyper) -> "OptimizerState":
        state = cls(**hyper)
        for path, arr in params.items():
            state.m[path] = np.zeros_like(arr.data)
            state.v[path] = np.zeros_like(arr.data)
        return state


def adamw_step(
    params: ParamStore,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * weight_decay * theta
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for path, arr in params.items():
        g = np.asarray(grads.get(path, 0.0), dtype=arr.data.dtype)
        if g.shape != () and g.shape != arr.data.shape:
            raise ShapeError(f"{path}: grad shape {g.shape} vs param {arr.data.shape}")
        m = state.m[path]
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / c1
        vhat = v / c2
        update = lr * mhat / (np.sqrt(vhat) + state.eps)
        new_data = arr.data - update - lr * state.weight_decay * arr.data
        if not np.all(np.isfinite(new_data)):
            raise NumericError(f"non-finite update for {path}")
        arr.data = new_data


def cosine_lr(
    step: int, warmup_steps: int, total_steps: int, peak: float, floor: float = 0.0
) -> float:
    """Linear 0 -> peak over warmup, then one cosine half-cycle peak -> floor."""
    if warmup_steps >= total_steps:
        raise ValueError(
            f"warmup_steps {warmup_steps} must be < total_steps {total_steps}"
        )
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < warmup_steps:
        return peak * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    progress = min(progress, 1.0)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


@dataclass
class EmaState:
    shadow: ParamStore
    momentum: float = 0.996

    def __post_init__(self):
        if not (0.0 <= self.momentum <= 1.0):
            raise ValueError(f"momentum must be in [0, 1], got {self.momentum}")

    @classmethod
    def from_params(cls, params: ParamStore, momentum: float = 0.996) -> "EmaState":
        return cls(shadow=params.copy(requires_grad=False), momentum=momentum)


def ema_update(ema: EmaState, online: ParamStore) -> EmaState:
    """shadow <- m * shadow + (1 - m) * online, per parameter, in place."""
    m = ema.momentum
    for path, arr in online.items():
        sh = ema.shadow[path]
        if sh.data.shape != arr.data.shape:
            raise ShapeError(
                f"{path}: shadow shape {sh.data.shape} vs online {arr.data.shape}"
            )
        sh.data = m * sh.data + (1.0 - m) * arr.data
    return ema

"""AdamW with decoupled weight decay, and the warmup/cosine LR schedule.

Decay is applied to the parameter directly (theta -= lr * wd * theta), never
folded into the gradient, so the decay displacement is independent of
gradient history; with weight_decay = 0 the update is plain Adam. The
temperature parameter is exempt from decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor

# parameters never decayed
NO_DECAY = ("log_scale",)

DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8

# default validation-recall sweep grid
SWEEP_PEAK_LR = (1e-4, 3e-4, 1e-3)
SWEEP_WEIGHT_DECAY = (0.01, 0.1)
SWEEP_WARMUP_FRAC = (0.02, 0.05)


@dataclass(frozen=True)
class Schedule:
    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ConfigError(
                f"need 0 <= warmup ({self.warmup_steps}) < total steps ({self.total_steps})"
            )

    def lr_at(self, step: int) -> float:
        """Linear warmup to peak_lr at step w, cosine decay to 0 at step T."""
        if step < 0 or step > self.total_steps:
            raise ConfigError(f"step {step} outside [0, {self.total_steps}]")
        if step < self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        frac = (step - self.warmup_steps) / (self.total_steps - self.warmup_steps)
        return self.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Per-parameter moment state keyed by parameter name."""

    def __init__(
        self,
        params: dict[str, Tensor],
        weight_decay: float = 0.0,
        beta1: float = DEFAULT_BETA1,
        beta2: float = DEFAULT_BETA2,
        eps: float = DEFAULT_EPS,
    ):
        self.params = dict(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float):
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.data.shape:
                raise ConfigError(
                    f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}"
                )
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and name not in NO_DECAY:
                update = update + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, t: int, tensors: dict[str, np.ndarray]):
        self.t = int(t)
        for name in self.params:
            self.m[name] = tensors[f"adam.m.{name}"].astype(self.m[name].dtype).reshape(
                self.m[name].shape
            )
            self.v[name] = tensors[f"adam.v.{name}"].astype(self.v[name].dtype).reshape(
                self.v[name].shape
            )

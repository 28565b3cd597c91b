"""NAG optimizer with per-adder-layer adaptive learning-rate scaling.

Adder-layer gradient norms at matched shapes are orders of magnitude smaller
than conv norms and differ sharply across layers, so each adder filter
gradient is rescaled to a fixed norm before it enters the optimizer:

    scale = eta * sqrt(k) / ||g||_2        (k = elements in the filter bank)

With momentum and weight decay off, the applied update then has l2 norm
exactly lr * eta * sqrt(k) regardless of the raw gradient magnitude, and is
invariant to positive rescaling of the gradient.  The scaling is applied to
the raw loss gradient before weight decay and before the velocity update, so
momentum accumulates already-normalized steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import reduce_l2_norm

_ZERO_GRAD_NORM = 1e-12


@dataclass
class LrSchedule:
    kind: str = "cosine"      # cosine | poly | constant
    lr0: float = 0.1
    power: float = 2.0        # poly only

    def __post_init__(self):
        if self.kind not in ("cosine", "poly", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")


def lr_at(schedule: LrSchedule, step: int, total_steps: int) -> float:
    """Learning rate at ``step`` of ``total_steps`` (both endpoints valid)."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if schedule.kind == "constant":
        return schedule.lr0
    frac = step / total_steps if total_steps > 0 else 0.0
    if schedule.kind == "cosine":
        return schedule.lr0 * (1.0 + math.cos(math.pi * frac)) / 2.0
    return schedule.lr0 * (1.0 - frac) ** schedule.power


@dataclass
class PSchedule:
    """Linear decay of the norm exponent from 2 at epoch 0 to 1 at end_epoch."""
    end_epoch: int
    total_epochs: int = 0

    def __post_init__(self):
        if self.end_epoch < 0:
            raise ValueError("end_epoch must be >= 0")
        if self.total_epochs and self.end_epoch > self.total_epochs:
            raise ValueError("end_epoch cannot exceed total_epochs")


def p_at_epoch(sched: PSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if sched.end_epoch == 0 or epoch >= sched.end_epoch:
        return 1.0
    return 2.0 - epoch / sched.end_epoch


def default_p_schedule(total_epochs: int) -> PSchedule:
    # decay over the first three quarters of training, then train pure l1
    return PSchedule(end_epoch=max(1, int(round(0.75 * total_epochs))),
                     total_epochs=total_epochs)


def adaptive_scale(grad: np.ndarray, eta: float) -> float:
    """Per-layer multiplier eta*sqrt(k)/||grad||; 0 skips degenerate updates."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    norm = reduce_l2_norm(grad)
    if norm < _ZERO_GRAD_NORM:
        return 0.0
    return eta * math.sqrt(grad.size) / norm


class NagOptimizer:
    """Nesterov accelerated gradient:  v <- m*v + g;  w <- w - lr*(g + m*v).

    Weight decay applies to adder/conv filters only (never batch norm), and
    is added after adaptive scaling so the scale normalizes the pure loss
    gradient.
    """

    def __init__(self, momentum: float = 0.9, weight_decay: float = 5e-4,
                 eta: float = 0.2, adaptive: bool = True):
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.eta = eta
        self.adaptive = adaptive
        self.velocities = {}
        self.step_count = 0

    def step(self, param_refs, grads, lr: float):
        """Apply one update in place; param_refs/grads must be aligned."""
        if len(param_refs) != len(grads):
            raise ValueError("parameter/gradient count mismatch")
        for ref, grad in zip(param_refs, grads):
            if grad.shape != ref.array.shape:
                raise ValueError(
                    f"gradient shape {grad.shape} != parameter shape "
                    f"{ref.array.shape} at layer {ref.layer_index}/{ref.name}")
            g = np.asarray(grad, dtype=np.float64)
            if ref.kind == "adder_filter" and self.adaptive:
                g = g * adaptive_scale(g, self.eta)
            if ref.kind in ("adder_filter", "conv_filter") and self.weight_decay:
                g = g + self.weight_decay * ref.array
            key = (ref.layer_index, ref.name)
            v = self.velocities.get(key)
            if v is None:
                v = np.zeros_like(ref.array)
                self.velocities[key] = v
            v *= self.momentum
            v += g
            ref.array -= lr * (g + self.momentum * v)
        self.step_count += 1

"""Per-epoch schedules for the self-paced threshold and the learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class LambdaSchedule:
    """lambda(e) = a*log10(e) + b, pinned to ``lambda_ini`` at e=1 and ``lambda_lst`` at e=E."""

    lambda_ini: float
    lambda_lst: float
    epochs: int

    @property
    def b(self) -> float:
        return self.lambda_ini

    @property
    def a(self) -> float:
        if self.epochs < 2:
            raise ConfigError(f"lambda schedule needs at least 2 epochs, got {self.epochs}", "train.epochs")
        return (self.lambda_lst - self.lambda_ini) / math.log10(self.epochs)


def lambda_at_epoch(sched: LambdaSchedule, e: int) -> float:
    a = sched.a
    if not 1 <= e <= sched.epochs:
        raise ConfigError(f"epoch {e} outside 1..{sched.epochs}")
    if e == sched.epochs:
        return sched.lambda_lst
    return a * math.log10(e) + sched.b


@dataclass(frozen=True)
class LrSchedule:
    initial: float = 0.1
    factor: float = 0.1
    period: int = 50
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = True


def lr_at_epoch(sched: LrSchedule, e: int) -> float:
    return sched.initial * sched.factor ** ((e - 1) // sched.period)

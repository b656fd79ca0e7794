"""Pieces shared by the segmenter, classifier and fusion training loops."""

from __future__ import annotations

import math
import pickle
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch


class TrainingDivergedError(RuntimeError):
    """Loss became NaN or infinite."""


def seed_everything(seed: int) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def check_finite(loss: torch.Tensor, epoch: int, step: int, what: str = "loss") -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDivergedError(f"{what} became {value} at epoch {epoch}, step {step}; "
                                    "lower the learning rate or check the inputs for NaNs")
    return value


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to improve the monitored loss.

    ``patience=0`` stops at the first non-improving epoch.
    """

    def __init__(self, patience: int, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = -1
        self.wait = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record one epoch; returns True if training should stop."""
        if value < self.best - self.min_delta:
            self.best = value
            self.best_epoch = epoch
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.wait == 0


class PlateauLR:
    """Multiply the learning rate by ``factor`` after ``patience`` stagnant epochs."""

    def __init__(self, optimizer: torch.optim.Optimizer, patience: int, factor: float,
                 min_lr: float = 0.0):
        if not 0 < factor < 1:
            raise ValueError("lr_reduce_factor must be in (0, 1)")
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.best = math.inf
        self.wait = 0

    def step(self, value: float) -> bool:
        """Returns True when the rate was reduced on this call."""
        if value < self.best:
            self.best = value
            self.wait = 0
            return False
        self.wait += 1
        if self.wait >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] = max(group["lr"] * self.factor, self.min_lr)
            self.wait = 0
            return True
        return False

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = -1
    steps: int = 0

    def record(self, **values) -> None:
        self.epochs.append(values)

    def series(self, key: str) -> list:
        return [e[key] for e in self.epochs]

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "stopped_early": self.stopped_early,
                "best_epoch": self.best_epoch, "steps": self.steps}


@dataclass
class Checkpoint:
    """Weights plus enough metadata to rebuild the model."""

    kind: str
    spec: dict
    state_dict: dict
    meta: dict = field(default_factory=dict)
    path: Optional[str] = None

    def save(self, path) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"kind": self.kind, "spec": self.spec, "state_dict": self.state_dict,
                    "meta": self.meta}, path)
        self.path = str(path)
        return self.path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            blob: dict[str, Any] = torch.load(path, map_location="cpu", weights_only=False)
        except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
            raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls(blob["kind"], blob["spec"], blob["state_dict"], blob.get("meta", {}), str(path))


def snapshot(model: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}

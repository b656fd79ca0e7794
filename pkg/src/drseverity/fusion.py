"""Shallow fusion network mapping the two classifiers' outputs to a final grade."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from .classifier import OrdinalPrediction
from .training import (Checkpoint, EarlyStopping, TrainingLog, check_finite, seed_everything,
                       snapshot)

NUM_GRADES = 5
TIE_BREAK = "lowest_grade"


@dataclass
class FusionSpec:
    input_mode: str = "grades"  # "grades": 2 inputs (grade / 4); "scores": both 5-score vectors
    hidden: tuple = (3, 3)

    def __post_init__(self):
        if self.input_mode not in ("grades", "scores"):
            raise ValueError("input_mode must be 'grades' or 'scores'")
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def input_dim(self) -> int:
        return 2 if self.input_mode == "grades" else 2 * NUM_GRADES

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class FusionNet(nn.Module):
    def __init__(self, spec: FusionSpec):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        width = spec.input_dim
        for h in spec.hidden:
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        layers.append(nn.Linear(width, NUM_GRADES))
        self.layers = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Class logits; apply softmax for probabilities."""
        return self.layers(x)

    def probabilities(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.layers(x), dim=-1)


def build_fusion(spec: Optional[FusionSpec] = None, seed: Optional[int] = None) -> FusionNet:
    if seed is not None:
        torch.manual_seed(seed)
    return FusionNet(spec or FusionSpec())


def features(a, b, mode: str) -> np.ndarray:
    """Input vector for one pair of classifier outputs (grades or OrdinalPredictions)."""
    if mode == "grades":
        ga = a.grade if isinstance(a, OrdinalPrediction) else int(a)
        gb = b.grade if isinstance(b, OrdinalPrediction) else int(b)
        return np.array([ga / 4.0, gb / 4.0], dtype=np.float32)
    if not (isinstance(a, OrdinalPrediction) and isinstance(b, OrdinalPrediction)):
        raise TypeError("score-vector fusion needs OrdinalPrediction inputs")
    return np.asarray(list(a.scores) + list(b.scores), dtype=np.float32)


@dataclass
class FusionTrainConfig:
    learning_rate: float = 0.02
    epochs: int = 3000
    batch_size: int = 64
    val_fraction: float = 0.2
    early_stopping_patience: int = 300
    # Width-3 ReLU layers can park neighbouring grades in one dead region, so train
    # from several seeded initialisations and keep the best validation loss.
    restarts: int = 10
    restart_tolerance: float = 0.01  # stop restarting once validation loss is below this
    seed: int = 0


@dataclass
class FusionResult:
    grade: int
    probabilities: list
    tie_break: str = TIE_BREAK


def train_fusion(model: FusionNet, pairs: Sequence, cfg: Optional[FusionTrainConfig] = None,
                 val_pairs: Optional[Sequence] = None) -> tuple[Checkpoint, TrainingLog]:
    """Cross-entropy training on ``((out_e1, out_e2), true_grade)`` pairs.

    Warnings (e.g. grades missing from the training data) are stored in
    ``checkpoint.meta["warnings"]``. With no validation pairs and fewer than
    five training pairs, the training loss drives early stopping.
    """
    cfg = cfg or FusionTrainConfig()
    if len(pairs) == 0:
        raise ValueError("fusion training set is empty")
    mode = model.spec.input_mode
    x = np.stack([features(a, b, mode) for (a, b), _ in pairs])
    y = np.array([int(g) for _, g in pairs], dtype=np.int64)
    warnings = []
    missing = sorted(set(range(NUM_GRADES)) - set(y.tolist()))
    if missing:
        warnings.append(f"fusion training data lacks grades {missing}")

    if val_pairs is not None:
        xv = np.stack([features(a, b, mode) for (a, b), _ in val_pairs])
        yv = np.array([int(g) for _, g in val_pairs], dtype=np.int64)
    elif len(pairs) >= 5 and cfg.val_fraction > 0:
        order = np.random.default_rng(cfg.seed).permutation(len(pairs))
        n_val = max(1, int(round(cfg.val_fraction * len(pairs))))
        xv, yv = x[order[:n_val]], y[order[:n_val]]
        x, y = x[order[n_val:]], y[order[n_val:]]
    else:
        xv, yv = x, y

    xt, yt = torch.from_numpy(x), torch.from_numpy(y)
    xvt, yvt = torch.from_numpy(xv), torch.from_numpy(yv)
    best = None
    for attempt in range(max(1, cfg.restarts)):
        seed = cfg.seed + 1000 * attempt
        if attempt:
            torch.manual_seed(seed)
            for m in model.modules():
                if isinstance(m, nn.Linear):
                    m.reset_parameters()
        state, tlog, val = _fit_once(model, xt, yt, xvt, yvt, cfg, seed)
        if best is None or val < best[2] - 1e-9:
            best = (state, tlog, val, attempt)
        if best[2] < cfg.restart_tolerance:
            break
    state, tlog, val, attempt = best
    model.load_state_dict(state)
    ckpt = Checkpoint("fusion", model.spec.to_dict(), state,
                      meta={"warnings": warnings, "best_epoch": tlog.best_epoch, "val_loss": val,
                            "attempt": attempt, "train_config": asdict(cfg)})
    return ckpt, tlog


def _fit_once(model, xt, yt, xvt, yvt, cfg, seed):
    gen = seed_everything(seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    criterion = nn.CrossEntropyLoss()
    stopper = EarlyStopping(cfg.early_stopping_patience)
    tlog = TrainingLog()
    best_state = snapshot(model)
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        perm = torch.randperm(len(xt), generator=gen)
        losses = []
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            opt.zero_grad()
            loss = criterion(model(xt[idx]), yt[idx])
            losses.append(check_finite(loss, epoch, step))
            loss.backward()
            opt.step()
            step += 1
        model.eval()
        with torch.no_grad():
            val_loss = float(criterion(model(xvt), yvt))
        tlog.record(epoch=epoch, train_loss=float(np.mean(losses)), val_loss=val_loss)
        stop = stopper.update(val_loss, epoch)
        if stopper.improved_last:
            best_state = snapshot(model)
        if stop:
            tlog.stopped_early = True
            break
    tlog.steps = step
    tlog.best_epoch = stopper.best_epoch
    return best_state, tlog, stopper.best


def load_fusion(ckpt: Union[Checkpoint, str]) -> FusionNet:
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    if ckpt.kind != "fusion":
        raise ValueError(f"checkpoint holds a '{ckpt.kind}' model, not a fusion network")
    model = build_fusion(FusionSpec(**ckpt.spec))
    model.load_state_dict(ckpt.state_dict)
    return model.eval()


def lowest_argmax(p: np.ndarray) -> int:
    """Index of the maximum; ties go to the lowest index."""
    return int(np.flatnonzero(p == p.max())[0])


@torch.no_grad()
def fuse_predict(model: FusionNet, pred1, pred2) -> FusionResult:
    model.eval()
    x = torch.from_numpy(features(pred1, pred2, model.spec.input_mode))[None]
    logits = model(x)[0].double()
    probs = torch.softmax(logits, dim=-1).numpy()
    return FusionResult(lowest_argmax(logits.numpy()), probs.tolist())


def decision_table(model: FusionNet) -> list[list[int]]:
    """5x5 final grades, rows indexed by E1 grade and columns by E2 grade."""
    if model.spec.input_mode != "grades":
        raise ValueError("the decision table is defined for grade-input fusion only")
    return [[fuse_predict(model, g1, g2).grade for g2 in range(NUM_GRADES)] for g1 in range(NUM_GRADES)]


def write_decision_table(table: list[list[int]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["grade_e1"] + [f"e2={g}" for g in range(NUM_GRADES)])
        for g1, row in enumerate(table):
            w.writerow([g1] + row)

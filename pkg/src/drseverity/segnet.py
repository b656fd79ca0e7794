"""Modified UNet++ vessel segmenter.

Node X(i, j) sits at row (resolution level) i and column j. Besides the usual
UNet++ inputs (every earlier node of its row plus the upsampled node below
from the previous column), each decoder node also receives a stride-2
downsampled copy of the node directly above it in the same column. Nodes are
evaluated column by column and top-down within a column, so X(i-1, j) is
always ready before X(i, j) needs it.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import torch
import torch.nn as nn
from torch.utils.data import DataLoader, Dataset

from .dataio import FundusImage, VesselMask, kfold_partitions
from .metrics import MetricsReport, mean_report, segmentation_report
from .preprocess import PATCH_SIZE, PatchSet, pad_to_min
from .training import (Checkpoint, EarlyStopping, TrainingLog, check_finite, seed_everything,
                       snapshot)

log = logging.getLogger(__name__)

Node = tuple[int, int]


class SegSpecError(ValueError):
    """The node grid or its wiring is inconsistent."""


@dataclass(frozen=True)
class Edge:
    """One input of a node. ``source=None`` is the network input image."""

    source: Optional[Node]
    kind: str  # "input" | "skip" | "up" | "down"


def node_name(node: Node) -> str:
    return f"X({node[0]},{node[1]})"


@dataclass
class SegNetworkSpec:
    depth: int = 4
    base_channels: int = 32
    dropout_rate: float = 0.5
    l2_coefficient: float = 1e-5
    down_source: str = "above"  # "above" -> X(i-1, j); "above_left" -> X(i-1, j-1)
    include_down: bool = True  # False gives plain UNet++ wiring
    norm_groups: int = 8
    in_channels: int = 3
    output_bias_init: float = -2.5
    wiring: Optional[dict] = field(default=None, repr=False)

    def channels(self, row: int) -> int:
        return self.base_channels * 2 ** row

    def nodes(self) -> list[Node]:
        """All grid nodes in evaluation order."""
        return [(i, j) for j in range(self.depth + 1) for i in range(self.depth + 1 - j)]

    def default_wiring(self) -> dict[Node, list[Edge]]:
        wiring: dict[Node, list[Edge]] = {}
        for i, j in self.nodes():
            if j == 0:
                wiring[(i, j)] = [Edge(None, "input")] if i == 0 else [Edge((i - 1, 0), "down")]
                continue
            edges = [Edge((i, k), "skip") for k in range(j)]
            edges.append(Edge((i + 1, j - 1), "up"))
            if self.include_down and i > 0:
                src = (i - 1, j) if self.down_source == "above" else (i - 1, j - 1)
                edges.append(Edge(src, "down"))
            wiring[(i, j)] = edges
        return wiring

    def resolved_wiring(self) -> dict[Node, list[Edge]]:
        wiring = self.wiring if self.wiring is not None else self.default_wiring()
        self._check(wiring)
        return wiring

    def _check(self, wiring: dict) -> None:
        if self.depth < 1 or self.base_channels < 1:
            raise SegSpecError("depth and base_channels must be >= 1")
        if self.down_source not in ("above", "above_left"):
            raise SegSpecError(f"unknown down_source '{self.down_source}'")
        order = {n: k for k, n in enumerate(self.nodes())}
        for node in order:
            if node not in wiring:
                raise SegSpecError(f"{node_name(node)} has no wiring entry")
        for node, edges in wiring.items():
            if node not in order:
                raise SegSpecError(f"wiring given for absent node {node_name(node)}")
            for e in edges:
                if e.kind == "input":
                    continue
                if e.source not in order:
                    raise SegSpecError(f"{node_name(node)} is wired to absent node {node_name(e.source)}")
                if order[e.source] >= order[node]:
                    raise SegSpecError(f"{node_name(node)} depends on {node_name(e.source)}, "
                                       "which is evaluated later (cycle)")
                delta = e.source[0] - node[0]
                expected = {0: "skip", 1: "up", -1: "down"}.get(delta)
                if expected != e.kind:
                    raise SegSpecError(f"edge {node_name(e.source)} -> {node_name(node)} "
                                       f"cannot be of kind '{e.kind}'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("wiring")
        if self.wiring is not None:
            d["wiring"] = {f"{i},{j}": [[list(e.source) if e.source else None, e.kind] for e in es]
                           for (i, j), es in self.wiring.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SegNetworkSpec":
        d = dict(d)
        raw = d.pop("wiring", None)
        spec = cls(**d)
        if raw is not None:
            spec.wiring = {tuple(int(v) for v in k.split(",")): [Edge(tuple(s) if s else None, kind)
                                                                  for s, kind in es]
                           for k, es in raw.items()}
        return spec


def unetpp_wiring(depth: int) -> dict[Node, set]:
    """Reference UNet++ wiring, as (source, kind) sets, for structural comparison."""
    out = {}
    for j in range(depth + 1):
        for i in range(depth + 1 - j):
            if j == 0:
                out[(i, j)] = {(None, "input")} if i == 0 else {((i - 1, 0), "down")}
            else:
                out[(i, j)] = {((i, k), "skip") for k in range(j)} | {((i + 1, j - 1), "up")}
    return out


def _groups(channels: int, wanted: int) -> int:
    for g in range(min(wanted, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, groups: int):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.GroupNorm(_groups(out_ch, groups), out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.GroupNorm(_groups(out_ch, groups), out_ch),
            nn.ReLU(inplace=True),
        )


def _edge_key(edge: Edge, node: Node) -> str:
    src = "in" if edge.source is None else f"{edge.source[0]}_{edge.source[1]}"
    return f"{edge.kind}_{src}_to_{node[0]}_{node[1]}"


class ModifiedUNetPlusPlus(nn.Module):
    """(N, 3, H, W) in [0, 1] -> (N, 1, H, W) vessel probabilities.

    H and W must be divisible by ``2 ** depth``.
    """

    def __init__(self, spec: SegNetworkSpec):
        super().__init__()
        self.spec = spec
        self.wiring = spec.resolved_wiring()
        self.order = spec.nodes()
        self.edges = nn.ModuleDict()
        self.bodies = nn.ModuleDict()
        for node in self.order:
            c = spec.channels(node[0])
            in_ch = 0
            for e in self.wiring[node]:
                key = _edge_key(e, node)
                if e.kind == "input":
                    in_ch += spec.in_channels
                elif e.kind == "skip":
                    in_ch += spec.channels(e.source[0])
                elif e.kind == "up":
                    self.edges[key] = nn.ConvTranspose2d(spec.channels(e.source[0]), c, 2, stride=2)
                    in_ch += c
                else:
                    self.edges[key] = nn.Conv2d(spec.channels(e.source[0]), c, 3, stride=2, padding=1)
                    in_ch += c
            self.bodies[f"{node[0]}_{node[1]}"] = ConvBlock(in_ch, c, spec.norm_groups)
        self.dropout = nn.Dropout(spec.dropout_rate)
        self.head = nn.Conv2d(spec.channels(0), 1, 1)
        # start near the vessel pixel prior instead of p = 0.5 everywhere
        nn.init.constant_(self.head.bias, spec.output_bias_init)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        feats: dict[Node, torch.Tensor] = {}
        bottleneck = (self.spec.depth, 0)
        for node in self.order:
            parts = []
            for e in self.wiring[node]:
                if e.kind == "input":
                    parts.append(x)
                elif e.kind == "skip":
                    parts.append(feats[e.source])
                else:
                    parts.append(self.edges[_edge_key(e, node)](feats[e.source]))
            out = self.bodies[f"{node[0]}_{node[1]}"](torch.cat(parts, dim=1))
            if node == bottleneck:
                out = self.dropout(out)
            feats[node] = out
        return self.head(feats[(0, self.spec.depth)])


def build_segnet(spec: Optional[SegNetworkSpec] = None, seed: Optional[int] = None) -> ModifiedUNetPlusPlus:
    spec = spec or SegNetworkSpec()
    if seed is not None:
        torch.manual_seed(seed)
    return ModifiedUNetPlusPlus(spec)


def tversky_loss(pred: torch.Tensor, target: torch.Tensor, alpha: float = 0.3, beta: float = 0.7,
                 epsilon: float = 1e-6) -> torch.Tensor:
    """``1 - (TP + eps) / (TP + alpha*FP + beta*FN + eps)`` on soft counts.

    ``alpha`` weights false positives and ``beta`` false negatives; counts are
    summed over the whole batch.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if alpha < 0 or beta < 0 or alpha == beta == 0:
        raise ValueError("alpha and beta must be non-negative and not both zero")
    target = target.to(pred.dtype)
    tp = (pred * target).sum()
    fp = (pred * (1 - target)).sum()
    fn = ((1 - pred) * target).sum()
    return 1 - (tp + epsilon) / (tp + alpha * fp + beta * fn + epsilon)


@dataclass
class SegTrainConfig:
    learning_rate: float = 1e-4
    tversky_alpha: float = 0.3
    tversky_beta: float = 0.7
    tversky_epsilon: float = 1e-6
    epochs: int = 150
    early_stopping_patience: int = 10
    kfold_K: int = 6
    batch_size: int = 8
    val_fraction: float = 0.1
    max_steps: Optional[int] = None
    seed: int = 0
    num_workers: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if self.tversky_alpha < 0 or self.tversky_beta < 0 or self.tversky_alpha == self.tversky_beta == 0:
            raise ValueError("tversky_alpha and tversky_beta must be >= 0 and not both 0")


class _PatchDataset(Dataset):
    def __init__(self, patches: PatchSet):
        self.p = patches

    def __len__(self):
        return len(self.p)

    def __getitem__(self, i):
        x = torch.from_numpy(np.ascontiguousarray(self.p.patches[i])).permute(2, 0, 1).float() / 255.0
        y = torch.from_numpy(np.ascontiguousarray(self.p.mask_patches[i]))[None].float()
        return x, y


def _device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


@torch.no_grad()
def evaluate_loss(model: nn.Module, patches: PatchSet, cfg: SegTrainConfig) -> float:
    """Mean per-batch Tversky loss with the model in eval mode."""
    device = next(model.parameters()).device
    was_training = model.training
    model.eval()
    losses = []
    for x, y in DataLoader(_PatchDataset(patches), batch_size=cfg.batch_size):
        p = model(x.to(device))
        losses.append(float(tversky_loss(p, y.to(device), cfg.tversky_alpha, cfg.tversky_beta,
                                         cfg.tversky_epsilon)))
    model.train(was_training)
    return float(np.mean(losses))


def split_validation(patches: PatchSet, fraction: float, seed: int) -> tuple[PatchSet, PatchSet]:
    if not 0 < fraction < 1:
        raise ValueError("val_fraction must be in (0, 1) when no validation set is given")
    order = np.random.default_rng(seed).permutation(len(patches))
    n_val = max(1, int(round(fraction * len(patches))))
    if n_val >= len(patches):
        raise ValueError("not enough patches to hold out a validation set")
    return patches.subset(order[n_val:]), patches.subset(order[:n_val])


def train_segnet(model: ModifiedUNetPlusPlus, patchset: PatchSet, cfg: SegTrainConfig,
                 val_patches: Optional[PatchSet] = None) -> tuple[Checkpoint, TrainingLog]:
    """Adam + Tversky training with early stopping on validation loss.

    The best-validation weights are loaded back into ``model`` and returned as
    the checkpoint. Without ``val_patches`` a ``cfg.val_fraction`` share of
    ``patchset`` is held out.
    """
    if len(patchset) == 0:
        raise ValueError("empty patch set")
    if val_patches is None:
        patchset, val_patches = split_validation(patchset, cfg.val_fraction, cfg.seed)
    gen = seed_everything(cfg.seed)
    device = _device(cfg.device)
    model.to(device)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                           weight_decay=model.spec.l2_coefficient)
    loader = DataLoader(_PatchDataset(patchset), batch_size=cfg.batch_size, shuffle=True,
                        generator=gen, num_workers=cfg.num_workers)
    stopper = EarlyStopping(cfg.early_stopping_patience)
    tlog = TrainingLog()
    best_state = snapshot(model)
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        losses = []
        for x, y in loader:
            opt.zero_grad()
            loss = tversky_loss(model(x.to(device)), y.to(device), cfg.tversky_alpha,
                                cfg.tversky_beta, cfg.tversky_epsilon)
            losses.append(check_finite(loss, epoch, step))
            loss.backward()
            opt.step()
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        val_loss = evaluate_loss(model, val_patches, cfg)
        check_finite(torch.tensor(val_loss), epoch, step, "validation loss")
        tlog.record(epoch=epoch, train_loss=float(np.mean(losses)), val_loss=val_loss,
                    lr=opt.param_groups[0]["lr"])
        stop = stopper.update(val_loss, epoch)
        if stopper.improved_last:
            best_state = snapshot(model)
        log.debug("seg epoch %d train %.4f val %.4f", epoch, tlog.epochs[-1]["train_loss"], val_loss)
        if stop:
            tlog.stopped_early = True
            break
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    tlog.steps = step
    tlog.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    ckpt = Checkpoint("segnet", model.spec.to_dict(), best_state,
                      meta={"best_epoch": stopper.best_epoch, "val_loss": stopper.best,
                            "train_config": asdict(cfg)})
    return ckpt, tlog


def load_segnet(ckpt: Union[Checkpoint, str]) -> ModifiedUNetPlusPlus:
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    if ckpt.kind != "segnet":
        raise ValueError(f"checkpoint holds a '{ckpt.kind}' model, not a segmenter")
    model = build_segnet(SegNetworkSpec.from_dict(ckpt.spec))
    model.load_state_dict(ckpt.state_dict)
    return model.eval()


@torch.no_grad()
def predict_patches(model: nn.Module, patches: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """uint8 (N, H, W, 3) -> float (N, H, W) probabilities."""
    model.eval()
    device = next(model.parameters()).device
    out = []
    for s in range(0, len(patches), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(patches[s:s + batch_size])).permute(0, 3, 1, 2).float() / 255.0
        out.append(model(x.to(device))[:, 0].cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0,) + patches.shape[1:3])


def kfold_evaluate(patchset: PatchSet, cfg: SegTrainConfig, spec: Optional[SegNetworkSpec] = None,
                   threshold: float = 0.5) -> tuple[list[MetricsReport], MetricsReport]:
    """Train on K-1 folds, score pixels of the held-out fold, for each fold."""
    k = cfg.kfold_K
    folds = kfold_partitions(len(patchset), k, cfg.seed)
    reports = []
    for f, test_idx in enumerate(folds):
        train_idx = np.concatenate([folds[i] for i in range(k) if i != f])
        model = build_segnet(spec, seed=cfg.seed + f)
        train_segnet(model, patchset.subset(train_idx), cfg)
        test = patchset.subset(test_idx)
        probs = predict_patches(model, test.patches, cfg.batch_size)
        rep = segmentation_report(test.mask_patches, probs, threshold)
        rep.extra["fold"] = f
        reports.append(rep)
        log.info("fold %d/%d: F1 %.4f acc %.4f AUC %s", f + 1, k, rep.f1, rep.accuracy, rep.auc)
    return reports, mean_report(reports)


def tile_positions(length: int, tile: int, stride: int) -> list[int]:
    """Start offsets covering ``length`` with windows of ``tile``; the last one is flush with the end."""
    if length <= tile:
        return [0]
    pos = list(range(0, length - tile + 1, stride))
    if pos[-1] != length - tile:
        pos.append(length - tile)
    return pos


@torch.no_grad()
def probability_map(model: Callable, pixels: np.ndarray, tile: int = PATCH_SIZE,
                    stride: int = PATCH_SIZE // 2, batch_size: int = 4) -> np.ndarray:
    """Tile, predict and average overlapping tiles; returns an HxW float map.

    ``model`` is any callable mapping a (N, 3, tile, tile) float tensor in
    [0, 1] to (N, 1, tile, tile) probabilities.
    """
    if isinstance(model, nn.Module):
        model.eval()
        device = next(model.parameters()).device
    else:
        device = torch.device("cpu")
    h, w = pixels.shape[:2]
    padded = pad_to_min(pixels, tile)
    ph, pw = padded.shape[:2]
    acc = np.zeros((ph, pw), dtype=np.float64)
    cnt = np.zeros((ph, pw), dtype=np.float64)
    coords = [(t, l) for t in tile_positions(ph, tile, stride) for l in tile_positions(pw, tile, stride)]
    for s in range(0, len(coords), batch_size):
        chunk = coords[s:s + batch_size]
        batch = np.stack([padded[t:t + tile, l:l + tile] for t, l in chunk])
        x = torch.from_numpy(batch).permute(0, 3, 1, 2).float() / 255.0
        probs = model(x.to(device))[:, 0].cpu().numpy().astype(np.float64)
        for (t, l), p in zip(chunk, probs):
            acc[t:t + tile, l:l + tile] += p
            cnt[t:t + tile, l:l + tile] += 1
    return (acc / cnt)[:h, :w]


def predict_mask(model: Callable, image: FundusImage, threshold: float = 0.5,
                 tile: int = PATCH_SIZE, stride: int = PATCH_SIZE // 2) -> VesselMask:
    """Binary vessel mask (probability > threshold) with the image's dimensions."""
    prob = probability_map(model, image.pixels, tile, stride)
    return VesselMask(image.id, (prob > threshold).astype(np.uint8))

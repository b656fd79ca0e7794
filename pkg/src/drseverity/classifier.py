"""EfficientNet grade classifiers with cumulative (ordinal multilabel) outputs."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
from torchvision import models
from torchvision.models.efficientnet import EfficientNet, MBConvConfig

from .cleaner import CleanConfig, clean_image
from .dataio import FundusImage, VesselMask
from .metrics import quadratic_weighted_kappa
from .preprocess import AugmentationPolicy, augment, preprocess_for_classifier, resize, to_tensor
from .segnet import predict_mask
from .training import (Checkpoint, EarlyStopping, PlateauLR, TrainingLog, check_finite,
                       seed_everything, snapshot)

log = logging.getLogger(__name__)

NUM_GRADES = 5
THRESHOLD = 0.5


class PretrainedWeightsError(RuntimeError):
    pass


class StageError(RuntimeError):
    """Failure inside one pipeline stage; the message starts with the stage name."""


def encode_ordinal(grade: int) -> np.ndarray:
    """Grade g -> ones at positions 0..g, zeros after (4 -> [1, 1, 1, 1, 1])."""
    if int(grade) != grade or not 0 <= grade < NUM_GRADES:
        raise ValueError(f"grade {grade} outside 0..{NUM_GRADES - 1}")
    out = np.zeros(NUM_GRADES, dtype=np.float32)
    out[: int(grade) + 1] = 1.0
    return out


def decode_ordinal(scores, threshold: float = THRESHOLD) -> int:
    """Number of leading scores at or above ``threshold``, minus one, floored at 0.

    Scores after the first sub-threshold output are ignored.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size != NUM_GRADES:
        raise ValueError(f"expected {NUM_GRADES} scores, got {s.size}")
    below = np.flatnonzero(s < threshold)
    leading = int(below[0]) if below.size else NUM_GRADES
    return max(leading - 1, 0)


@dataclass
class OrdinalPrediction:
    scores: list
    grade: int

    @classmethod
    def from_scores(cls, scores, threshold: float = THRESHOLD) -> "OrdinalPrediction":
        s = [float(v) for v in np.asarray(scores).ravel()]
        return cls(s, decode_ordinal(s, threshold))


# -- model ---------------------------------------------------------------------

_TORCHVISION = {
    "efficientnet_b5": (models.efficientnet_b5, models.EfficientNet_B5_Weights.IMAGENET1K_V1),
    "efficientnet_b0": (models.efficientnet_b0, models.EfficientNet_B0_Weights.IMAGENET1K_V1),
}
BACKBONES = tuple(_TORCHVISION) + ("efficientnet_tiny",)


@dataclass
class ClassifierSpec:
    backbone: str = "efficientnet_b5"
    input_size: int = 224
    normalization: str = "group"  # "group" | "batch"
    num_groups: int = 32
    pretrained: bool = True
    dropout: float = 0.5
    weights_path: Optional[str] = None

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone '{self.backbone}', choose from {BACKBONES}")
        if self.normalization not in ("group", "batch"):
            raise ValueError("normalization must be 'group' or 'batch'")

    def to_dict(self) -> dict:
        return asdict(self)


def _tiny_efficientnet() -> EfficientNet:
    conf = partial(MBConvConfig, width_mult=0.25, depth_mult=0.25)
    setting = [conf(1, 3, 1, 32, 16, 1), conf(6, 3, 2, 16, 24, 2), conf(6, 5, 2, 24, 40, 2),
               conf(6, 3, 2, 40, 80, 3), conf(6, 5, 1, 80, 112, 3), conf(6, 5, 2, 112, 192, 4),
               conf(6, 3, 1, 192, 320, 1)]
    return EfficientNet(setting, dropout=0.5, last_channel=128)


def group_count(channels: int, wanted: int) -> int:
    """Largest divisor of ``channels`` not exceeding ``wanted``."""
    for g in range(min(wanted, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def replace_batchnorm(module: nn.Module, num_groups: int) -> int:
    """Swap every BatchNorm2d for a GroupNorm, keeping the learned affine terms."""
    swapped = 0
    for name, child in module.named_children():
        if isinstance(child, nn.BatchNorm2d):
            c = child.num_features
            gn = nn.GroupNorm(group_count(c, num_groups), c, eps=child.eps, affine=child.affine)
            if child.affine:
                with torch.no_grad():
                    gn.weight.copy_(child.weight)
                    gn.bias.copy_(child.bias)
            setattr(module, name, gn)
            swapped += 1
        else:
            swapped += replace_batchnorm(child, num_groups)
    return swapped


class GradeClassifier(nn.Module):
    """Backbone -> global average pool -> dropout -> 5 sigmoid outputs."""

    def __init__(self, net: EfficientNet, spec: ClassifierSpec):
        super().__init__()
        self.spec = spec
        in_features = net.classifier[-1].in_features
        net.classifier = nn.Sequential(nn.Dropout(spec.dropout), nn.Linear(in_features, NUM_GRADES))
        self.net = net

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(x))


def _load_pretrained(spec: ClassifierSpec) -> EfficientNet:
    if spec.backbone == "efficientnet_tiny":
        raise PretrainedWeightsError("efficientnet_tiny has no pretrained weights; set pretrained = false")
    ctor, weights = _TORCHVISION[spec.backbone]
    net = ctor(weights=None)
    try:
        if spec.weights_path:
            state = torch.load(spec.weights_path, map_location="cpu", weights_only=True)
        else:
            state = weights.get_state_dict(progress=False)
    except Exception as exc:
        raise PretrainedWeightsError(
            f"could not load ImageNet weights for {spec.backbone} ({exc}). Download "
            f"{weights.url} into $TORCH_HOME/hub/checkpoints/ or set classifier.weights_path "
            "to a local copy") from exc
    net.load_state_dict(state)
    return net


def build_classifier(spec: Optional[ClassifierSpec] = None, seed: Optional[int] = None) -> GradeClassifier:
    spec = spec or ClassifierSpec()
    if seed is not None:
        torch.manual_seed(seed)
    if spec.pretrained:
        net = _load_pretrained(spec)
    elif spec.backbone == "efficientnet_tiny":
        net = _tiny_efficientnet()
    else:
        net = _TORCHVISION[spec.backbone][0](weights=None)
    if spec.normalization == "group":
        replace_batchnorm(net, spec.num_groups)
    return GradeClassifier(net, spec)


def load_classifier(ckpt: Union[Checkpoint, str]) -> GradeClassifier:
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    if ckpt.kind != "classifier":
        raise ValueError(f"checkpoint holds a '{ckpt.kind}' model, not a classifier")
    spec = ClassifierSpec(**{**ckpt.spec, "pretrained": False})
    model = build_classifier(spec)
    model.load_state_dict(ckpt.state_dict)
    return model.eval()


# -- training ------------------------------------------------------------------

@dataclass
class ClfTrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 4
    epochs: int = 100
    early_stopping_patience: int = 12
    lr_reduce_patience: int = 4
    lr_reduce_factor: float = 0.5
    min_lr: float = 1e-7
    val_fraction: float = 0.1
    max_steps: Optional[int] = None
    augment: bool = True
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationPolicy(**self.augmentation)


def _unpack(items) -> tuple[list[FundusImage], list[int]]:
    images, grades = [], []
    for it in items:
        if isinstance(it, FundusImage):
            if it.grade is None:
                raise ValueError(f"{it.id}: training image without a grade")
            images.append(it)
            grades.append(it.grade)
        else:
            img, g = it
            images.append(img)
            grades.append(int(g))
    return images, grades


def _fit_input(image: FundusImage, size: int) -> FundusImage:
    return image if image.shape == (size, size) else resize(image, (size, size))


def _batch_tensor(images: Sequence[FundusImage], size: int, rescale: float) -> torch.Tensor:
    return torch.stack([to_tensor(_fit_input(im, size), rescale) for im in images])


@torch.no_grad()
def predict_scores(model: GradeClassifier, images: Sequence[FundusImage], batch_size: int = 8,
                   rescale: float = 1 / 255) -> np.ndarray:
    """(N, 5) sigmoid scores for already-preprocessed images."""
    model.eval()
    device = next(model.parameters()).device
    out = []
    for s in range(0, len(images), batch_size):
        x = _batch_tensor(images[s:s + batch_size], model.spec.input_size, rescale)
        out.append(model(x.to(device)).cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0, NUM_GRADES), np.float32)


def predict_grades(model: GradeClassifier, images: Sequence[FundusImage], **kw) -> np.ndarray:
    return np.array([decode_ordinal(s) for s in predict_scores(model, images, **kw)], dtype=np.int64)


def _validate(model: GradeClassifier, images: list[FundusImage], grades: list[int],
              cfg: ClfTrainConfig) -> tuple[float, float]:
    """(BCE loss, QWK) on the validation set."""
    scores = predict_scores(model, images, cfg.batch_size, cfg.augmentation.rescale)
    targets = np.stack([encode_ordinal(g) for g in grades])
    eps = 1e-7
    s = np.clip(scores.astype(np.float64), eps, 1 - eps)
    loss = float(-(targets * np.log(s) + (1 - targets) * np.log(1 - s)).mean())
    qwk = quadratic_weighted_kappa(grades, [decode_ordinal(v) for v in scores])
    return loss, qwk


def train_classifier(model: GradeClassifier, images, cfg: ClfTrainConfig, use_cleaned: bool = False,
                     val_images=None, preprocessed: bool = True) -> tuple[Checkpoint, TrainingLog]:
    """BCE training on cumulative targets with on-the-fly augmentation.

    ``images`` are graded FundusImages or (FundusImage, grade) pairs. With
    ``preprocessed=False`` they are cropped, resized and enhanced first.
    Without ``val_images`` a ``cfg.val_fraction`` share is held out.
    ``use_cleaned`` only labels the checkpoint with its input path.
    """
    imgs, grades = _unpack(images)
    if not imgs:
        raise ValueError("no training images")
    size = model.spec.input_size
    if not preprocessed:
        imgs = [preprocess_for_classifier(im, (size, size)) for im in imgs]
    if val_images is None:
        order = np.random.default_rng(cfg.seed).permutation(len(imgs))
        n_val = max(1, int(round(cfg.val_fraction * len(imgs))))
        if n_val >= len(imgs):
            raise ValueError("not enough images to hold out a validation set")
        val_imgs = [imgs[i] for i in order[:n_val]]
        val_grades = [grades[i] for i in order[:n_val]]
        imgs = [imgs[i] for i in order[n_val:]]
        grades = [grades[i] for i in order[n_val:]]
    else:
        val_imgs, val_grades = _unpack(val_images)
        if not preprocessed:
            val_imgs = [preprocess_for_classifier(im, (size, size)) for im in val_imgs]

    seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    device = torch.device(cfg.device)
    model.to(device)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    plateau = PlateauLR(opt, cfg.lr_reduce_patience, cfg.lr_reduce_factor, cfg.min_lr)
    stopper = EarlyStopping(cfg.early_stopping_patience)
    criterion = nn.BCEWithLogitsLoss()
    targets = torch.from_numpy(np.stack([encode_ordinal(g) for g in grades]))
    tlog = TrainingLog()
    best_state = snapshot(model)
    step = 0
    rescale = cfg.augmentation.rescale
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(imgs))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            batch = [imgs[i] for i in idx]
            if cfg.augment:
                batch = [augment(im, cfg.augmentation, rng) for im in batch]
            x = _batch_tensor(batch, size, rescale).to(device)
            opt.zero_grad()
            loss = criterion(model.logits(x), targets[idx].to(device))
            losses.append(check_finite(loss, epoch, step))
            loss.backward()
            opt.step()
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        val_loss, val_qwk = _validate(model, val_imgs, val_grades, cfg)
        check_finite(torch.tensor(val_loss), epoch, step, "validation loss")
        lr_used = plateau.lr
        reduced = plateau.step(val_loss)
        tlog.record(epoch=epoch, train_loss=float(np.mean(losses)), val_loss=val_loss,
                    val_qwk=val_qwk, lr=lr_used, lr_reduced=reduced)
        stop = stopper.update(val_loss, epoch)
        if stopper.improved_last:
            best_state = snapshot(model)
        log.debug("clf epoch %d train %.4f val %.4f qwk %.4f", epoch, tlog.epochs[-1]["train_loss"],
                  val_loss, val_qwk)
        if stop:
            tlog.stopped_early = True
            break
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    tlog.steps = step
    tlog.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    ckpt = Checkpoint("classifier", model.spec.to_dict(), best_state,
                      meta={"path": "cleaned" if use_cleaned else "original",
                            "best_epoch": stopper.best_epoch, "val_loss": stopper.best})
    return ckpt, tlog


# -- inference -----------------------------------------------------------------

def _segment(mask_model, image: FundusImage) -> VesselMask:
    if isinstance(mask_model, nn.Module):
        return predict_mask(mask_model, image)
    return mask_model(image)


def cleaned_input(image: FundusImage, mask_model: Union[nn.Module, Callable],
                  clean_cfg: Optional[CleanConfig] = None) -> tuple[FundusImage, VesselMask]:
    """Segment then clean; ``mask_model`` is a segmenter or an image -> VesselMask callable."""
    try:
        mask = _segment(mask_model, image)
    except Exception as exc:
        raise StageError(f"segment: {exc}") from exc
    try:
        return clean_image(image, mask, clean_cfg), mask
    except Exception as exc:
        raise StageError(f"clean: {exc}") from exc


def predict_pair(model_original: GradeClassifier, model_cleaned: GradeClassifier, image: FundusImage,
                 mask_model, clean_cfg: Optional[CleanConfig] = None,
                 preprocess_kwargs: Optional[dict] = None) -> tuple[OrdinalPrediction, OrdinalPrediction]:
    """E1 on the preprocessed original, E2 on the preprocessed cleaned image."""
    kw = preprocess_kwargs or {}
    cleaned, _ = cleaned_input(image, mask_model, clean_cfg)
    preds = []
    for stage, model, img in (("classify-original", model_original, image),
                              ("classify-cleaned", model_cleaned, cleaned)):
        try:
            size = model.spec.input_size
            x = preprocess_for_classifier(img, (size, size), **kw)
            preds.append(OrdinalPrediction.from_scores(predict_scores(model, [x])[0]))
        except StageError:
            raise
        except Exception as exc:
            raise StageError(f"{stage}: {exc}") from exc
    return preds[0], preds[1]

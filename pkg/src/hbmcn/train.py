"""SGD with momentum, the step learning-rate schedule, augmentation and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from decimal import Decimal
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .autograd import Tensor
from .blocks import Parameter
from .data import normalize
from .model import HBMCN, joint_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 80
    base_lr: float = 0.01
    milestones: tuple[int, ...] = (40, 60)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    loss_reduction: str = "sum"
    crop: bool = True
    crop_pad: int = 10
    flip: bool = True
    erase: bool = True
    erase_p: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.4)
    erase_aspect: float = 0.3
    norm_mean: float = 0.5
    norm_std: float = 0.5

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.erase_area = tuple(float(a) for a in self.erase_area)
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm)")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValueError("loss_reduction must be 'sum' or 'mean'")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["milestones"] = list(self.milestones)
        d["erase_area"] = list(self.erase_area)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def paper_train_config(**overrides) -> TrainConfig:
    return TrainConfig(**overrides)


def nano_train_config(**overrides) -> TrainConfig:
    # mean reduction keeps 10x head updates stable with few classes; crop padding
    # is 10 px scaled by 128/384 so the jitter covers the same fraction of the frame
    base = dict(epochs=20, milestones=(10, 15), loss_reduction="mean", base_lr=0.02, crop_pad=3)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at_epoch(epoch: int, cfg: Optional[TrainConfig] = None) -> float:
    """Step schedule: base LR, divided by 10 at each milestone (0-based epochs)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    cfg = cfg or TrainConfig()
    drops = sum(epoch >= m for m in cfg.milestones)
    # decimal arithmetic so 0.01 -> 0.001 -> 0.0001 lands on the exact decimal plateaus
    return float(Decimal(repr(cfg.base_lr)) * Decimal(repr(cfg.lr_decay)) ** drops)


@dataclass
class OptimState:
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0


def sgd_step(params: Mapping[str, Parameter], state: OptimState, lr: float) -> None:
    """One in-place SGD update with momentum and L2 weight decay.

    g' = g + wd*w (only for parameters with ``decay`` set), v = m*v + g',
    w = w - lr*lr_mult*v.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name} has no gradient")
    for name, p in params.items():
        g = p.grad
        if p.decay and state.weight_decay:
            g = g + state.weight_decay * p.data
        v = state.buffers.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state.buffers[name] = v
        v *= state.momentum
        v += g
        p.data -= (lr * p.lr_mult) * v
    state.step += 1


# ---------------------------------------------------------------------------
# augmentation


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[..., ::-1])


def random_crop(img: np.ndarray, rng, pad: int) -> np.ndarray:
    c, h, w = img.shape
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=img.dtype)
    padded[:, pad : pad + h, pad : pad + w] = img
    top = int(rng.integers(0, 2 * pad + 1))
    left = int(rng.integers(0, 2 * pad + 1))
    return padded[:, top : top + h, left : left + w].copy()


def random_erase(img: np.ndarray, rng, area=(0.02, 0.4), aspect: float = 0.3, attempts: int = 100):
    """Fill one random rectangle with uniform noise; returns (image, erased fraction or None)."""
    c, h, w = img.shape
    total = h * w
    for _ in range(attempts):
        target = rng.uniform(*area) * total
        ratio = rng.uniform(aspect, 1.0 / aspect)
        eh = int(round(np.sqrt(target * ratio)))
        ew = int(round(np.sqrt(target / ratio)))
        frac = eh * ew / total
        if 0 < eh < h and 0 < ew < w and area[0] <= frac <= area[1]:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            img = img.copy()
            img[:, top : top + eh, left : left + ew] = rng.uniform(0.0, 1.0, size=(c, eh, ew))
            return img, frac
    return img, None


def augment(img: np.ndarray, rng, cfg: Optional[TrainConfig] = None, record: Optional[dict] = None) -> np.ndarray:
    """Pad-and-crop, horizontal flip (p=0.5) and random erasing (p=erase_p).

    ``img`` is a 3×H×W array in [0, 1]; the output has the same shape.
    """
    cfg = cfg or TrainConfig()
    out = img
    if cfg.crop:
        out = random_crop(out, rng, cfg.crop_pad)
    if cfg.flip and rng.random() < 0.5:
        out = hflip(out)
    erased = None
    if cfg.erase and rng.random() < cfg.erase_p:
        out, erased = random_erase(out, rng, cfg.erase_area, cfg.erase_aspect)
    if record is not None:
        record["erased"] = erased
    return out


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 0x5EED])).permutation(n)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class FitResult:
    trace: list[tuple[int, float, float]]
    step_losses: list[float]
    state: OptimState
    seconds: float = 0.0


def fit(
    model: HBMCN,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    state: Optional[OptimState] = None,
    on_epoch: Optional[Callable[[int, float, float], None]] = None,
) -> FitResult:
    """Train in place on N×3×H×W images in [0, 1] with integer class labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(images)
    if n == 0:
        raise ValueError("empty dataset")
    if len(labels) != n:
        raise ValueError("images and labels differ in length")
    if labels.min() < 0 or labels.max() >= model.cfg.num_classes:
        raise ValueError(f"labels must lie in [0, {model.cfg.num_classes})")
    state = state or OptimState(cfg.momentum, cfg.weight_decay)
    params = model.parameters()
    dtype = np.dtype(model.cfg.dtype)
    model.train()
    trace, step_losses = [], []
    t0 = time.perf_counter()
    for epoch in range(state.epoch, cfg.epochs):
        lr = lr_at_epoch(epoch, cfg)
        order = epoch_order(n, cfg.seed, epoch)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            batch = np.stack([augment(images[i], sample_rng(cfg.seed, epoch, int(i)), cfg) for i in idx])
            batch = normalize(batch.astype(dtype), cfg.norm_mean, cfg.norm_std)
            model.zero_grad()
            loss = joint_loss(model(Tensor(batch))[1], labels[idx], cfg.loss_reduction)
            loss.backward()
            sgd_step(params, state, lr)
            losses.append(float(loss.data))
        step_losses.extend(losses)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        trace.append((epoch, lr, mean_loss))
        state.epoch = epoch + 1
        log.info("epoch %d lr %.5f loss %.4f", epoch, lr, mean_loss)
        if on_epoch:
            on_epoch(epoch, lr, mean_loss)
    return FitResult(trace, step_losses, state, time.perf_counter() - t0)


def write_loss_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "lr", "mean_joint_loss"])
        for epoch, lr, loss in trace:
            writer.writerow([epoch, f"{lr:.6g}", f"{loss:.6f}"])

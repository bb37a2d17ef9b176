"""Network assembly: shared backbone, heterogeneous branches and multi-level heads."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import DimensionError, Tensor
from .blocks import BatchNorm, Bottleneck, ClassifierHead, Conv, Layer, Parameter, ReductionHead

BRANCH_KINDS = ("res", "se")
HEAD_PLACEMENTS = ("last", "two_level", "multi")
NEW_PARAM_LR_MULT = 10.0


@dataclass
class ModelConfig:
    """Topology of the network.

    ``widths`` are the bottleneck widths of stages 2 to 5; every stage
    outputs four times its width. ``branches`` lists the post-backbone
    branches in head order, ``head_placement`` picks where heads sit in
    each branch: ``"last"`` (end of stage 5), ``"two_level"`` (end of stage
    4 and of stage 5) or ``"multi"`` (end of stage 4 and every stage-5 block).
    """

    input_hw: tuple[int, int] = (384, 192)
    stem_width: int = 64
    widths: tuple[int, int, int, int] = (64, 128, 256, 512)
    blocks: tuple[int, int, int, int] = (3, 4, 6, 3)
    stage5_stride: int = 2
    num_classes: int = 751
    feature_width: int = 256
    se_ratio: int = 16
    branches: tuple[str, ...] = ("res", "se")
    head_placement: str = "multi"
    dtype: str = "float32"

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.widths = tuple(int(v) for v in self.widths)
        self.blocks = tuple(int(v) for v in self.blocks)
        self.branches = tuple(self.branches)
        self.validate()

    def validate(self) -> None:
        if len(self.input_hw) != 2 or min(self.input_hw) < 1:
            raise ValueError(f"bad input_hw {self.input_hw}")
        if len(self.widths) != 4 or len(self.blocks) != 4:
            raise ValueError("widths and blocks need one entry per stage 2..5")
        if min(self.widths) < 1 or min(self.blocks) < 1 or self.stem_width < 1:
            raise ValueError("widths and block counts must be positive")
        if self.stage5_stride not in (1, 2):
            raise ValueError("stage5_stride must be 1 or 2")
        if self.num_classes < 2 or self.feature_width < 1:
            raise ValueError("need num_classes >= 2 and positive feature_width")
        if not self.branches or any(b not in BRANCH_KINDS for b in self.branches):
            raise ValueError(f"branches must be drawn from {BRANCH_KINDS}")
        if self.head_placement not in HEAD_PLACEMENTS:
            raise ValueError(f"head_placement must be one of {HEAD_PLACEMENTS}")
        if "se" in self.branches:
            for w in self.widths[2:]:
                if self.se_ratio < 1 or (4 * w) % self.se_ratio:
                    raise ValueError(f"se_ratio {self.se_ratio} does not divide stage width {4 * w}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def branch_names(self) -> list[str]:
        names, seen = [], {}
        for kind in self.branches:
            seen[kind] = seen.get(kind, 0) + 1
            names.append(kind if seen[kind] == 1 else f"{kind}{seen[kind]}")
        return names

    def head_points(self) -> list[tuple[int, int]]:
        """(stage, block index) pairs carrying a head, in order, for one branch."""
        n4, n5 = self.blocks[2], self.blocks[3]
        if self.head_placement == "last":
            return [(5, n5 - 1)]
        if self.head_placement == "two_level":
            return [(4, n4 - 1), (5, n5 - 1)]
        return [(4, n4 - 1)] + [(5, i) for i in range(n5)]

    def head_names(self) -> list[str]:
        return [
            f"{branch}_{stage}{chr(ord('a') + idx)}"
            for branch in self.branch_names
            for stage, idx in self.head_points()
        ]

    @property
    def num_heads(self) -> int:
        return len(self.branches) * len(self.head_points())

    @property
    def embedding_dim(self) -> int:
        return self.num_heads * self.feature_width

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("input_hw", "widths", "blocks", "branches"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def paper_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def nano_config(**overrides) -> ModelConfig:
    base = dict(
        input_hw=(128, 64), stem_width=8, widths=(8, 16, 32, 64), blocks=(1, 1, 2, 2),
        feature_width=32, se_ratio=4, num_classes=32,
    )
    base.update(overrides)
    return ModelConfig(**base)


PRESETS = {"paper": paper_config, "nano": nano_config}

# ablation rows: baseline / +Res-Branch / +SE-Res-Branch / Baseline+2Level / full network
ABLATION_MODES = {
    "baseline": dict(branches=("res",), head_placement="last"),
    "res2": dict(branches=("res", "res"), head_placement="last"),
    "seres2": dict(branches=("res", "se"), head_placement="last"),
    "baseline2l": dict(branches=("res",), head_placement="two_level"),
    "full": dict(branches=("res", "se"), head_placement="multi"),
}


def _stage(cin: int, width: int, n: int, stride: int, rng, se_ratio, dtype) -> list[Bottleneck]:
    blocks = []
    for i in range(n):
        blocks.append(Bottleneck(cin, width, rng, stride=stride if i == 0 else 1, se_ratio=se_ratio, dtype=dtype))
        cin = width * Bottleneck.expansion
    return blocks


class Backbone(Layer):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.stem = Conv(3, cfg.stem_width, 7, rng, stride=2, pad=3, dtype=dtype)
        self.stem_bn = BatchNorm(cfg.stem_width, dtype=dtype)
        self.stage2 = _stage(cfg.stem_width, cfg.widths[0], cfg.blocks[0], 1, rng, None, dtype)
        self.stage3 = _stage(4 * cfg.widths[0], cfg.widths[1], cfg.blocks[1], 2, rng, None, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = ag.relu(self.stem_bn(self.stem(x)))
        x = ag.max_pool(x, 3, 2, 1)
        for block in self.stage2 + self.stage3:
            x = block(x)
        return x


class Branch(Layer):
    """Stages 4 and 5, either plain bottlenecks or SE-Res modules."""

    def __init__(self, cfg: ModelConfig, kind: str, rng, dtype):
        se = cfg.se_ratio if kind == "se" else None
        self.kind = kind
        self.stage4 = _stage(4 * cfg.widths[1], cfg.widths[2], cfg.blocks[2], 2, rng, se, dtype)
        self.stage5 = _stage(4 * cfg.widths[2], cfg.widths[3], cfg.blocks[3], cfg.stage5_stride, rng, se, dtype)

    def __call__(self, x: Tensor, taps: Sequence[tuple[int, int]]) -> list[Tensor]:
        """Run the branch, returning the block outputs named in ``taps``."""
        outputs = {}
        for stage, blocks in ((4, self.stage4), (5, self.stage5)):
            for i, block in enumerate(blocks):
                x = block(x)
                outputs[(stage, i)] = x
        return [outputs[t] for t in taps]


class Head(Layer):
    def __init__(self, cin: int, cfg: ModelConfig, rng, dtype):
        self.reduction = ReductionHead(cin, cfg.feature_width, rng, dtype)
        self.classifier = ClassifierHead(cfg.feature_width, cfg.num_classes, rng, dtype)


class HBMCN(Layer):
    """The full network; also expresses every ablation topology via its config."""

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None, seed: int = 0):
        if rng is None:
            rng = np.random.default_rng(seed)
        cfg.validate()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        self.backbone = Backbone(cfg, rng, dtype)
        self.branches = {name: Branch(cfg, kind, rng, dtype) for name, kind in zip(cfg.branch_names, cfg.branches)}
        self.heads = {}
        for name in cfg.head_names():
            stage = int(name.split("_")[1][0])
            cin = 4 * cfg.widths[stage - 2]
            self.heads[name] = Head(cin, cfg, rng, dtype)
        for name, branch in self.branches.items():
            if branch.kind == "se":
                branch.set_lr_mult(NEW_PARAM_LR_MULT)
        for head in self.heads.values():
            head.set_lr_mult(NEW_PARAM_LR_MULT)
        self.train()

    # -- mode -------------------------------------------------------------

    def train(self) -> "HBMCN":
        for layer in self.layers():
            layer.training = True
        return self

    def eval(self) -> "HBMCN":
        for layer in self.layers():
            layer.training = False
        return self

    # -- state ------------------------------------------------------------

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def buffers(self) -> dict[str, np.ndarray]:
        return dict(self.named_buffers())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def without_branch(self, name: str) -> "HBMCN":
        """Drop a branch and its heads in place (used to compare topologies)."""
        if name not in self.branches:
            raise KeyError(name)
        idx = list(self.branches).index(name)
        del self.branches[name]
        for head in [h for h in self.heads if h.rsplit("_", 1)[0] == name]:
            del self.heads[head]
        kinds = list(self.cfg.branches)
        del kinds[idx]
        self.cfg = dataclasses.replace(self.cfg, branches=tuple(kinds))
        return self

    # -- forward ----------------------------------------------------------

    def check_input(self, x: Tensor) -> None:
        if x.data.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != self.cfg.input_hw:
            raise DimensionError(f"expected N×3×{self.cfg.input_hw[0]}×{self.cfg.input_hw[1]} input, got {x.shape}")

    def __call__(self, x: Tensor) -> tuple[list[Tensor], list[Tensor]]:
        """Return (features, logits), one entry per head in head order."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.cfg.dtype))
        self.check_input(x)
        shared = self.backbone(x)
        taps = self.cfg.head_points()
        features, logits = [], []
        for bname, branch in self.branches.items():
            for (stage, idx), out in zip(taps, branch(shared, taps)):
                head = self.heads[f"{bname}_{stage}{chr(ord('a') + idx)}"]
                f = head.reduction(ag.gap(out))
                features.append(f)
                logits.append(head.classifier(f))
        return features, logits


def build(cfg: ModelConfig, rng: Optional[np.random.Generator] = None, seed: int = 0) -> HBMCN:
    return HBMCN(cfg, rng=rng, seed=seed)


def forward_train(model: HBMCN, batch) -> list[Tensor]:
    if not model.training:
        raise RuntimeError("forward_train needs the model in train mode")
    return model(batch)[1]


def joint_loss(logit_sets: Sequence[Tensor], labels, reduction: str = "sum") -> Tensor:
    """Sum of the per-head softmax log-losses."""
    if not logit_sets:
        raise ValueError("need at least one head")
    total = ag.softmax_log_loss(logit_sets[0], labels, reduction)
    for logits in logit_sets[1:]:
        total = ag.add(total, ag.softmax_log_loss(logits, labels, reduction))
    return total


def extract_features(model: HBMCN, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Concatenated, flip-averaged head features for an N×3×H×W array."""
    if model.training:
        raise RuntimeError("feature extraction needs the model in eval mode")
    images = np.asarray(images, dtype=model.cfg.dtype)
    if images.ndim == 3:
        images = images[None]
    out = np.empty((images.shape[0], model.cfg.embedding_dim), dtype=model.cfg.dtype)
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start : start + batch_size]
        plain, _ = model(Tensor(chunk))
        flipped, _ = model(Tensor(np.ascontiguousarray(chunk[..., ::-1])))
        levels = [0.5 * (a.data + b.data) for a, b in zip(plain, flipped)]
        out[start : start + len(chunk)] = np.concatenate(levels, axis=1)
    return out


def extract_feature(model: HBMCN, image: np.ndarray) -> np.ndarray:
    return extract_features(model, np.asarray(image)[None])[0]


def forward_macs(cfg: ModelConfig) -> int:
    """Multiply-accumulates of one single-image forward pass (convolutions and heads)."""

    def out(n, k, s, p):
        return (n + 2 * p - k) // s + 1

    h, w = cfg.input_hw
    h, w = out(h, 7, 2, 3), out(w, 7, 2, 3)
    total = 3 * 49 * cfg.stem_width * h * w
    h, w = out(h, 3, 2, 1), out(w, 3, 2, 1)

    def stage(cin, width, n, stride, h, w, se):
        macs, cout = 0, 4 * width
        for i in range(n):
            s = stride if i == 0 else 1
            h, w = out(h, 1, s, 0), out(w, 1, s, 0)
            macs += (cin * width + 9 * width * width + width * cout) * h * w
            if s != 1 or cin != cout:
                macs += cin * cout * h * w
            if se:
                macs += 2 * cout * (cout // cfg.se_ratio)
            cin = cout
        return macs, h, w

    macs, h, w = stage(cfg.stem_width, cfg.widths[0], cfg.blocks[0], 1, h, w, False)
    total += macs
    macs, h, w = stage(4 * cfg.widths[0], cfg.widths[1], cfg.blocks[1], 2, h, w, False)
    total += macs
    for kind in cfg.branches:
        m4, h4, w4 = stage(4 * cfg.widths[1], cfg.widths[2], cfg.blocks[2], 2, h, w, kind == "se")
        m5, _, _ = stage(4 * cfg.widths[2], cfg.widths[3], cfg.blocks[3], cfg.stage5_stride, h4, w4, kind == "se")
        total += m4 + m5
    for name in cfg.head_names():
        cin = 4 * cfg.widths[int(name.split("_")[1][0]) - 2]
        total += cin * cfg.feature_width + cfg.feature_width * cfg.num_classes
    return total

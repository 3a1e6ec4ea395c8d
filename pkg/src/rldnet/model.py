"""Two-branch network (global identity + person structure), parameter counter and trainer."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import checkpoint
from . import functional as F
from .autodiff import Tensor
from .data import AugmentConfig, DatasetIndex, augment_batch, resize_bilinear
from .nn import LayerSpec, Module, Sequential, SgdState, build_layer, sgd_step
from .rld import ClassifierHead, JointLossConfig, StructureHead, joint_loss, rld_matrix, structure_loss

logger = logging.getLogger(__name__)


def desk_backbone(widths: Sequence[int] = (16, 32, 64, 128), in_channels: int = 3) -> list[LayerSpec]:
    """One stride-2 3x3 conv + BN + ReLU per stage; 64x32 input gives a 4x2 map."""
    layers = []
    cin = in_channels
    for c in widths:
        layers += [LayerSpec.conv(cin, c, 3, stride=2, padding=1, bias=False), LayerSpec.bn(c), LayerSpec("relu")]
        cin = c
    return layers


@dataclass(frozen=True)
class ResNetSpec:
    """Declarative ResNet backbone (no classifier), used for analytic parameter counts only."""

    blocks: tuple[int, ...] = (3, 4, 6, 3)
    bottleneck: bool = True
    widths: tuple[int, ...] = (64, 128, 256, 512)
    stem_width: int = 64
    in_channels: int = 3
    total_stride: int = 32

    @classmethod
    def resnet(cls, depth: int) -> "ResNetSpec":
        table = {18: ((2, 2, 2, 2), False), 34: ((3, 4, 6, 3), False), 50: ((3, 4, 6, 3), True),
                 101: ((3, 4, 23, 3), True)}
        if depth not in table:
            raise ValueError(f"unsupported ResNet depth {depth}")
        blocks, bottleneck = table[depth]
        return cls(blocks=blocks, bottleneck=bottleneck)

    @property
    def out_channels(self) -> int:
        return self.widths[-1] * (4 if self.bottleneck else 1)

    def param_count(self) -> int:
        total = self.in_channels * self.stem_width * 49 + 2 * self.stem_width
        cin = self.stem_width
        expansion = 4 if self.bottleneck else 1
        for stage, (n_blocks, w) in enumerate(zip(self.blocks, self.widths)):
            cout = w * expansion
            for b in range(n_blocks):
                if self.bottleneck:
                    total += cin * w + 2 * w + 9 * w * w + 2 * w + w * cout + 2 * cout
                else:
                    total += 9 * cin * w + 2 * w + 9 * w * w + 2 * w
                if b == 0 and (stage > 0 or cin != cout):
                    total += cin * cout + 2 * cout
                cin = cout
        return total

    def output_shape(self, input_size: tuple[int, int]) -> tuple[int, int, int]:
        h, w = input_size
        return self.out_channels, math.ceil(h / self.total_stride), math.ceil(w / self.total_stride)


@dataclass
class ModelConfig:
    num_classes: int
    backbone: list[LayerSpec] | ResNetSpec = field(default_factory=desk_backbone)
    identity_hidden_dim: int = 512
    structure_hidden_dim: int = 256
    lam: float = 0.2
    input_size: tuple[int, int] = (64, 32)
    dropout: float = 0.5
    structure_branch: bool = True
    normalize_columns: bool = True

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.identity_hidden_dim < 1 or self.structure_hidden_dim < 1:
            raise ValueError("head widths must be positive")
        JointLossConfig(self.lam, self.structure_hidden_dim)
        c, h, w = self.feature_shape()
        if h < 2:
            raise ValueError(f"backbone output height is {h}; the distance matrix needs at least 2 rows")

    def feature_shape(self, input_size: tuple[int, int] | None = None) -> tuple[int, int, int]:
        size = input_size or self.input_size
        if isinstance(self.backbone, ResNetSpec):
            return self.backbone.output_shape(size)
        shape: tuple[int, ...] = (3, *size)
        for spec in self.backbone:
            shape = spec.output_shape(shape)
        if len(shape) != 3:
            raise ValueError(f"backbone must end in a (C, H, W) feature map, got shape {shape}")
        return shape  # type: ignore[return-value]

    @property
    def loss_config(self) -> JointLossConfig:
        return JointLossConfig(self.lam, self.structure_hidden_dim)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 60
    lr: float = 0.1
    lr_decay_epoch: int = 40
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    # prefix -> multiplier; stands in for the reduced rate of pretrained layers
    lr_mult: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if self.batch_size < 2 or self.epochs < 1:
            raise ValueError("batch_size must be >= 2 and epochs >= 1")
        # a single-epoch run never reaches the decay, so any positive boundary is accepted there
        if self.lr_decay_epoch < 1 or (self.epochs > 1 and self.lr_decay_epoch >= self.epochs):
            raise ValueError(f"lr_decay_epoch ({self.lr_decay_epoch}) must lie in [1, epochs={self.epochs})")
        if self.lr < 0 or self.lr_decay_factor <= 0:
            raise ValueError("lr must be >= 0 and lr_decay_factor > 0")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-indexed ``epoch``; decay applies after ``lr_decay_epoch``."""
        return self.lr if epoch <= self.lr_decay_epoch else self.lr * self.lr_decay_factor


@dataclass(frozen=True)
class ParamCountReport:
    baseline_params: int
    structure_branch_params: int

    @property
    def total(self) -> int:
        return self.baseline_params + self.structure_branch_params

    @property
    def overhead_ratio(self) -> float:
        return self.structure_branch_params / self.total


def count_params(config: ModelConfig) -> ParamCountReport:
    """Analytic parameter counts from the architecture description alone."""
    c_out, h_out, _ = config.feature_shape()
    if isinstance(config.backbone, ResNetSpec):
        backbone = config.backbone.param_count()
    else:
        backbone = sum(spec.param_count() for spec in config.backbone)
    identity = ClassifierHead.count(c_out, config.identity_hidden_dim, config.num_classes)
    structure = ClassifierHead.count(h_out * h_out, config.structure_hidden_dim, config.num_classes)
    if not config.structure_branch:
        structure = 0
    return ParamCountReport(backbone + identity, structure)


def resnet50_reference(num_classes: int = 751, input_size=(256, 128)) -> ModelConfig:
    return ModelConfig(num_classes=num_classes, backbone=ResNetSpec.resnet(50), input_size=input_size)


class TrainOutput(NamedTuple):
    loss: Tensor
    id_loss: Tensor
    stru_loss: Tensor | None
    id_logits: Tensor
    stru_logits: Tensor | None


class RLDNet(Module):
    """Backbone feeding a GAP identity branch and an HP/Gram structure branch.

    Each component draws its initial weights and dropout seed from its own
    child of ``SeedSequence(seed)``, so removing the structure branch leaves
    the rest of the network bit-for-bit unchanged.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        if isinstance(config.backbone, ResNetSpec):
            raise ValueError("ResNetSpec backbones are descriptive only; use a LayerSpec list to build a model")
        self.config = config
        self.dtype = np.dtype(dtype)
        s_backbone, s_identity, s_structure = np.random.SeedSequence(seed).spawn(3)
        rng = np.random.default_rng(s_backbone)
        self.backbone = self.add_child("backbone", Sequential([build_layer(s, rng, dtype) for s in config.backbone]))
        c_out, h_out, _ = config.feature_shape()
        self.h_out = h_out
        self.identity_head = self.add_child(
            "identity_head",
            ClassifierHead(c_out, config.identity_hidden_dim, config.num_classes,
                           np.random.default_rng(s_identity), config.dropout, dtype),
        )
        self.structure_head = None
        if config.structure_branch:
            self.structure_head = self.add_child(
                "structure_head",
                StructureHead(h_out, config.num_classes, np.random.default_rng(s_structure),
                              config.structure_hidden_dim, config.dropout, dtype),
            )

    def _input(self, images) -> Tensor:
        arr = images.data if isinstance(images, Tensor) else np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[1] != 3:
            raise ValueError(f"images must be (N, 3, H, W), got {arr.shape}")
        return images if isinstance(images, Tensor) and images.ndim == 4 else Tensor(arr.astype(self.dtype, copy=False))

    def features(self, images) -> Tensor:
        return self.backbone(self._input(images))

    def forward_train(self, images, labels) -> TrainOutput:
        """Compute ``L = L_id + lambda * L_stru`` with both branches on one backbone pass."""
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        x = self._input(images)
        if x.shape[0] != labels.shape[0]:
            raise ValueError(f"{x.shape[0]} images but {labels.shape[0]} labels")
        if labels.min() < 0 or labels.max() >= self.config.num_classes:
            raise ValueError(f"labels must lie in [0, {self.config.num_classes})")
        fmap = self.backbone(x)
        id_logits = self.identity_head(F.global_avg_pool(fmap))
        l_id = F.cross_entropy(id_logits, labels)
        if self.structure_head is None:
            return TrainOutput(l_id, l_id, None, id_logits, None)
        D = rld_matrix(fmap, normalize=self.config.normalize_columns).D
        stru_logits = self.structure_head(D)
        l_stru = structure_loss(stru_logits, labels)
        total = joint_loss(l_id, l_stru, self.config.loss_config)
        return TrainOutput(total, l_id, l_stru, id_logits, stru_logits)

    def _eval_map(self, images, fn, chunk: int = 256) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            arr = np.asarray(images.data if isinstance(images, Tensor) else images)
            single = arr.ndim == 3
            if single:
                arr = arr[None]
            outs = [fn(self.backbone(Tensor(arr[i:i + chunk].astype(self.dtype, copy=False)))) for i in range(0, len(arr), chunk)]
            out = np.concatenate(outs)
            return out[0] if single else out
        finally:
            self.train(was_training)

    def extract_feature(self, images) -> np.ndarray:
        """Eval-mode GAP feature of the backbone output, ``(N, C)`` (or ``(C,)`` for one image)."""
        return self._eval_map(images, lambda f: F.global_avg_pool(f).data)

    def feature_map(self, images) -> np.ndarray:
        return self._eval_map(images, lambda f: f.data)

    def param_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        targets: dict[str, np.ndarray] = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = [k for k in targets if k not in state]
        unexpected = [k for k in state if k not in targets]
        if strict and (missing or unexpected):
            raise ValueError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, arr in state.items():
            if name not in targets:
                continue
            dst = targets[name]
            if dst.shape != arr.shape:
                raise ValueError(f"dimension mismatch for {name}: checkpoint {arr.shape}, model {dst.shape}")
            dst[...] = arr

    def save(self, path) -> None:
        checkpoint.save(path, self.state_dict())

    @classmethod
    def load(cls, path, config: ModelConfig, strict: bool = True) -> "RLDNet":
        state = checkpoint.load(path)
        model = cls(config, seed=0)
        if not config.structure_branch:
            state = {k: v for k, v in state.items() if not k.startswith("structure_head.")}
        model.load_state_dict(state, strict=strict)
        return model


@dataclass
class EpochLog:
    epoch: int
    mean_id_loss: float
    mean_stru_loss: float | None
    lr: float

    def csv_row(self) -> str:
        stru = "" if self.mean_stru_loss is None else repr(self.mean_stru_loss)
        return f"{self.epoch},{self.mean_id_loss!r},{stru},{self.lr!r}"


LOSS_LOG_HEADER = "epoch,mean_id_loss,mean_stru_loss,lr"


def format_loss_log(rows: Sequence[EpochLog]) -> str:
    return "\n".join([LOSS_LOG_HEADER] + [r.csv_row() for r in rows]) + "\n"


def read_loss_log(path) -> list[EpochLog]:
    lines = Path(path).read_text().strip().splitlines()
    if lines[0] != LOSS_LOG_HEADER:
        raise ValueError(f"{path}: unexpected loss log header {lines[0]!r}")
    out = []
    for line in lines[1:]:
        e, i, s, lr = line.split(",")
        out.append(EpochLog(int(e), float(i), float(s) if s else None, float(lr)))
    return out


@dataclass
class TrainResult:
    model: RLDNet
    log: list[EpochLog]
    augment: AugmentConfig
    label_map: dict[int, int]


def train(config: ModelConfig, tcfg: TrainConfig, dataset: DatasetIndex,
          augment: AugmentConfig | None = None, checkpoint_path=None, log_path=None,
          dtype=np.float32) -> TrainResult:
    """Epoch loop with step-decayed momentum SGD.

    Uses the ``train`` split of ``dataset`` (or every sample if no split is
    marked train). Raises ``FloatingPointError`` naming the epoch and step if
    any loss becomes non-finite.
    """
    ds = dataset.subset("train") if (dataset.splits == "train").any() else dataset
    if len(ds) == 0:
        raise ValueError("training set is empty")
    uniq = np.unique(ds.pids)
    if len(uniq) != config.num_classes:
        raise ValueError(f"config has {config.num_classes} classes but training set has {len(uniq)} identities")
    label_map = {int(p): i for i, p in enumerate(uniq)}
    labels = np.array([label_map[int(p)] for p in ds.pids])

    h, w = config.input_size
    raw = ds.load_images((h, w)).astype(np.float32)
    if augment is None:
        augment = AugmentConfig().with_stats(raw)
    big = resize_bilinear(raw, *augment.resized(h, w))

    model = RLDNet(config, seed=tcfg.seed, dtype=dtype)
    model.train()
    data_rng = np.random.default_rng(np.random.SeedSequence(tcfg.seed).spawn(4)[3])
    params = model.param_dict()
    lr_mult = {}
    for prefix, mult in tcfg.lr_mult:
        for name in params:
            if name.startswith(prefix):
                lr_mult[name] = mult
    state = SgdState(tcfg.lr, tcfg.momentum)

    n = len(ds)
    bs = min(tcfg.batch_size, n)
    n_batches = max(1, n // bs)
    log: list[EpochLog] = []
    for epoch in range(1, tcfg.epochs + 1):
        state.learning_rate = tcfg.lr_at(epoch)
        order = data_rng.permutation(n)
        id_sum, stru_sum = 0.0, 0.0
        for step in range(n_batches):
            idx = order[step * bs:(step + 1) * bs]
            x = augment_batch(big[idx], "train", data_rng, augment, pre_resized=True, out_size=(h, w))
            try:
                out = model.forward_train(x, labels[idx])
            except FloatingPointError as exc:
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {step + 1}: {exc}") from exc
            vals = [float(out.loss.data), float(out.id_loss.data)]
            if out.stru_loss is not None:
                vals.append(float(out.stru_loss.data))
            if not all(math.isfinite(v) for v in vals):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {step + 1}: {vals}")
            out.loss.backward()
            sgd_step(params, state, lr_mult)
            id_sum += vals[1]
            if out.stru_loss is not None:
                stru_sum += vals[2]
        row = EpochLog(epoch, id_sum / n_batches, stru_sum / n_batches if model.structure_head else None,
                       state.learning_rate)
        logger.info("epoch %d: L_id %.4f L_stru %s lr %g", epoch, row.mean_id_loss, row.mean_stru_loss, row.lr)
        log.append(row)

    if checkpoint_path is not None:
        model.save(checkpoint_path)
    if log_path is not None:
        checkpoint.atomic_write_text(log_path, format_loss_log(log))
    return TrainResult(model, log, augment, label_map)

from enum import Enum
from pathlib import Path
from typing import Optional, List

import numpy as np
from pydantic import ConfigDict, Field
from pydantic.dataclasses import dataclass


STRICT = ConfigDict(extra="forbid", populate_by_name=True)
ARRAYS = ConfigDict(arbitrary_types_allowed=True)


class RegularizerMode(str, Enum):
    EEM = "eem"
    SEM = "sem"


class Ablation(str, Enum):
    FG_ONLY = "fg_only"
    FG_BG = "fg_bg"
    FG_BG_ASC = "fg_bg_asc"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    BACKGROUND = "background"


class Texture(str, Enum):
    STRIPES = "stripes"
    DOTS = "dots"
    CHECKER = "checker"


# === Configuration ===

@dataclass(config=STRICT)
class PoolConfig:
    kmax: float = Field(default=0.3, gt=0, le=1)
    kmin: float = Field(default=0.0, ge=0, lt=1)
    alpha: float = Field(default=0.6, ge=0)
    modalities: int = Field(default=5, ge=1)

    def __post_init__(self):
        if self.kmax + self.kmin > 1.0 + 1e-12:
            raise ValueError(f"PoolConfig needs kmax + kmin <= 1, got kmax={self.kmax}, kmin={self.kmin}")


@dataclass(config=STRICT)
class LossConfig:
    lam: float = Field(default=1e-7, ge=0, alias="lambda")
    mode: RegularizerMode = RegularizerMode.SEM
    use_barrier: bool = True
    t_init: float = Field(default=5.0, gt=0)
    t_factor: float = Field(default=1.01, ge=1)
    t_max: float = Field(default=10.0, gt=0)
    omega: float = Field(default=5.0, gt=0)
    sigma: float = Field(default=0.15, gt=0, lt=1)
    size_eps: float = Field(default=1e-6, gt=0, lt=0.5)

    def __post_init__(self):
        if self.t_init > self.t_max:
            raise ValueError(f"LossConfig needs t_init <= t_max, got t_init={self.t_init}, t_max={self.t_max}")


@dataclass(config=STRICT)
class ModelConfig:
    in_channels: int = Field(default=3, ge=1)
    num_classes: int = Field(default=2, ge=2)
    widths: List[int] = Field(default_factory=lambda: [16, 32, 32])

    def __post_init__(self):
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"ModelConfig.widths must be a non-empty list of positive ints, got {self.widths}")

    @property
    def stride(self) -> int:
        return 2 ** len(self.widths)


@dataclass(config=STRICT)
class LrDecay:
    at_epoch: int = Field(ge=0)
    factor: float = Field(gt=0)


@dataclass(config=STRICT)
class TrainConfig:
    epochs: int = Field(default=30, ge=0)
    batch_size: int = Field(default=4, ge=1)
    lr: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=1e-4, ge=0)
    seed: int = 0
    lr_decay: List[LrDecay] = Field(default_factory=lambda: [LrDecay(at_epoch=20, factor=0.1)])
    loss: LossConfig = Field(default_factory=LossConfig)
    pool: PoolConfig = Field(default_factory=PoolConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for decay in self.lr_decay:
            if epoch >= decay.at_epoch:
                lr *= decay.factor
        return lr


@dataclass(config=STRICT)
class GenConfig:
    n_train: int = Field(default=200, ge=0)
    n_val: int = Field(default=50, ge=0)
    n_test: int = Field(default=100, ge=0)
    n_background_only: int = Field(default=100, ge=0)
    num_classes: int = Field(default=2, ge=2, le=3)
    channels: int = Field(default=3, ge=1)
    height: int = Field(default=64, ge=8)
    width: int = Field(default=64, ge=8)
    blob_count: List[int] = Field(default_factory=lambda: [1, 3])
    fg_fraction: List[float] = Field(default_factory=lambda: [0.15, 0.4])
    fg_tolerance: float = Field(default=0.01, gt=0, le=0.05)
    base_color: List[float] = Field(default_factory=lambda: [0.78, 0.55, 0.68])
    background_std: float = Field(default=0.05, ge=0)
    background_scale: float = Field(default=4.0, gt=0)
    texture_amplitude: float = Field(default=0.15, gt=0, le=0.3)
    stripe_period: float = Field(default=6.0, gt=1)
    dot_period: int = Field(default=6, ge=3)
    dot_radius: float = Field(default=1.5, gt=0)
    noise_std: float = Field(default=0.02, ge=0)
    max_retries: int = Field(default=50, ge=1)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.fg_fraction
        if not (0.05 < lo <= hi < 0.6):
            raise ValueError(f"GenConfig.fg_fraction must satisfy 0.05 < lo <= hi < 0.6, got {self.fg_fraction}")
        kmin, kmax = self.blob_count
        if not (1 <= kmin <= kmax):
            raise ValueError(f"GenConfig.blob_count must satisfy 1 <= min <= max, got {self.blob_count}")
        if self.channels not in (1, 3):
            raise ValueError(f"GenConfig.channels must be 1 (PGM) or 3 (PPM), got {self.channels}")
        if len(self.base_color) != self.channels:
            raise ValueError(
                f"GenConfig.base_color needs one value per channel ({self.channels}), got {self.base_color}"
            )

    @property
    def textures(self) -> list[Texture]:
        return list(Texture)[: self.num_classes]

    def split_sizes(self) -> dict[Split, int]:
        """Number of images per split (labeled splits count every class)."""
        return {
            Split.TRAIN: self.n_train * self.num_classes,
            Split.VAL: self.n_val * self.num_classes,
            Split.TEST: self.n_test * self.num_classes,
            Split.BACKGROUND: self.n_background_only,
        }


@dataclass(config=STRICT)
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "runs/default"


@dataclass(config=STRICT)
class RunConfig:
    gen: GenConfig = Field(default_factory=GenConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    ablation: Ablation = Ablation.FG_BG_ASC

    @property
    def data_dir(self) -> Path:
        return Path(self.paths.data_dir)

    @property
    def out_dir(self) -> Path:
        return Path(self.paths.out_dir)


# === Records ===

@dataclass
class LossBreakdown:
    ce_fg: float
    reg_bg: float
    barrier: float
    ce_full: float
    total: float

    @property
    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite([self.ce_fg, self.reg_bg, self.barrier, self.ce_full, self.total])))


@dataclass
class StepRecord:
    step: int
    epoch: int
    t: float
    ce_fg: float
    reg_bg: float
    barrier: float
    ce_full: float
    total: float


@dataclass
class EpochRecord:
    epoch: int
    t: float
    lr: float
    ce_fg: float
    reg_bg: float
    barrier: float
    ce_full: float
    total: float
    train_error: float
    val_error: Optional[float] = None
    val_fg_fraction: Optional[float] = None


@dataclass
class SizeRecord:
    sample: str
    true_fraction: float
    pred_fraction: float


@dataclass
class MetricsReport:
    cl_error: Optional[float]
    f1_plus: float
    f1_minus: float
    confusion: List[List[int]]
    size_records: List[SizeRecord] = Field(default_factory=list)
    mean_abs_size_gap: float = 0.0
    mean_pred_fraction: float = 0.0
    n_samples: int = 0


@dataclass(config=ARRAYS)
class LabeledImage:
    name: str
    pixels: np.ndarray
    label: int
    gt_mask: np.ndarray
    split: Split

    @property
    def fg_fraction(self) -> float:
        return float(self.gt_mask.mean())


@dataclass(config=ARRAYS)
class Dataset:
    records: List[LabeledImage]

    def __len__(self) -> int:
        return len(self.records)

    def split(self, split: Split | str) -> list[LabeledImage]:
        split = Split(split)
        return [r for r in self.records if r.split is split]


@dataclass
class GradcheckItem:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

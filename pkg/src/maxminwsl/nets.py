"""
Localizer and classifier networks sharing one convolutional backbone.

Parameters live in a flat ``name -> array`` mapping. ``ModelParams.as_nodes`` wraps each
array once, so the localizer and the classifier reference the same backbone leaves and a
backward pass through both accumulates into a single gradient per parameter.
"""
import json
import math
from pathlib import Path
from typing import NamedTuple

import h5py
import numpy as np
import structlog
from pydantic.dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Node
from .build_config import config_to_dict
from .data_types import ARRAYS, ModelConfig, PoolConfig, TrainConfig
from .exceptions import ConfigError, DatasetError
from .masking import fuse_cams, upsample_bilinear

logger = structlog.get_logger(__name__)

CHECKPOINT_VERSION = 1
KERNEL = 3

BACKBONE = "backbone"
LOCALIZER = "localizer"
CLASSIFIER = "classifier"


@dataclass(config=ARRAYS)
class ModelParams:
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        self.arrays = {name: np.asarray(value, dtype=np.float64) for name, value in sorted(self.arrays.items())}
        bad = [name for name, value in self.arrays.items() if not np.all(np.isfinite(value))]
        if bad:
            raise ValueError(f"ModelParams contain non-finite values in {bad}")

    @property
    def backbone(self) -> dict[str, np.ndarray]:
        return self._block(BACKBONE)

    @property
    def localizer_head(self) -> dict[str, np.ndarray]:
        return self._block(LOCALIZER)

    @property
    def classifier_head(self) -> dict[str, np.ndarray]:
        return self._block(CLASSIFIER)

    def _block(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if k.startswith(prefix + ".")}

    def as_nodes(self) -> dict[str, Node]:
        return {name: Node(value, requires_grad=True) for name, value in self.arrays.items()}

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: value.shape for name, value in self.arrays.items()}

    def copy(self) -> "ModelParams":
        return ModelParams({name: value.copy() for name, value in self.arrays.items()})


class CamStack(NamedTuple):
    """Class activation maps, c * m per image, at 1/stride of the input resolution."""
    maps: np.ndarray
    num_classes: int
    modalities: int
    stride: int

    @property
    def class_maps(self) -> np.ndarray:
        n, _, h, w = self.maps.shape
        return self.maps.reshape(n, self.num_classes, self.modalities, h, w).mean(axis=2)


class LocalizerOutput(NamedTuple):
    cams: Node
    raw_mask: Node
    posterior: Node

    def cam_stack(self, num_classes: int, modalities: int, stride: int) -> CamStack:
        return CamStack(self.cams.value, num_classes, modalities, stride)


def expected_shapes(model: ModelConfig, pool: PoolConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    fan_in = model.in_channels
    for i, width in enumerate(model.widths, start=1):
        shapes[f"{BACKBONE}.conv{i}.weight"] = (width, fan_in, KERNEL, KERNEL)
        shapes[f"{BACKBONE}.conv{i}.bias"] = (width,)
        fan_in = width
    shapes[f"{LOCALIZER}.head.weight"] = (model.num_classes * pool.modalities, fan_in, 1, 1)
    shapes[f"{LOCALIZER}.head.bias"] = (model.num_classes * pool.modalities,)
    shapes[f"{CLASSIFIER}.head.weight"] = (model.num_classes, fan_in, 1, 1)
    shapes[f"{CLASSIFIER}.head.bias"] = (model.num_classes,)
    return shapes


def init_params(model: ModelConfig, pool: PoolConfig, seed: int) -> ModelParams:
    """Variance-scaling (He) normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in sorted(expected_shapes(model, pool).items()):
        if name.endswith(".bias"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            arrays[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    return ModelParams(arrays)


def selection_count(fraction: float, n: int) -> int:
    # rounding first keeps 0.3 * 10 from selecting 4
    return math.ceil(round(fraction * n, 9))


def backbone_forward(x: Node, nodes: dict[str, Node], model: ModelConfig) -> Node:
    h, w = x.shape[-2:]
    if h % model.stride or w % model.stride:
        raise ValueError(f"Input {h}x{w} is not divisible by the backbone stride {model.stride}")
    for i in range(1, len(model.widths) + 1):
        x = ad.conv2d(x, nodes[f"{BACKBONE}.conv{i}.weight"], nodes[f"{BACKBONE}.conv{i}.bias"])
        x = ad.avg_pool2(ad.relu(x))
    return x


def class_maps(cams: Node, modalities: int) -> Node:
    """Average each class's modality maps: (N, c*m, h, w) -> (N, c, h, w)."""
    n, cm, h, w = cams.shape
    if cm % modalities:
        raise ValueError(f"{cm} maps cannot be split into groups of {modalities} modalities")
    if modalities == 1:
        return cams
    grouped = ad.reshape(cams, (n, cm // modalities, modalities, h, w))
    return ad.reduce_mean(grouped, axis=2)


def wildcat_pool(cams: Node, cfg: PoolConfig, modalities: int | None = None) -> Node:
    """
    Class scores from spatial maps: (N, c*m, h, w) -> (N, c).

    score = mean of the top ceil(kmax*hw) values + alpha * mean of the bottom ceil(kmin*hw)
    values of each class map, the second term only when kmin > 0.
    """
    modalities = cfg.modalities if modalities is None else modalities
    per_class = class_maps(cams, modalities)
    n, c, h, w = per_class.shape
    flat = ad.reshape(per_class, (n, c, h * w))
    kmax = selection_count(cfg.kmax, h * w)
    if kmax < 1:
        raise ConfigError(f"kmax={cfg.kmax} selects no activation on a {h}x{w} map")
    scores = ad.topk_mean(flat, kmax, largest=True)
    if cfg.kmin > 0:
        kmin = selection_count(cfg.kmin, h * w)
        scores = scores + ad.mul(ad.topk_mean(flat, kmin, largest=False), cfg.alpha)
    return scores


def localizer_forward(x: Node, nodes: dict[str, Node], cfg: TrainConfig) -> LocalizerOutput:
    features = backbone_forward(x, nodes, cfg.model)
    cams = ad.conv2d(features, nodes[f"{LOCALIZER}.head.weight"], nodes[f"{LOCALIZER}.head.bias"])
    posterior = ad.softmax(wildcat_pool(cams, cfg.pool))
    fused = fuse_cams(class_maps(cams, cfg.pool.modalities), posterior)
    raw_mask = upsample_bilinear(fused, *x.shape[-2:])
    return LocalizerOutput(cams, raw_mask, posterior)


def classifier_forward(x: Node, nodes: dict[str, Node], cfg: TrainConfig) -> Node:
    features = backbone_forward(x, nodes, cfg.model)
    maps = ad.conv2d(features, nodes[f"{CLASSIFIER}.head.weight"], nodes[f"{CLASSIFIER}.head.bias"])
    return ad.softmax(wildcat_pool(maps, cfg.pool, modalities=1))


# === Checkpoints ===

def save_checkpoint(params: ModelParams, path: Path, epoch: int, cfg: TrainConfig | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with h5py.File(path, "w") as f:
        f.attrs["format_version"] = CHECKPOINT_VERSION
        f.attrs["epoch"] = epoch
        if cfg is not None:
            f.attrs["config"] = json.dumps(config_to_dict(cfg), sort_keys=True)
        for name, value in params.arrays.items():
            f.create_dataset(name, data=value, track_times=False)
    logger.debug("Checkpoint written", path=str(path), epoch=epoch)
    return path


def load_checkpoint(path: Path, model: ModelConfig, pool: PoolConfig) -> tuple[ModelParams, int]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"Checkpoint {path} does not exist", record=str(path))
    expected = expected_shapes(model, pool)
    try:
        with h5py.File(path, "r") as f:
            version = int(f.attrs.get("format_version", -1))
            if version != CHECKPOINT_VERSION:
                raise DatasetError(f"Checkpoint {path} has format version {version}, expected {CHECKPOINT_VERSION}",
                                   record=str(path))
            epoch = int(f.attrs.get("epoch", -1))
            arrays = {name: f[name][()] for name in f.keys()}
    except DatasetError:
        raise
    except OSError as e:
        raise DatasetError(f"Checkpoint {path} could not be read: {e}", record=str(path)) from e
    if set(arrays) != set(expected):
        raise ConfigError(f"Checkpoint {path} parameters {sorted(arrays)} do not match the model configuration")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise ConfigError(f"Checkpoint {path}: {name} has shape {arrays[name].shape}, expected {shape}")
    return ModelParams(arrays), epoch

"""
Mask construction between the localizer and the classifier.

Every operation works on batched ``Node`` grids so gradients flow from the classifier
losses back into the localizer: masks are ``(N, 1, H, W)`` and images ``(N, C, H, W)``.
Plain arrays and ``SoftMask`` values are accepted and wrapped as constants.
"""
import numpy as np
import structlog
from pydantic.dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Node
from .data_types import ARRAYS
from .exceptions import ConfigError

logger = structlog.get_logger(__name__)

MASK_TOL = 1e-12


@dataclass(config=ARRAYS)
class SoftMask:
    """A single H x W mask with values in [0, 1]."""
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"SoftMask must be a 2-D grid, got shape {self.values.shape}")
        if np.any(self.values < -MASK_TOL) or np.any(self.values > 1.0 + MASK_TOL):
            raise ValueError("SoftMask values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def size(self) -> float:
        return float(self.values.sum())

    def complement(self) -> "SoftMask":
        return SoftMask(1.0 - self.values)

    def binarize(self, threshold: float = 0.5) -> np.ndarray:
        return self.values >= threshold

    def to_uint8(self) -> np.ndarray:
        return quantize(self.values)


def quantize(values: np.ndarray) -> np.ndarray:
    """8-bit export with round-half-up: floor(255 * v + 0.5)."""
    return np.floor(255.0 * np.clip(values, 0.0, 1.0) + 0.5).astype(np.uint8)


def _node(x) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, SoftMask):
        return ad.constant(x.values)
    return ad.constant(x)


def fuse_cams(cams, posterior) -> Node:
    """
    Posterior-weighted sum of per-class maps, min-max normalized per image.

    cams: (N, c, h, w) with one map per class; posterior: (N, c).
    """
    cams, posterior = _node(cams), _node(posterior)
    if cams.ndim != 4 or posterior.shape != cams.shape[:2]:
        raise ValueError(f"fuse_cams: cams {cams.shape} do not match posterior {posterior.shape}")
    fused = ad.minmax_normalize(ad.channel_weighted_sum(cams, posterior))
    flat = fused.value.reshape(fused.shape[0], -1)
    constant = int(np.sum(np.all(flat == 0.5, axis=1)))
    if constant:
        logger.warning("Constant fused CAM, using the 0.5 fallback", images=constant)
    return fused


def pseudo_binarize(raw, omega: float, sigma: float) -> Node:
    if omega <= 0:
        raise ConfigError(f"pseudo_binarize needs omega > 0, got {omega}")
    if not 0.0 < sigma < 1.0:
        raise ConfigError(f"pseudo_binarize needs sigma in (0, 1), got {sigma}")
    return ad.scaled_sigmoid(_node(raw), omega, sigma)


def complement(mask) -> Node:
    return 1.0 - _node(mask)


def apply_mask(image, mask) -> Node:
    """Channel-broadcast Hadamard product of (N, C, H, W) images with (N, 1, H, W) masks."""
    image, mask = _node(image), _node(mask)
    if image.ndim != 4 or mask.ndim != 4 or mask.shape[1] != 1:
        raise ValueError(f"apply_mask expects (N,C,H,W) and (N,1,H,W), got {image.shape} and {mask.shape}")
    if image.shape[0] != mask.shape[0] or image.shape[2:] != mask.shape[2:]:
        raise ValueError(f"apply_mask: image {image.shape} and mask {mask.shape} are not aligned")
    return ad.mul(image, mask)


def mask_size(mask) -> Node:
    """Sum of mask values; one size per sample for a batched mask."""
    mask = _node(mask)
    axis = None if mask.ndim == 2 else tuple(range(1, mask.ndim))
    return ad.reduce_sum(mask, axis)


def upsample_bilinear(raw, height: int, width: int) -> Node:
    return ad.upsample_bilinear(_node(raw), height, width)


def soft_masks(batch: Node | np.ndarray) -> list[SoftMask]:
    values = batch.value if isinstance(batch, Node) else np.asarray(batch)
    return [SoftMask(np.clip(m, 0.0, 1.0)) for m in values.reshape(-1, *values.shape[-2:])]

"""
Simplex arithmetic for the max-min uncertainty objective.

Everything here is a pure numpy function over the last axis, so a single posterior
(shape ``(c,)``) and a batch of posteriors (shape ``(..., c)``) go through the same code.
Logarithms are natural (nats); ``to_bits`` converts for display only.
"""
from typing import Sequence, Union

import numpy as np
from pydantic import ConfigDict
from pydantic.dataclasses import dataclass

from .data_types import RegularizerMode

PROB_FLOOR = 1e-12
SIMPLEX_TOL = 1e-9

ArrayLike = Union[np.ndarray, Sequence[float]]


@dataclass(config=ConfigDict(arbitrary_types_allowed=True))
class Posterior:
    """A point (or a batch of points along the leading axes) on the probability simplex."""
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim == 0 or self.probs.shape[-1] < 2:
            raise ValueError(f"Posterior needs at least 2 classes, got shape {self.probs.shape}")
        if np.any(self.probs < -SIMPLEX_TOL) or np.any(self.probs > 1 + SIMPLEX_TOL):
            raise ValueError("Posterior components must lie in [0, 1]")
        if np.any(np.abs(self.probs.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
            raise ValueError("Posterior components must sum to 1")

    @property
    def num_classes(self) -> int:
        return self.probs.shape[-1]

    @classmethod
    def uniform(cls, num_classes: int) -> "Posterior":
        return cls(np.full(num_classes, 1.0 / num_classes))

    @classmethod
    def one_hot(cls, label: int, num_classes: int) -> "Posterior":
        probs = np.zeros(num_classes)
        probs[label] = 1.0
        return cls(probs)


def _probs(p: Posterior | ArrayLike) -> np.ndarray:
    if isinstance(p, Posterior):
        return p.probs
    return Posterior(np.asarray(p, dtype=np.float64)).probs


def _log_clamped(p: np.ndarray) -> np.ndarray:
    return np.log(np.clip(p, PROB_FLOOR, 1.0))


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # 0 * log(0) := 0
    out = np.zeros(np.broadcast(x, y).shape)
    nz = np.broadcast_to(x, out.shape) > 0
    xb = np.broadcast_to(x, out.shape)
    yb = np.broadcast_to(y, out.shape)
    out[nz] = xb[nz] * np.log(np.clip(yb[nz], PROB_FLOOR, None))
    return out


def softmax(logits: ArrayLike) -> Posterior:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] < 2:
        raise ValueError(f"softmax needs at least 2 logits, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input contains non-finite values")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return Posterior(e / e.sum(axis=-1, keepdims=True))


def entropy(p: Posterior | ArrayLike) -> np.ndarray | float:
    probs = _probs(p)
    return _scalar(-_xlogy(probs, probs).sum(axis=-1))


def cross_entropy(p: Posterior | ArrayLike, p_hat: Posterior | ArrayLike) -> np.ndarray | float:
    """H(p, p_hat) = -p^T log p_hat, with p_hat clamped away from zero."""
    target, pred = _probs(p), _probs(p_hat)
    _check_same_classes(target, pred)
    return _scalar(-(target * _log_clamped(pred)).sum(axis=-1))


def kl_forward(p_hat: Posterior | ArrayLike, q: Posterior | ArrayLike) -> np.ndarray | float:
    """KL(p_hat || q)."""
    pred, ref = _probs(p_hat), _probs(q)
    _check_same_classes(pred, ref)
    return _scalar((_xlogy(pred, pred) - _xlogy(pred, ref)).sum(axis=-1))


def kl_reverse_vs_uniform(p_hat: Posterior | ArrayLike) -> np.ndarray | float:
    """H(q, p_hat) for uniform q; equals KL(q || p_hat) + log c."""
    pred = _probs(p_hat)
    return _scalar(-_log_clamped(pred).mean(axis=-1))


def regularizer(p_hat: Posterior | ArrayLike, mode: RegularizerMode | str) -> np.ndarray | float:
    mode = RegularizerMode(mode)
    if mode is RegularizerMode.EEM:
        return -entropy(p_hat)
    return kl_reverse_vs_uniform(p_hat)


def grad_neg_entropy_binary(p1: float | np.ndarray) -> float | np.ndarray:
    """d(-H(p))/dp1 for p = (p1, 1 - p1)."""
    p1 = _open_unit(p1)
    return _scalar(np.log(p1 / (1.0 - p1)))


def grad_uniform_ce_binary(p1: float | np.ndarray) -> float | np.ndarray:
    """d H(q, p)/dp1 for p = (p1, 1 - p1) and q uniform."""
    p1 = _open_unit(p1)
    return _scalar(-0.5 * (1.0 / p1 - 1.0 / (1.0 - p1)))


def to_bits(nats: float | np.ndarray) -> float | np.ndarray:
    return _scalar(np.asarray(nats, dtype=np.float64) / np.log(2.0))


def _open_unit(p1) -> np.ndarray:
    p1 = np.asarray(p1, dtype=np.float64)
    if np.any(p1 <= 0.0) or np.any(p1 >= 1.0):
        raise ValueError(f"p1 must lie strictly inside (0, 1), got {p1}")
    return p1


def _check_same_classes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"class count mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def _scalar(x: np.ndarray):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x

"""
Training objective: foreground cross-entropy, background uncertainty regularizer and the
log-barrier size penalty, plus the localizer's full-image cross-entropy.

The graph-level functions (``*_term`` and ``loss_terms``) take batched ``Node`` inputs and
average over the batch. ``barrier``, ``total_loss`` and ``localizer_loss`` evaluate the
same terms on plain values for a single sample.
"""
from typing import NamedTuple

import numpy as np
import structlog

from . import autodiff as ad
from . import prob_core
from .autodiff import Node
from .build_config import with_updates
from .data_types import Ablation, LossBreakdown, LossConfig, RegularizerMode
from .exceptions import ConfigError
from .prob_core import PROB_FLOOR

logger = structlog.get_logger(__name__)


class LossTerms(NamedTuple):
    ce_fg: Node
    reg_bg: Node
    barrier: Node
    ce_full: Node
    total: Node
    objective: Node

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(
            ce_fg=self.ce_fg.item(),
            reg_bg=self.reg_bg.item(),
            barrier=self.barrier.item(),
            ce_full=self.ce_full.item(),
            total=self.total.item(),
        )


def _log_probs(p_hat: Node) -> Node:
    return ad.log(ad.clip(p_hat, PROB_FLOOR, 1.0))


def cross_entropy_term(target: np.ndarray, p_hat: Node) -> Node:
    """Per-sample H(p, p_hat) for (N, c) targets."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != p_hat.shape:
        raise ValueError(f"cross_entropy_term: target {target.shape} vs posterior {p_hat.shape}")
    return -ad.reduce_sum(ad.mul(_log_probs(p_hat), target), axis=-1)


def regularizer_term(p_hat: Node, mode: RegularizerMode | str) -> Node:
    mode = RegularizerMode(mode)
    if mode is RegularizerMode.EEM:
        return ad.reduce_sum(ad.mul(p_hat, _log_probs(p_hat)), axis=-1)
    return -ad.reduce_mean(_log_probs(p_hat), axis=-1)


def barrier_term(s_plus: Node, s_minus: Node, t: float, n_pixels: int, eps: float = 1e-6) -> Node:
    if t <= 0:
        raise ConfigError(f"barrier needs t > 0, got {t}")
    n_pixels = float(n_pixels)
    log_plus = ad.log(ad.clip(s_plus / n_pixels, eps, 1.0))
    log_minus = ad.log(ad.clip(s_minus / n_pixels, eps, 1.0))
    return (log_plus + log_minus) * (-1.0 / t)


def loss_terms(
    target: np.ndarray,
    p_plus: Node,
    p_minus: Node,
    p_hat: Node,
    s_plus: Node,
    s_minus: Node,
    cfg: LossConfig,
    t: float,
    n_pixels: int,
) -> LossTerms:
    """
    Batch-mean loss terms.

    total = ce_fg + lam * reg_bg + barrier; the optimized scalar adds ce_full with weight 1.
    """
    ce_fg = ad.reduce_mean(cross_entropy_term(target, p_plus))
    reg_bg = ad.reduce_mean(regularizer_term(p_minus, cfg.mode))
    if cfg.use_barrier:
        barrier_value = ad.reduce_mean(barrier_term(s_plus, s_minus, t, n_pixels, cfg.size_eps))
    else:
        barrier_value = ad.constant(0.0)
    ce_full = ad.reduce_mean(cross_entropy_term(target, p_hat))
    total = ce_fg + reg_bg * cfg.lam + barrier_value
    return LossTerms(ce_fg, reg_bg, barrier_value, ce_full, total, total + ce_full)


def barrier(s_plus: float, s_minus: float, t: float, n_pixels: int, eps: float = 1e-6) -> float:
    """-(1/t) [log(s+/|Omega|) + log(s-/|Omega|)], sizes clamped to [eps*|Omega|, |Omega|]."""
    return barrier_term(ad.constant(s_plus), ad.constant(s_minus), t, n_pixels, eps).item()


def total_loss(
    p,
    p_plus,
    p_minus,
    s_plus: float,
    s_minus: float,
    cfg: LossConfig,
    t: float,
    n_pixels: int | None = None,
    p_hat=None,
) -> LossBreakdown:
    """
    Loss breakdown of one sample.

    ``n_pixels`` defaults to s+ + s-, which holds for a complementary mask pair. ``ce_full``
    is reported when the localizer posterior ``p_hat`` is given, and is 0 otherwise.
    """
    target = prob_core.Posterior(np.asarray(p, dtype=np.float64)).probs
    n_pixels = n_pixels if n_pixels is not None else s_plus + s_minus
    ce_fg = prob_core.cross_entropy(target, p_plus)
    reg_bg = prob_core.regularizer(p_minus, cfg.mode)
    barrier_value = barrier(s_plus, s_minus, t, n_pixels, cfg.size_eps) if cfg.use_barrier else 0.0
    ce_full = localizer_loss(target, p_hat) if p_hat is not None else 0.0
    return LossBreakdown(
        ce_fg=ce_fg,
        reg_bg=reg_bg,
        barrier=barrier_value,
        ce_full=ce_full,
        total=ce_fg + cfg.lam * reg_bg + barrier_value,
    )


def localizer_loss(p, p_hat) -> float:
    return prob_core.cross_entropy(p, p_hat)


def t_schedule(epoch: int, cfg: LossConfig) -> float:
    if epoch < 0:
        raise ValueError(f"t_schedule needs epoch >= 0, got {epoch}")
    return min(cfg.t_init * cfg.t_factor ** epoch, cfg.t_max)


def resolve_loss_config(cfg: LossConfig, ablation: Ablation | str) -> LossConfig:
    """Loss settings of an ablation arm: fg_only drops the regularizer and the barrier, fg_bg the barrier."""
    ablation = Ablation(ablation)
    if ablation is Ablation.FG_ONLY:
        return with_updates(cfg, **{"lambda": 0.0, "use_barrier": False})
    if ablation is Ablation.FG_BG:
        return with_updates(cfg, use_barrier=False)
    return cfg

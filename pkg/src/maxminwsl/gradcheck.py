"""
Finite-difference checks of every differentiable path: the binary closed-form gradients,
the individual graph operations, the loss terms and the full network on a 16x16 image.
"""
from typing import Callable

import numpy as np
import pandas as pd
import structlog

from . import autodiff as ad
from . import prob_core
from .autodiff import Node, finite_diff_check
from .data_types import GradcheckItem, LossConfig, ModelConfig, PoolConfig, RegularizerMode, TrainConfig
from .masking import fuse_cams, mask_size, pseudo_binarize, upsample_bilinear, complement
from .nets import init_params, wildcat_pool
from .objective import barrier_term, cross_entropy_term, regularizer_term
from .trainer import build_objective

logger = structlog.get_logger(__name__)

CLOSED_FORM_TOL = 1e-6
CLOSED_FORM_FLOOR = 1e-3
OP_TOL = 1e-5
OP_FLOOR = 1e-3
NETWORK_TOL = 1e-4
NETWORK_FLOOR = 1e-5
BINARY_GRID = np.round(np.arange(0.05, 0.951, 0.05), 2)


def closed_form_error(closed_form: Callable[[float], float], value: Callable[[np.ndarray], float],
                      h: float = 1e-6) -> float:
    """Max relative error of a binary closed-form gradient against central differences of `value`."""
    errors = []
    for p1 in BINARY_GRID:
        analytic = closed_form(p1)
        numeric = (value(np.array([p1 + h, 1 - p1 - h])) - value(np.array([p1 - h, 1 - p1 + h]))) / (2 * h)
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), CLOSED_FORM_FLOOR))
    return float(max(errors))


def _weighted_sum(node: Node, weights: np.ndarray) -> Node:
    return ad.reduce_sum(ad.mul(node, weights))


def e2e_config() -> TrainConfig:
    return TrainConfig(
        model=ModelConfig(in_channels=3, num_classes=2, widths=[4, 4, 4]),
        pool=PoolConfig(kmax=0.3, kmin=0.0, modalities=2),
        loss=LossConfig(),
    )


def run_suite(seed: int = 0) -> list[GradcheckItem]:
    rng = np.random.default_rng(seed)
    items: list[GradcheckItem] = []

    def check(name: str, error: float, tolerance: float) -> None:
        item = GradcheckItem(name=name, max_rel_error=error, tolerance=tolerance)
        logger.info("Gradient check", name=name, max_rel_error=error, tolerance=tolerance, passed=item.passed)
        items.append(item)

    check("neg_entropy_binary",
          closed_form_error(lambda p1: prob_core.grad_neg_entropy_binary(p1), lambda p: -prob_core.entropy(p)),
          CLOSED_FORM_TOL)
    check("uniform_ce_binary",
          closed_form_error(lambda p1: prob_core.grad_uniform_ce_binary(p1), prob_core.kl_reverse_vs_uniform),
          CLOSED_FORM_TOL)

    target = np.eye(3)[[1]]
    z = rng.normal(size=(1, 3))
    check("softmax_cross_entropy",
          finite_diff_check(lambda n: ad.reduce_sum(cross_entropy_term(target, ad.softmax(n))), z, h=1e-6,
                            floor=CLOSED_FORM_FLOOR),
          CLOSED_FORM_TOL)
    check("entropy_softmax",
          finite_diff_check(lambda n: -ad.reduce_sum(regularizer_term(ad.softmax(n), RegularizerMode.EEM)), z,
                            h=1e-5, floor=CLOSED_FORM_FLOOR),
          CLOSED_FORM_TOL)
    for mode in RegularizerMode:
        check(f"regularizer_{mode.value}",
              finite_diff_check(lambda n, mode=mode: ad.reduce_sum(regularizer_term(ad.softmax(n), mode)), z, h=1e-5,
                                floor=CLOSED_FORM_FLOOR),
              CLOSED_FORM_TOL)

    raw = rng.uniform(0.0, 1.0, size=(1, 1, 4, 4))
    check("sigmoid_mask_size",
          finite_diff_check(lambda n: ad.reduce_sum(mask_size(pseudo_binarize(n, 5.0, 0.15))), raw, h=1e-5,
                            floor=CLOSED_FORM_FLOOR),
          CLOSED_FORM_TOL)

    def sized_barrier(n: Node) -> Node:
        m_plus = pseudo_binarize(n, 5.0, 0.15)
        return ad.reduce_sum(barrier_term(mask_size(m_plus), mask_size(complement(m_plus)), 5.0, 16))

    check("barrier", finite_diff_check(sized_barrier, raw, h=1e-6, floor=CLOSED_FORM_FLOOR), CLOSED_FORM_TOL)

    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    r = rng.normal(size=(1, 3, 5, 5))
    check("conv2d_input",
          finite_diff_check(lambda n: _weighted_sum(ad.conv2d(n, ad.constant(w), ad.constant(b)), r), x, floor=OP_FLOOR),
          OP_TOL)
    check("conv2d_weight",
          finite_diff_check(lambda n: _weighted_sum(ad.conv2d(ad.constant(x), n, ad.constant(b)), r), w, floor=OP_FLOOR),
          OP_TOL)

    cams = rng.normal(size=(1, 2, 4, 4))
    posterior = np.array([[0.3, 0.7]])
    r_up = rng.normal(size=(1, 1, 8, 8))
    check("fuse_minmax_upsample",
          finite_diff_check(lambda n: _weighted_sum(upsample_bilinear(fuse_cams(n, posterior), 8, 8), r_up), cams,
                            floor=OP_FLOOR),
          OP_TOL)

    pool = PoolConfig(kmax=0.3, kmin=0.2, alpha=0.6, modalities=2)
    stack = rng.normal(size=(1, 4, 4, 4))
    r_pool = rng.normal(size=(1, 2))
    check("wildcat_pool", finite_diff_check(lambda n: _weighted_sum(wildcat_pool(n, pool), r_pool), stack, floor=OP_FLOOR),
          OP_TOL)

    cfg = e2e_config()
    params = init_params(cfg.model, cfg.pool, seed=seed)
    nodes = {name: ad.constant(value) for name, value in params.arrays.items()}
    image = rng.uniform(0.0, 1.0, size=(1, 3, 16, 16))
    check("end_to_end",
          finite_diff_check(lambda n: build_objective(n, [1], nodes, cfg, t=5.0).terms.objective, image,
                            h=1e-5, floor=NETWORK_FLOOR),
          NETWORK_TOL)
    return items


def summary_table(items: list[GradcheckItem]) -> pd.DataFrame:
    return pd.DataFrame(
        [{"item": i.name, "max_rel_error": i.max_rel_error, "tolerance": i.tolerance,
          "status": "pass" if i.passed else "FAIL"} for i in items]
    )

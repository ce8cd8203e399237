"""
End-to-end training and evaluation of the localizer/classifier pair.

One training step:
    1. forward the batch through the localizer -> CAMs, posterior, raw mask
    2. pseudo-binarize the raw mask into M+ and take M- = 1 - M+
    3. forward X * M+ and X * M- through the classifier
    4. total = CE(p, p+) + lambda * R(p-) + barrier(s+, s-), plus CE(p, p_hat) of the localizer
    5. one backward pass and one Nesterov-SGD update of every parameter
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import structlog
from pydantic.dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Node
from .data_types import (
    ARRAYS,
    Dataset,
    EpochRecord,
    LabeledImage,
    LossBreakdown,
    MetricsReport,
    Split,
    StepRecord,
    TrainConfig,
)
from .exceptions import DatasetError, NonFiniteLossError
from .masking import SoftMask, apply_mask, complement, mask_size, pseudo_binarize, soft_masks
from .metrics import build_report
from .nets import ModelParams, classifier_forward, init_params, localizer_forward, save_checkpoint
from .objective import LossTerms, loss_terms, t_schedule
from .utils import records_frame, worker_count, write_csv

logger = structlog.get_logger(__name__)

EVAL_SHARD = 8
BEST_POINTER = "best"


@dataclass(config=ARRAYS)
class OptimizerState:
    velocity: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls({name: np.zeros_like(value) for name, value in params.arrays.items()})


class Forward(NamedTuple):
    terms: LossTerms
    p_plus: Node
    m_plus: Node


class StepResult(NamedTuple):
    params: ModelParams
    opt_state: OptimizerState
    breakdown: LossBreakdown
    predicted: np.ndarray


class Prediction(NamedTuple):
    name: str
    label: int
    predicted: int
    posterior: np.ndarray
    mask: SoftMask


class EvalResult(NamedTuple):
    report: MetricsReport
    predictions: list[Prediction]


class FitResult(NamedTuple):
    params: ModelParams
    history: list[EpochRecord]
    steps: list[StepRecord]
    best_epoch: int | None
    best_params: ModelParams


def sgd_nesterov_update(
    param: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> tuple[np.ndarray, np.ndarray]:
    """
    g = grad + wd * param;  v = mu * v + g;  param = param - lr * (g + mu * v)
    """
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError(f"sgd_nesterov_update: shapes {param.shape}, {grad.shape}, {velocity.shape} differ")
    g = grad + weight_decay * param
    velocity = momentum * velocity + g
    return param - lr * (g + momentum * velocity), velocity


def one_hot(labels: Sequence[int], num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[np.asarray(labels, dtype=int)]


def build_objective(x: Node, labels: Sequence[int], nodes: dict[str, Node], cfg: TrainConfig, t: float) -> Forward:
    loc = localizer_forward(x, nodes, cfg)
    m_plus = pseudo_binarize(loc.raw_mask, cfg.loss.omega, cfg.loss.sigma)
    m_minus = complement(m_plus)
    p_plus = classifier_forward(apply_mask(x, m_plus), nodes, cfg)
    p_minus = classifier_forward(apply_mask(x, m_minus), nodes, cfg)
    n_pixels = x.shape[-2] * x.shape[-1]
    terms = loss_terms(
        one_hot(labels, cfg.model.num_classes),
        p_plus,
        p_minus,
        loc.posterior,
        mask_size(m_plus),
        mask_size(m_minus),
        cfg.loss,
        t,
        n_pixels,
    )
    return Forward(terms, p_plus, m_plus)


def train_step(
    batch: Sequence[LabeledImage],
    params: ModelParams,
    opt_state: OptimizerState,
    cfg: TrainConfig,
    t: float,
    lr: float | None = None,
    step: int = 0,
) -> StepResult:
    if not batch:
        raise ValueError("train_step needs a non-empty batch")
    pixels = np.stack([r.pixels for r in batch])
    labels = [r.label for r in batch]
    nodes = params.as_nodes()
    forward = build_objective(ad.constant(pixels), labels, nodes, cfg, t)
    breakdown = forward.terms.breakdown()
    if not breakdown.is_finite or not np.isfinite(forward.terms.objective.item()):
        logger.error("Non-finite loss", step=step, t=t, **asdict(breakdown))
        raise NonFiniteLossError(f"Non-finite loss at step {step}: {breakdown}", breakdown=breakdown, step=step)
    ad.backward(forward.terms.objective)

    lr = cfg.lr if lr is None else lr
    arrays, velocity = {}, {}
    for name, node in nodes.items():
        grad = node.grad if node.grad is not None else np.zeros_like(node.value)
        arrays[name], velocity[name] = sgd_nesterov_update(
            params.arrays[name], grad, opt_state.velocity[name], lr, cfg.momentum, cfg.weight_decay
        )
    predicted = forward.p_plus.value.argmax(axis=-1)
    return StepResult(ModelParams(arrays), OptimizerState(velocity), breakdown, predicted)


# === Evaluation ===

def predict(params: ModelParams, pixels: np.ndarray, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """
    Test-time pass: localizer -> M+ -> classifier on X * M+.

    Returns the p+ posteriors (N, c) and the soft foreground masks (N, H, W).
    """
    nodes = {name: ad.constant(value) for name, value in params.arrays.items()}
    x = ad.constant(pixels)
    loc = localizer_forward(x, nodes, cfg)
    m_plus = pseudo_binarize(loc.raw_mask, cfg.loss.omega, cfg.loss.sigma)
    p_plus = classifier_forward(apply_mask(x, m_plus), nodes, cfg)
    return p_plus.value, m_plus.value[:, 0]


def evaluate(
    params: ModelParams,
    images: Sequence[LabeledImage],
    cfg: TrainConfig,
    workers: int | None = None,
) -> EvalResult:
    """Shards images across threads; shards are fixed-size so results do not depend on `workers`."""
    if not images:
        raise ValueError("evaluate needs at least one image")
    shards = [images[i:i + EVAL_SHARD] for i in range(0, len(images), EVAL_SHARD)]
    with ThreadPoolExecutor(max_workers=workers or worker_count()) as executor:
        outputs = list(executor.map(lambda shard: predict(params, np.stack([r.pixels for r in shard]), cfg), shards))
    posteriors = np.concatenate([p for p, _ in outputs])
    masks = soft_masks(np.concatenate([m for _, m in outputs]))
    predicted = posteriors.argmax(axis=-1)

    report = build_report(
        pred_labels=predicted,
        true_labels=[r.label for r in images],
        pred_masks=masks,
        gt_masks=[r.gt_mask for r in images],
        names=[r.name for r in images],
        classified=[r.split is not Split.BACKGROUND for r in images],
    )
    predictions = [
        Prediction(r.name, int(r.label), int(pred), posterior, mask)
        for r, pred, posterior, mask in zip(images, predicted, posteriors, masks)
    ]
    return EvalResult(report, predictions)


# === Epoch loop ===

def _mean(values: list[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


def fit(dataset: Dataset, cfg: TrainConfig, out_dir: Path | None = None) -> FitResult:
    """
    Train for `cfg.epochs` epochs and keep the parameters with the lowest validation
    classification error (training error when there is no validation split).

    With `out_dir`, writes checkpoints/epoch_XXXX.h5, a checkpoints/best pointer,
    steps.csv and epochs.csv.
    """
    train = dataset.split(Split.TRAIN)
    if not train:
        raise ValueError("fit needs a non-empty training split")
    val = dataset.split(Split.VAL)
    if not val:
        logger.warning("No validation split, selecting the best epoch on training error")

    params = init_params(cfg.model, cfg.pool, seed=cfg.seed)
    opt_state = OptimizerState.zeros_like(params)
    best_params, best_epoch, best_error = params, None, float("inf")
    history: list[EpochRecord] = []
    steps: list[StepRecord] = []
    step = 0

    for epoch in range(cfg.epochs):
        t = t_schedule(epoch, cfg.loss)
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        epoch_steps: list[StepRecord] = []
        wrong = 0
        for start in range(0, len(train), cfg.batch_size):
            batch = [train[i] for i in order[start:start + cfg.batch_size]]
            params, opt_state, breakdown, predicted = train_step(batch, params, opt_state, cfg, t, lr=lr, step=step)
            wrong += int(np.count_nonzero(predicted != np.array([r.label for r in batch])))
            record = StepRecord(step=step, epoch=epoch, t=t, **asdict(breakdown))
            epoch_steps.append(record)
            logger.debug("Step finished", **asdict(record))
            step += 1
        steps.extend(epoch_steps)

        val_error, val_fg = None, None
        if val:
            report = evaluate(params, val, cfg).report
            val_error, val_fg = report.cl_error, report.mean_pred_fraction
        train_error = 100.0 * wrong / len(train)
        epoch_record = EpochRecord(
            epoch=epoch,
            t=t,
            lr=lr,
            ce_fg=_mean([s.ce_fg for s in epoch_steps]),
            reg_bg=_mean([s.reg_bg for s in epoch_steps]),
            barrier=_mean([s.barrier for s in epoch_steps]),
            ce_full=_mean([s.ce_full for s in epoch_steps]),
            total=_mean([s.total for s in epoch_steps]),
            train_error=train_error,
            val_error=val_error,
            val_fg_fraction=val_fg,
        )
        history.append(epoch_record)
        logger.info("Epoch finished", **asdict(epoch_record))

        selection_error = val_error if val_error is not None else train_error
        if selection_error < best_error:
            best_error, best_epoch, best_params = selection_error, epoch, params
        if out_dir is not None:
            _write_epoch(Path(out_dir), params, epoch, cfg, best_epoch, history, steps)

    if out_dir is not None and cfg.epochs == 0:
        _write_logs(Path(out_dir), history, steps)
    return FitResult(params, history, steps, best_epoch, best_params)


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:04d}.h5"


def _write_epoch(out_dir: Path, params: ModelParams, epoch: int, cfg: TrainConfig, best_epoch: int | None,
                 history: list[EpochRecord], steps: list[StepRecord]) -> None:
    checkpoints = out_dir / "checkpoints"
    save_checkpoint(params, checkpoints / checkpoint_name(epoch), epoch, cfg)
    if best_epoch is not None:
        (checkpoints / BEST_POINTER).write_text(checkpoint_name(best_epoch) + "\n")
    _write_logs(out_dir, history, steps)


def _write_logs(out_dir: Path, history: list[EpochRecord], steps: list[StepRecord]) -> None:
    write_csv(out_dir / "steps.csv", records_frame(steps, StepRecord))
    write_csv(out_dir / "epochs.csv", records_frame(history, EpochRecord))


def best_checkpoint(out_dir: Path) -> Path:
    pointer = Path(out_dir) / "checkpoints" / BEST_POINTER
    if not pointer.is_file():
        raise DatasetError(f"No best-checkpoint pointer at {pointer}", record=str(pointer))
    return pointer.parent / pointer.read_text().strip()

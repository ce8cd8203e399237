# Workflows behind the command line
# gen:       generate the synthetic splits and write them with a manifest
# train:     resolve the ablation arm, train, write checkpoints, logs and run info
# eval:      load a checkpoint, predict one split, write the report, CSVs and mask PGMs
# gradcheck: run the finite-difference suite and fail on any item over tolerance
# ablate:    train every ablation arm for each regularizer mode and seed, or sweep one key
from datetime import datetime, timezone
from pathlib import Path
import time
from typing import Any, Sequence

import numpy as np
import pandas as pd
import structlog

from . import synthdata
from .build_config import config_to_dict, flatten, merge, unflatten, validate, with_updates
from .data_types import Ablation, Dataset, GradcheckItem, RegularizerMode, RunConfig, Split, TrainConfig
from .exceptions import DatasetError, GradcheckFailure
from .gradcheck import run_suite, summary_table
from .masking import quantize
from .nets import load_checkpoint
from .objective import resolve_loss_config
from .trainer import EvalResult, FitResult, best_checkpoint, evaluate, fit
from .utils import files_sha256, records_frame, write_csv, write_image, write_json
from .validation import validate_run_config

logger = structlog.get_logger(__name__)


def resolved_train_config(run_config: RunConfig) -> TrainConfig:
    """Train configuration with the loss switched to the configured ablation arm."""
    loss = resolve_loss_config(run_config.train.loss, run_config.ablation)
    return with_updates(run_config.train, loss=config_to_dict(loss))


def with_overrides(run_config: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    return validate(RunConfig, merge(config_to_dict(run_config), unflatten(overrides)))


def cmd_gen(run_config: RunConfig) -> dict:
    validate_run_config(run_config)
    dataset = synthdata.generate(run_config.gen)
    manifest = synthdata.save(dataset, run_config.data_dir)
    summary = {
        "manifest": str(manifest),
        "images": len(dataset),
        "splits": {split.value: len(dataset.split(split)) for split in Split},
        "sha256": files_sha256([manifest, *synthdata.manifest_paths(manifest)]),
    }
    logger.info("Dataset written", **summary)
    return summary


def cmd_train(run_config: RunConfig) -> FitResult:
    validate_run_config(run_config)
    train_config = resolved_train_config(run_config)
    logger.info(
        "Resolved training configuration",
        ablation=run_config.ablation.value,
        mode=train_config.loss.mode.value,
        lam=train_config.loss.lam,
        use_barrier=train_config.loss.use_barrier,
    )
    dataset = synthdata.load(run_config.data_dir)
    out_dir = run_config.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "config.json", flatten(config_to_dict(run_config)))

    started = datetime.now(timezone.utc)
    clock = time.perf_counter()
    result = fit(dataset, train_config, out_dir=out_dir)
    write_json(out_dir / "run_info.json", {
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "seconds": round(time.perf_counter() - clock, 3),
        "best_epoch": result.best_epoch,
    })
    logger.info("Training finished", best_epoch=result.best_epoch, out_dir=str(out_dir))
    return result


def cmd_eval(run_config: RunConfig, checkpoint: Path | None = None, split: Split | str = Split.TEST) -> EvalResult:
    validate_run_config(run_config)
    split = Split(split)
    train_config = resolved_train_config(run_config)
    checkpoint = Path(checkpoint) if checkpoint is not None else best_checkpoint(run_config.out_dir)
    params, epoch = load_checkpoint(checkpoint, train_config.model, train_config.pool)
    images = synthdata.load(run_config.data_dir).split(split)
    if not images:
        raise DatasetError(f"Split '{split.value}' of {run_config.data_dir} is empty", record=split.value)

    result = evaluate(params, images, train_config)
    eval_dir = run_config.out_dir / f"eval_{split.value}"
    write_eval_outputs(eval_dir, result)
    logger.info("Evaluation finished", checkpoint=str(checkpoint), epoch=epoch, split=split.value,
                out_dir=str(eval_dir))
    return result


def write_eval_outputs(eval_dir: Path, result: EvalResult) -> None:
    report = config_to_dict(result.report)
    report.pop("size_records")
    write_json(eval_dir / "report.json", report)
    confusion = pd.DataFrame(result.report.confusion, index=["true_fg", "true_bg"], columns=["pred_fg", "pred_bg"])
    confusion.index.name = "truth"
    confusion.to_csv(eval_dir / "confusion.csv")
    write_csv(eval_dir / "sizes.csv", records_frame(result.report.size_records))
    posteriors = pd.DataFrame([
        {"sample": p.name, "label": p.label, "predicted": p.predicted,
         **{f"p_plus_{c}": float(v) for c, v in enumerate(p.posterior)}}
        for p in result.predictions
    ])
    write_csv(eval_dir / "posteriors.csv", posteriors)
    for p in result.predictions:
        write_image(eval_dir / "masks" / f"{p.name}.pgm", quantize(p.mask.values))


def cmd_gradcheck(seed: int = 0) -> list[GradcheckItem]:
    items = run_suite(seed)
    print(summary_table(items).to_string(index=False))
    failures = [item for item in items if not item.passed]
    if failures:
        raise GradcheckFailure(f"{len(failures)} gradient check(s) failed: {[f.name for f in failures]}",
                               failures=failures)
    return items


# === Ablations ===

def _load_or_generate(run_config: RunConfig) -> Dataset:
    if (run_config.data_dir / synthdata.MANIFEST).is_file():
        return synthdata.load(run_config.data_dir)
    cmd_gen(run_config)
    return synthdata.load(run_config.data_dir)


def _run_arm(dataset: Dataset, run_config: RunConfig) -> dict:
    train_config = resolved_train_config(run_config)
    result = fit(dataset, train_config)
    row = {
        "mode": train_config.loss.mode.value,
        "ablation": run_config.ablation.value,
        "seed": train_config.seed,
        "best_epoch": result.best_epoch,
    }
    test = dataset.split(Split.TEST)
    if test:
        report = evaluate(result.best_params, test, train_config).report
        row.update(cl_error=report.cl_error, f1_plus=report.f1_plus, f1_minus=report.f1_minus)
    background = dataset.split(Split.BACKGROUND)
    if background:
        row["background_fg_fraction"] = evaluate(result.best_params, background, train_config).report.mean_pred_fraction
    logger.info("Ablation arm finished", **row)
    return row


def cmd_ablate(
    run_config: RunConfig,
    seeds: Sequence[int] = (0, 1, 2),
    modes: Sequence[RegularizerMode] = tuple(RegularizerMode),
    sweep: tuple[str, list] | None = None,
) -> pd.DataFrame:
    """
    Without `sweep`: every ablation arm for every mode and seed, summarized in ablation.csv.
    With `sweep=(key, values)`: the full method with `key` set to each value, in sweep.csv.
    Wall-clock time, dataset generation included, goes to ablation_info.json.
    """
    validate_run_config(run_config)
    started = datetime.now(timezone.utc)
    clock = time.perf_counter()
    dataset = _load_or_generate(run_config)
    out_dir = run_config.out_dir
    rows = []
    if sweep is None:
        for mode in modes:
            for ablation in Ablation:
                for seed in seeds:
                    arm = with_overrides(run_config, {
                        "train.seed": seed, "train.loss.mode": RegularizerMode(mode).value, "ablation": ablation.value,
                    })
                    rows.append(_run_arm(dataset, arm))
        frame = pd.DataFrame(rows)
        write_csv(out_dir / "ablation.csv", frame)
        means = frame.drop(columns=["seed", "best_epoch"]).groupby(["mode", "ablation"], sort=False).mean()
        means.to_csv(out_dir / "ablation_summary.csv")
    else:
        key, values = sweep
        for value in values:
            for seed in seeds:
                arm = with_overrides(run_config, {key: value, "train.seed": seed, "ablation": Ablation.FG_BG_ASC.value})
                row = _run_arm(dataset, arm)
                rows.append({"key": key, "value": value, **row})
        frame = pd.DataFrame(rows)
        write_csv(out_dir / "sweep.csv", frame)

    seconds = round(time.perf_counter() - clock, 3)
    write_json(out_dir / "ablation_info.json", {
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "seconds": seconds,
        "runs": len(rows),
    })
    logger.info("Ablation finished", runs=len(rows), seconds=seconds, out_dir=str(out_dir))
    return frame


def table_means(frame: pd.DataFrame, column: str) -> dict[tuple[str, str], float]:
    """Mean of one metric per (mode, ablation) arm."""
    grouped = frame.groupby(["mode", "ablation"])[column].mean()
    return {idx: float(v) for idx, v in grouped.items() if np.isfinite(v)}

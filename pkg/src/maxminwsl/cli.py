import argparse
from pathlib import Path
import sys
from typing import Sequence

import structlog
import yaml
from pydantic import ValidationError

from .build_config import build_config, dump_config, parse_overrides
from .data_types import Ablation, RegularizerMode, Split
from .exceptions import ConfigError, GradcheckFailure, NonFiniteLossError
from .process import cmd_ablate, cmd_eval, cmd_gen, cmd_gradcheck, cmd_train
from .utils import configure_logging

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NON_FINITE = 4
EXIT_GRADCHECK = 5


def build_argparser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML/JSON file with a top-level runConfig element")
    common.add_argument("--seed", type=int, default=None, help="overrides train.seed and gen.seed")
    common.add_argument("--mode", choices=[m.value for m in RegularizerMode], default=None,
                        help="background regularizer (train.loss.mode)")
    common.add_argument("--ablation", choices=[a.value for a in Ablation], default=None)
    common.add_argument("--out", type=Path, default=None, help="output directory (paths.out_dir)")
    common.add_argument("--data", type=Path, default=None, help="dataset directory (paths.data_dir)")
    common.add_argument("--set", dest="assignments", action="append", default=[], metavar="KEY=VALUE",
                        help="override any dotted config key, e.g. train.loss.lambda=1.0e-6")
    common.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")
    common.add_argument("--log-level", choices=["debug", "info", "warning", "error"], default="info")
    common.add_argument("--json-logs", action="store_true")

    parser = argparse.ArgumentParser(prog="maxminwsl", description="Max-min uncertainty weakly-supervised segmentation")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("gen", parents=[common], help="generate the synthetic dataset")
    commands.add_parser("train", parents=[common], help="train the localizer and classifier")
    evaluate = commands.add_parser("eval", parents=[common], help="evaluate a checkpoint on one split")
    evaluate.add_argument("--checkpoint", type=Path, default=None, help="defaults to the run's best checkpoint")
    evaluate.add_argument("--split", choices=[s.value for s in Split], default=Split.TEST.value)
    commands.add_parser("gradcheck", parents=[common], help="run the finite-difference suite")
    ablate = commands.add_parser("ablate", parents=[common], help="train every ablation arm over several seeds")
    ablate.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    ablate.add_argument("--sweep", default=None, metavar="KEY=V1,V2,...",
                        help="repeat the full method over values of one dotted key")
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["train.seed"] = args.seed
        overrides["gen.seed"] = args.seed
    if args.mode is not None:
        overrides["train.loss.mode"] = args.mode
    if args.ablation is not None:
        overrides["ablation"] = args.ablation
    if args.out is not None:
        overrides["paths.out_dir"] = str(args.out)
    if args.data is not None:
        overrides["paths.data_dir"] = str(args.data)
    overrides.update(parse_overrides(args.assignments))
    return overrides


def parse_sweep(text: str) -> tuple[str, list]:
    key, sep, values = text.partition("=")
    if not sep or not key.strip() or not values.strip():
        raise ConfigError(f"--sweep `{text}` is not of the form key=v1,v2,...")
    return key.strip(), [yaml.safe_load(v) for v in values.split(",")]


def run(args: argparse.Namespace) -> int:
    run_config = build_config(args.config, overrides_from_args(args))
    if args.dump_config:
        print(dump_config(run_config))
        return EXIT_OK

    if args.command == "gen":
        summary = cmd_gen(run_config)
        print(f"{summary['images']} images written to {summary['manifest']} (sha256 {summary['sha256']})")
        for split, count in summary["splits"].items():
            print(f"  {split}: {count}")
    elif args.command == "train":
        result = cmd_train(run_config)
        print(f"best epoch: {result.best_epoch}, outputs in {run_config.out_dir}")
    elif args.command == "eval":
        report = cmd_eval(run_config, args.checkpoint, args.split).report
        print(f"cl_error={report.cl_error} f1_plus={report.f1_plus:.2f} f1_minus={report.f1_minus:.2f}")
    elif args.command == "gradcheck":
        cmd_gradcheck(run_config.train.seed)
    elif args.command == "ablate":
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        sweep = parse_sweep(args.sweep) if args.sweep else None
        frame = cmd_ablate(run_config, seeds=seeds, sweep=sweep)
        print(frame.to_string(index=False))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_argparser().parse_args(argv)
    configure_logging(args.log_level, args.json_logs)
    try:
        return run(args)
    except (ConfigError, ValidationError) as e:
        logger.error("Configuration error", error=str(e))
        return EXIT_CONFIG
    except NonFiniteLossError as e:
        logger.error("Training aborted", error=str(e), step=e.step)
        return EXIT_NON_FINITE
    except GradcheckFailure as e:
        logger.error("Gradient check failed", failures=[f.name for f in e.failures])
        return EXIT_GRADCHECK
    except OSError as e:
        logger.error("I/O error", error=str(e))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

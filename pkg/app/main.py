import argparse
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from app.api import data, evaluation, training
from app.dependencies import RunDirectory, configure_logging, load_run_config, parse_overrides, seed_everything
from app.errors import StyleHelperError
from app.schemas import RunConfig

# dedicated flags and the config keys they override; flags win over --set
FLAG_KEYS = {
    "seed": "seed",
    "sigma": "sigma",
    "sigma_c": "selection.sigma_c",
    "sigma_s": "selection.sigma_s",
    "lambda_sc": "reward.lambda_sc",
    "reward_sign": "reward.sign",
    "backbone": "backbone.kind",
}


def _common() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", help="flat key = value config file (default $STYLEHELPER_CONFIG)")
    parent.add_argument("--out", default="run", help="run directory (default ./run)")
    parent.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parent.add_argument("--seed", type=int)
    parent.add_argument("--sigma", type=float, help="paraphrase filter threshold")
    parent.add_argument("--sigma-c", type=float, help="pair selection content threshold")
    parent.add_argument("--sigma-s", type=float, help="pair selection style threshold")
    parent.add_argument("--lambda-sc", type=float, help="style reward weight")
    parent.add_argument("--reward-sign", choices=["self_critical", "paper", "literal"])
    parent.add_argument("--backbone", choices=["reference-tiny", "external"])
    parent.add_argument("--log-level", help="DEBUG, INFO, WARNING ... (default $STYLEHELPER_LOG_LEVEL or INFO)")
    parent.add_argument("--json-logs", action="store_true")
    parent.add_argument("--progress", action="store_true", help="show progress bars")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stylehelper",
        description="StyleHelper - unsupervised text style transfer: pre-training, back-translation, offline training",
    )
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    parent = _common()
    for module in (data, training, evaluation):
        module.register(subparsers, parent)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides: Dict[str, Any] = parse_overrides(args.overrides)
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return load_run_config(args.config, overrides)


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    if getattr(args, "handler", None) is None:
        parser.print_usage(sys.stderr)
        return 2

    try:
        configure_logging(args.log_level, json_logs=args.json_logs)
        config = resolve_config(args)
        run_dir = RunDirectory(Path(args.out)).prepare()
        run_dir.echo(config)
        seed_everything(config.seed)
        return args.handler(args, config, run_dir)
    except StyleHelperError as e:
        print(f"error: {e.detail}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(run())

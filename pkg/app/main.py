import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from app.commands.run import cmd_run
from app.commands.sweep import cmd_sweep, parse_range
from app.commands.verify import asymmetry_fault, cmd_verify
from app.config import DEFAULT_EXPERIMENT_FILE, LOG_LEVEL
from app.schemas.experiment import load_experiment

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oass-traffic",
        description="MPC traffic-signal experiments with an online active set QP solver",
    )
    parser.add_argument("--spec", type=str, default=None, help="experiment TOML file")
    parser.add_argument(
        "--strategy",
        choices=["cold", "oass", "ours"],
        action="append",
        default=None,
        help="controller variant (repeatable)",
    )
    parser.add_argument(
        "--scenario",
        choices=["constant", "random"],
        action="append",
        default=None,
        help="inflow scenario (repeatable)",
    )
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--n-itr", type=int, default=None, help="sample intervals per cycle")
    parser.add_argument("--sweep", type=str, default=None, metavar="LO:HI")
    parser.add_argument("--jobs", type=int, default=None, help="parallel runs")
    parser.add_argument("--out", type=str, default=None, help="output directory")
    parser.add_argument("--verify", action="store_true", default=None, help="run the oracle suite")
    # 検証スイートの失敗経路を確かめるためのフック
    parser.add_argument("--fault-asymmetry", action="store_true", help=argparse.SUPPRESS)
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """指定されたフラグだけを、設定ファイルと同じ階層の dict にする."""
    mapping = {
        "strategy": ("run", "strategies"),
        "scenario": ("scenario", "kinds"),
        "seed": ("run", "seed"),
        "n_itr": ("mpc", "n_itr"),
        "sweep": ("run", "sweep"),
        "jobs": ("run", "jobs"),
        "out": ("run", "out"),
        "verify": ("run", "verify"),
    }
    overrides: Dict[str, Dict[str, Any]] = {}
    for attr, (section, key) in mapping.items():
        value = getattr(args, attr)
        if value is not None:
            overrides.setdefault(section, {})[key] = value
    return overrides


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    args = build_parser().parse_args(argv)
    spec_path = args.spec if args.spec is not None else DEFAULT_EXPERIMENT_FILE

    try:
        spec = load_experiment(spec_path, **overrides_from_args(args))
    except FileNotFoundError as e:
        logger.error(f"{e}")
        return 1
    except ValidationError as e:
        logger.error(f"Invalid experiment spec {spec_path}: {e}")
        return 1

    if spec.run.verify or args.fault_asymmetry:
        return cmd_verify(
            fault=asymmetry_fault if args.fault_asymmetry else None, seed=spec.run.seed
        )
    if spec.run.sweep is not None:
        try:
            n_itr_range = parse_range(spec.run.sweep)
        except ValueError as e:
            logger.error(f"{e}")
            return 1
        return cmd_sweep(spec, n_itr_range)
    return cmd_run(spec)


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()

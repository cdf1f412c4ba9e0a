"""
Main entry point for the LangGraph Sensitivity Pipeline
Runs one experiment command: simulate, sens, variance-study, lambda-star, weak-sigma, mlmc or rr.
"""

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

import settings
from engines.integrate import EstimatorKind
from sensitivity_pipeline import SensitivityPipeline

ESTIMATOR_CHOICES = [k.value for k in EstimatorKind] + ["fd"]


def configure_logging(level: str = "INFO") -> None:
    """Install one stream handler with the engine-name-prefixed line format."""
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=settings.LOG_FORMAT,
                        force=True)


def _horizon(value: str):
    return value if value == "auto" else float(value)


def _add_global_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("global")
    group.add_argument("--seed", type=int, help="master seed")
    group.add_argument("--paths", type=int, help="number of paths (or samples per level)")
    group.add_argument("--out", dest="out_dir", help="output directory")
    group.add_argument("--config", dest="config_path", help="JSON config file")
    group.add_argument("--workers", type=int, help="worker processes")
    group.add_argument("--batch", dest="batch_size", type=int, help="paths per vectorised batch")
    group.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    group.add_argument("--csv", dest="write_csv", action=argparse.BooleanOptionalAction, default=None,
                       help="write the CSV table")


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model")
    group.add_argument("--model", choices=["lorenz", "ou"])
    group.add_argument("--theta", type=float)
    group.add_argument("--sigma", type=float)
    group.add_argument("--x0", type=float, nargs="+")
    group.add_argument("--kappa", type=float)
    group.add_argument("--mu", type=float)
    group.add_argument("--observable-index", dest="observable_index", type=int)
    group.add_argument("--T", dest="T", type=_horizon, help="horizon, or 'auto'")
    group.add_argument("--step-mode", dest="step_mode", choices=["uniform", "adaptive"])
    group.add_argument("--h", type=float, help="uniform step")
    group.add_argument("--delta", type=float, help="adaptive step scale")
    group.add_argument("--estimator", choices=ESTIMATOR_CHOICES)
    group.add_argument("--spring", type=float)
    group.add_argument("--allow-blowups", dest="allow_blowups", action=argparse.BooleanOptionalAction,
                       default=None)
    group.add_argument("--clamp", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdesens", description="Sensitivity analysis for chaotic SDEs")
    commands = parser.add_subparsers(dest="command", required=True)

    subparsers = {}
    for command in settings.COMMANDS:
        sub = commands.add_parser(command)
        _add_global_flags(sub)
        _add_model_flags(sub)
        if command in settings.STUDIES:
            sub.add_argument("--study", choices=settings.STUDIES[command])
        subparsers[command] = sub

    sens = subparsers["sens"]
    sens.add_argument("--fd-epsilon", dest="fd_epsilon", type=float)
    sens.add_argument("--fd-target", dest="fd_target", choices=["theta", "sigma", "x0"])
    sens.add_argument("--direction", type=float, nargs="+")

    subparsers["variance-study"].add_argument("--T-grid", dest="T_grid", type=float, nargs="+")

    lam = subparsers["lambda-star"]
    lam.add_argument("--window", type=int)
    lam.add_argument("--spacing", type=float)
    lam.add_argument("--sigma-grid", dest="sigma_grid", type=float, nargs="+")

    weak = subparsers["weak-sigma"]
    weak.add_argument("--sigma-grid", dest="sigma_grid", type=float, nargs="+")
    weak.add_argument("--theta-grid", dest="theta_grid", type=float, nargs="+")
    weak.add_argument("--t-max", dest="t_max", type=float)

    mlmc = subparsers["mlmc"]
    mlmc.add_argument("--eps", type=float)
    mlmc.add_argument("--eps-grid", dest="eps_grid", type=float, nargs="+")
    mlmc.add_argument("--h0", type=float)
    mlmc.add_argument("--max-levels", dest="max_levels", type=int)
    mlmc.add_argument("--n-init", dest="n_init", type=int)
    mlmc.add_argument("--levels", type=int, nargs="+")
    mlmc.add_argument("--T-grid", dest="T_grid", type=float, nargs="+")

    rr = subparsers["rr"]
    rr.add_argument("--order", type=int)
    rr.add_argument("--t-max", dest="t_max", type=float)

    simulate = subparsers["simulate"]
    simulate.add_argument("--window", type=int)
    simulate.add_argument("--spacing", type=float)
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Config overrides from parsed arguments; flags left unset are omitted."""
    skip = {"command", "config_path", "log_level"}
    return {k: v for k, v in vars(args).items() if k not in skip and v is not None}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point - one experiment command per invocation."""
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level or settings.env_str(settings.ENV_LOG_LEVEL, "INFO"))

    pipeline = SensitivityPipeline()
    state = pipeline.run_pipeline(args.command, overrides_from_args(args), args.config_path)
    if state.get("pipeline_status") != "completed":
        print(f"ERROR: {state.get('error_message', 'pipeline did not complete')}", file=sys.stderr)
        return 1
    result = state["result"]
    if result.estimate is not None:
        stderr = f" +/- {result.stderr:.3g}" if result.stderr is not None else ""
        print(f"{args.command}: {result.estimate:.6g}{stderr}")
    for path in state.get("outputs", []):
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

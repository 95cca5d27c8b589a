"""Main entry point for the measure-mdp command-line tool."""
import argparse
import logging
import sys
from typing import List, Optional

from . import __version__
from .config.settings import ToolConfig
from .core.errors import LearningFailure, MeasureMdpError, ParseError, UsageError
from .core.json_encoder import dumps
from .handlers.commands import (
    EXIT_DOMAIN,
    EXIT_LEARNING,
    EXIT_USAGE,
    cmd_certify,
    cmd_learn,
    cmd_simulate,
    cmd_solve,
    cmd_validate,
)

logger = logging.getLogger(__name__)


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got '{text}'")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="measure-mdp", description="Measure-space MDP solving, dissipativity certification and learning"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log pipeline progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("problem")
        p.add_argument("--out", default=None, help="Output directory (default MEASURE_MDP_OUTPUT_DIR or .)")

    validate = sub.add_parser("validate", help="Check a problem file")
    common(validate)

    solve = sub.add_parser("solve", help="Optimal values, policy and steady state")
    common(solve)
    solve.add_argument("--functional", choices=["linear", "linear_plus_variance", "linear_plus_kl"])
    solve.add_argument("--beta", type=float)
    solve.add_argument("--rho0", help="Start measure for nonlinear functionals, e.g. 0.5,0.5")
    solve.add_argument("--seed", type=int, default=0)

    certify = sub.add_parser("certify", help="Synthesize and audit a storage functional")
    common(certify)
    certify.add_argument("--dissimilarity", choices=["tv", "kl", "w1"], default="tv")
    certify.add_argument("--metric", help="Ground metric JSON for w1")
    certify.add_argument("--samples", type=positive_int, default=200)
    certify.add_argument("--seed", type=int, default=0)
    certify.add_argument("--use-quadratic", action="store_true")
    certify.add_argument("--n-test", type=positive_int, default=20)
    certify.add_argument("--steps", type=positive_int, default=200)

    learn = sub.add_parser("learn", help="Fitted Q-iteration and theta lift")
    common(learn)
    learn.add_argument("learning_config")
    learn.add_argument("--seed", type=int)
    learn.add_argument("--dissimilarity", choices=["tv", "kl", "w1"], default="tv")
    learn.add_argument("--alpha0", type=float, default=1e-6)
    learn.add_argument("--horizon", type=positive_int, default=1)

    simulate = sub.add_parser("simulate", help="Closed-loop measure trajectories")
    common(simulate)
    simulate.add_argument("--rho0", action="append", help="Start measure; repeat for several")
    simulate.add_argument("--steps", type=positive_int, default=200)
    simulate.add_argument("--dissimilarity", choices=["tv", "kl", "w1"], default="tv")
    simulate.add_argument("--metric")
    simulate.add_argument("--certificate")
    simulate.add_argument("--rho-star")
    simulate.add_argument("--policy", help="Actions per state, e.g. 0,1,1")
    simulate.add_argument(
        "--eps", type=float, action="append", help="Radius for the D-stability audit; repeat for several"
    )
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the application."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        config = ToolConfig.from_env()
        config.validate()
    except ValueError as e:
        print(f"Configuration error: {e}")
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else config.logging_level,
        format="%(levelname)s %(name)s: %(message)s",
    )
    out_dir = getattr(args, "out", None) or config.output_dir

    try:
        if args.command == "validate":
            report, code = cmd_validate(args.problem, out_dir, argv)
        elif args.command == "solve":
            report, code = cmd_solve(
                args.problem, out_dir, config, argv, args.functional, args.beta, args.rho0, args.seed
            )
        elif args.command == "certify":
            report, code = cmd_certify(
                args.problem, out_dir, config, argv, args.dissimilarity, args.metric, args.samples,
                args.seed, args.use_quadratic, args.n_test, args.steps,
            )
        elif args.command == "learn":
            report, code = cmd_learn(
                args.problem, args.learning_config, out_dir, config, argv, args.seed,
                args.dissimilarity, args.alpha0, args.horizon,
            )
        else:
            report, code = cmd_simulate(
                args.problem, out_dir, config, argv, args.rho0, args.steps, args.dissimilarity,
                args.metric, args.certificate, args.rho_star, args.policy, args.eps,
            )
    except ParseError as e:
        logger.error(str(e))
        print(dumps({"error": str(e), "kind": e.kind, "line": e.line, "column": e.column}), end="")
        return EXIT_USAGE
    except UsageError as e:
        logger.error(str(e))
        print(dumps({"error": str(e), "kind": e.kind}), end="")
        return EXIT_USAGE
    except LearningFailure as e:
        logger.error(str(e))
        print(dumps({"error": str(e), "kind": e.kind}), end="")
        return EXIT_LEARNING
    except MeasureMdpError as e:
        logger.error(str(e))
        print(dumps({"error": str(e), "kind": e.kind}), end="")
        return EXIT_DOMAIN

    print(dumps(report), end="")
    if code != 0:
        logger.error(f"{args.command} finished with exit code {code}")
    return code


if __name__ == "__main__":
    sys.exit(main())

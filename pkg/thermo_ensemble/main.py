#
# main.py
#

import sys
import argparse
import logging
import time
from typing import Callable, Sequence

from .config import load_config
from .errors import ConfigError, ThermoEnsembleError
from .pipeline import COMMANDS, run_command

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def main(argv: Sequence[str] | None = None) -> int:
    """ Parses arguments and runs one pipeline command.

        Returns
        -------
        :class:`int`
            `0` on success, `2` when the configuration is invalid and `1`
            on any other failure.
    """
    args = _parser()(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)

    try:
        config = load_config(args.config).with_overrides(args.seed, args.out)
        time_start = time.time()
        status = run_command(config, args.command)
        time_end = time.time()
        logger.info("%s finished in %.1f seconds", args.command, time_end - time_start)
        return status
    except ConfigError as error:
        logger.error("%s", error)
        return 2
    except ThermoEnsembleError as error:
        logger.error("%s", error)
        return 1
    except KeyboardInterrupt:
        logger.error("%s interrupted by user.", args.command)
        return 1


def _parser() -> Callable[[Sequence[str] | None], argparse.Namespace]:
    """ Returns a helper parser for the `main` function.

        Returns
        -------
        Callable[[Sequence[:class:`str`] | `None`], :class:`argparse.Namespace`]
            A parser for the `main` function.
    """
    parser = argparse.ArgumentParser(
        description="Dynamic ensembles of building thermal models selected and weighted by hierarchical RL."
    )
    parser.add_argument(
        "command",
        choices = COMMANDS,
        help = "The pipeline step to run.",
    )
    parser.add_argument(
        "--config",
        default = None,
        help = "A TOML experiment configuration. (default: the built-in desk-scale experiment)",
    )
    parser.add_argument(
        "--seed",
        default = None,
        type = _parse_seed,
        help = "Overrides `experiment.seed`.",
    )
    parser.add_argument(
        "--out",
        default = None,
        help = "Overrides `experiment.output_dir`.",
    )
    parser.add_argument(
        "--log-level",
        default = "INFO",
        choices = ("DEBUG", "INFO", "WARNING", "ERROR"),
        help = "Verbosity of the log written to stderr. (default: INFO)",
    )
    return parser.parse_args


def _parse_seed(value: str) -> int:
    """ Helper function for validating the seed option.

        Raises
        ------
        ValueError
            `value` does not represent a non-negative integer.
    """
    if not value.isnumeric():
        raise ValueError("The seed must be a non-negative number.")
    return int(value)


if __name__ == "__main__":
    sys.exit(main())

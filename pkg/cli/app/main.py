# cli/app/main.py

import logging
import sys

import click

from config import get_settings
from services.errors import BoundViolation, CheckFailed, ConfigError, MaskDiffError

from .check_commands import COMMANDS as CHECK_COMMANDS
from .commands import COMMANDS as RUN_COMMANDS

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CHECK_FAILED = 2


@click.group(help="Masked discrete diffusion: corpora, training, evaluation, sampling and oracle checks.")
@click.version_option("1.0.0", prog_name="maskdiff")
def cli():
    logging.basicConfig(level=get_settings().LOG_LEVEL.upper(),
                        format="%(asctime)s %(levelname)s %(name)s %(message)s")


# Register commands
for command in RUN_COMMANDS + CHECK_COMMANDS:
    cli.add_command(command)


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="maskdiff", standalone_mode=False)
    except (CheckFailed, BoundViolation) as e:
        logger.error(f"[CLI] check failed: {e}")
        return EXIT_CHECK_FAILED
    except click.exceptions.Abort:
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except ConfigError as e:
        logger.error(f"[CLI] config error: {e}")
        return EXIT_USAGE
    except MaskDiffError as e:
        logger.error(f"[CLI] {type(e).__name__}: {e}")
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

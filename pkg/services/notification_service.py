# services/notification_service.py

import logging

logger = logging.getLogger(__name__)

_LEVELS = {"info": logging.INFO, "warning": logging.WARNING, "error": logging.ERROR}


def notify(level: str, title: str, message: str):
    """
    Operator-facing notice, routed to the log.
    `level` can be "info", "warning", "error"; anything else logs at info.
    """
    logger.log(_LEVELS.get(level, logging.INFO), f"[Notice] {title}: {message}")


def notify_check_failures(command: str, failures: list[str]):
    """One warning naming every property an asserting command found violated."""
    if not failures:
        return
    noun = "check" if len(failures) == 1 else "checks"
    notify("warning", f"{command}: {len(failures)} {noun} failed", ", ".join(sorted(failures)))


def notify_critical_error(exception: Exception, context: dict = None):
    """Log an aborting error with its context before it propagates."""
    detail = f"{type(exception).__name__}: {exception}"
    if context:
        detail += " | " + " ".join(f"{k}={v}" for k, v in sorted(context.items()))
    notify("error", "run aborted", detail)

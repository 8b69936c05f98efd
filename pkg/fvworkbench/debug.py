"""Logging setup for fvworkbench and the switch for debug output.

DEBUG records are muted unless debugging is enabled with `_set_debug(True)`,
the hidden `--debug` CLI flag, or the FVWORKBENCH_DEBUG environment variable.
"""

import logging
import os
import sys

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(filename)s - %(lineno)d - %(message)s"

_DEBUG = bool(os.environ.get("FVWORKBENCH_DEBUG"))

logging.basicConfig(level=logging.DEBUG, format=LOG_FORMAT)

if not _DEBUG:
    logging.disable(logging.DEBUG)

# transformer_lens and transformers are chatty at INFO when loading checkpoints
for _noisy in ("transformer_lens", "transformers", "datasets", "httpx", "openai"):
    logging.getLogger(_noisy).setLevel(logging.WARNING)


def _set_debug(debug: bool):
    """Enable or disable debug logging"""
    global _DEBUG
    _DEBUG = debug
    if debug:
        logging.disable(logging.NOTSET)
    else:
        logging.disable(logging.DEBUG)


def _debug() -> bool:
    """Return True if debug logging is enabled"""
    return _DEBUG


def progress_disabled() -> bool:
    """tqdm progress bars are shown only when stderr is a terminal"""
    return not sys.stderr.isatty()

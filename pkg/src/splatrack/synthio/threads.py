"""Worker-count cap taken from the ``SPLATRACK_THREADS`` environment variable."""
import logging
import os

log = logging.getLogger(__name__)

ENV_VAR = "SPLATRACK_THREADS"


def worker_count() -> int:
    """Positive worker cap; defaults to the CPU count when unset or invalid."""
    cpus = os.cpu_count() or 1
    raw = os.environ.get(ENV_VAR, "").strip()
    if not raw:
        return cpus
    try:
        value = int(raw)
    except ValueError:
        value = 0
    if value < 1:
        log.warning("ignoring %s=%r; expected a positive integer", ENV_VAR, raw)
        return cpus
    return value


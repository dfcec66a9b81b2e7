"""
Telemetry decorator for CLI stages
"""

import functools
import logging
import time
from typing import Any, Callable, Sequence

from .telemetry import record_stage

logger = logging.getLogger("spacetime-collapse.telemetry")


def _run_options(args: tuple, kwargs: dict, options: Sequence[str]) -> dict[str, Any]:
    """Named options of the command's argparse namespace that were actually given"""
    namespace = args[0] if args else kwargs.get("args")
    if namespace is None:
        return {}
    return {name: getattr(namespace, name) for name in options if getattr(namespace, name, None) is not None}


def _failure_context(error: Exception) -> dict[str, Any]:
    context: dict[str, Any] = {"error_type": type(error).__name__}
    # step-control and lattice failures say where the trajectory stopped
    for name in ("trajectory", "s", "ds", "suggested_ds", "path", "line"):
        value = getattr(error, name, None)
        if value is not None:
            context[name] = value
    return context


def timed_stage(stage: str, options: Sequence[str] = ()):
    """
    Record duration, success and run metadata of the wrapped CLI command.

    `options` names attributes of the command's argparse namespace (config,
    seed, workers, ...) to store with the event. The command's exit code is
    added on return; on failure the exception type and, when the exception
    carries them, the trajectory index and s at which the run stopped.
    """
    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(*args, **kwargs) -> Any:
            start_time = time.time()
            success = False
            error = None
            metadata = _run_options(args, kwargs, options)

            try:
                result = func(*args, **kwargs)
                success = True
                if isinstance(result, int):
                    metadata["exit_code"] = result
                return result
            except Exception as e:
                error = str(e)
                metadata.update(_failure_context(e))
                raise
            finally:
                duration_ms = (time.time() - start_time) * 1000
                logger.debug(f"Stage {stage} finished in {duration_ms:.1f} ms (success={success}, {metadata})")
                try:
                    record_stage(stage, success, duration_ms, error, metadata or None)
                except Exception as log_error:
                    logger.debug(f"Failed to record telemetry: {log_error}")

        return wrapper

    return decorator

"""
Local run telemetry for spacetime-collapse.
Records stage timings, trajectory outcomes and errors as JSON lines in the
platform data directory. Nothing leaves the machine.
"""

import contextlib
import json
import logging
import os
import platform
import queue
import sys
import threading
import time
import uuid
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Any

try:
    import tomli
except ImportError:
    try:
        import tomllib as tomli
    except ImportError:
        tomli = None

logger = logging.getLogger("spacetime-collapse.telemetry")


def get_package_version() -> str:
    """Get version from pyproject.toml"""
    try:
        pyproject_path = Path(__file__).parent.parent.parent / "pyproject.toml"
        if pyproject_path.exists():
            if tomli:
                with open(pyproject_path, "rb") as f:
                    data = tomli.load(f)
                    return data["project"]["version"]
    except Exception:
        pass
    return "unknown"


PACKAGE_VERSION = get_package_version()


class EventType(str, Enum):
    """Types of run events"""
    STARTUP = "startup"
    STAGE = "stage"
    TRAJECTORY = "trajectory"
    STEP_REJECTED = "step_rejected"
    VALIDATION_CHECK = "validation_check"
    ERROR = "error"


@dataclass
class RunEvent:
    """One telemetry record"""
    event_type: EventType
    session_id: str
    timestamp: float
    version: str
    platform: str

    stage: str | None = None
    success: bool = True
    duration_ms: float | None = None
    error_message: str | None = None
    metadata: dict[str, Any] | None = None

    def to_json(self) -> str:
        data = asdict(self)
        data["event_type"] = self.event_type.value
        return json.dumps(data, sort_keys=True)


DISABLE_VARS = ("DISABLE_TELEMETRY", "SPACETIME_COLLAPSE_DISABLE_TELEMETRY")


def telemetry_disabled() -> bool:
    """Check if telemetry is disabled via environment variables"""
    return any(os.environ.get(var, "").lower() in ("true", "1", "yes", "on") for var in DISABLE_VARS)


def get_data_directory() -> Path:
    """Directory holding the event log"""
    override = os.getenv("SPACETIME_COLLAPSE_DATA_DIR")
    if override:
        base_dir = Path(override)
    elif sys.platform == "win32":
        base_dir = Path(os.environ.get("APPDATA", Path.home() / "AppData" / "Roaming"))
    elif sys.platform == "darwin":
        base_dir = Path.home() / "Library" / "Application Support"
    else:  # Linux
        base_dir = Path(os.environ.get("XDG_DATA_HOME", Path.home() / ".local" / "share"))
    return base_dir / "SpacetimeCollapse"


class RunTelemetry:
    """Queue-backed collector; a daemon worker appends events to run_events.jsonl"""

    max_error_length = 200

    def __init__(self, enabled: bool | None = None, data_dir: Path | None = None):
        self.enabled = (not telemetry_disabled()) if enabled is None else enabled
        if not self.enabled:
            logger.debug("Telemetry disabled")
        self.session_id = str(uuid.uuid4())
        self._path: Path | None = None
        if self.enabled:
            try:
                directory = data_dir or get_data_directory()
                directory.mkdir(parents=True, exist_ok=True)
                self._path = directory / "run_events.jsonl"
            except OSError as e:
                logger.debug(f"Telemetry directory unavailable: {e}")
                self.enabled = False

        self._queue: "queue.Queue[RunEvent]" = queue.Queue(maxsize=1000)
        self._worker = threading.Thread(target=self._worker_loop, daemon=True)
        self._worker.start()

    @property
    def path(self) -> Path | None:
        return self._path

    def record_event(
        self,
        event_type: EventType,
        stage: str | None = None,
        success: bool = True,
        duration_ms: float | None = None,
        error_message: str | None = None,
        metadata: dict[str, Any] | None = None,
    ):
        """Record an event (non-blocking)"""
        if not self.enabled:
            return
        if error_message and len(error_message) > self.max_error_length:
            error_message = error_message[: self.max_error_length] + "..."
        event = RunEvent(
            event_type=event_type,
            session_id=self.session_id,
            timestamp=time.time(),
            version=PACKAGE_VERSION,
            platform=platform.system().lower(),
            stage=stage,
            success=success,
            duration_ms=duration_ms,
            error_message=error_message,
            metadata=metadata,
        )
        try:
            self._queue.put_nowait(event)
        except queue.Full:
            logger.debug("Telemetry queue full, dropping event")

    def flush(self, timeout: float = 2.0):
        """Wait for queued events to be written"""
        deadline = time.time() + timeout
        while self._queue.unfinished_tasks and time.time() < deadline:
            time.sleep(0.01)

    def _worker_loop(self):
        while True:
            event = self._queue.get()
            try:
                self._write_event(event)
            except Exception as e:
                logger.debug(f"Telemetry write failed: {e}")
            finally:
                with contextlib.suppress(Exception):
                    self._queue.task_done()

    def _write_event(self, event: RunEvent):
        if self._path is None:
            return
        with open(self._path, "a", encoding="utf-8") as f:
            f.write(event.to_json() + "\n")


# Global telemetry instance
_telemetry: RunTelemetry | None = None


def get_telemetry() -> RunTelemetry:
    """Get the global telemetry instance"""
    global _telemetry
    if _telemetry is None:
        _telemetry = RunTelemetry()
    return _telemetry


def record_stage(
    stage: str,
    success: bool,
    duration_ms: float,
    error: str | None = None,
    metadata: dict[str, Any] | None = None,
):
    get_telemetry().record_event(
        EventType.STAGE, stage=stage, success=success, duration_ms=duration_ms, error_message=error, metadata=metadata
    )


def record_startup(command: str):
    get_telemetry().record_event(EventType.STARTUP, stage=command)


def is_telemetry_enabled() -> bool:
    try:
        return get_telemetry().enabled
    except Exception:
        return False

"""
Utility functions
"""

import concurrent.futures
import json
import logging
import os
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, TypeVar

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

WORKERS_ENV = "OPFLAYER_WORKERS"


def setup_logging(level: str = "INFO"):
    """Configure logging

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR)
    """
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )


def enable_debug():
    """Enable debug logging for opflayer (one-liner shortcut)"""
    setup_logging("DEBUG")


def default_workers() -> int:
    """Worker count from $OPFLAYER_WORKERS, else the number of available cores"""
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        try:
            value = int(raw)
            if value >= 1:
                return value
        except ValueError:
            pass
        log.warning(f"Ignoring invalid {WORKERS_ENV}={raw!r}")
    return os.cpu_count() or 1


def ordered_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """Apply `fn` to every item, possibly on a thread pool, keeping input order.

    Results are stored by index so downstream reductions always sum in the same order,
    whatever order the workers finish in. Exceptions propagate to the caller.
    """
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    results: List[Optional[R]] = [None] * len(items)
    with concurrent.futures.ThreadPoolExecutor(max_workers=min(len(items), workers)) as executor:
        future_to_index = {executor.submit(fn, item): idx for idx, item in enumerate(items)}
        for future in concurrent.futures.as_completed(future_to_index):
            results[future_to_index[future]] = future.result()
    return results  # type: ignore[return-value]


def package_versions() -> Dict[str, str]:
    """Versions of the packages that determine numerical results"""
    versions = {"python": platform.python_version()}
    for name in ("opflayer", "numpy", "scipy", "torch", "pandas", "pydantic"):
        try:
            from importlib.metadata import version

            versions[name] = version(name)
        except Exception:
            module = sys.modules.get(name)
            versions[name] = getattr(module, "__version__", "unknown")
    return versions


def write_manifest(
    output_dir: Path,
    command: str,
    argv: Sequence[str],
    config: Dict[str, Any],
    seed: Optional[int],
    artifacts: Optional[List[str]] = None,
) -> Path:
    """Write `manifest.json` describing how a run can be reproduced

    Args:
        output_dir: Run output directory (created if missing)
        command: Subcommand name
        argv: Raw command-line arguments
        config: Fully resolved configuration
        seed: Effective seed
        artifacts: Files produced by the run, relative to output_dir

    Returns:
        Path of the manifest file
    """
    output_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "config": config,
        "versions": package_versions(),
        "artifacts": sorted(artifacts or []),
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    path = output_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, default=str)
    log.info(f"Wrote manifest: {path}")
    return path

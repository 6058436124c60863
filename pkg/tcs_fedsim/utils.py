import logging
import os
import shutil
import subprocess
import tempfile
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Optional, Union

from .__version__ import __version__
from .exceptions import OutputExistsError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def setup_logging(level: str = "INFO") -> None:
    """
    Setup logging configuration for tcs_fedsim.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
    """
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler()
        ]
    )

    # Set specific logger level for this package
    logging.getLogger("tcs_fedsim").setLevel(getattr(logging, level.upper()))
    logger.debug(f"Logging configured with level: {level}")


def current_datetime() -> datetime:
    """
    Get current UTC datetime.

    Returns:
        Current datetime in UTC timezone
    """
    return datetime.now(timezone.utc)


def version_stamp() -> str:
    """Package version, plus the git commit when running from a checkout"""
    try:
        commit = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=True,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        return __version__
    return f"{__version__}+g{commit}" if commit else __version__


def write_bytes_atomic(path: PathLike, data: bytes) -> None:
    """Write ``data`` to a temporary sibling file and rename it over ``path``"""
    target = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_text_atomic(path: PathLike, text: str) -> None:
    write_bytes_atomic(path, text.encode("utf-8"))


@contextmanager
def atomic_directory(path: PathLike, force: bool = False) -> Iterator[Path]:
    """
    Build a directory under a temporary name and move it into place on success.

    On error the partial directory is removed and ``path`` is left untouched.

    Args:
        path: Final directory
        force: Replace ``path`` if it already exists

    Raises:
        OutputExistsError: If ``path`` exists and ``force`` is not set
    """
    target = Path(path)
    if target.exists() and not force:
        raise OutputExistsError(f"{target} already exists (use --force to replace it)")
    target.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise

    backup: Optional[Path] = None
    if target.exists():
        backup = target.with_name(f".{target.name}.old")
        shutil.rmtree(backup, ignore_errors=True)
        os.replace(target, backup)
    os.replace(staging, target)
    if backup is not None:
        shutil.rmtree(backup, ignore_errors=True)
    logger.info(f"Wrote {target}")

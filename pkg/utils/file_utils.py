# file_utils.py
"""
Utility functions for safe file operations: atomic writes and timestamped backups.
"""
import os
import shutil
import tempfile
import time
from datetime import datetime
from pathlib import Path

from services.errors import TvsError


class FileWriteError(TvsError):
    """Custom exception for files that could not be written."""
    pass


def atomic_write_bytes(file_path, data: bytes, max_retries: int = 3, retry_delay: float = 0.5) -> Path:
    """
    Write bytes to a temporary sibling and move it over the target.

    Readers never see a partially written file. PermissionError on the final
    move (file held open by another process) is retried.

    Args:
        file_path: Destination path; parent directories are created
        data: File contents
        max_retries: Attempts at the final rename
        retry_delay: Delay between retries in seconds

    Returns:
        The destination path

    Raises:
        FileWriteError: If the file cannot be replaced after all retries
    """
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)

    fd, tmp_name = tempfile.mkstemp(prefix=f".{file_path.name}.", dir=file_path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        for attempt in range(max_retries):
            try:
                os.replace(tmp_name, file_path)
                return file_path
            except PermissionError as e:
                if attempt < max_retries - 1:
                    time.sleep(retry_delay)
                    continue
                raise FileWriteError(
                    f"Could not replace {file_path} after {max_retries} attempts"
                ) from e
    finally:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
    return file_path


def backup_file(file_path, backup_dir=None) -> Path:
    """
    Copy an output file aside before it is overwritten.

    Copies land in ``<parent>/backups`` as ``<stem>_backup_<timestamp>[_<k>]<suffix>``;
    ``k`` counts up when several backups share a second.
    """
    file_path = Path(file_path)
    if not file_path.is_file():
        raise FileNotFoundError(f"no file to back up: {file_path}")

    target_dir = Path(backup_dir) if backup_dir is not None else file_path.parent / "backups"
    target_dir.mkdir(parents=True, exist_ok=True)

    stamp = f"{file_path.stem}_backup_{datetime.now():%Y%m%d_%H%M%S}"
    target = target_dir / f"{stamp}{file_path.suffix}"
    k = 1
    while target.exists():
        target = target_dir / f"{stamp}_{k}{file_path.suffix}"
        k += 1
    shutil.copy2(file_path, target)
    return target

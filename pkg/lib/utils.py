import os

from lib.errors import MissingArtifacts, OutputIoError


def is_dir_writable(path: str) -> bool:
    return os.path.isdir(path) and os.access(path, os.W_OK | os.X_OK)


def ensure_output_dir(path: str) -> str:
    """Create `path` if needed and check that files can be written into it."""
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise OutputIoError(f"Cannot create output directory {path}: {e}") from e
    if not is_dir_writable(path):
        raise OutputIoError(f"Output directory {path} is not writable")
    return path


def require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise MissingArtifacts(f"Missing {what}: {path}")
    return path


def open_output(path: str):
    """Text file opened for writing with "\\n" line endings on every platform."""
    try:
        return open(path, "w", encoding="utf-8", newline="")
    except OSError as e:
        raise OutputIoError(f"Cannot write {path}: {e}") from e


def open_input(path: str):
    try:
        return open(path, "r", encoding="utf-8", newline="")
    except OSError as e:
        raise MissingArtifacts(f"Cannot read {path}: {e}") from e

import hashlib
import os
import tempfile
from pathlib import Path
from typing import Iterable, Union


def compute_content_hash(chunks: Iterable[bytes]) -> str:
    """
    Deterministic SHA-256 over a sequence of byte chunks.
    Each chunk is length-prefixed so chunk boundaries cannot be confused.
    """
    digest = hashlib.sha256()
    for chunk in chunks:
        digest.update(len(chunk).to_bytes(8, "little"))
        digest.update(chunk)
    return digest.hexdigest()


def atomic_write(path: Union[str, Path], data: Union[str, bytes]) -> Path:
    """Writes to a temp file in the target directory, then renames over `path`."""
    path = Path(path)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def fmt6(value: float) -> str:
    """Six significant digits, the number format of every exported table."""
    return f"{value:.6g}"

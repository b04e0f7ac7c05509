"""This file contains utilities that do not fit anywhere else."""

import hashlib
import json
import os
from pathlib import Path
import tempfile
from typing import Any, Union

import numpy as np


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity with the conventions used for indicator vectors.

    Two zero vectors are identical (similarity 1), a zero vector and a non-zero one
    share nothing (similarity 0).

    :param a: First vector.
    :param b: Second vector, same length.

    :return: Cosine similarity.

    :raises ValueError: Vectors of different length.

    Example:
        >>> cosine_similarity(np.zeros(3), np.zeros(3))
        1.0
        >>> cosine_similarity(np.array([1, 0]), np.array([0, 1]))
        0.0
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("Vectors must have the same length for a cosine similarity.")
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0.0 and norm_b == 0.0:
        return 1.0
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    return float(np.dot(a, b) / (norm_a * norm_b))


def canonical_json(obj: Any) -> str:
    """Serialize to JSON with sorted keys and no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_hash(obj: Any) -> str:
    """SHA-256 of the canonical JSON form of an object."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def atomic_write_text(fname: Union[str, Path], text: str) -> Path:
    """Write text to a file by writing a temporary file first and renaming it.

    Content is written as UTF-8 with LF line endings, regardless of platform.

    :param fname: Target file.
    :param text: Text to write.

    :return: Path of the written file.
    """
    fname = Path(fname)
    fname.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=fname.parent, prefix=f".{fname.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fout:
            fout.write(text)
        os.replace(tmp, fname)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return fname

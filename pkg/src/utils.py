"""
Helper functions shared by every stage: exceptions, logging, seed streams,
hashing and atomic file writes.
"""
from __future__ import annotations

import hashlib
import logging
import os
import tempfile
from pathlib import Path
from typing import Optional, Union

import numpy as np

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

PathLike = Union[str, Path]


# ----- exceptions ------------------------------------------------------------
class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


class ShapeError(ValueError):
    """Shape algebra violation (tensor ops, flow/scoring dimensions)."""


class SimulationError(RuntimeError):
    """The simulator could not produce a valid draw."""


class NumericalError(ArithmeticError):
    """
    A non-finite value showed up.

    Attributes
    ----------
    op : str | None
        Tensor op kind that produced it, when known.
    layer : int | None
        Flow layer index (1-based) that produced it, when known.
    """

    def __init__(self, message: str, op: Optional[str] = None, layer: Optional[int] = None) -> None:
        super().__init__(message)
        self.op = op
        self.layer = layer


class DivergenceError(NumericalError):
    """Training loss became non-finite at `step`."""

    def __init__(self, message: str, step: int) -> None:
        super().__init__(message)
        self.step = step


# ----- logging ---------------------------------------------------------------
def setup_logging(level: Union[int, str] = logging.INFO) -> None:
    """Configure the root logger once with a single stream handler."""
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.INFO)
    root = logging.getLogger()
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    root.setLevel(level)


# ----- randomness ------------------------------------------------------------
def _key_to_int(key: Union[int, str]) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derive_seed(base: int, *keys: Union[int, str]) -> np.random.SeedSequence:
    """Independent seed stream for (base, keys...). Same inputs, same stream."""
    spawn_key = tuple(_key_to_int(k) for k in keys)
    return np.random.SeedSequence(int(base), spawn_key=spawn_key)


def make_rng(base: int, *keys: Union[int, str]) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *keys))


# ----- hashing / files -------------------------------------------------------
def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path: PathLike, text: str) -> None:
    """Write UTF-8 text with LF endings via a temp file + rename."""
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_float(x: float) -> str:
    """Shortest round-trip representation, used in every text artifact."""
    return repr(float(x))

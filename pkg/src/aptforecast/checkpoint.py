"""Flat-text checkpoint blocks.

Each array is written as three lines (name, space separated shape, space
separated row-major values) and blocks are separated by a blank line.  Values
use Python's shortest round-trip float repr, so a save/load cycle is exact.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping

import numpy as np


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> str:
    blocks = []
    for name, arr in arrays.items():
        if not name or any(c.isspace() for c in name):
            raise CheckpointError(f"invalid block name {name!r}")
        arr = np.asarray(arr, dtype=np.float64)
        shape = " ".join(str(n) for n in arr.shape)
        values = " ".join(repr(float(v)) for v in arr.reshape(-1))
        blocks.append(f"{name}\n{shape}\n{values}\n")
    return "\n".join(blocks)


def loads(text: str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    lines = text.split("\n")
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        if i + 2 >= len(lines):
            raise CheckpointError(f"truncated block starting at line {i + 1}")
        name = lines[i].strip()
        try:
            shape = tuple(int(s) for s in lines[i + 1].split())
            values = np.array([float(s) for s in lines[i + 2].split()], dtype=np.float64)
        except ValueError as exc:
            raise CheckpointError(f"block {name!r} (line {i + 1}): {exc}") from exc
        if int(np.prod(shape)) != values.size:
            raise CheckpointError(
                f"block {name!r}: shape {shape} needs {int(np.prod(shape))} values, got {values.size}"
            )
        if name in out:
            raise CheckpointError(f"duplicate block {name!r}")
        out[name] = values.reshape(shape)
        i += 3
    return out


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_text(dumps(arrays), encoding="utf-8")


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads(Path(path).read_text(encoding="utf-8"))

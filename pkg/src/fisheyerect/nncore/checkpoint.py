"""Checkpoint directories: one SFIR file per parameter plus a text index.

``index.txt`` holds one ``<parameter path>\\t<file name>`` line per tensor, in
parameter order.  An optional ``config.json`` sits alongside.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .. import tensorio

INDEX = "index.txt"
CONFIG = "config.json"


class CheckpointError(Exception):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)


def save_checkpoint(directory, params, config: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, tensor) in enumerate(params.items()):
        fname = f"p{i:04d}.sfir"
        arr = getattr(tensor, "data", tensor)
        tensorio.save(directory / fname, np.asarray(arr, dtype=np.float32))
        lines.append(f"{name}\t{fname}")
    (directory / INDEX).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if config is not None:
        (directory / CONFIG).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return directory


def load_checkpoint(directory) -> "OrderedDict[str, np.ndarray]":
    directory = Path(directory)
    index = directory / INDEX
    try:
        text = index.read_text(encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(index, exc) from exc
    params = OrderedDict()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, fname = line.split("\t")
        except ValueError:
            raise CheckpointError(index, f"malformed line {lineno}") from None
        try:
            params[name] = tensorio.load(directory / fname)
        except (OSError, tensorio.TensorFormatError) as exc:
            raise CheckpointError(directory / fname, exc) from exc
    return params


def load_config(directory) -> dict | None:
    path = Path(directory) / CONFIG
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(path, exc) from exc

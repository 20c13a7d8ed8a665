"""Versioned JSON checkpoints for parameter dictionaries.

Format (version 1):
    {
      "format_version": 1,
      "kind": "<model kind string>",
      "config": { ... arbitrary JSON-serializable configuration ... },
      "params": { "<name>": {"shape": [...], "values": [flat floats]}, ... }
    }

JSON floats round-trip float64 exactly (shortest-repr encoding), so a
save/load cycle is bit-identical.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def save_checkpoint(path, kind: str, config: dict, params: dict[str, np.ndarray]) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "params": {
            name: {"shape": list(arr.shape), "values": np.asarray(arr, dtype=float).ravel().tolist()}
            for name, arr in params.items()
        },
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    payload = json.loads(Path(path).read_text())
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    params = {
        name: np.asarray(entry["values"], dtype=float).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    return payload["kind"], payload["config"], params

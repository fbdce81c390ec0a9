"""Parameter checkpoint files: a one-line JSON header followed by the flat
little-endian float64 parameter array."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError


def save_checkpoint(path, header: dict, flat: np.ndarray) -> None:
    flat = np.ascontiguousarray(flat, dtype="<f8")
    payload = dict(header)
    payload["count"] = int(flat.size)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write((json.dumps(payload, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(flat.tobytes())


def load_checkpoint(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"unreadable checkpoint header in {path}") from exc
        raw = fh.read()
    count = header.pop("count", None)
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if count is not None and flat.size != count:
        raise ConfigError(
            f"checkpoint {path} holds {flat.size} values, header promises {count}"
        )
    return header, flat

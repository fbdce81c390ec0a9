"""Named, independent RNG substreams derived from one root seed.

Every stochastic consumer (env layout, search noise, token sampling, replay
sampling, ...) pulls its own stream by name, so adding or removing a consumer
never perturbs the draws any other consumer sees.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    # crc32 is stable across platforms and Python versions.
    return zlib.crc32(name.encode("utf-8"))


def substream(root_seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return a Generator unique to (root_seed, name, *extra)."""
    entropy = [int(root_seed) & 0xFFFFFFFF, _name_key(name), *[int(e) & 0xFFFFFFFF for e in extra]]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def stream_state(rng: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's state."""
    return rng.bit_generator.state


def restore_stream(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng

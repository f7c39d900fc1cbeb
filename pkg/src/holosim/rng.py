"""Named, independent random streams derived from a single run seed."""
from __future__ import annotations

import hashlib

import numpy as np

STREAMS = ("members", "tasks", "allocation", "planning", "dynamics")


def stream_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def make_stream(seed: int, name: str) -> np.random.Generator:
    # keyed on the name, so drawing from one stream never shifts another
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream_key(name)])))


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    return {name: make_stream(seed, name) for name in STREAMS}

"""Named, independent random streams.

Every stream is a PCG64 generator seeded from ``SeedSequence(seed,
spawn_key=(stream_id,))``, so for a fixed seed the data stream is the same
no matter which model is trained on it.
"""

from __future__ import annotations

import numpy as np

STREAMS = {"data": 0, "init": 1, "shuffle": 2, "valid": 3, "test": 4, "search": 5}


def make_rng(seed: int, stream: str | int = "data") -> np.random.Generator:
    sid = STREAMS[stream] if isinstance(stream, str) else int(stream)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(sid,))))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)

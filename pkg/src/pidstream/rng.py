"""Named, counter-keyed random substreams derived from one root seed.

Every consumer asks for ``substream(seed, name, *key)``.  The key is hashed
into the seed sequence, so drawing more numbers in one subsystem (or for one
user) never shifts the numbers seen by another.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "channel": 1,
    "placement": 2,
    "media": 3,
    "sessions": 4,
    "arrivals": 5,
    "validate": 6,
}


def substream(seed: int, name: str, *key: int) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAMS[name], *map(int, key)))
    return np.random.Generator(np.random.Philox(ss))


def derive_seeds(seed: int, n: int) -> list[int]:
    """Repetition seeds for a sweep, reproducible from one root seed."""
    ss = np.random.SeedSequence(int(seed))
    return [int(s.generate_state(1, dtype=np.uint32)[0]) for s in ss.spawn(n)]

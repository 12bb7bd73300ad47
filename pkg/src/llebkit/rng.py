"""Named, seedable random streams.

Every stream is a counter-based Philox generator keyed by the run seed plus
a stream name, so independent parts of a run (initialisation, batching,
dropout masks, flow noise, ...) never share a sequence and adding draws to
one stream leaves the others untouched.
"""
from __future__ import annotations

import zlib

import numpy as np


def _tag(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(str(name).encode())


def make_rng(seed: int, *names) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), *(_tag(n) for n in names)])
    return np.random.Generator(np.random.Philox(ss))

"""Named random sub-streams derived from one integer seed."""
from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def named_seedseq(seed: int, name: str, *index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(stream_key(name), *index))


def named_rng(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent PCG64 generator for ``(seed, name, *index)``.

    Streams with different names or indices never depend on one another,
    so e.g. the simulation of experiment 7 is unaffected by how many
    experiments are generated.
    """
    return np.random.Generator(np.random.PCG64(named_seedseq(seed, name, *index)))

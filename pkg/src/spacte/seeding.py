"""Sub-seed derivation.

Every random stream in the package is derived from one integer seed plus a
purpose tag and an index path, so results never depend on evaluation order
or on how many workers are used.
"""
from __future__ import annotations

import zlib

import numpy as np
import torch


def _tag_code(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def seed_sequence(seed: int, tag: str, *index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(_tag_code(tag), *map(int, index)))


def numpy_rng(seed: int, tag: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, tag, *index))


def sub_seed(seed: int, tag: str, *index: int) -> int:
    """A 63-bit integer seed for consumers that want a plain int."""
    return int(seed_sequence(seed, tag, *index).generate_state(2, np.uint64)[0] >> np.uint64(1))


def torch_generator(seed: int, tag: str, *index: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(sub_seed(seed, tag, *index))
    return g

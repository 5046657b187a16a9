# utils/seeding.py
"""
Seed splitting.

Every stream is SeedSequence(root_seed, spawn_key=(stage_key, block_index)).
The stage key is a stable integer hashed from the stage name, the block index
is the position of a fixed-size block of trajectories. Neither depends on how
many threads process the blocks.
"""
import hashlib
from typing import Iterator, List, NamedTuple

import numpy as np

BLOCK_SIZE = 4096


class Block(NamedTuple):
    index: int
    start: int
    stop: int

    @property
    def size(self) -> int:
        return self.stop - self.start


def stage_key(name: str) -> int:
    """Deterministic 32-bit key for a stage name (md5, like stable row ids)."""
    return int(hashlib.md5(name.encode("utf-8")).hexdigest()[:8], 16)


def seed_sequence(root_seed: int, stage: str, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(root_seed), spawn_key=(stage_key(stage),) + tuple(int(k) for k in keys))


def rng_for(root_seed: int, stage: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(root_seed, stage, *keys))


def blocks(n_items: int, block_size: int = BLOCK_SIZE) -> List[Block]:
    """Partition range(n_items) into consecutive fixed-size blocks."""
    if block_size < 1:
        raise ValueError("block_size must be positive")
    out = []
    for i, start in enumerate(range(0, int(n_items), block_size)):
        out.append(Block(i, start, min(start + block_size, int(n_items))))
    return out


def iter_block_rngs(root_seed: int, stage: str, n_items: int, block_size: int = BLOCK_SIZE) -> Iterator:
    for b in blocks(n_items, block_size):
        yield b, rng_for(root_seed, stage, b.index)


__all__ = ["BLOCK_SIZE", "Block", "stage_key", "seed_sequence", "rng_for", "blocks", "iter_block_rngs"]

"""Named, independently seeded random streams."""

from __future__ import annotations

import hashlib

import numpy as np


def _name_words(name: str) -> list[int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def rng_stream(root_seed: int | str, name: str) -> np.random.Generator:
    """Same (seed, name) gives the same sequence; different names are independent."""
    seq = np.random.SeedSequence([int(root_seed) & 0xFFFFFFFF, *_name_words(name)])
    return np.random.Generator(np.random.PCG64(seq))


class StreamSet:
    """Lazily created streams keyed by name, with state capture for checkpoints."""

    def __init__(self, root_seed: int):
        self.root_seed = int(root_seed)
        self._streams: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = rng_stream(self.root_seed, name)
        return self._streams[name]

    def state(self) -> dict:
        return {name: g.bit_generator.state for name, g in sorted(self._streams.items())}

    def restore(self, state: dict) -> None:
        for name, st in state.items():
            self[name].bit_generator.state = st

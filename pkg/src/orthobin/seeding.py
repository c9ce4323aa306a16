"""Deterministic named random substreams derived from one run seed."""
from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for (seed, name); stable across processes."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


class RunStreams:
    """Registry of named substreams for one run.

    Streams are created lazily and cached, so successive consumers of the
    same name continue a single deterministic sequence.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = substream(self.seed, name)
        return self._streams[name]

"""Reproducible per-path random streams.

Every path draws from its own counter-based Philox generator whose 128-bit
key is ``(stage_word(seed, stage), path_index)``.  ``stage_word`` hashes the
master seed together with a stage label through :class:`numpy.random.SeedSequence`,
so pilot runs, final runs and separate estimators never share draws, and a
given path reproduces bit for bit no matter how the batch is chunked or
distributed over workers.
"""
import zlib

import numpy as np


def stage_word(seed: int, stage: str | int = "main") -> int:
    if isinstance(stage, str):
        stage = zlib.crc32(stage.encode())
    return int(np.random.SeedSequence([int(seed), int(stage)]).generate_state(1, np.uint64)[0])


def substream(seed: int, index: int, stage: str | int = "main") -> np.random.Philox:
    """Bit generator for path ``index`` of ``stage`` under master ``seed``."""
    return np.random.Philox(key=np.array([stage_word(seed, stage), index], dtype=np.uint64))


def substreams(seed: int, start: int, count: int, stage: str | int = "main") -> list:
    word = stage_word(seed, stage)
    return [
        np.random.Philox(key=np.array([word, i], dtype=np.uint64))
        for i in range(start, start + count)
    ]


def as_bitgen(stream) -> np.random.BitGenerator:
    """Accept a bit generator, a ``Generator`` or an integer seed."""
    if isinstance(stream, np.random.BitGenerator):
        return stream
    if isinstance(stream, np.random.Generator):
        return stream.bit_generator
    if stream is None:
        return np.random.Philox()
    return substream(int(stream), 0)

"""Seeded random streams.

All simulation randomness comes from Philox, a counter-based generator. A
stream is identified by ``(seed, episode, channel)``: the seed is the Philox
key and ``(episode, channel)`` occupy the two high words of the 256-bit
counter, so draws from one stream can never run into another (the low word
alone allows 2**64 blocks). Episodes can therefore be generated in any order,
or in parallel, with identical results.
"""
import numpy as np

CH_INIT = 0
CH_LATENT = 1
CH_STATE = 2
CH_PROXY = 3
CH_AUX = 4

_MASK64 = (1 << 64) - 1


def stream(seed: int, episode: int = 0, channel: int = 0) -> np.random.Generator:
    bitgen = np.random.Philox(key=int(seed) & _MASK64, counter=[0, 0, int(episode), int(channel)])
    return np.random.Generator(bitgen)


def uniforms(seed: int, n: int, size: int, channel: int) -> np.ndarray:
    """``(n, size)`` uniforms, row ``i`` from stream ``(seed, i, channel)``."""
    out = np.empty((n, size), dtype=np.float64)
    for i in range(n):
        out[i] = stream(seed, i, channel).random(size)
    return out


def derive_seed(base: int, *labels: int) -> int:
    """A 64-bit seed deterministically derived from ``base`` and integer labels."""
    ss = np.random.SeedSequence(int(base) & _MASK64, spawn_key=tuple(int(x) for x in labels))
    return int(ss.generate_state(1, dtype=np.uint64)[0])

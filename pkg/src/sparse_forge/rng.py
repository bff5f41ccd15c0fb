"""Seeded xoshiro256** generator (state expanded from a u64 seed by splitmix64)."""
import numpy as np
from randomgen import Xoshiro256

_MASK = (1 << 64) - 1


def splitmix64(seed, n=4):
    x = seed & _MASK
    out = []
    for _ in range(n):
        x = (x + 0x9E3779B97F4A7C15) & _MASK
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        out.append(z ^ (z >> 31))
    return out


def make_rng(seed):
    """numpy ``Generator`` over xoshiro256** seeded from ``seed`` via splitmix64."""
    if int(seed) != seed or not 0 <= seed <= _MASK:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    bit_gen = Xoshiro256(0)
    state = bit_gen.state
    state["s"] = np.array(splitmix64(int(seed)), dtype=np.uint64)
    state["has_uint32"] = 0
    state["uinteger"] = 0
    bit_gen.state = state
    return np.random.Generator(bit_gen)

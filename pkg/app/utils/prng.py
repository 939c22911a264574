"""
Seeded counter-based PRNG (SplitMix64 mixing) with Box-Muller Gaussians
"""
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from app.errors import InvalidArgumentError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_A = 0xBF58476D1CE4E5B9
MIX_B = 0x94D049BB133111EB
INV_2_53 = 1.0 / 9007199254740992.0

Shape = Union[int, Sequence[int]]


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int"""
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX_A) & MASK64
    z = ((z ^ (z >> 27)) * MIX_B) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX_A)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX_B)
        return z ^ (z >> np.uint64(31))


def _normalize_shape(shape: Shape) -> Tuple[int, ...]:
    dims = (shape,) if isinstance(shape, int) else tuple(int(d) for d in shape)
    if not dims or any(d <= 0 for d in dims):
        raise InvalidArgumentError(f"shape must be nonempty with positive extents, got {shape}")
    return dims


@dataclass
class PrngState:
    """
    Counter-based generator: output i is mix64(seed + (counter + i) * gamma).
    Identical seeds give identical streams on every platform.
    """
    seed: int
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & MASK64

    def next_u64(self, count: int) -> np.ndarray:
        """Draw count raw 64-bit words and advance the counter"""
        idx = np.arange(1, count + 1, dtype=np.uint64) + np.uint64(self.counter & MASK64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(GOLDEN_GAMMA)
        self.counter += count
        return _mix64_array(z)

    def split(self, key: int) -> "PrngState":
        """Independent child stream derived from (seed, key)"""
        return PrngState(seed=mix64(self.seed ^ mix64((int(key) + GOLDEN_GAMMA) & MASK64)))

    def clone(self) -> "PrngState":
        return PrngState(seed=self.seed, counter=self.counter)


def uniform(state: PrngState, shape: Shape) -> np.ndarray:
    """Uniform draws on [0, 1) with 53-bit resolution"""
    dims = _normalize_shape(shape)
    words = state.next_u64(int(np.prod(dims)))
    return ((words >> np.uint64(11)).astype(np.float64) * INV_2_53).reshape(dims)


def gaussian(state: PrngState, shape: Shape) -> np.ndarray:
    """
    Standard-normal draws via Box-Muller; each pair of words yields a
    (cos, sin) pair, interleaved in output order.
    """
    dims = _normalize_shape(shape)
    size = int(np.prod(dims))
    pairs = (size + 1) // 2
    words = state.next_u64(2 * pairs)
    # u1 in (0, 1] keeps the log finite
    u1 = ((words[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * INV_2_53
    u2 = (words[1::2] >> np.uint64(11)).astype(np.float64) * INV_2_53
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = radius * np.cos(angle)
    out[1::2] = radius * np.sin(angle)
    return out[:size].reshape(dims)


def randint(state: PrngState, low: int, high: int) -> int:
    """Uniform integer in [low, high] inclusive"""
    if high < low:
        raise InvalidArgumentError(f"empty integer range [{low}, {high}]")
    u = float(uniform(state, 1)[0])
    return low + min(int(u * (high - low + 1)), high - low)

"""Counter-based deterministic randomness.

Every random quantity in the package is a pure function of a 64-bit seed
plus an integer path, so any process can regenerate any draw without
shared RNG state. The core is Philox4x64 (via numpy) used purely as a
counter-based bit source; all conversions from raw bits are defined here
so the streams do not depend on numpy Generator internals.

Draw protocols (fixed; tests re-derive them independently):

* seed derivation: ``derive_seed(seed, *path)`` chains the splitmix64
  finalizer: h = mix64(seed ^ GAMMA); for each p: h = mix64(h ^ mix64(p)).
* raw stream: Philox keyed ``[seed, STREAM_KEY]``, ``random_raw`` output.
* doubles: ``(raw >> 11) * 2**-53`` in [0, 1).
* gaussians: Box-Muller on raw pairs (r1, r2):
  u1 = ((r1 >> 11) + 1) * 2**-53 in (0, 1], u2 = (r2 >> 11) * 2**-53,
  z1 = sqrt(-2 ln u1) cos(2 pi u2), z2 = sqrt(-2 ln u1) sin(2 pi u2).
  ``gaussians(seed, n)`` consumes ceil(n/2) pairs and keeps z1 z2 z1 z2...
* bounded ints: rejection sampling on raw u64 (see ``randbelow``).
* shuffles: Fisher-Yates from the top index down, one ``randbelow`` per
  step, consuming the stream in order.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
STREAM_KEY = 0x45564F53564400  # second Philox key word, fixed

# Stream purpose tags (first element of the derivation path).
TAG_CANDIDATE = 1
TAG_SUBSET = 2
TAG_SFT_SHUFFLE = 3
TAG_DATASET = 4
TAG_MODEL_INIT = 5
TAG_ADAPTER_INIT = 6


def mix64(x: int) -> int:
    """splitmix64 finalizer."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return (x ^ (x >> 31)) & MASK64


def derive_seed(seed: int, *path: int) -> int:
    """Derive a child seed from a parent seed and an integer path."""
    h = mix64((seed & MASK64) ^ GAMMA)
    for p in path:
        if p < 0:
            raise ValueError("path elements must be non-negative")
        h = mix64(h ^ mix64(p))
    return h


def raw_u64(seed: int, n: int) -> np.ndarray:
    """First n uint64 words of the stream keyed by ``seed``."""
    key = np.array([seed & MASK64, STREAM_KEY], dtype=np.uint64)
    return np.random.Philox(key=key).random_raw(n)


def uniform(seed: int, n: int) -> np.ndarray:
    """n doubles in [0, 1)."""
    return (raw_u64(seed, n) >> np.uint64(11)) * 2.0**-53


def gaussians(seed: int, n: int) -> np.ndarray:
    """n standard normal doubles via Box-Muller."""
    pairs = (n + 1) // 2
    raw = raw_u64(seed, 2 * pairs).reshape(pairs, 2)
    u1 = ((raw[:, 0] >> np.uint64(11)) + np.uint64(1)) * 2.0**-53
    u2 = (raw[:, 1] >> np.uint64(11)) * 2.0**-53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * math.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n]


class RawStream:
    """Sequential view over a keyed raw stream (for rejection sampling)."""

    def __init__(self, seed: int, chunk: int = 256):
        key = np.array([seed & MASK64, STREAM_KEY], dtype=np.uint64)
        self._bg = np.random.Philox(key=key)
        self._chunk = chunk
        self._buf: list[int] = []

    def next_u64(self) -> int:
        if not self._buf:
            self._buf = [int(v) for v in self._bg.random_raw(self._chunk)][::-1]
        return self._buf.pop()


def randbelow(stream: RawStream, bound: int) -> int:
    """Unbiased integer in [0, bound) by rejection on u64 draws."""
    if bound <= 0:
        raise ValueError("bound must be positive")
    limit = (1 << 64) - ((1 << 64) % bound)
    while True:
        v = stream.next_u64()
        if v < limit:
            return v % bound


def permutation(seed: int, n: int) -> list[int]:
    """Fisher-Yates permutation of range(n) keyed by ``seed``."""
    idx = list(range(n))
    stream = RawStream(seed)
    for i in range(n - 1, 0, -1):
        j = randbelow(stream, i + 1)
        idx[i], idx[j] = idx[j], idx[i]
    return idx


def candidate_seed(master_seed: int, generation: int, index: int) -> int:
    """The per-candidate seed shipped over the wire."""
    return derive_seed(master_seed, TAG_CANDIDATE, generation, index)

"""Seeded random substreams.

Every random quantity in the pipeline is drawn from a Philox4x64 counter
generator keyed by ``(seed, fold(path))``, where ``path`` is a tuple of small
integers naming the purpose (cohort, pool, crop, ...) and the item index.
``fold`` chains splitmix64 over the path words, so substreams for different
items never share a key and any item can be regenerated in isolation.

Uniforms are mapped from raw 64-bit outputs as ``((r >> 11) + 0.5) * 2**-53``,
which lies strictly inside (0, 1).  Normal deviates are the inverse normal
CDF (``scipy.special.ndtri``) of those uniforms, so a golden file depends only
on Philox and ndtri, not on numpy's ziggurat tables.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtri

MASK64 = (1 << 64) - 1

# purpose tags (first path word)
COHORT = 1
POOL_FACTORS = 2
RENDER = 3
CROP = 4
INIT = 5
SHUFFLE = 6
DROPOUT = 7
MEASUREMENT_NOISE = 8


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def fold(path: tuple[int, ...]) -> int:
    h = 0
    for word in path:
        h = _splitmix64(h ^ (int(word) & MASK64))
    return h


def philox(seed: int, *path: int, counter: int = 0) -> np.random.Philox:
    return np.random.Philox(counter=[counter, 0, 0, 0], key=[int(seed) & MASK64, fold(path)])


def generator(seed: int, *path: int) -> np.random.Generator:
    return np.random.Generator(philox(seed, *path))


def raw_to_unit(raw: np.ndarray) -> np.ndarray:
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def uniforms(bitgen: np.random.Philox, count: int) -> np.ndarray:
    return raw_to_unit(bitgen.random_raw(count))


def normals(bitgen: np.random.Philox, count: int) -> np.ndarray:
    return ndtri(uniforms(bitgen, count))


def block_uniforms(seed: int, path: tuple[int, ...], start: int, count: int) -> np.ndarray:
    """Uniforms for items ``start .. start+count-1``, eight per item.

    Item ``i`` owns Philox counter blocks ``2i`` and ``2i+1`` of the stream, so
    any slice of items is reproducible without generating the ones before it.
    """
    bg = philox(seed, *path, counter=2 * start)
    return uniforms(bg, 8 * count).reshape(count, 8)

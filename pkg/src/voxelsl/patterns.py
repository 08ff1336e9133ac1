"""Random binary block patterns.

Cell colors come from a counter-based SplitMix64 stream so that a pattern is
a pure function of (seed, cell index) and regenerates bit-identically on any
platform:

    z  = seed + (k + 1) * 0x9E3779B97F4A7C15          (mod 2**64)
    z  = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z  = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z  =  z ^ (z >> 31)
    bit = z >> 63

where ``k = row_cell * n_cols + col_cell`` enumerates cells row-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)

DEFAULT_CELLS = (20, 10, 5)
# master seed offsets: pattern j at scale s gets seed + SEED_STRIDE * (3 * j + s)
SEED_STRIDE = 1_000_003


@dataclass
class Pattern:
    image: np.ndarray
    cell: int
    seed: int

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def splitmix64(seed: int, counters: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = np.uint64(seed % 2**64) + (counters.astype(np.uint64) + np.uint64(1)) * GOLDEN
        z = (z ^ (z >> np.uint64(30))) * MIX1
        z = (z ^ (z >> np.uint64(27))) * MIX2
        return z ^ (z >> np.uint64(31))


def random_binary_pattern(width: int, height: int, cell: int, seed: int) -> Pattern:
    if cell < 1:
        raise ValueError(f"cell size must be >= 1, got {cell}")
    if width < cell or height < cell:
        raise ValueError(f"pattern {width}x{height} is smaller than one {cell}px cell")
    n_rows = -(-height // cell)
    n_cols = -(-width // cell)
    counters = np.arange(n_rows * n_cols, dtype=np.uint64)
    bits = (splitmix64(seed, counters) >> np.uint64(63)).astype(np.float32).reshape(n_rows, n_cols)
    # expand cells, truncating partial cells at the right/bottom edges
    image = np.repeat(np.repeat(bits, cell, axis=0), cell, axis=1)[:height, :width]
    return Pattern(np.ascontiguousarray(image), int(cell), int(seed))


def pattern_set(width: int, height: int, seed: int, per_scale: int = 2, cells=DEFAULT_CELLS) -> list[Pattern]:
    """``per_scale`` patterns at each cell size, ordered (20, 20, 10, 10, 5, 5) for the defaults."""
    out = []
    for s, cell in enumerate(cells):
        for j in range(per_scale):
            out.append(random_binary_pattern(width, height, cell, seed + SEED_STRIDE * (3 * j + s)))
    return out


def default_pattern_set(proj_width: int = 1400, proj_height: int = 1512, seed: int = 0) -> list[Pattern]:
    return pattern_set(proj_width, proj_height, seed, per_scale=2)


def extended_pattern_set(proj_width: int = 1400, proj_height: int = 1512, seed: int = 0) -> list[Pattern]:
    """Nine patterns, three per cell size."""
    return pattern_set(proj_width, proj_height, seed, per_scale=3)


REMOVAL_ORDER = (20, 10, 5, 20, 10, 5, 20)


def reduce_pattern_set(patterns: list[Pattern], count: int) -> list[Pattern]:
    """Drop patterns one cell size at a time (20, 10, 5, 20, ...) until ``count`` remain.

    The most recently listed pattern of the selected size is removed first.
    """
    if not 1 <= count <= len(patterns):
        raise ValueError(f"cannot keep {count} of {len(patterns)} patterns")
    kept = list(patterns)
    step = 0
    misses = 0
    while len(kept) > count:
        cell = REMOVAL_ORDER[step % len(REMOVAL_ORDER)]
        step += 1
        for i in range(len(kept) - 1, -1, -1):
            if kept[i].cell == cell:
                del kept[i]
                misses = 0
                break
        else:
            misses += 1
            if misses > len(REMOVAL_ORDER):
                raise ValueError("no removable patterns left for the removal order")
    return kept

"""
Run-length encoded binary image masks.

Pixels are addressed row-major, pixel (u, v) has flat index v * width + u.
A mask is stored as sorted, non-touching (start, length) runs.
"""

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from labelforge.errors import DataError


@dataclass(frozen=True, eq=False)
class RunLengthMask:
    """Binary width x height mask as (start, length) runs over flat pixel indices."""

    width: int
    height: int
    starts: np.ndarray = field(repr=False)
    lengths: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DataError(f"Mask size must be positive, got {self.width}x{self.height}")
        starts = np.asarray(self.starts, dtype=np.int64).reshape(-1)
        lengths = np.asarray(self.lengths, dtype=np.int64).reshape(-1)
        if starts.shape != lengths.shape:
            raise DataError("Run starts and lengths differ in length")
        if starts.size:
            if np.any(lengths <= 0):
                raise DataError("Run lengths must be positive")
            if starts[0] < 0 or starts[-1] + lengths[-1] > self.num_pixels:
                raise DataError(
                    f"Run outside image bounds [0, {self.num_pixels}) "
                    f"for a {self.width}x{self.height} mask"
                )
            if np.any(starts[1:] < starts[:-1] + lengths[:-1]):
                raise DataError("Runs must be sorted and non-overlapping")
        starts.setflags(write=False)
        lengths.setflags(write=False)
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "lengths", lengths)

    @property
    def num_pixels(self) -> int:
        return self.width * self.height

    @property
    def area(self) -> int:
        return int(self.lengths.sum())

    @classmethod
    def empty(cls, width: int, height: int) -> "RunLengthMask":
        return cls(width, height, np.empty(0, np.int64), np.empty(0, np.int64))

    @classmethod
    def from_indices(cls, indices: Iterable[int], width: int, height: int) -> "RunLengthMask":
        """Encode a set of flat pixel indices."""
        flat = np.unique(np.asarray(indices, dtype=np.int64).reshape(-1))
        if flat.size == 0:
            return cls.empty(width, height)
        if flat[0] < 0 or flat[-1] >= width * height:
            raise DataError(f"Pixel index outside image bounds [0, {width * height})")
        breaks = np.flatnonzero(np.diff(flat) != 1) + 1
        run_starts = flat[np.concatenate(([0], breaks))]
        run_ends = flat[np.concatenate((breaks - 1, [flat.size - 1]))]
        return cls(width, height, run_starts, run_ends - run_starts + 1)

    @classmethod
    def from_dense(cls, mask: np.ndarray) -> "RunLengthMask":
        """Encode a (height, width) boolean array."""
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 2:
            raise DataError(f"Dense mask must be 2-D, got shape {mask.shape}")
        height, width = mask.shape
        padded = np.concatenate(([False], mask.reshape(-1), [False]))
        edges = np.flatnonzero(padded[1:] != padded[:-1])
        starts, ends = edges[0::2], edges[1::2]
        return cls(width, height, starts, ends - starts)

    def pixel_indices(self) -> np.ndarray:
        """Sorted flat indices of all foreground pixels."""
        if self.starts.size == 0:
            return np.empty(0, dtype=np.int64)
        total = self.area
        run_of_pixel = np.repeat(np.arange(self.starts.size), self.lengths)
        offsets = np.arange(total) - np.repeat(np.cumsum(self.lengths) - self.lengths, self.lengths)
        return self.starts[run_of_pixel] + offsets

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.num_pixels, dtype=bool)
        dense[self.pixel_indices()] = True
        return dense.reshape(self.height, self.width)

    def to_string(self) -> str:
        """Space separated 'start length' pairs."""
        pairs = np.stack([self.starts, self.lengths], axis=1).reshape(-1)
        return " ".join(str(int(x)) for x in pairs)

    @classmethod
    def from_string(cls, text: str, width: int, height: int) -> "RunLengthMask":
        values = np.array(text.split(), dtype=np.int64)
        if values.size % 2:
            raise DataError("RLE string must hold an even number of values")
        return cls(width, height, values[0::2], values[1::2])

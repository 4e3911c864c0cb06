"""Uniform sources with a fixed global point index.

Point g of a stream belongs to replicate g // points_per_shift. For the
shifted-Sobol kind it is frac(sobol(1 + g % points_per_shift) + shift_j);
for the pseudo kind it is the g-th row of a PCG64 draw. Both can be
entered at any index, so partitions replay the serial sequence bitwise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Literal, Optional

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .errors import ConfigError, DomainError, SequenceExhaustedError

StreamKind = Literal["pseudo", "sobol"]

SOBOL_MAX_DIMENSION = 21201
# keeps u strictly inside (0, 1) before the normal quantile
UNIFORM_GUARD = 2.0**-53


@dataclass(frozen=True)
class StreamSpec:
    kind: StreamKind
    dimension: int
    shifts: int
    points_per_shift: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("pseudo", "sobol"):
            raise ConfigError(f"unknown stream kind {self.kind!r}", source="randstream")
        if self.dimension < 1 or self.shifts < 1 or self.points_per_shift < 1:
            raise ConfigError(
                "dimension, shifts and points_per_shift must all be >= 1", source="randstream"
            )
        if self.kind == "sobol" and self.dimension > SOBOL_MAX_DIMENSION:
            raise ConfigError(
                f"Sobol direction numbers support {SOBOL_MAX_DIMENSION} dimensions, "
                f"{self.dimension} requested",
                source="randstream",
            )

    @property
    def total(self) -> int:
        return self.shifts * self.points_per_shift

    def with_dimension(self, dimension: int) -> "StreamSpec":
        return StreamSpec(self.kind, dimension, self.shifts, self.points_per_shift, self.seed)


def sobol_points(dimension: int, start: int, count: int) -> np.ndarray:
    """Raw unscrambled Sobol points with indices [start, start + count)."""
    sampler = qmc.Sobol(d=dimension, scramble=False)
    if start:
        sampler.fast_forward(start)
    with warnings.catch_warnings():
        # balance warnings concern power-of-two prefixes, which index 0 skipping breaks anyway
        warnings.simplefilter("ignore", UserWarning)
        return sampler.random(count)


class RandomStream:
    """Single-consumer view on the index range [start, stop) of a StreamSpec."""

    def __init__(
        self,
        spec: StreamSpec,
        start: int = 0,
        stop: Optional[int] = None,
        shifts: Optional[np.ndarray] = None,
    ) -> None:
        self.spec = spec
        self.start = int(start)
        self.stop = spec.total if stop is None else int(stop)
        if not 0 <= self.start <= self.stop <= spec.total:
            raise ConfigError(
                f"index range [{self.start}, {self.stop}) outside [0, {spec.total})",
                source="randstream",
            )
        self.cursor = self.start
        self._shifts = shifts
        self._sampler: Optional[qmc.Sobol] = None

    @cached_property
    def shifts(self) -> np.ndarray:
        if self._shifts is not None:
            return self._shifts
        out = np.random.default_rng(self.spec.seed).random((self.spec.shifts, self.spec.dimension))
        out.setflags(write=False)
        return out

    @property
    def remaining(self) -> int:
        return self.stop - self.cursor

    def __len__(self) -> int:
        return self.stop - self.start

    def next_point(self) -> np.ndarray:
        return self.next_block(1)[0]

    def next_block(self, count: int) -> np.ndarray:
        if count > self.remaining:
            raise SequenceExhaustedError(
                f"requested {count} points, {self.remaining} left in [{self.start}, {self.stop})",
                source="randstream",
            )
        block = self._points(self.cursor, count)
        self.cursor += count
        return block

    def _points(self, first: int, count: int) -> np.ndarray:
        if self.spec.kind == "pseudo":
            bitgen = np.random.PCG64(self.spec.seed)
            bitgen.advance(first * self.spec.dimension)
            return np.random.Generator(bitgen).random((count, self.spec.dimension))
        pieces = []
        m2 = self.spec.points_per_shift
        g = first
        end = first + count
        while g < end:
            replicate, offset = divmod(g, m2)
            n = min(end - g, m2 - offset)
            raw = self._sobol(1 + offset, n)
            pieces.append(np.mod(raw + self.shifts[replicate], 1.0))
            g += n
        return np.concatenate(pieces, axis=0)

    def _sobol(self, index: int, count: int) -> np.ndarray:
        if self._sampler is None:
            self._sampler = qmc.Sobol(d=self.spec.dimension, scramble=False)
        self._sampler.reset()
        self._sampler.fast_forward(index)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            return self._sampler.random(count)

    def replicate_of(self, index) -> np.ndarray:
        return np.asarray(index) // self.spec.points_per_shift

    def partition(self, workers: int) -> list["RandomStream"]:
        return partition(self, workers)


def partition(stream: RandomStream, workers: int) -> list[RandomStream]:
    """Contiguous, disjoint sub-streams covering the remaining index range."""
    if workers < 1:
        raise ConfigError("need at least one worker", source="randstream")
    lo, hi = stream.cursor, stream.stop
    bounds = np.linspace(lo, hi, workers + 1).round().astype(int)
    shifts = stream.shifts if stream.spec.kind == "sobol" else None
    return [
        RandomStream(stream.spec, int(a), int(b), shifts=shifts)
        for a, b in zip(bounds[:-1], bounds[1:])
    ]


def chunked(stream: RandomStream, size: int) -> list[RandomStream]:
    """Fixed-size contiguous batches; the last one may be shorter."""
    if size < 1:
        raise ConfigError("batch size must be >= 1", source="randstream")
    shifts = stream.shifts if stream.spec.kind == "sobol" else None
    out: list[RandomStream] = []
    for a in range(stream.cursor, stream.stop, size):
        out.append(RandomStream(stream.spec, a, min(a + size, stream.stop), shifts=shifts))
    return out


def inv_normal_cdf(u):
    u_arr = np.asarray(u, dtype=float)
    if np.any((u_arr <= 0) | (u_arr >= 1)):
        raise DomainError("inverse normal CDF needs 0 < u < 1", source="randstream")
    out = ndtri(u_arr)
    return float(out) if out.ndim == 0 else out


def normals(u) -> np.ndarray:
    """Standard normals from stream uniforms, which may hit 0 exactly."""
    return ndtri(np.clip(u, UNIFORM_GUARD, 1.0 - UNIFORM_GUARD))

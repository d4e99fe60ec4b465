"""Driving noise for the random dynamical systems.

A :class:`NoisePath` is one realisation of an m-dimensional Wiener process,
stored implicitly as Gaussian increments over an integer time grid.  The
increment at grid slot ``k`` is produced by a counter-mode generator
(Philox) keyed on the seed, so it depends on ``(seed, k)`` alone.  That makes
the time shift ``theta_t`` an exact index shift that is invertible and
preserves the law of the increments, in both time directions.

Quasi-periodic rotation bases are provided for synthetic tests of the
ergodic-component machinery.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Union

import numpy as np

BLOCK_SIZE = 1024
_MASK64 = (1 << 64) - 1


class GridAlignmentError(ValueError):
    """A time shift is not an integer multiple of the noise grid step."""

    def __init__(self, t: float, grid_step: float, nearest_slot: int, error: float):
        self.t = t
        self.grid_step = grid_step
        self.nearest_slot = nearest_slot
        self.error = error
        super().__init__(
            f"time {t!r} is not a multiple of grid step {grid_step!r}: "
            f"nearest slot {nearest_slot}, rounding error {error:.3e}"
        )


def _zigzag(block: int) -> int:
    # interleaves negative blocks between the non-negative ones
    return 2 * block if block >= 0 else -2 * block - 1


@lru_cache(maxsize=4096)
def _normal_block(seed: int, dim: int, block: int) -> np.ndarray:
    counter = [0, 0, _zigzag(block), 0]
    gen = np.random.Generator(np.random.Philox(key=[seed & _MASK64, dim], counter=counter))
    out = gen.standard_normal((BLOCK_SIZE, dim))
    out.flags.writeable = False
    return out


def _standard_normals(seed: int, dim: int, start: int, count: int) -> np.ndarray:
    """Unit normals for fine slots ``start .. start+count-1``, shape (count, dim)."""
    out = np.empty((count, dim))
    pos = 0
    slot = start
    while pos < count:
        block, offset = divmod(slot, BLOCK_SIZE)
        take = min(BLOCK_SIZE - offset, count - pos)
        out[pos:pos + take] = _normal_block(seed, dim, block)[offset:offset + take]
        pos += take
        slot += take
    return out


def slots_for(t: float, grid_step: float, *, rtol: float = 1e-9) -> int:
    """Number of grid slots in time ``t``; raises if ``t`` is off the grid."""
    ratio = t / grid_step
    k = int(round(ratio))
    err = abs(t - k * grid_step)
    if err > rtol * max(1.0, abs(t)):
        raise GridAlignmentError(t, grid_step, k, err)
    return k


@dataclass(frozen=True)
class NoisePath:
    """A two-sided Wiener increment sequence with a time shift.

    ``increment(k)`` is the Wiener increment over ``[k h, (k+1) h)`` in the
    path's own clock, where ``h = grid_step``.  Shifting the path by ``t``
    moves that clock: ``shift(t).increment(k) == increment(k + t/h)``.

    ``coarsen > 1`` produces the same Brownian path observed on a coarser
    grid: each increment is the sum of ``coarsen`` fine increments of
    variance ``grid_step / coarsen``.  Useful for strong-order checks.
    """

    seed: int
    grid_step: float
    dimension: int = 1
    shift_offset: int = 0
    coarsen: int = 1

    def __post_init__(self):
        if self.grid_step <= 0:
            raise ValueError("grid_step must be positive")
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.coarsen < 1:
            raise ValueError("coarsen must be >= 1")
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)

    @property
    def fine_step(self) -> float:
        return self.grid_step / self.coarsen

    def shift(self, t: float) -> "NoisePath":
        """The shifted path ``theta_t omega``; ``t`` must lie on the grid."""
        return self.shift_slots(slots_for(t, self.grid_step))

    def shift_slots(self, k: int) -> "NoisePath":
        return dataclasses.replace(self, shift_offset=self.shift_offset + int(k))

    def increments(self, start: int, count: int) -> np.ndarray:
        """Increments for slots ``start .. start+count-1``, shape (count, m)."""
        c = self.coarsen
        first = (start + self.shift_offset) * c
        z = _standard_normals(self.seed, self.dimension, first, count * c)
        if c > 1:
            z = z.reshape(count, c, self.dimension).sum(axis=1)
        return z * math.sqrt(self.fine_step)

    def increment(self, slot: int) -> np.ndarray:
        return self.increments(slot, 1)[0]

    def refine(self, factor: int) -> "NoisePath":
        """The same Brownian path on a grid ``factor`` times finer.

        Only defined when ``coarsen`` is divisible by ``factor``, so that
        the finer path still sums back to this one.
        """
        if self.coarsen % factor:
            raise ValueError("cannot refine below the underlying fine grid")
        return NoisePath(
            self.seed,
            self.grid_step / factor,
            self.dimension,
            self.shift_offset * factor,
            self.coarsen // factor,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def shift(path, t: float):
    """``theta_t`` applied to a base sample (noise path or rotation phase)."""
    return path.shift(t)


def increment(path: NoisePath, slot: int) -> np.ndarray:
    return path.increment(slot)


# --- rotation bases -------------------------------------------------------


def rational_approximation(alpha: float, max_denominator: int = 1000, tol: float = 1e-12):
    """``p/q`` if ``alpha`` is numerically rational with a small denominator, else None."""
    frac = Fraction(alpha).limit_denominator(max_denominator)
    if abs(float(frac) - float(alpha)) <= tol:
        return frac
    return None


@dataclass(frozen=True)
class RotationSample:
    """A point ``phase`` of the circle under rotation by ``alpha`` per unit time."""

    alpha: float
    phase: float

    def shift(self, t: float) -> "RotationSample":
        return RotationSample(self.alpha, (self.phase + self.alpha * t) % 1.0)


@dataclass(frozen=True)
class BaseFlow:
    """Description of an ergodic base (Omega, P, theta).

    ``kind`` is one of ``"wiener"``, ``"rotation"`` or ``"product"``.
    """

    kind: str
    seed: int = 0
    grid_step: float = 1.0 / 256
    dimension: int = 1
    alpha: float = 0.0
    description: str = ""

    def __post_init__(self):
        if self.kind not in ("wiener", "rotation", "product"):
            raise ValueError(f"unknown base kind {self.kind!r}")

    def path(self, seed: int | None = None) -> NoisePath:
        return NoisePath(self.seed if seed is None else seed, self.grid_step, self.dimension)

    def component_count(self, k: int) -> int:
        """Number of ergodic components of ``theta^k``."""
        if self.kind == "wiener":
            return 1
        frac = rational_approximation(self.alpha)
        if frac is None:
            return 1
        return math.gcd(k, frac.denominator)


BaseSample = Union[NoisePath, RotationSample, tuple]


def _distinct_seeds(root: int, count: int) -> list[int]:
    seq = np.random.SeedSequence(root)
    seeds = [int(s.generate_state(1, np.uint64)[0]) for s in seq.spawn(count)]
    if len(set(seeds)) != count:  # pragma: no cover - 2^-64 collision odds
        raise RuntimeError("seed collision")
    return seeds


def _rotation_phases(flow: BaseFlow, k: int, count: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(count)
    frac = rational_approximation(flow.alpha)
    if frac is None:
        return u
    q = frac.denominator
    g = math.gcd(k, q)
    if g == 1:
        return u
    # component {phi : floor(q phi) mod g == 0}; its theta^i images cover the circle
    cells = rng.integers(0, q // g, size=count) * g
    return (cells + u) / q


def ergodic_component_sampler(flow: BaseFlow, k: int, count: int) -> list:
    """``count`` independent base samples from a single ergodic component of ``theta^k``.

    The Wiener base is totally ergodic, so any seeds will do.  For a rotation
    by ``p/q`` the power ``theta^k`` splits the circle into ``gcd(k, q)``
    invariant pieces and the samples are drawn from the piece containing 0.
    """
    if k < 1 or count < 1:
        raise ValueError("k and count must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([flow.seed, k]))
    if flow.kind == "wiener":
        return [flow.path(s) for s in _distinct_seeds(flow.seed, count)]
    phases = _rotation_phases(flow, k, count, rng)
    rotations = [RotationSample(flow.alpha, float(p)) for p in phases]
    if flow.kind == "rotation":
        return rotations
    paths = [flow.path(s) for s in _distinct_seeds(flow.seed, count)]
    return list(zip(paths, rotations))

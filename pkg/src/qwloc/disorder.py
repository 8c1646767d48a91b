"""
Random phase fields.

Each pair (site y, coin index tau) carries an i.i.d. phase in [0, 2 pi).  The
phase is a pure function of ``(seed, y, tau)``: a SplitMix64 hash of the key
is turned into a uniform variate and pushed through the inverse CDF of the
phase distribution.  Consequently the value at (y, tau) does not depend on the
shape of the sampled region nor on enumeration order, translations of a field
are exact, and independent realizations only need distinct seeds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .coins import canonical_position, coin_indices, displacement
from .lattice import BoxRegion, site_grid

__all__ = [
    "PhaseDistribution",
    "PhaseField",
    "hash_uniform",
    "derive_seed",
    "sample_field",
    "translate_field",
    "cycle_phase",
]

TWO_PI = 2 * math.pi
GRID_POINTS = 2**12

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix(h: NDArray[np.uint64]) -> NDArray[np.uint64]:
    with np.errstate(over="ignore"):
        h = h + _GOLDEN
        h = (h ^ (h >> np.uint64(30))) * _M1
        h = (h ^ (h >> np.uint64(27))) * _M2
        return h ^ (h >> np.uint64(31))


def _as_u64(a) -> NDArray[np.uint64]:
    # two's complement view keeps negative coordinates distinct
    return np.asarray(a, dtype=np.int64).astype(np.uint64)


def _seed_u64(seed) -> NDArray[np.uint64]:
    arr = np.asarray(seed)
    if arr.dtype == np.uint64:
        return arr
    # python ints may exceed int64; reduce them modulo 2**64 first
    return np.asarray(np.vectorize(lambda s: int(s) % 2**64, otypes=[object])(arr), dtype=np.uint64)


def _key_hash(seed, *parts) -> NDArray[np.uint64]:
    seed = _seed_u64(seed)
    shape = np.broadcast_shapes(seed.shape, *[np.shape(p) for p in parts])
    h = _splitmix(np.broadcast_to(seed, shape).copy())
    for p in parts:
        h = _splitmix(h ^ _as_u64(p))
    return h


def hash_uniform(seed, *parts) -> NDArray[np.float64]:
    """Uniform variates in [0, 1) keyed by ``seed`` and integer arrays ``parts``.

    ``seed`` may itself be an array (one seed per realization); all arguments
    broadcast together.
    """
    h = _key_hash(seed, *parts)
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53


def derive_seed(master: int, *indices: int) -> int:
    """Child seed for realization ``indices`` of a master seed."""
    return int(_key_hash(master, *[np.int64(i) for i in indices]))


@dataclass(frozen=True)
class PhaseDistribution:
    """Phase law on [0, 2 pi): uniform, or a density tabulated on a regular grid.

    A tabulated density is piecewise constant on ``len(density)`` cells and is
    sampled by inverting its piecewise linear CDF.
    """

    kind: str = "uniform"
    density: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind == "uniform":
            if self.density is not None:
                raise ValueError("uniform distribution takes no density table")
            return
        if self.kind != "tabulated":
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.density is None or len(self.density) < 2:
            raise ValueError("tabulated distribution needs a density table")
        dens = np.asarray(self.density, dtype=float)
        if not np.all(np.isfinite(dens)) or np.any(dens < 0):
            raise ValueError("density must be finite and nonnegative")
        total = dens.mean() * TWO_PI
        if abs(total - 1) > 1e-8:
            raise ValueError(f"density integrates to {total!r}, not 1")
        object.__setattr__(self, "density", tuple(float(v) for v in dens))

    @classmethod
    def uniform(cls) -> "PhaseDistribution":
        return cls()

    @classmethod
    def from_density(cls, f: Callable[[NDArray], NDArray], n: int = GRID_POINTS) -> "PhaseDistribution":
        """Tabulate ``f`` at cell midpoints and normalize."""
        mids = (np.arange(n) + 0.5) * TWO_PI / n
        vals = np.asarray(f(mids), dtype=float)
        if np.any(vals < 0):
            raise ValueError("density must be nonnegative")
        vals = vals / (vals.mean() * TWO_PI)
        return cls("tabulated", tuple(vals))

    @classmethod
    def bump(cls, center: float, width: float, n: int = GRID_POINTS) -> "PhaseDistribution":
        """Raised-cosine bump supported on the arc ``[center - width, center + width]``."""
        if not 0 < width < math.pi:
            raise ValueError("width must lie in (0, pi)")

        def f(theta):
            u = np.angle(np.exp(1j * (theta - center)))
            return np.where(np.abs(u) < width, 1 + np.cos(np.pi * u / width), 0.0)

        return cls.from_density(f, n)

    @property
    def sup_density(self) -> float:
        if self.kind == "uniform":
            return 1 / TWO_PI
        return max(self.density)

    def pdf(self, theta) -> NDArray[np.float64]:
        theta = np.mod(np.asarray(theta, dtype=float), TWO_PI)
        if self.kind == "uniform":
            return np.full(theta.shape, 1 / TWO_PI)
        dens = np.asarray(self.density)
        cell = np.minimum((theta / TWO_PI * len(dens)).astype(np.int64), len(dens) - 1)
        return dens[cell]

    def ppf(self, u) -> NDArray[np.float64]:
        """Inverse CDF on [0, 1) -> [0, 2 pi)."""
        u = np.asarray(u, dtype=float)
        if self.kind == "uniform":
            return u * TWO_PI
        dens = np.asarray(self.density)
        n = len(dens)
        edges = np.linspace(0, TWO_PI, n + 1)
        cdf = np.concatenate([[0.0], np.cumsum(dens) * (TWO_PI / n)])
        cdf /= cdf[-1]
        # flat CDF segments (zero density) are skipped by searching on the right
        k = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, n - 1)
        width = cdf[k + 1] - cdf[k]
        frac = np.where(width > 0, (u - cdf[k]) / np.where(width > 0, width, 1), 0.0)
        theta = edges[k] + frac * (TWO_PI / n)
        return np.mod(theta, TWO_PI)

    def to_dict(self) -> dict:
        if self.kind == "uniform":
            return {"kind": "uniform"}
        return {"kind": "tabulated", "density": list(self.density)}

    @classmethod
    def from_dict(cls, data: dict) -> "PhaseDistribution":
        kind = data.get("kind", "uniform")
        unknown = set(data) - {"kind", "density", "center", "width"}
        if unknown:
            raise ValueError(f"unknown distribution keys {sorted(unknown)}")
        if kind == "bump":
            return cls.bump(float(data["center"]), float(data["width"]))
        dens = data.get("density")
        return cls(kind, None if dens is None else tuple(dens))


@dataclass(frozen=True, eq=False)
class PhaseField:
    """Phases over a rectangular window of sites.

    ``phases[k, i_1, ..., i_d]`` is the phase of canonical coin position ``k``
    at site ``lo + (i_1, ..., i_d)``.
    """

    d: int
    lo: tuple[int, ...]
    phases: NDArray[np.float64]
    seed: int
    distribution: PhaseDistribution = field(default_factory=PhaseDistribution)
    shift: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(int(v) for v in self.lo))
        if self.shift is None:
            object.__setattr__(self, "shift", (0,) * self.d)
        if self.phases.shape[0] != 2 * self.d or self.phases.ndim != self.d + 1:
            raise ValueError(f"phase array of shape {self.phases.shape} does not fit d={self.d}")
        self.phases.setflags(write=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.phases.shape[1:]

    @property
    def hi(self) -> tuple[int, ...]:
        return tuple(l + n - 1 for l, n in zip(self.lo, self.shape))

    def contains(self, y) -> bool:
        y = np.asarray(y)
        return bool(np.all(y >= np.asarray(self.lo)) and np.all(y <= np.asarray(self.hi)))

    def covers(self, region: BoxRegion) -> bool:
        return bool(np.all(region.lo >= np.asarray(self.lo)) and np.all(region.lo + region.side - 1 <= np.asarray(self.hi)))

    def phase(self, y, tau: int) -> float:
        y = np.asarray(y, dtype=np.int64)
        if not self.contains(y):
            raise KeyError(f"site {tuple(y)} outside field window {self.lo}..{self.hi}")
        idx = (canonical_position(tau, self.d),) + tuple(y - np.asarray(self.lo))
        return float(self.phases[idx])

    def window(self, lo, shape) -> NDArray[np.float64]:
        """Phase sub-array for sites ``lo .. lo + shape - 1``."""
        off = np.asarray(lo) - np.asarray(self.lo)
        if np.any(off < 0) or np.any(off + np.asarray(shape) > np.asarray(self.shape)):
            raise KeyError(f"window {tuple(lo)} + {tuple(shape)} outside field {self.lo}..{self.hi}")
        sl = (slice(None),) + tuple(slice(o, o + n) for o, n in zip(off, shape))
        return self.phases[sl]

    def same_as(self, other: "PhaseField") -> bool:
        return self.lo == other.lo and self.d == other.d and np.array_equal(self.phases, other.phases)

    def to_csv(self, path) -> None:
        """Rows ``y_1..y_d, tau, theta`` in site-lexicographic then canonical coin order."""
        sites = site_grid(self.lo, self.shape).reshape(-1, self.d)
        taus = coin_indices(self.d)
        flat = self.phases.reshape(2 * self.d, -1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"y{i + 1}" for i in range(self.d)] + ["tau", "theta"])
            for j, y in enumerate(sites):
                for k, tau in enumerate(taus):
                    w.writerow([*map(int, y), tau, repr(float(flat[k, j]))])


def _region_window(region) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if isinstance(region, BoxRegion):
        return tuple(int(v) for v in region.lo), region.shape
    lo, shape = region
    return tuple(int(v) for v in lo), tuple(int(n) for n in shape)


def sample_field(region, dist: PhaseDistribution | None = None, seed: int = 0) -> PhaseField:
    """Draw the phases of ``region`` (a BoxRegion or ``(lo, shape)``) from ``seed``."""
    dist = dist or PhaseDistribution.uniform()
    lo, shape = _region_window(region)
    if not shape or any(n <= 0 for n in shape):
        raise ValueError(f"empty region {shape}")
    d = len(lo)
    sites = site_grid(lo, shape)
    k = np.arange(2 * d, dtype=np.int64).reshape((2 * d,) + (1,) * d)
    parts = [sites[..., i][None] for i in range(d)] + [k]
    u = hash_uniform(seed, *parts)
    theta = dist.ppf(u)
    return PhaseField(d=d, lo=lo, phases=np.ascontiguousarray(theta), seed=seed, distribution=dist)


def translate_field(fld: PhaseField, a) -> PhaseField:
    """Field ``omega'`` with ``omega'_y = omega_{y + a}`` (same phase array, moved window)."""
    a = tuple(int(v) for v in a)
    if len(a) != fld.d:
        raise ValueError(f"shift {a} does not match d={fld.d}")
    lo = tuple(l - s for l, s in zip(fld.lo, a))
    shift = tuple(s + t for s, t in zip(fld.shift, a))
    return PhaseField(d=fld.d, lo=lo, phases=fld.phases, seed=fld.seed, distribution=fld.distribution, shift=shift)


def cycle_phase(fld: PhaseField, x, cycle: Sequence[int]) -> float:
    """Sum of the phases met by the cycle path started in state ``(cycle[0], x)``.

    The path visits ``(pi^t(tau), x + r(pi(tau)) + ... + r(pi^t(tau)))`` for
    ``t = 0 .. m-1``; the result lies in ``[0, 2 pi m)``.
    """
    d = fld.d
    site = np.asarray(x, dtype=np.int64).copy()
    total = 0.0
    for t, tau in enumerate(cycle):
        if t > 0:
            site = site + displacement(tau, d)
        if not fld.contains(site):
            raise KeyError(f"cycle path leaves the field window at {tuple(site)}")
        total += fld.phase(site, tau)
    return total

"""
Coin-space combinatorics.

The coin space of a walk on Z^d is C^{2d} with basis labelled by the signed
indices ``+1, -1, +2, -2, ..., +d, -d``.  That order is the canonical one and
fixes the row/column layout of every coin matrix in this package: signed index
``tau`` lives at position ``2*(|tau|-1)`` if positive and ``2*(|tau|-1)+1`` if
negative.

Coin matrices are plain ``complex128`` NumPy arrays of shape (2d, 2d).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import permutations as _itertools_permutations
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "coin_indices",
    "canonical_position",
    "index_from_position",
    "displacement",
    "displacement_table",
    "Permutation",
    "CycleDecomposition",
    "decompose_cycles",
    "LocalizationReport",
    "check_localizing",
    "all_permutations",
    "permutation_matrix",
    "perturb_coin",
    "coin_distance",
    "is_unitary",
    "fourier_coin",
    "permutation_to_json",
    "permutation_from_json",
    "coin_to_json",
    "coin_from_json",
]


def _check_index(tau: int, d: int) -> None:
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    if tau == 0 or abs(tau) > d:
        raise ValueError(f"coin index {tau} out of range for d={d}")


def coin_indices(d: int) -> tuple[int, ...]:
    """Signed coin indices in canonical order (+1, -1, ..., +d, -d)."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    return tuple(s * k for k in range(1, d + 1) for s in (1, -1))


def canonical_position(tau: int, d: int) -> int:
    _check_index(tau, d)
    return 2 * (abs(tau) - 1) + (0 if tau > 0 else 1)


def index_from_position(pos: int, d: int) -> int:
    if not 0 <= pos < 2 * d:
        raise ValueError(f"position {pos} out of range for d={d}")
    k = pos // 2 + 1
    return k if pos % 2 == 0 else -k


def displacement(tau: int, d: int) -> NDArray[np.int64]:
    """Unit lattice step ``sign(tau) * e_|tau|`` taken by coin state ``tau``."""
    _check_index(tau, d)
    r = np.zeros(d, dtype=np.int64)
    r[abs(tau) - 1] = 1 if tau > 0 else -1
    return r


def displacement_table(d: int) -> NDArray[np.int64]:
    """Array of shape (2d, d); row k is the step of the k-th canonical index."""
    return np.array([displacement(t, d) for t in coin_indices(d)], dtype=np.int64)


@dataclass(frozen=True)
class Permutation:
    """A bijection of the signed index set, stored as images in canonical order.

    ``images[k]`` is the image of the k-th canonical index, e.g. for d=1 the
    swap is ``Permutation((-1, +1))``.
    """

    images: tuple[int, ...]

    def __post_init__(self):
        images = tuple(int(t) for t in self.images)
        object.__setattr__(self, "images", images)
        if len(images) == 0 or len(images) % 2:
            raise ValueError(f"need 2d images, got {len(images)}")
        d = len(images) // 2
        for t in images:
            _check_index(t, d)
        if sorted(images) != sorted(coin_indices(d)):
            raise ValueError(f"images {images} are not a bijection of the index set")

    @property
    def d(self) -> int:
        return len(self.images) // 2

    def __call__(self, tau: int) -> int:
        return self.images[canonical_position(tau, self.d)]

    @property
    def positions(self) -> NDArray[np.int64]:
        """Permutation acting on canonical positions 0..2d-1."""
        return np.array([canonical_position(t, self.d) for t in self.images], dtype=np.int64)

    def inverse(self) -> "Permutation":
        inv = [0] * (2 * self.d)
        for tau in coin_indices(self.d):
            inv[canonical_position(self(tau), self.d)] = tau
        return Permutation(tuple(inv))

    def fixed_points(self) -> tuple[int, ...]:
        return tuple(t for t in coin_indices(self.d) if self(t) == t)

    @classmethod
    def identity(cls, d: int) -> "Permutation":
        return cls(coin_indices(d))

    @classmethod
    def from_cycles(cls, d: int, cycles: Iterable[Sequence[int]]) -> "Permutation":
        """Build from cycle notation; ``[(1, 2, -1, -2)]`` maps +1->+2->-1->-2->+1."""
        images = {t: t for t in coin_indices(d)}
        seen: set[int] = set()
        for cyc in cycles:
            cyc = [int(t) for t in cyc]
            for t in cyc:
                _check_index(t, d)
                if t in seen:
                    raise ValueError(f"index {t} appears in more than one cycle")
                seen.add(t)
            for a, b in zip(cyc, cyc[1:] + cyc[:1]):
                images[a] = b
        return cls(tuple(images[t] for t in coin_indices(d)))

    def __str__(self) -> str:
        dec = decompose_cycles(self)
        if not dec.cycles:
            return "()"
        return "".join("(" + ",".join(f"{t:+d}" for t in c) + ")" for c in dec.cycles)


@dataclass(frozen=True)
class CycleDecomposition:
    """Disjoint cycles of a permutation; fixed points are listed separately."""

    d: int
    cycles: tuple[tuple[int, ...], ...]
    fixed_points: tuple[int, ...]

    @property
    def lengths(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.cycles)

    @property
    def count(self) -> int:
        return len(self.cycles)

    def to_permutation(self) -> Permutation:
        return Permutation.from_cycles(self.d, self.cycles)

    def cycle_of(self, tau: int) -> tuple[int, ...]:
        for c in self.cycles:
            if tau in c:
                return c
        raise KeyError(f"{tau} is a fixed point or not an index")


def decompose_cycles(pi: Permutation) -> CycleDecomposition:
    """Cycle decomposition with each cycle led by its smallest canonical index.

    Cycles are listed by ascending leader, so for a fixed-point-free
    permutation the first cycle starts at +1.
    """
    d = pi.d
    seen: set[int] = set()
    cycles = []
    fixed = []
    for tau in coin_indices(d):
        if tau in seen:
            continue
        if pi(tau) == tau:
            fixed.append(tau)
            seen.add(tau)
            continue
        cyc = [tau]
        seen.add(tau)
        nxt = pi(tau)
        while nxt != tau:
            cyc.append(nxt)
            seen.add(nxt)
            nxt = pi(nxt)
        cycles.append(tuple(cyc))
    return CycleDecomposition(d=d, cycles=tuple(cycles), fixed_points=tuple(fixed))


@dataclass(frozen=True)
class LocalizationReport:
    localizing: bool
    fixed_point_free: bool
    cycles: tuple[tuple[int, ...], ...]
    cycle_sums: tuple[tuple[int, ...], ...]

    def __bool__(self) -> bool:
        return self.localizing


def check_localizing(pi: Permutation) -> LocalizationReport:
    """Test the cycle condition: no fixed point and zero net step on every cycle.

    Returns the integer displacement sum of each cycle alongside the verdict;
    the report is truthy exactly when the permutation is localizing.
    """
    dec = decompose_cycles(pi)
    sums = tuple(
        tuple(int(v) for v in sum(displacement(t, pi.d) for t in cyc)) for cyc in dec.cycles
    )
    fpf = not dec.fixed_points
    ok = fpf and all(not any(s) for s in sums)
    return LocalizationReport(localizing=ok, fixed_point_free=fpf, cycles=dec.cycles, cycle_sums=sums)


def all_permutations(d: int, fixed_point_free: bool = False) -> list[Permutation]:
    perms = [Permutation(p) for p in _itertools_permutations(coin_indices(d))]
    if fixed_point_free:
        perms = [p for p in perms if not p.fixed_points()]
    return perms


def permutation_matrix(pi: Permutation) -> NDArray[np.complex128]:
    """Coin matrix with ``C[pos(pi(tau)), pos(tau)] = 1``."""
    n = 2 * pi.d
    C = np.zeros((n, n), dtype=np.complex128)
    C[pi.positions, np.arange(n)] = 1.0
    return C


def is_unitary(C: NDArray, tol: float = 1e-10) -> bool:
    C = np.asarray(C)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        return False
    return float(np.linalg.norm(C.conj().T @ C - np.eye(C.shape[0]), 2)) <= tol


def coin_distance(C1: NDArray, C2: NDArray) -> float:
    """Operator norm (largest singular value) of ``C1 - C2``."""
    C1 = np.asarray(C1)
    C2 = np.asarray(C2)
    if C1.shape != C2.shape:
        raise ValueError(f"dimension mismatch: {C1.shape} vs {C2.shape}")
    return float(np.linalg.norm(C1 - C2, 2))


def _random_hermitian(n: int, rng: np.random.Generator) -> NDArray[np.complex128]:
    G = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return (G + G.conj().T) / 2


def perturb_coin(C_pi: NDArray, delta: float, seed: int, return_difference: bool = False):
    """Unitary coin ``exp(A) @ C_pi`` at operator-norm distance ``delta`` from ``C_pi``.

    ``A = i t H`` with ``H`` a random Hermitian matrix drawn from ``seed``.  For
    anti-Hermitian ``A`` the distance ``||exp(A) - I||`` equals
    ``2 sin(t * max|eig H| / 2)``, so ``t`` is solved in closed form rather
    than by bisection.  The achieved distance lies in ``[0.9 delta, delta]``.

    With ``return_difference=True`` also returns ``C - C_pi`` evaluated from
    the spectral form, which stays accurate to full relative precision even
    when ``delta`` is far below machine epsilon times ``||C_pi||``.
    """
    C_pi = np.asarray(C_pi, dtype=np.complex128)
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    if delta >= 2:
        raise ValueError(f"delta={delta} >= 2 exceeds the diameter of the unitary group")
    n = C_pi.shape[0]
    if delta == 0:
        C = C_pi.copy()
        return (C, np.zeros_like(C)) if return_difference else C

    rng = np.random.default_rng(seed)
    H = _random_hermitian(n, rng)
    lam, V = np.linalg.eigh(H)
    # 2 sin(t*lmax/2) = target, solved for t
    target = delta * (1 - 1e-12)
    t = 2 * math.asin(target / 2) / np.max(np.abs(lam))
    theta = t * lam
    phase = np.exp(1j * theta)
    # e^{i theta} - 1 without cancellation
    phase_m1 = 2j * np.sin(theta / 2) * np.exp(1j * theta / 2)
    C = (V * phase) @ V.conj().T @ C_pi
    diff = (V * phase_m1) @ V.conj().T @ C_pi
    return (C, diff) if return_difference else C


def fourier_coin(d: int) -> NDArray[np.complex128]:
    """Discrete Fourier coin of size 2d; far from every permutation matrix."""
    n = 2 * d
    j, k = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return np.exp(2j * np.pi * j * k / n) / np.sqrt(n)


# -- serialization -----------------------------------------------------------

def permutation_to_json(pi: Permutation) -> str:
    return json.dumps(list(pi.images))


def permutation_from_json(text: str) -> Permutation:
    return Permutation(tuple(json.loads(text)))


def coin_to_json(C: NDArray) -> str:
    C = np.asarray(C, dtype=np.complex128)
    return json.dumps([[[float(z.real), float(z.imag)] for z in row] for row in C])


def coin_from_json(text: str) -> NDArray[np.complex128]:
    rows = json.loads(text)
    return np.array([[complex(re, im) for re, im in row] for row in rows], dtype=np.complex128)

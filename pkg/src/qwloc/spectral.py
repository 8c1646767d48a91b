"""
Spectra of the walk: exact block eigenvalues, numerical eigendecomposition,
arc-avoidance and spectral-distance statistics, and Fourier bands.

For a permutation coin the walk restricted to one invariant block of length m
satisfies ``U^m = exp(i theta) I`` with ``theta`` the sum of the phases met
along the block, so its spectrum is ``exp(i theta / m)`` times the m-th roots
of unity.  All statistics below are computed from this formula, without any
dense eigensolve.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .coins import Permutation, canonical_position, coin_indices, displacement_table, permutation_matrix
from .disorder import PhaseDistribution, PhaseField, derive_seed, hash_uniform
from .walk import CycleGeometry, InvariantBlock, WalkGrid, WalkOperatorSpec

__all__ = [
    "SpectrumResult",
    "DispersionResult",
    "ProbabilityEstimate",
    "wilson_interval",
    "block_spectrum_exact",
    "unitary_spectrum",
    "hausdorff_distance",
    "arc_contains",
    "arc_hit_probability_exact",
    "arc_avoidance_probability",
    "box_block_members",
    "box_exact_spectrum",
    "spectral_distance_statistics",
    "brillouin_grid",
    "fourier_coin_matrix",
    "dispersion",
    "flat_band_test",
    "trace_gradient",
    "FLAT_TOL",
    "NONFLAT_TOL",
]

FLAT_TOL = 1e-10
NONFLAT_TOL = 1e-3
TWO_PI = 2 * math.pi


@dataclass(frozen=True)
class SpectrumResult:
    eigenvalues: NDArray[np.complex128]
    residuals: NDArray[np.float64]
    source: str

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residuals)) if len(self.residuals) else 0.0

    @property
    def max_modulus_error(self) -> float:
        return float(np.max(np.abs(np.abs(self.eigenvalues) - 1))) if len(self.eigenvalues) else 0.0


def _block_matrix(phases: NDArray) -> NDArray[np.complex128]:
    """Walk on a block: member t -> member t+1 picking up that member's phase."""
    m = len(phases)
    B = np.zeros((m, m), dtype=np.complex128)
    for t in range(m):
        B[(t + 1) % m, t] = np.exp(1j * phases[(t + 1) % m])
    return B


def block_spectrum_exact(block: InvariantBlock, fld: PhaseField) -> SpectrumResult:
    """Closed-form spectrum of the walk with ``C_pi`` on one invariant block.

    Residuals are evaluated with the explicit eigenvectors
    ``v_{t+1} = exp(i omega_{t+1}) v_t / lambda``.
    """
    phases = np.array([fld.phase(site, tau) for tau, site in block.members])
    m = len(phases)
    theta = float(phases.sum())
    lam = np.exp(1j * (theta + TWO_PI * np.arange(m)) / m)
    B = _block_matrix(phases)
    res = np.empty(m)
    for k, l in enumerate(lam):
        v = np.empty(m, dtype=np.complex128)
        v[0] = 1.0
        for t in range(m - 1):
            v[t + 1] = np.exp(1j * phases[t + 1]) * v[t] / l
        v /= np.linalg.norm(v)
        res[k] = np.linalg.norm(B @ v - l * v)
    order = np.argsort(np.angle(lam), kind="stable")
    return SpectrumResult(lam[order], res[order], "exact-formula")


def unitary_spectrum(M, unitarity_tol: float = 1e-8) -> SpectrumResult:
    """Eigendecomposition of a unitary matrix, eigenvalues sorted by argument."""
    M = np.asarray(M.toarray() if hasattr(M, "toarray") else M, dtype=np.complex128)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"matrix must be square, got {M.shape}")
    n = M.shape[0]
    err = np.linalg.norm(M.conj().T @ M - np.eye(n), 2) if n else 0.0
    if err > unitarity_tol:
        raise ValueError(f"matrix is not unitary (||M*M - I|| = {err:.3g})")
    lam, V = np.linalg.eig(M)
    res = np.linalg.norm(M @ V - V * lam, axis=0) / np.linalg.norm(V, axis=0)
    order = np.argsort(np.angle(lam), kind="stable")
    return SpectrumResult(lam[order], res[order], "numerical")


def hausdorff_distance(a, b) -> float:
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    D = np.abs(a[:, None] - b[None, :])
    return float(max(D.min(axis=1).max(), D.min(axis=0).max()))


def wilson_interval(k: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n <= 0:
        raise ValueError("need at least one trial")
    p = k / n
    den = 1 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, mid - half), min(1.0, mid + half)


@dataclass(frozen=True)
class ProbabilityEstimate:
    estimate: float
    ci_low: float
    ci_high: float
    N: int
    seed: int
    params: dict

    def to_dict(self) -> dict:
        return {"params": self.params, "estimate": self.estimate, "ci_low": self.ci_low,
                "ci_high": self.ci_high, "N": self.N, "seed": self.seed}


def _wrap(angle):
    """Map to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(angle), TWO_PI)


def arc_contains(arc_center: float, arc_length: float, angles) -> NDArray[np.bool_]:
    """Closed arc membership, wrap-around at +-pi handled explicitly."""
    return np.abs(_wrap(np.asarray(angles) - arc_center)) <= arc_length / 2


def _block_phase_sums(coin_pos: NDArray, sites: NDArray, dist: PhaseDistribution, seeds: NDArray) -> NDArray:
    """Phase sums of blocks for many realizations.

    ``coin_pos`` and ``sites`` have shapes (B, m) and (B, m, d); ``seeds`` has
    shape (N,).  Phases are those the field of each seed assigns, so the
    result equals summing :func:`sample_field` values member by member.
    """
    d = sites.shape[-1]
    seeds = np.asarray(seeds, dtype=np.uint64)[:, None]
    out = np.zeros((len(seeds), coin_pos.shape[0]))
    for t in range(coin_pos.shape[1]):
        parts = [sites[None, :, t, i] for i in range(d)] + [coin_pos[None, :, t]]
        out += dist.ppf(hash_uniform(seeds, *parts))
    return out


def _periodic_cdf(cell_mass: NDArray, t: NDArray) -> NDArray:
    """Cumulative mass of a piecewise constant density on [0, 2 pi), extended by periodicity."""
    n = len(cell_mass)
    h = TWO_PI / n
    cum = np.concatenate([[0.0], np.cumsum(cell_mass)])
    t = np.asarray(t, dtype=float)
    turns = np.floor(t / TWO_PI)
    r = t - turns * TWO_PI
    k = np.minimum((r / h).astype(np.int64), n - 1)
    return turns * cum[-1] + cum[k] + cell_mass[k] * (r - k * h) / h


def arc_hit_probability_exact(dist: PhaseDistribution, m: int, arc_length: float, arc_center: float = 0.0,
                              n: int = 2**12) -> float:
    """Probability that a length-m block has an eigenvalue in the arc.

    The eigenvalue set depends only on ``theta mod 2 pi``; the arc is hit iff
    that angle lies in the arc of length ``m |A|`` centered at ``m c``.  The
    density of ``theta mod 2 pi`` is the m-fold circular convolution of the
    phase density, computed here on a grid by FFT.
    """
    if arc_length * m >= TWO_PI:
        raise ValueError("arc too long: need |A| < 2 pi / m")
    mids = (np.arange(n) + 0.5) * TWO_PI / n
    mass = dist.pdf(mids) * (TWO_PI / n)
    conv = np.clip(np.real(np.fft.ifft(np.fft.fft(mass) ** m)), 0, None)
    # with midpoint cells, convolution cell J is centered at (J + m/2) h
    h = TWO_PI / n
    offset = (m / 2 - 0.5) * h
    lo = m * arc_center - m * arc_length / 2 - offset
    hi = m * arc_center + m * arc_length / 2 - offset
    return float(_periodic_cdf(conv, hi) - _periodic_cdf(conv, lo))


def arc_avoidance_probability(perm: Permutation, cycle, dist: PhaseDistribution, arc_length: float,
                              N: int, seed: int, arc_center: float = 0.0, x=None) -> ProbabilityEstimate:
    """Monte Carlo probability that no block eigenvalue falls in the arc.

    ``cycle`` selects one cycle of ``perm`` (the block started at
    ``(cycle[0], x)``); ``cycle=None`` takes every block through site ``x``,
    whose phase sums are independent, so avoidance requires all of them to
    avoid the arc.
    """
    if N < 100:
        raise ValueError("need N >= 100 realizations")
    geo = CycleGeometry(perm)
    d = perm.d
    x = np.zeros(d, dtype=np.int64) if x is None else np.asarray(x, dtype=np.int64)
    if cycle is not None:
        cycle = tuple(cycle)
        if frozenset(cycle) not in {frozenset(c) for c in geo.cycles}:
            raise ValueError(f"{cycle} is not a cycle of {perm}")
        blocks = [geo.block_of(cycle[0], x)]
    else:
        seen = {}
        for tau in coin_indices(d):
            b = geo.block_of(tau, x)
            seen[b.anchor] = b
        blocks = [seen[k] for k in sorted(seen, key=lambda a: (a[1], canonical_position(a[0], d)))]
    m_max = max(b.m for b in blocks)
    if arc_length * m_max >= TWO_PI:
        raise ValueError(f"arc length {arc_length} too long for blocks of length {m_max}")
    seeds = np.array([derive_seed(seed, i) for i in range(N)], dtype=np.uint64)
    avoid = np.ones(N, dtype=bool)
    for b in blocks:
        pos = np.array([[canonical_position(t, d) for t, _ in b.members]])
        sites = np.array([[s for _, s in b.members]], dtype=np.int64)
        theta = _block_phase_sums(pos, sites, dist, seeds)[:, 0]
        ang = (theta[:, None] + TWO_PI * np.arange(b.m)[None, :]) / b.m
        avoid &= ~np.any(arc_contains(arc_center, arc_length, ang), axis=1)
    k = int(avoid.sum())
    lo, hi = wilson_interval(k, N)
    return ProbabilityEstimate(k / N, lo, hi, N, seed,
                               {"perm": list(perm.images), "cycle": None if cycle is None else list(cycle),
                                "arc_length": arc_length, "arc_center": arc_center, "x": x.tolist()})


def box_block_members(perm: Permutation, L: int, center=None):
    """Blocks visiting the box of radius L, grouped by cycle length.

    Returns a list of ``(coin_pos, sites)`` with shapes (B, m) and (B, m, d),
    one entry per distinct cycle length m, blocks in canonical order.
    """
    d = perm.d
    geo = CycleGeometry(perm)
    grid = WalkGrid(d, L, (0,) * d if center is None else center)
    box_sites = grid.sites.reshape(-1, d)
    keys = set()
    for k in range(2 * d):
        j = int(geo.cycle_of[k])
        for a in box_sites - geo.partial[k]:
            keys.add((tuple(int(v) for v in a), j))
    groups: dict[int, tuple[list, list]] = {}
    for a, j in sorted(keys):
        cyc = geo.cycles[j]
        pos, sites = groups.setdefault(len(cyc), ([], []))
        pos.append([canonical_position(t, d) for t in cyc])
        sites.append(np.asarray(a) + geo.cycle_partials[j])
    return [(np.array(p, dtype=np.int64), np.array(q, dtype=np.int64)) for _, (p, q) in sorted(groups.items())]


def box_exact_spectrum(spec: WalkOperatorSpec) -> NDArray[np.complex128]:
    """Spectrum of a closed-box walk with the permutation coin, from block phase sums.

    Basis blocks are contiguous and start at their cycle leader, so each
    block's phase sum is a segment sum of the member phases.
    """
    if spec.outer is None or spec.c_pi is None or not np.array_equal(spec.coin, spec.c_pi):
        raise ValueError("exact block spectra need a closed box with the permutation coin everywhere")
    geo = spec.geometry
    basis = spec.subspace_indices("outer")
    g = spec.grid
    phases = spec.field.window(g.lo, g.site_shape).reshape(-1)
    theta_state = phases[basis]
    coin_pos = basis // int(np.prod(g.site_shape))
    starts = np.flatnonzero(geo.step[coin_pos] == 0)
    sums = np.add.reduceat(theta_state, starts)
    ms = geo.lengths[geo.cycle_of[coin_pos[starts]]]
    out = [np.exp(1j * (t + TWO_PI * np.arange(m)) / m) for t, m in zip(sums, ms)]
    return np.concatenate(out)


def _min_distance_to_blocks(z: complex, theta: NDArray, m: int) -> NDArray:
    """Distance from z to ``exp(i(theta + 2 pi k)/m)``, minimized over k and blocks."""
    rho = abs(z)
    phi = math.atan2(z.imag, z.real)
    step = TWO_PI / m
    g = np.mod(theta / m - phi + step / 2, step) - step / 2
    dist2 = rho * rho + 1 - 2 * rho * np.cos(g)
    return np.sqrt(np.maximum(dist2, 0)).min(axis=-1)


def spectral_distance_statistics(z: complex, eta: float, L: int, perm: Permutation,
                                 dist: PhaseDistribution | None, N: int, seed: int,
                                 center=None, chunk: int = 500, return_distances: bool = False):
    """Monte Carlo estimate of ``P(dist(z, spec U^{Lambda_L}(C_pi)) <= eta)``.

    Realization i uses the phase field of ``derive_seed(seed, i)``; the
    spectrum is assembled block by block from the exact formula.
    ``eta`` may be a sequence, in which case a list of estimates over the
    same realizations is returned.
    """
    dist = dist or PhaseDistribution.uniform()
    z = complex(z)
    if z == 0 or not np.isfinite(abs(z)):
        raise ValueError(f"z={z} not allowed")
    if abs(abs(z) - 1) < 1e-12:
        raise ValueError("z must lie off the unit circle")
    etas = np.atleast_1d(np.asarray(eta, dtype=float))
    if np.any(etas <= 0):
        raise ValueError("eta must be positive")
    groups = box_block_members(perm, L, center)
    dmin = np.empty(N)
    for start in range(0, N, chunk):
        idx = range(start, min(N, start + chunk))
        seeds = np.array([derive_seed(seed, i) for i in idx], dtype=np.uint64)
        best = np.full(len(seeds), np.inf)
        for pos, sites in groups:
            theta = _block_phase_sums(pos, sites, dist, seeds)
            best = np.minimum(best, _min_distance_to_blocks(z, theta, pos.shape[1]))
        dmin[start:start + len(seeds)] = best
    results = []
    for e in etas:
        k = int(np.sum(dmin <= e))
        lo, hi = wilson_interval(k, N)
        results.append(ProbabilityEstimate(k / N, lo, hi, N, seed,
                                           {"z": [z.real, z.imag], "eta": float(e), "L": L,
                                            "perm": list(perm.images)}))
    out = results if np.ndim(eta) else results[0]
    return (out, dmin) if return_distances else out


# -- Fourier bands ------------------------------------------------------------

@dataclass(frozen=True)
class DispersionResult:
    kgrid: NDArray[np.float64]
    bands: NDArray[np.complex128]
    flatness: NDArray[np.float64]
    unitarity_error: float

    def to_csv(self, path) -> None:
        """Rows ``k_1..k_d, band, re, im``."""
        d = self.kgrid.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"k{i + 1}" for i in range(d)] + ["band", "re", "im"])
            for k, row in zip(self.kgrid, self.bands):
                for b, lam in enumerate(row):
                    w.writerow([*map(repr, map(float, k)), b, repr(lam.real), repr(lam.imag)])


def brillouin_grid(d: int, n: int) -> NDArray[np.float64]:
    """Regular grid of ``n^d`` points ``2 pi j / n`` on the torus."""
    ax = TWO_PI * np.arange(n) / n
    return np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)


def fourier_coin_matrix(C, k) -> NDArray[np.complex128]:
    """``C_hat(k) = Phi(k) C`` with ``Phi(k) = diag(exp(-i k . r(tau)))``; batched over k."""
    C = np.asarray(C, dtype=np.complex128)
    d = C.shape[0] // 2
    k = np.atleast_2d(np.asarray(k, dtype=float))
    phase = np.exp(-1j * k @ displacement_table(d).T)  # (K, 2d)
    return phase[:, :, None] * C[None]


def dispersion(C, kgrid) -> DispersionResult:
    """Eigenvalues of ``C_hat(k)`` per grid point and the variation of each band.

    Bands are matched by sorting eigenvalue arguments, measured from a branch
    cut placed in the widest gap of all eigenvalues seen on the grid.
    Flatness of a band is ``max_k |lambda_b(k) - lambda_b(k_0)|``.
    """
    kgrid = np.atleast_2d(np.asarray(kgrid, dtype=float))
    if kgrid.size == 0:
        raise ValueError("empty k grid")
    Ck = fourier_coin_matrix(C, kgrid)
    n = Ck.shape[-1]
    uerr = float(np.max(np.abs(np.conj(np.swapaxes(Ck, 1, 2)) @ Ck - np.eye(n))))
    lam = np.linalg.eigvals(Ck)
    ang = np.sort(np.mod(np.angle(lam).ravel(), TWO_PI))
    gaps = np.diff(np.concatenate([ang, [ang[0] + TWO_PI]]))
    g = int(np.argmax(gaps))
    cut = ang[g] + gaps[g] / 2
    rel = np.mod(np.angle(lam) - cut, TWO_PI)
    order = np.argsort(rel, axis=1, kind="stable")
    bands = np.take_along_axis(lam, order, axis=1)
    flat = np.max(np.abs(bands - bands[0:1]), axis=0)
    return DispersionResult(kgrid, bands, flat, uerr)


def _permutation_of_matrix(C) -> Permutation:
    C = np.asarray(C)
    n = C.shape[0]
    if not (np.all((C == 0) | (C == 1)) and np.all(C.sum(axis=0) == 1) and np.all(C.sum(axis=1) == 1)):
        raise ValueError("flat-band test is only two-sided for permutation coins")
    d = n // 2
    idx = coin_indices(d)
    return Permutation(tuple(idx[int(np.argmax(C[:, k]))] for k in range(n)))


def flat_band_test(coin, n: int = 16) -> bool:
    """True iff every band of the permutation coin is flat on an ``n^d`` grid.

    Accepts a Permutation or a 0/1 permutation matrix.  Band variations
    between the flat and non-flat thresholds raise instead of classifying.
    """
    perm = coin if isinstance(coin, Permutation) else _permutation_of_matrix(coin)
    res = dispersion(permutation_matrix(perm), brillouin_grid(perm.d, n))
    worst = float(res.flatness.max())
    if worst <= FLAT_TOL:
        return True
    if worst >= NONFLAT_TOL:
        return False
    raise RuntimeError(f"band variation {worst:.3g} falls between flat and non-flat thresholds")


def trace_gradient(C, k) -> NDArray[np.complex128]:
    """``d/dk_j Tr C_hat(k) = -i e^{-i k_j} C[+j,+j] + i e^{i k_j} C[-j,-j]``."""
    C = np.asarray(C, dtype=np.complex128)
    d = C.shape[0] // 2
    k = np.asarray(k, dtype=float)
    diag = np.diag(C)
    plus = diag[0::2]
    minus = diag[1::2]
    return -1j * np.exp(-1j * k[..., :d]) * plus + 1j * np.exp(1j * k[..., :d]) * minus

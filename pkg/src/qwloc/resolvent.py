"""
Resolvents, geometric resolvent identities and fractional moments.

All matrices act on the basis of a spec's outer box subspace (see
:mod:`qwloc.walk`).  Solves use a sparse LU factorization of ``U - z`` with
iterative refinement when needed; every solution is accepted only if
its residual is at most ``1e-9 * ||w||``.

Random realizations share the phase-free operator ``S(C (x) I)``: the walk of
realization ``omega`` is ``diag(exp(i omega)) S``, so a realization costs one
row scaling plus one factorization.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
import scipy.sparse.linalg as spla
from scipy.sparse.linalg import splu

from .coins import Permutation, coin_distance, perturb_coin, permutation_matrix
from .disorder import PhaseDistribution, derive_seed, hash_uniform, sample_field
from .lattice import BoxRegion, sup_norm
from .spectral import _min_distance_to_blocks
from .walk import WalkOperatorSpec, materialize

__all__ = [
    "RESIDUAL_RTOL",
    "ResolventSolveError",
    "ResolventQuery",
    "ShiftedSolver",
    "resolvent_element",
    "DecoupledResolvent",
    "decoupled_resolvent",
    "IdentityReport",
    "verify_geometric_identity",
    "FMEnsemble",
    "FMEstimate",
    "fractional_moment_mc",
    "pairs_along_axis",
    "FMFitResult",
    "decay_fit",
    "distance_profile",
    "ScanConfig",
    "ScanRow",
    "ScanResult",
    "finite_volume_bound_scan",
]

log = logging.getLogger(__name__)

RESIDUAL_RTOL = 1e-9
Z_GUARD = 1e-12


class ResolventSolveError(RuntimeError):
    """Factorization failed or the refined residual stayed above tolerance."""


def _check_z(z: complex) -> complex:
    z = complex(z)
    if abs(abs(z) - 1) <= Z_GUARD:
        raise ValueError(f"|z| = {abs(z)} lies on the unit circle")
    return z


@dataclass(frozen=True)
class ResolventQuery:
    """Spectral parameter with one source state and a list of target states.

    States are ``(tau, site)`` pairs; ``|z|`` must lie in (1/2, 2) off the circle.
    """

    z: complex
    source: tuple
    targets: tuple

    def __post_init__(self):
        z = _check_z(self.z)
        if not 0.5 < abs(z) < 2:
            raise ValueError(f"|z| = {abs(z)} outside (1/2, 2)")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "source", _state(self.source))
        object.__setattr__(self, "targets", tuple(_state(t) for t in self.targets))


def _state(s) -> tuple[int, tuple[int, ...]]:
    tau, x = s
    return int(tau), tuple(int(v) for v in x)


class ShiftedSolver:
    """Factorization of ``M - z I`` with refined, residual-checked solves."""

    def __init__(self, M, z: complex, rtol: float = RESIDUAL_RTOL, refine: int = 2):
        self.z = _check_z(z)
        A = sp.csc_matrix(M, dtype=np.complex128)
        self.A = A - self.z * sp.identity(A.shape[0], dtype=np.complex128, format="csc")
        self.rtol = rtol
        self.refine = refine
        try:
            self.lu = splu(self.A)
        except RuntimeError as exc:
            raise ResolventSolveError(f"factorization failed at z={z}: {exc}") from exc

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def solve(self, B) -> NDArray[np.complex128]:
        B = np.asarray(B, dtype=np.complex128)
        X = self.lu.solve(B)
        # refine only while some column misses the residual tolerance
        for k in range(self.refine + 1):
            res = B - self.A @ X
            rn = np.linalg.norm(res.reshape(self.n, -1), axis=0)
            xn = np.linalg.norm(X.reshape(self.n, -1), axis=0)
            if np.all(np.isfinite(X)) and np.all(rn <= self.rtol * xn):
                return X
            if k < self.refine:
                X = X + self.lu.solve(res)
        raise ResolventSolveError(f"residual {np.nanmax(rn):.3e} above tolerance at z={self.z}")

    def columns(self, idx) -> NDArray[np.complex128]:
        """Columns ``R e_j`` for positions ``idx``, shape (n, len(idx))."""
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        B = np.zeros((self.n, len(idx)), dtype=np.complex128)
        B[idx, np.arange(len(idx))] = 1.0
        return self.solve(B)


def resolvent_element(M, z: complex, source: int, target):
    """``<target| (M - z)^{-1} |source>`` for basis positions of a materialized operator.

    ``target`` may be an int or an array of positions.
    """
    w = ShiftedSolver(M, z).columns([source])[:, 0]
    return w[target]


# -- decoupled resolvent --------------------------------------------------------

class DecoupledResolvent:
    """``(U_box (+) U_rest - z)^{-1}`` computed as an explicit direct sum.

    Parameters
    ----------
    M : sparse matrix
        Decoupled operator on the outer basis; must have no entry coupling
        ``inner`` to its complement.
    inner : bool array
        Membership of each basis position in the box subspace.
    """

    def __init__(self, M, inner: NDArray[np.bool_], z: complex):
        M = sp.csr_matrix(M)
        inner = np.asarray(inner, dtype=bool)
        self.P = np.flatnonzero(inner)
        self.Q = np.flatnonzero(~inner)
        cross = M[self.P][:, self.Q]
        cross2 = M[self.Q][:, self.P]
        if cross.count_nonzero() or cross2.count_nonzero():
            raise ValueError("operator couples the box subspace to its complement")
        self.n = M.shape[0]
        self.z = complex(z)
        self.inner = ShiftedSolver(M[self.P][:, self.P], z) if len(self.P) else None
        self.outer = ShiftedSolver(M[self.Q][:, self.Q], z) if len(self.Q) else None

    @property
    def dims(self) -> tuple[int, int]:
        return len(self.P), len(self.Q)

    def solve(self, B) -> NDArray[np.complex128]:
        B = np.asarray(B, dtype=np.complex128)
        X = np.zeros_like(B)
        if self.inner is not None:
            X[self.P] = self.inner.solve(B[self.P])
        if self.outer is not None:
            X[self.Q] = self.outer.solve(B[self.Q])
        return X

    def columns(self, idx) -> NDArray[np.complex128]:
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        B = np.zeros((self.n, len(idx)), dtype=np.complex128)
        B[idx, np.arange(len(idx))] = 1.0
        return self.solve(B)

    def matrix(self) -> NDArray[np.complex128]:
        return self.columns(np.arange(self.n))


def _decoupled_pieces(spec: WalkOperatorSpec, L: int):
    dec = spec.with_collars(spec.collars + (L,))
    M, basis = materialize(dec)
    inner = np.isin(basis, spec.subspace_indices(("box", L)))
    return M, basis, inner


def decoupled_resolvent(spec: WalkOperatorSpec, L: int, z: complex) -> DecoupledResolvent:
    """Decoupled resolvent ``R^L`` on the outer basis of ``spec``.

    The walk with an extra collar at ``L`` is split into its box and
    complement restrictions, each factorized separately.
    """
    if spec.outer is None:
        raise ValueError("decoupling needs a spec with an outer box")
    M, _, inner = _decoupled_pieces(spec, L)
    return DecoupledResolvent(M, inner, z)


# -- geometric resolvent identities ---------------------------------------------

@dataclass(frozen=True)
class IdentityReport:
    """Max-norm deviations of the resolvent identities on probed columns."""

    L: int
    z: complex
    single: float
    double: float
    expansion: float
    vanishing: float
    n_columns: int
    n_far: int
    dims: tuple[int, int]

    @property
    def worst(self) -> float:
        return max(self.single, self.double, self.expansion)

    def to_dict(self) -> dict:
        return {"L": self.L, "z": [self.z.real, self.z.imag], "single": self.single, "double": self.double,
                "expansion": self.expansion, "vanishing": self.vanishing, "n_columns": self.n_columns,
                "n_far": self.n_far, "dims": list(self.dims)}


def verify_geometric_identity(L: int, coin, perm: Permutation, fld, z, outer: int,
                              center=None, n_random: int = 16, seed: int = 0):
    """Check the single and double resolvent identities and the far-element expansion.

    With ``R`` the resolvent of the walk on the outer box, ``R^L`` the
    decoupled resolvent at radius L and ``T^L = U - U^L``:

    * single: ``R = R^L - R^L T^L R``
    * double: ``R = R^L - R^L T^L R^{L+3} + R^L T^L R T^{L+3} R^{L+3}``
    * expansion: ``<tau,0|R|sigma,y> = <tau,0|R^L T^L R T^{L+3} R^{L+3}|sigma,y>``
      for ``|y| >= L+5``; the two dropped terms are reported in ``vanishing``
      and must be exactly zero.

    Columns probed are every basis state at ``|y| = L+5`` plus ``n_random``
    random ones; deviations are maxima over all rows.  ``z`` may be a list,
    in which case a list of reports is returned and the matrices are shared.
    """
    zs = [_check_z(v) for v in np.atleast_1d(z)]
    if outer < L + 5:
        raise ValueError(f"outer radius {outer} cannot host sites at distance L+5={L + 5}")
    spec = WalkOperatorSpec(coin, fld, perm, outer=outer, center=center)
    U, basis = materialize(spec)
    UL, b1, inL = _decoupled_pieces(spec, L)
    UL3, b2, inL3 = _decoupled_pieces(spec, L + 3)
    assert np.array_equal(basis, b1) and np.array_equal(basis, b2)
    TL = sp.csr_matrix(U - UL)
    TL.eliminate_zeros()
    TL3 = sp.csr_matrix(U - UL3)
    TL3.eliminate_zeros()

    coin_pos, sites = spec.state_labels(basis)
    radius = sup_norm(sites - np.asarray(spec.center), axis=-1)
    far_cols = np.flatnonzero(radius == L + 5)
    rng = np.random.default_rng(seed)
    extra = rng.choice(len(basis), size=min(n_random, len(basis)), replace=False)
    cols = np.unique(np.concatenate([far_cols, extra]))
    far = radius[cols] >= L + 5
    rows0 = np.flatnonzero(radius == 0)
    sub = np.ix_(rows0, np.flatnonzero(far))

    reports = []
    for zz in zs:
        R = ShiftedSolver(U, zz)
        RL = DecoupledResolvent(UL, inL, zz)
        RL3 = DecoupledResolvent(UL3, inL3, zz)
        Rc = R.columns(cols)
        RLc = RL.columns(cols)
        single = np.max(np.abs(Rc - (RLc - RL.solve(TL @ Rc))))
        X = RL3.columns(cols)
        A = RL.solve(TL @ X)  # R^L T^L R^{L+3}
        V = RL.solve(TL @ R.solve(TL3 @ X))  # R^L T^L R T^{L+3} R^{L+3}
        double = np.max(np.abs(Rc - (RLc - A + V)))
        expansion = float(np.max(np.abs(Rc[sub] - V[sub]))) if far.any() else float("nan")
        vanishing = float(max(np.max(np.abs(RLc[sub]), initial=0.0), np.max(np.abs(A[sub]), initial=0.0)))
        reports.append(IdentityReport(L=L, z=zz, single=float(single), double=float(double), expansion=expansion,
                                      vanishing=vanishing, n_columns=len(cols), n_far=int(far.sum()),
                                      dims=RL.dims))
    return reports if np.ndim(z) else reports[0]


# -- fractional moments ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FMEnsemble:
    """Fixed coin, random phases: the walk on the box subspace of radius ``radius``.

    The collar at ``radius`` closes the box, so with a small radius this is the
    finite-volume operator and with a large one the desk-scale stand-in for
    the whole lattice.
    """

    coin: NDArray[np.complex128]
    perm: Permutation
    dist: PhaseDistribution
    radius: int
    center: tuple[int, ...] | None = None
    coin_difference: NDArray[np.complex128] | None = None

    def __post_init__(self):
        d = self.perm.d
        object.__setattr__(self, "coin", np.asarray(self.coin, dtype=np.complex128))
        if self.coin_difference is None:
            object.__setattr__(self, "coin_difference", self.coin - permutation_matrix(self.perm))
        c = (0,) * d if self.center is None else tuple(int(v) for v in self.center)
        object.__setattr__(self, "center", c)

    @property
    def d(self) -> int:
        return self.perm.d

    def template(self) -> "_Template":
        return _Template(self)

    def field(self, seed: int):
        return sample_field(BoxRegion(self.radius + 1, self.center), self.dist, seed)

    def spec(self, seed: int) -> WalkOperatorSpec:
        return WalkOperatorSpec(self.coin, self.field(seed), self.perm, outer=self.radius, center=self.center)


class _Template:
    """Phase-free operator pieces shared by every realization of an ensemble."""

    def __init__(self, ens: FMEnsemble):
        zero = sample_field(BoxRegion(ens.radius + 1, ens.center), PhaseDistribution.uniform(), 0)
        spec = WalkOperatorSpec(ens.coin, zero, ens.perm, outer=ens.radius, center=ens.center)
        self.ens = ens
        self.spec = spec
        self.basis = spec.subspace_indices("outer")
        self.coin_pos, self.sites = spec.state_labels(self.basis)
        self.position = {int(b): i for i, b in enumerate(self.basis)}
        c_pi = spec.c_pi
        full = spec.coin_field_matrix(ens.coin, c_pi, phases=False)
        self.S = sp.csr_matrix(full[self.basis][:, self.basis])
        self.S.eliminate_zeros()
        self.S0 = sp.csr_matrix(spec.coin_field_matrix(c_pi, c_pi, phases=False)[self.basis][:, self.basis])
        self.S0.eliminate_zeros()
        self._row_counts = np.diff(self.S.indptr)
        self._row_counts0 = np.diff(self.S0.indptr)
        # blocks are contiguous in basis order, each starting at its leader
        geo = spec.geometry
        self.block_start = np.flatnonzero(geo.step[self.coin_pos] == 0)
        self.block_m = geo.lengths[geo.cycle_of[self.coin_pos[self.block_start]]]

    def pos(self, state) -> int:
        tau, x = _state(state)
        return self.position[self.spec.grid.flat_index(tau, x)]

    def phases(self, seed: int) -> NDArray[np.float64]:
        parts = [self.sites[:, i] for i in range(self.ens.d)] + [self.coin_pos]
        return self.ens.dist.ppf(hash_uniform(seed, *parts))

    def operator(self, seed: int, S=None) -> sp.csr_matrix:
        S = self.S if S is None else S
        e = np.exp(1j * self.phases(seed))
        M = S.copy()
        M.data = M.data * np.repeat(e, np.diff(S.indptr))
        return M

    def block_distance(self, theta: NDArray, z: complex) -> float:
        """``dist(z, sigma(U_omega(C_pi)))`` from exact block spectra."""
        sums = np.add.reduceat(theta, self.block_start)
        best = np.inf
        for m in np.unique(self.block_m):
            sel = self.block_m == m
            best = min(best, float(np.min(_min_distance_to_blocks(z, sums[sel], int(m)))))
        return best


@dataclass
class FMEstimate:
    """Fractional-moment statistics ``E|<target|R|source>|^s`` per (z, pair).

    ``mean`` and ``stderr`` have shape (n_z, n_pairs); ``samples`` keeps the
    raw magnitudes ``|element|^s`` of accepted realizations, shape
    (N_ok, n_z, n_pairs).
    """

    s: float
    z: tuple[complex, ...]
    pairs: tuple
    mean: NDArray[np.float64]
    stderr: NDArray[np.float64]
    N: int
    seed: int
    n_failed: int
    samples: NDArray[np.float64] | None = None
    params: dict = field(default_factory=dict)

    @property
    def worst(self) -> NDArray[np.float64]:
        """Max over z per pair."""
        return self.mean.max(axis=0)

    def to_dict(self, include_samples: bool = False) -> dict:
        out = {
            "s": self.s,
            "z": [[c.real, c.imag] for c in self.z],
            "pairs": [{"target": {"tau": t[0], "x": list(t[1])}, "source": {"tau": s[0], "x": list(s[1])}}
                      for t, s in self.pairs],
            "mean": self.mean.tolist(),
            "stderr": self.stderr.tolist(),
            "N": self.N,
            "seed": self.seed,
            "n_failed": self.n_failed,
            "failure_rate": self.n_failed / self.N if self.N else 0.0,
            "params": self.params,
        }
        if include_samples and self.samples is not None:
            out["samples"] = self.samples.tolist()
        return out

    def to_json(self, path, include_samples: bool = False) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(include_samples), fh, indent=1)

    def samples_to_csv(self, path) -> None:
        """Rows ``realization, z_index, pair_index, value`` for every accepted sample."""
        if self.samples is None:
            raise ValueError("estimate was computed without keeping samples")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["realization", "z_index", "pair_index", "value"])
            for i, blk in enumerate(self.samples):
                for a in range(blk.shape[0]):
                    for b in range(blk.shape[1]):
                        w.writerow([i, a, b, repr(float(blk[a, b]))])


def pairs_along_axis(d: int, distances: Sequence[int], center=None, source_tau=None, target_tau=None):
    """Pairs ``((tau, center + r e_1), (sigma, center))`` for every r and coin choice.

    By default all coin indices are used on both ends, giving ``(2d)^2`` pairs
    per distance.
    """
    from .coins import coin_indices

    c = np.zeros(d, dtype=np.int64) if center is None else np.asarray(center, dtype=np.int64)
    taus = coin_indices(d) if target_tau is None else tuple(target_tau)
    sigmas = coin_indices(d) if source_tau is None else tuple(source_tau)
    out = []
    for r in distances:
        x = c.copy()
        x[0] += int(r)
        for tau in taus:
            for sigma in sigmas:
                out.append(((tau, tuple(int(v) for v in x)), (sigma, tuple(int(v) for v in c))))
    return out


def _pairwise_mean(a: NDArray, axis: int = 0) -> NDArray:
    # contiguous along the reduced axis so numpy uses pairwise summation
    b = np.moveaxis(a, axis, -1).copy()
    return b.sum(axis=-1) / b.shape[-1]


def fractional_moment_mc(ensemble: FMEnsemble, s: float, z, pairs, N: int, seed: int,
                         workers: int = 1, keep_samples: bool = True, max_failure_rate: float = 0.01,
                         series: bool = False) -> FMEstimate:
    """Monte Carlo estimate of ``E|<tau,x|(U_omega - z)^{-1}|sigma,y>|^s``.

    Realization ``i`` uses phases from ``derive_seed(seed, i)``; results do not
    depend on ``workers``.  Realizations whose solve fails are discarded and
    logged; more than ``max_failure_rate`` of them aborts.

    ``series=True`` expands around ``C_pi`` (see :func:`_series_columns`),
    which resolves elements far below machine precision relative to ``||R||``.

    ``pairs`` is a list of ``(target, source)`` states, each ``(tau, site)``.
    """
    if not 0 < s < 1:
        raise ValueError(f"s={s} outside (0, 1)")
    if N < 100:
        raise ValueError(f"N={N} < 100 realizations")
    zs = tuple(_check_z(v) for v in np.atleast_1d(z))
    tmpl = ensemble.template()
    pairs = [(_state(t), _state(src)) for t, src in pairs]
    try:
        tpos = np.array([tmpl.pos(t) for t, _ in pairs])
        spos = np.array([tmpl.pos(src) for _, src in pairs])
    except KeyError as exc:
        raise ValueError(f"pair state outside the ensemble box: {exc}") from exc
    sources, sidx = np.unique(spos, return_inverse=True)
    delta_S = None
    if series:
        diff = ensemble.coin_difference
        delta_S = sp.csr_matrix(
            tmpl.spec.coin_field_matrix(diff, np.zeros_like(diff), phases=False)[tmpl.basis][:, tmpl.basis])
        delta_S.eliminate_zeros()

    def one(i: int):
        rs = derive_seed(seed, i)
        out = np.empty((len(zs), len(pairs)))
        try:
            if series:
                theta = tmpl.phases(rs)
                for a, zz in enumerate(zs):
                    W = _series_columns(tmpl, theta, delta_S, zz, sources)
                    out[a] = np.abs(W[tpos, sidx]) ** s
            else:
                M = tmpl.operator(rs)
                for a, zz in enumerate(zs):
                    W = ShiftedSolver(M, zz).columns(sources)
                    out[a] = np.abs(W[tpos, sidx]) ** s
        except ResolventSolveError as exc:
            log.warning("realization %d discarded: %s", i, exc)
            return None
        return out

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, range(N)))
    else:
        results = [one(i) for i in range(N)]
    ok = [r for r in results if r is not None]
    n_failed = N - len(ok)
    if n_failed > max_failure_rate * N:
        raise ResolventSolveError(f"{n_failed} of {N} realizations failed")
    samples = np.stack(ok)
    mean = _pairwise_mean(samples)
    stderr = np.std(samples, axis=0, ddof=1) / math.sqrt(len(ok))
    params = {"radius": ensemble.radius, "center": list(ensemble.center), "d": ensemble.d,
              "perm": list(ensemble.perm.images), "distribution": ensemble.dist.to_dict(),
              "coin_distance": coin_distance(ensemble.coin, permutation_matrix(ensemble.perm)),
              "series": series}
    return FMEstimate(s=s, z=zs, pairs=tuple(pairs), mean=mean, stderr=stderr, N=N, seed=seed,
                      n_failed=n_failed, samples=samples if keep_samples else None, params=params)


SERIES_MAX_RATIO = 0.5
SERIES_MAX_TERMS = 200


def _series_columns(tmpl: _Template, theta, delta_S, z: complex, sources) -> NDArray[np.complex128]:
    """Resolvent columns from the Neumann series around the permutation coin.

    ``R = sum_k (-R0 dU)^k R0`` with ``R0`` the block-diagonal resolvent at
    ``C_pi`` and ``dU = D (S(C) - S(C_pi))`` assembled from the coin
    difference directly.  Used when ``q = ||dU|| / dist(z, sigma(U0)) <= 1/2``;
    otherwise the plain factorization of ``U - z`` is used.
    """
    e = np.exp(1j * theta)
    U0 = tmpl.S0.copy()
    U0.data = U0.data * np.repeat(e, np.diff(tmpl.S0.indptr))
    dU = delta_S.copy()
    dU.data = dU.data * np.repeat(e, np.diff(delta_S.indptr))
    dist = tmpl.block_distance(theta, z)
    # Schur bound ||dU||_2 <= sqrt(||dU||_1 ||dU||_inf)
    schur = math.sqrt(float(spla.norm(dU, 1)) * float(spla.norm(dU, np.inf))) if dU.nnz else 0.0
    q = schur / dist
    if q > SERIES_MAX_RATIO:
        U = U0 + dU
        return ShiftedSolver(U, z).columns(sources)
    R0 = ShiftedSolver(U0, z)
    term = R0.columns(sources)
    acc = term.copy()
    for _ in range(SERIES_MAX_TERMS):
        term = -R0.solve(dU @ term)
        acc += term
        if np.max(np.abs(term)) <= 1e-17 * np.max(np.abs(acc)):
            break
        if not np.any(term):
            break
    return acc


# -- decay fits ------------------------------------------------------------------

@dataclass(frozen=True)
class FMFitResult:
    """Fit ``log E = log c - gamma r`` over the sup-norm distances used."""

    gamma: float
    c: float
    r2: float
    ci_low: float
    ci_high: float
    distances: tuple[int, ...]
    n_excluded: int
    decaying: bool

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "c": self.c, "r2": self.r2, "ci": [self.ci_low, self.ci_high],
                "distances": list(self.distances), "n_excluded_zero": self.n_excluded,
                "decaying": self.decaying}


def _linfit(r: NDArray, y: NDArray):
    A = np.stack([np.ones_like(r), r], axis=-1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef


def decay_fit(distances, estimates, samples=None, n_boot: int = 1000, seed: int = 0,
              noise_floor: float = 0.0, level: float = 0.95) -> FMFitResult:
    """Least-squares fit of ``log(estimate)`` against distance.

    Parameters
    ----------
    distances, estimates : (n,) arrays
        Nonpositive estimates are excluded and counted.
    samples : (N, n, K) array, optional
        Raw per-realization values behind ``estimates = max_K mean_N``; when
        given, realizations are resampled to get a bootstrap interval for gamma.
    noise_floor : float
        Estimates at or below it are treated as noise; a fit where all of them
        are is rejected.
    """
    r = np.asarray(distances, dtype=np.float64)
    e = np.asarray(estimates, dtype=np.float64)
    if r.shape != e.shape:
        raise ValueError("distances and estimates differ in shape")
    keep = e > 0
    n_excluded = int((~keep).sum())
    if np.all(e[keep] <= noise_floor):
        raise ValueError("degenerate fit: all estimates at the noise floor")
    if len(np.unique(r[keep])) < 4:
        raise ValueError("need at least 4 distinct distances with positive estimates")
    rk, yk = r[keep], np.log(e[keep])
    b0, b1 = _linfit(rk, yk)
    pred = b0 + b1 * rk
    ss_res = float(np.sum((yk - pred) ** 2))
    ss_tot = float(np.sum((yk - yk.mean()) ** 2))
    r2 = 1 - ss_res / ss_tot if ss_tot > 0 else 0.0
    gamma = -float(b1)
    lo = hi = float("nan")
    if samples is not None:
        S = np.asarray(samples, dtype=np.float64)
        if S.ndim == 2:
            S = S[..., None]
        rng = np.random.default_rng(seed)
        gs = []
        for _ in range(n_boot):
            idx = rng.integers(0, S.shape[0], S.shape[0])
            est = S[idx].mean(axis=0).max(axis=-1)
            ok = keep & (est > 0)
            if len(np.unique(r[ok])) < 2:
                continue
            gs.append(-_linfit(r[ok], np.log(est[ok]))[1])
        if gs:
            a = (1 - level) / 2
            lo, hi = (float(v) for v in np.quantile(gs, [a, 1 - a]))
    tol = 1e-6
    decaying = gamma > tol and (np.isnan(lo) or lo > 0)
    return FMFitResult(gamma=gamma, c=float(np.exp(b0)), r2=r2, ci_low=lo, ci_high=hi,
                       distances=tuple(int(v) for v in np.unique(rk)), n_excluded=n_excluded,
                       decaying=bool(decaying))


def distance_profile(est: FMEstimate):
    """Worst case over z and pairs at each target-source distance.

    Returns ``(distances, estimates, samples)`` with samples shaped
    (N, n_dist, K), ready for :func:`decay_fit`.  Every distance must carry the
    same number of pairs.
    """
    dist = np.array([int(sup_norm(np.subtract(t[1], src[1]))) for t, src in est.pairs])
    rs = np.unique(dist)
    groups = [np.flatnonzero(dist == r) for r in rs]
    if len({len(g) for g in groups}) != 1:
        raise ValueError("unequal number of pairs per distance")
    estimates = np.array([est.mean[:, g].max() for g in groups])
    samples = None
    if est.samples is not None:
        samples = np.stack([est.samples[:, :, g].reshape(est.samples.shape[0], -1) for g in groups], axis=1)
    return rs, estimates, samples


# -- finite-volume scan ----------------------------------------------------------

@dataclass(frozen=True)
class ScanConfig:
    """Parameters of the finite-volume fractional-moment scan.

    ``delta(L) = L^-(2(a p + d) + a/s)`` and ``eta(L) = eta_c0 / L^(a p + d)``.
    ``decoupling=True`` enforces the regime ``0 < s < 1/3``.
    """

    s: float = 0.2
    a: float = 1.0
    p: float = 2.0
    d: int = 2
    L_list: tuple[int, ...] = (4, 6, 8)
    eta_c0: float = 1.0
    smallness_cap: float = 0.1
    z: tuple[complex, ...] = (1.1, 1.1j, -1.1, -1.1j)
    distance: int = 3
    N: int = 200
    perm: tuple[int, ...] = (-1, 1, -2, 2)
    dist: PhaseDistribution = field(default_factory=PhaseDistribution.uniform)
    decoupling: bool = True
    coin_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "L_list", tuple(int(L) for L in self.L_list))
        object.__setattr__(self, "z", tuple(complex(v) for v in self.z))
        if not 0 < self.s < 1:
            raise ValueError(f"s={self.s} outside (0, 1)")
        if self.decoupling and not self.s < 1 / 3:
            raise ValueError(f"s={self.s} violates the decoupling requirement s < 1/3")
        if not self.p > 1 / (1 - self.s):
            raise ValueError(f"p={self.p} must exceed 1/(1-s)={1 / (1 - self.s):.4g}")
        if self.a <= 0:
            raise ValueError("a must be positive")
        for L in self.L_list:
            if L < 2:
                raise ValueError(f"L={L} < 2")
            if self.eta(L) * L**self.d > self.smallness_cap:
                raise ValueError(f"eta L^d = {self.eta(L) * L ** self.d:.3g} exceeds cap {self.smallness_cap} at L={L}")
            if self.distance > L:
                raise ValueError(f"pair distance {self.distance} does not fit in box L={L}")
        if self.distance <= 2:
            raise ValueError("pairs need |x - y| > 2")
        for v in self.z:
            _check_z(v)

    @property
    def q(self) -> float:
        return self.p / (self.p - 1)

    def delta(self, L: int) -> float:
        return float(L) ** -(2 * (self.a * self.p + self.d) + self.a / self.s)

    def eta(self, L: int) -> float:
        return self.eta_c0 / float(L) ** (self.a * self.p + self.d)

    def envelope_shape(self, L: int) -> float:
        eta = self.eta(L)
        return (eta * L**self.d) ** (1 / self.p) + self.delta(L) ** self.s / eta ** (2 * self.s)


@dataclass(frozen=True)
class ScanRow:
    L: int
    delta: float
    achieved_delta: float
    eta: float
    estimate: float
    stderr: float
    shape: float
    envelope: float
    below: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ScanResult:
    rows: tuple[ScanRow, ...]
    c: float
    nonincreasing: bool
    all_below: bool
    seed: int

    def to_dict(self) -> dict:
        return {"c": self.c, "nonincreasing": self.nonincreasing, "all_below": self.all_below,
                "seed": self.seed, "rows": [r.to_dict() for r in self.rows]}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            cols = list(ScanRow.__dataclass_fields__)
            w.writerow(cols)
            for row in self.rows:
                w.writerow([repr(getattr(row, c)) if isinstance(getattr(row, c), float) else getattr(row, c)
                            for c in cols])


def finite_volume_bound_scan(cfg: ScanConfig, seed: int, workers: int = 1, delta_zero: bool = False) -> ScanResult:
    """Fractional moments of the box resolvent ``R^{Lambda_L}`` along a list of L.

    For each L the coin is a perturbation of ``C_pi`` at distance ``delta(L)``
    (or ``C_pi`` itself with ``delta_zero``).  Pairs are ``(tau, c + r e_1)``
    versus ``(sigma, c)`` at ``r = cfg.distance``; the estimate is the worst
    case over pairs and z.  The envelope constant is calibrated on the
    smallest L, so the remaining rows test the predicted L dependence.
    """
    perm = Permutation(cfg.perm)
    if perm.d != cfg.d:
        raise ValueError("permutation dimension does not match d")
    C_pi = permutation_matrix(perm)
    pairs = pairs_along_axis(cfg.d, [cfg.distance])
    rows = []
    for L in cfg.L_list:
        dl = 0.0 if delta_zero else cfg.delta(L)
        C, diff = perturb_coin(C_pi, dl, derive_seed(cfg.coin_seed, L), return_difference=True)
        ens = FMEnsemble(C, perm, cfg.dist, radius=L, coin_difference=diff)
        est = fractional_moment_mc(ens, cfg.s, cfg.z, pairs, cfg.N, derive_seed(seed, L),
                                   workers=workers, series=True)
        flat = est.mean.ravel()
        k = int(np.argmax(flat))
        rows.append((L, dl, float(np.linalg.norm(diff, 2)), float(flat[k]), float(est.stderr.ravel()[k])))
    shapes = [cfg.envelope_shape(L) for L, *_ in rows]
    c = rows[0][3] / shapes[0] if shapes[0] > 0 else 0.0
    out = []
    for (L, dl, ach, e, se), sh in zip(rows, shapes):
        env = c * sh
        out.append(ScanRow(L=L, delta=dl, achieved_delta=ach, eta=cfg.eta(L), estimate=e, stderr=se,
                           shape=sh, envelope=env, below=bool(e <= env * (1 + 1e-9))))
    nonincr = all(b.estimate <= a.estimate + 2 * math.hypot(a.stderr, b.stderr) for a, b in zip(out, out[1:]))
    return ScanResult(rows=tuple(out), c=c, nonincreasing=nonincr, all_below=all(r.below for r in out), seed=seed)

import math

import numpy as np
import pytest
from scipy.stats import unitary_group

from qwloc.coins import Permutation, all_permutations, check_localizing, fourier_coin, permutation_matrix
from qwloc.disorder import PhaseDistribution, PhaseField, cycle_phase, derive_seed, sample_field
from qwloc.lattice import BoxRegion
from qwloc.spectral import (
    arc_avoidance_probability,
    arc_contains,
    arc_hit_probability_exact,
    block_spectrum_exact,
    box_exact_spectrum,
    brillouin_grid,
    dispersion,
    flat_band_test,
    fourier_coin_matrix,
    hausdorff_distance,
    spectral_distance_statistics,
    trace_gradient,
    unitary_spectrum,
    wilson_interval,
)
from qwloc.walk import CycleGeometry, WalkOperatorSpec, enumerate_blocks, materialize

import oracles

PAIRS = Permutation.from_cycles(2, [(1, -1), (2, -2)])
FOUR = Permutation.from_cycles(2, [(1, 2, -1, -2)])
SWAP1 = Permutation((-1, 1))


def const_field(d, radius, value=0.0):
    n = 2 * radius + 1
    return PhaseField(d=d, lo=(-radius,) * d, phases=np.full((2 * d,) + (n,) * d, value), seed=0)


def test_zero_phase_two_block():
    blk = enumerate_blocks(SWAP1, [(0,)])[0]
    res = block_spectrum_exact(blk, const_field(1, 3))
    assert hausdorff_distance(res.eigenvalues, [1, -1]) < 1e-15


def test_theta_pi_two_block():
    blk = enumerate_blocks(SWAP1, [(0,)])[0]
    fld = const_field(1, 3, math.pi / 2)  # two members, theta = pi
    res = block_spectrum_exact(blk, fld)
    phases = [math.pi / 2] * 2
    assert hausdorff_distance(res.eigenvalues, oracles.block_eigenvalues(phases)) < 1e-12
    assert hausdorff_distance(res.eigenvalues, [1j, -1j]) < 1e-12


def test_random_four_block_vs_dense():
    geo = CycleGeometry(FOUR)
    for seed in range(20):
        fld = sample_field(BoxRegion(3, (0, 0)), None, seed)
        blk = geo.block(1, (0, 0))
        res = block_spectrum_exact(blk, fld)
        phases = [fld.phase(s, t) for t, s in blk.members]
        assert hausdorff_distance(res.eigenvalues, oracles.block_eigenvalues(phases)) < 1e-10
        assert res.max_residual < 1e-12


def test_unitary_spectrum_examples():
    assert np.allclose(unitary_spectrum(np.eye(5)).eigenvalues, 1)
    ph = np.array([0.3, -1.2, 2.0])
    res = unitary_spectrum(np.diag(np.exp(1j * ph)))
    assert hausdorff_distance(res.eigenvalues, np.exp(1j * ph)) < 1e-14
    U = unitary_group.rvs(50, random_state=1)
    res = unitary_spectrum(U)
    assert res.max_residual <= 1e-9
    assert np.all(np.diff(np.angle(res.eigenvalues)) >= 0)
    with pytest.raises(ValueError):
        unitary_spectrum(np.ones((3, 4)))
    with pytest.raises(ValueError):
        unitary_spectrum(2 * np.eye(3))


def test_box_spectrum_exact_vs_numerical():
    C = permutation_matrix(FOUR)
    for seed in range(5):
        fld = sample_field(BoxRegion(4, (0, 0)), None, seed)
        spec = WalkOperatorSpec(C, fld, FOUR, outer=3)
        M, _ = materialize(spec, dense=True)
        num = unitary_spectrum(M).eigenvalues
        assert np.all(np.abs(np.abs(num) - 1) < 1e-9)
        assert hausdorff_distance(box_exact_spectrum(spec), num) < 1e-9
        # the exact list is the multiset, so counts agree too
        assert len(box_exact_spectrum(spec)) == M.shape[0]


def test_block_phase_matches_cycle_phase():
    fld = sample_field(BoxRegion(3, (0, 0)), None, 2)
    geo = CycleGeometry(FOUR)
    blk = geo.block(1, (0, 0))
    res = block_spectrum_exact(blk, fld)
    theta = cycle_phase(fld, blk.members[0][1], FOUR_cycle := (1, 2, -1, -2))
    assert hausdorff_distance(res.eigenvalues, np.exp(1j * (theta + 2 * np.pi * np.arange(4)) / 4)) < 1e-12
    assert FOUR_cycle[0] == 1


def test_arc_contains_wraps():
    assert arc_contains(math.pi, 0.2, [-math.pi + 0.05])[0]
    assert not arc_contains(0.0, 0.2, [0.2])[0]


def test_arc_exact_uniform():
    for m in (2, 4, 6):
        p = arc_hit_probability_exact(PhaseDistribution.uniform(), m, 0.1)
        assert p == pytest.approx(oracles.uniform_arc_hit(m, 0.1), abs=1e-9)


def test_arc_avoidance_uniform_m2():
    est = arc_avoidance_probability(PAIRS, (1, -1), PhaseDistribution.uniform(), 0.1, 20000, 5)
    exact = 1 - 2 * 0.1 / (2 * math.pi)
    assert est.ci_low <= exact <= est.ci_high


def test_arc_avoidance_tiny_arc_and_monotone():
    dist = PhaseDistribution.uniform()
    assert arc_avoidance_probability(PAIRS, (1, -1), dist, 1e-9, 500, 1).estimate == 1.0
    vals = [arc_avoidance_probability(PAIRS, None, dist, a, 2000, 3).estimate for a in (0.02, 0.05, 0.1, 0.2)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        arc_avoidance_probability(FOUR, (1, 2, -1, -2), dist, 2.0, 500, 1)
    with pytest.raises(ValueError):
        arc_avoidance_probability(PAIRS, (1, -1), dist, 0.1, 50, 1)


def test_arc_avoidance_bump_vs_convolution():
    dist = PhaseDistribution.bump(0.5, 1.0)
    est = arc_avoidance_probability(FOUR, (1, 2, -1, -2), dist, 0.3, 20000, 8, arc_center=0.2)
    exact = 1 - arc_hit_probability_exact(dist, 4, 0.3, 0.2)
    assert est.ci_low <= exact <= est.ci_high


def test_fitted_arc_constant_stable():
    dist = PhaseDistribution.uniform()
    cs = []
    for a in (0.02, 0.05, 0.1):
        est = arc_avoidance_probability(PAIRS, (1, -1), dist, a, 40000, 2)
        cs.append((1 - est.estimate) / a)
    assert max(cs) / min(cs) < 1.2 / 0.8


def test_distance_statistics_trivial_limits():
    dist = PhaseDistribution.uniform()
    assert spectral_distance_statistics(1.3, 2.4, 3, PAIRS, dist, 200, 1).estimate == 1.0
    assert spectral_distance_statistics(1.3, 0.29, 3, PAIRS, dist, 200, 1).estimate == 0.0
    with pytest.raises(ValueError):
        spectral_distance_statistics(1.0, 0.1, 3, PAIRS, dist, 200, 1)


def test_distance_statistics_match_dense():
    """Exact block minimum distance equals the distance to the numerical spectrum."""
    dist = PhaseDistribution.uniform()
    z = 1.02 * np.exp(0.4j)
    _, dmin = spectral_distance_statistics(z, 0.01, 3, PAIRS, dist, 5, 6, return_distances=True)
    for i in range(5):
        fld = sample_field(BoxRegion(4, (0, 0)), dist, derive_seed(6, i))
        M, _ = materialize(WalkOperatorSpec(permutation_matrix(PAIRS), fld, PAIRS, outer=3), dense=True)
        ev = np.linalg.eigvals(M)
        assert dmin[i] == pytest.approx(np.min(np.abs(ev - z)), abs=1e-10)


def test_distance_statistics_linear_in_eta():
    dist = PhaseDistribution.uniform()
    lo, hi = spectral_distance_statistics(1.0001, [0.002, 0.004], 4, PAIRS, dist, 4000, 1)
    assert 1.5 <= hi.estimate / lo.estimate <= 2.5


def test_wilson_interval():
    lo, hi = wilson_interval(50, 100)
    assert lo < 0.5 < hi
    assert wilson_interval(0, 100)[0] == pytest.approx(0, abs=1e-15)


def test_dispersion_flat_for_localizing():
    res = dispersion(permutation_matrix(PAIRS), brillouin_grid(2, 32))
    assert res.flatness.max() <= 1e-12
    assert res.unitarity_error <= 1e-12


def test_dispersion_non_flat():
    pi = Permutation.from_cycles(2, [(1, 2), (-1, -2)])
    res = dispersion(permutation_matrix(pi), brillouin_grid(2, 32))
    assert res.flatness.max() >= 1e-3
    # oracle: C_hat(k)^2 acts on cycle vectors by exp(-i k . (r(+1) + r(+2)))
    k = np.array([0.3, 1.1])
    Ck = fourier_coin_matrix(permutation_matrix(pi), k[None])[0]
    ev2 = np.linalg.eigvals(Ck @ Ck)
    expect = [np.exp(-1j * (k[0] + k[1]))] * 2 + [np.exp(1j * (k[0] + k[1]))] * 2
    assert hausdorff_distance(ev2, expect) < 1e-12


def test_trace_of_off_diagonal_coin_is_zero():
    C = permutation_matrix(PAIRS)
    Ck = fourier_coin_matrix(C, brillouin_grid(2, 8))
    assert np.max(np.abs(np.trace(Ck, axis1=1, axis2=2))) == 0


def test_flat_band_examples():
    assert flat_band_test(PAIRS)
    assert not flat_band_test(Permutation.from_cycles(2, [(1, 2), (-1, -2)]))
    assert flat_band_test(SWAP1)
    with pytest.raises(ValueError):
        flat_band_test(fourier_coin(2))


def test_flat_band_equals_localizing_exhaustive():
    for d in (1, 2):
        for pi in all_permutations(d, fixed_point_free=True):
            assert flat_band_test(pi) == bool(check_localizing(pi))


def test_trace_gradient_formula():
    rng = np.random.default_rng(0)
    C = unitary_group.rvs(4, random_state=2)
    k = rng.uniform(-np.pi, np.pi, 2)
    g = trace_gradient(C, k)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        num = (np.trace(fourier_coin_matrix(C, (k + e)[None])[0]) - np.trace(fourier_coin_matrix(C, (k - e)[None])[0])) / (2 * h)
        assert abs(num - g[j]) < 1e-8

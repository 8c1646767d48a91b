import json

import numpy as np
import pytest

from qwloc.coins import (
    Permutation,
    all_permutations,
    canonical_position,
    check_localizing,
    coin_distance,
    coin_from_json,
    coin_indices,
    coin_to_json,
    decompose_cycles,
    displacement,
    fourier_coin,
    is_unitary,
    permutation_from_json,
    permutation_matrix,
    permutation_to_json,
    perturb_coin,
)

from oracles import is_localizing


def test_canonical_order():
    assert coin_indices(3) == (1, -1, 2, -2, 3, -3)
    assert [canonical_position(t, 2) for t in (1, -1, 2, -2)] == [0, 1, 2, 3]


def test_displacement_examples():
    assert displacement(-2, 2).tolist() == [0, -1]
    assert displacement(1, 3).tolist() == [1, 0, 0]
    for t in coin_indices(3):
        r = displacement(t, 3)
        assert np.count_nonzero(r) == 1 and np.linalg.norm(r) == 1


@pytest.mark.parametrize("tau,d", [(0, 2), (3, 2), (-3, 2)])
def test_displacement_out_of_range(tau, d):
    with pytest.raises(ValueError):
        displacement(tau, d)


def test_permutation_rejects_non_bijection():
    with pytest.raises(ValueError):
        Permutation((1, 1, 2, -2))


def test_cycles_swap_pairs():
    dec = decompose_cycles(Permutation.from_cycles(2, [(1, -1), (2, -2)]))
    assert dec.cycles == ((1, -1), (2, -2))
    assert dec.lengths == (2, 2)
    assert dec.count == 2


def test_cycles_four_cycle_starts_at_plus_one():
    pi = Permutation.from_cycles(2, [(2, -1, -2, 1)])
    dec = decompose_cycles(pi)
    assert dec.cycles == ((1, 2, -1, -2),)
    assert dec.to_permutation() == pi


def test_cycle_invariants_all_d2():
    for pi in all_permutations(2):
        dec = decompose_cycles(pi)
        support = [t for c in dec.cycles for t in c]
        assert len(support) == len(set(support))
        assert sum(dec.lengths) + len(dec.fixed_points) == 4
        for c in dec.cycles:
            assert canonical_position(c[0], 2) == min(canonical_position(t, 2) for t in c)


def test_check_localizing_examples():
    assert check_localizing(Permutation.from_cycles(2, [(1, -1), (2, -2)]))
    rep = check_localizing(Permutation.from_cycles(2, [(1, 2), (-1, -2)]))
    assert not rep
    assert rep.cycle_sums == ((1, 1), (-1, -1))
    # fixed points never localize
    assert not check_localizing(Permutation.identity(1))


def test_check_localizing_matches_orbit_oracle():
    for d in (1, 2):
        for pi in all_permutations(d):
            assert bool(check_localizing(pi)) == is_localizing(pi.images, d)


def test_permutation_matrix_action():
    pi = Permutation.from_cycles(2, [(1, 2, -1, -2)])
    C = permutation_matrix(pi)
    assert is_unitary(C)
    for t in coin_indices(2):
        e = np.zeros(4)
        e[canonical_position(t, 2)] = 1
        assert np.argmax(np.abs(C @ e)) == canonical_position(pi(t), 2)


@pytest.mark.parametrize("delta", [0.0, 1e-12, 1e-6, 0.05, 0.1, 0.5, 1.5])
def test_perturb_coin_distance(delta):
    C_pi = permutation_matrix(Permutation.from_cycles(2, [(1, -1), (2, -2)]))
    C, diff = perturb_coin(C_pi, delta, seed=3, return_difference=True)
    assert is_unitary(C)
    dist = float(np.linalg.norm(diff, 2))
    assert 0.9 * delta <= dist <= delta
    if delta > 1e-6:
        assert abs(coin_distance(C, C_pi) - dist) < 1e-12


def test_perturb_coin_zero_and_limits():
    C_pi = permutation_matrix(Permutation((-1, 1)))
    assert np.array_equal(perturb_coin(C_pi, 0.0, 1), C_pi)
    with pytest.raises(ValueError):
        perturb_coin(C_pi, 2.0, 1)
    with pytest.raises(ValueError):
        perturb_coin(C_pi, -0.1, 1)


def test_perturb_coin_deterministic():
    C_pi = permutation_matrix(Permutation((-1, 1, -2, 2)))
    assert np.array_equal(perturb_coin(C_pi, 0.1, 9), perturb_coin(C_pi, 0.1, 9))


def test_coin_distance_examples():
    C = fourier_coin(2)
    assert coin_distance(C, C) == 0
    C_pi = permutation_matrix(Permutation((-1, 1, -2, 2)))
    assert abs(coin_distance(C_pi, -C_pi) - 2) < 1e-12
    with pytest.raises(ValueError):
        coin_distance(np.eye(2), np.eye(4))


def test_json_round_trip():
    pi = Permutation.from_cycles(2, [(1, -2), (2, -1)])
    assert permutation_from_json(permutation_to_json(pi)) == pi
    C = perturb_coin(permutation_matrix(pi), 0.3, 2)
    assert np.array_equal(coin_from_json(coin_to_json(C)), C)
    assert json.loads(coin_to_json(np.eye(2)))[0][0] == [1.0, 0.0]

# Fractional moments of the resolvent and their decay with distance.
#
# E|<tau, x|(U - z)^-1|sigma, y>|^s is estimated by Monte Carlo over the phases,
# fitted to c exp(-gamma |x - y|), and then followed along growing boxes with
# the coin approaching the permutation coin.

import numpy as np

from qwloc import Permutation, permutation_matrix, perturb_coin
from qwloc.disorder import PhaseDistribution
from qwloc.resolvent import (
    FMEnsemble,
    ScanConfig,
    decay_fit,
    distance_profile,
    finite_volume_bound_scan,
    fractional_moment_mc,
    pairs_along_axis,
)

pi = Permutation.from_cycles(2, [(1, -1), (2, -2)])
C = perturb_coin(permutation_matrix(pi), 0.05, seed=0)
ens = FMEnsemble(C, pi, PhaseDistribution.uniform(), radius=10)

z = 1.1 * np.exp(1j * np.pi / 4)
est = fractional_moment_mc(ens, 0.2, z, pairs_along_axis(2, range(3, 9)), N=100, seed=3)
r, e, samples = distance_profile(est)
for ri, ei in zip(r, e):
    print("|x-y| = %d   E|R|^s = %.3e" % (ri, ei))
fit = decay_fit(r, e, samples, n_boot=300)
print("gamma %.3f  95%% CI [%.3f, %.3f]  R^2 %.3f" % (fit.gamma, fit.ci_low, fit.ci_high, fit.r2))

# finite boxes with delta(L) shrinking polynomially in L
scan = finite_volume_bound_scan(ScanConfig(L_list=(4, 6), N=100, z=(1.1,)), seed=0)
for row in scan.rows:
    print("L=%d delta=%.1e estimate %.2e envelope %.2e" % (row.L, row.delta, row.estimate, row.envelope))

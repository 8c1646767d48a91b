# Spreading of a walker started at the origin.
#
# Near a localizing permutation coin the second moment saturates; a coin far
# from every permutation (the discrete Fourier coin) keeps spreading.  Sizes
# here are small so the script runs in well under a minute.

import numpy as np

from qwloc import Permutation, fourier_coin
from qwloc.disorder import PhaseDistribution
from qwloc.dynamics import growth_exponent, localization_experiment

pi = Permutation.from_cycles(2, [(1, -1), (2, -2)])
dist = PhaseDistribution.uniform()
n = 400

# at n = 400 the moments are still approaching their plateau, so the ratio
# n : n/10 is larger than over the longer runs (n = 2000) of the test suite
near = localization_experiment(pi, 0.05, dist, n=n, N=4, seed=1, radius=30)
print("delta=0.05  saturation ratios", np.round(near.ratios, 3), "median", round(near.median_ratio, 3))

far = localization_experiment(pi, 0.05, dist, n=n, N=2, seed=1, radius=n // 2, coin=fourier_coin(2))
print("Fourier coin  <|X|^2> at n/10 and n:", far.mean_moments[n // 10], far.mean_moments[n])
print("growth exponent %.2f" % far.growth_exponent)

# without disorder the Fourier walk spreads ballistically
clean = localization_experiment(pi, 0.05, PhaseDistribution.bump(0.0, 1e-3), n=n, N=1, seed=1,
                                radius=n + 2, coin=fourier_coin(2))
print("clean Fourier walk growth exponent %.2f" % growth_exponent(clean.traces[0].times, clean.mean_moments))

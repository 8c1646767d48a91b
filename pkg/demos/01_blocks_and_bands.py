# Permutation coins, invariant blocks and flat bands.
#
# A coin that permutes the coin basis sends every walker around a closed
# loop when each cycle of the permutation has zero net displacement.  The
# loops are invariant blocks, the Fourier bands are flat, and the spectrum
# of the disordered walk is known in closed form block by block.

import numpy as np

from qwloc import Permutation, check_localizing, permutation_matrix, sample_field
from qwloc.lattice import BoxRegion
from qwloc.spectral import box_exact_spectrum, brillouin_grid, dispersion, hausdorff_distance
from qwloc.walk import CycleGeometry, WalkOperatorSpec, materialize

swap_pairs = Permutation.from_cycles(2, [(1, -1), (2, -2)])   # back and forth along each axis
rotate = Permutation.from_cycles(2, [(1, 2), (-1, -2)])       # drifts diagonally

for pi in (swap_pairs, rotate):
    rep = check_localizing(pi)
    print(pi, "cycles", rep.cycles, "displacements", rep.cycle_sums, "localizing:", bool(rep))

# band variation on a 32 x 32 Brillouin grid
for pi in (swap_pairs, rotate):
    res = dispersion(permutation_matrix(pi), brillouin_grid(2, 32))
    print(pi, "max band variation %.2e" % res.flatness.max())

# the block through (+1, origin) and its members
geo = CycleGeometry(swap_pairs)
print(geo.block_of(1, (0, 0)))

# closed-form spectrum of a disordered box vs dense diagonalization
fld = sample_field(BoxRegion(5, (0, 0)), seed=7)
spec = WalkOperatorSpec(permutation_matrix(swap_pairs), fld, swap_pairs, outer=4)
M, basis = materialize(spec, dense=True)
exact = box_exact_spectrum(spec)
numeric = np.linalg.eigvals(M)
print("box dimension", len(basis), "Hausdorff distance exact vs numeric %.1e" % hausdorff_distance(exact, numeric))

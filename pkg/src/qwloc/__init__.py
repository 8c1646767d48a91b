"""
Random coined quantum walks on Z^d: exact block structure, resolvent
identities, fractional moments and dynamical localization at desk scale.
"""

__version__ = "0.1.0"

from .coins import (
    Permutation,
    check_localizing,
    coin_distance,
    decompose_cycles,
    fourier_coin,
    permutation_matrix,
    perturb_coin,
)
from .disorder import PhaseDistribution, PhaseField, derive_seed, sample_field, translate_field
from .lattice import BoxRegion
from .walk import WalkOperatorSpec, apply_walk, build_finite_restriction, defect_operator, materialize

__all__ = [
    "__version__",
    "Permutation",
    "check_localizing",
    "coin_distance",
    "decompose_cycles",
    "fourier_coin",
    "permutation_matrix",
    "perturb_coin",
    "PhaseDistribution",
    "PhaseField",
    "derive_seed",
    "sample_field",
    "translate_field",
    "BoxRegion",
    "WalkOperatorSpec",
    "apply_walk",
    "build_finite_restriction",
    "defect_operator",
    "materialize",
]

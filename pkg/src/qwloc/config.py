"""
Experiment configuration: a flat JSON object with a fixed set of keys.

Unknown keys are rejected so a typo in a physics parameter cannot silently
fall back to a default.  Values stay plain JSON types; the helper methods
build the numerical objects.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .coins import Permutation, check_localizing, coin_indices, fourier_coin, perturb_coin, permutation_matrix
from .disorder import PhaseDistribution

__all__ = ["ConfigError", "ExperimentConfig", "SUBCOMMANDS", "parse_permutation"]

SUBCOMMANDS = (
    "check-perm",
    "dispersion",
    "spectrum",
    "arc-stats",
    "dist-scaling",
    "dynamics",
    "fm-decay",
    "fv-scan",
    "verify-identities",
)


class ConfigError(ValueError):
    """Configuration failed validation; the message lists every problem found."""


_CYCLE_RE = re.compile(r"\(([^()]*)\)")


def parse_permutation(spec, d: int) -> Permutation:
    """Permutation from cycle notation ``"(+1,-1)(+2,-2)"`` or a list of images."""
    if isinstance(spec, str):
        text = spec.replace(" ", "")
        cycles = [[int(t) for t in body.split(",") if t] for body in _CYCLE_RE.findall(text)]
        if _CYCLE_RE.sub("", text):
            raise ValueError(f"cannot parse permutation {spec!r}")
        return Permutation.from_cycles(d, cycles)
    return Permutation(tuple(int(t) for t in spec))


@dataclass
class ExperimentConfig:
    d: int = 2
    perm: str | list = "(+1,-1)(+2,-2)"
    coin: str | list | None = None
    delta: float = 0.0
    coin_seed: int = 0
    distribution: dict = field(default_factory=lambda: {"kind": "uniform"})
    L: list = field(default_factory=lambda: [3])
    outer: int | None = None
    radius: int | None = None
    s: float = 0.2
    decoupling: bool = True
    z: list | None = None
    z_abs: list = field(default_factory=lambda: [0.9, 1.1])
    z_count: int = 8
    z_offset: float = 0.1
    eta: list = field(default_factory=lambda: [0.002, 0.004])
    distances: list = field(default_factory=lambda: [3, 4, 5, 6, 7, 8])
    p: list = field(default_factory=lambda: [2.0])
    n_steps: int = 100
    N: int = 100
    seed: int = 0
    norm: str = "sup"
    workers: int = 1
    kgrid: int = 32
    arc_length: float = 0.1
    arc_center: float = 0.0
    scan_a: float = 1.0
    scan_p: float = 2.0
    eta_c0: float = 1.0
    smallness_cap: float = 0.1
    scan_distance: int = 3
    start: list | None = None
    n_random_columns: int = 16
    keep_samples: bool = False
    n_boot: int = 1000
    dimension_cap: int = 20000

    # -- (de)serialization ----------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg._check_types()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def _check_types(self) -> None:
        errs = []
        ints = ["d", "coin_seed", "z_count", "n_steps", "N", "seed", "workers", "kgrid", "scan_distance",
                "n_random_columns", "n_boot", "dimension_cap"]
        for name in ints:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                errs.append(f"{name} must be an integer, got {v!r}")
        for name in ["outer", "radius"]:
            v = getattr(self, name)
            if v is not None and (isinstance(v, bool) or not isinstance(v, int)):
                errs.append(f"{name} must be an integer or null, got {v!r}")
        floats = ["delta", "s", "z_offset", "arc_length", "arc_center", "scan_a", "scan_p", "eta_c0", "smallness_cap"]
        for name in floats:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                errs.append(f"{name} must be a number, got {v!r}")
        for name in ["L", "z_abs", "eta", "distances", "p"]:
            if not isinstance(getattr(self, name), list):
                errs.append(f"{name} must be a list")
        for name in ["decoupling", "keep_samples"]:
            if not isinstance(getattr(self, name), bool):
                errs.append(f"{name} must be true or false")
        if errs:
            raise ConfigError("; ".join(errs))

    # -- derived objects -------------------------------------------------------

    def permutation(self) -> Permutation:
        return parse_permutation(self.perm, self.d)

    def coin_matrix(self) -> np.ndarray:
        C_pi = permutation_matrix(self.permutation())
        if self.coin is None:
            return perturb_coin(C_pi, self.delta, self.coin_seed)
        if self.coin == "fourier":
            return fourier_coin(self.d)
        if self.coin == "permutation":
            return C_pi
        if isinstance(self.coin, list):
            return np.array([[complex(re_, im_) for re_, im_ in row] for row in self.coin], dtype=np.complex128)
        raise ConfigError(f"unknown coin {self.coin!r}")

    def phase_distribution(self) -> PhaseDistribution:
        return PhaseDistribution.from_dict(self.distribution)

    def z_values(self) -> list[complex]:
        if self.z is not None:
            return [complex(re_, im_) for re_, im_ in self.z]
        return [r * np.exp(1j * (self.z_offset + 2 * math.pi * k / self.z_count))
                for r in self.z_abs for k in range(self.z_count)]

    # -- validation ------------------------------------------------------------

    def validate(self, subcommand: str) -> None:
        """Check every precondition of ``subcommand``; raises ConfigError listing all failures."""
        if subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {subcommand!r}")
        errs: list[str] = []
        d = self.d
        if d < 1:
            errs.append(f"d={d} must be >= 1")
            raise ConfigError("; ".join(errs))
        try:
            perm = self.permutation()
            if perm.d != d:
                errs.append(f"permutation acts on d={perm.d}, config has d={d}")
        except (ValueError, TypeError) as exc:
            errs.append(f"permutation: {exc}")
            perm = None
        needs_local = subcommand not in ("check-perm", "dispersion")
        if perm is not None and needs_local and perm.d == d and not check_localizing(perm):
            errs.append(f"permutation {perm} is not localizing; {subcommand} needs invariant blocks")
        try:
            C = self.coin_matrix()
            if C.shape != (2 * d, 2 * d):
                errs.append(f"coin has shape {C.shape}, expected {(2 * d, 2 * d)}")
            elif np.linalg.norm(C.conj().T @ C - np.eye(2 * d), 2) > 1e-10:
                errs.append("coin is not unitary to 1e-10")
        except (ValueError, TypeError) as exc:
            errs.append(f"coin: {exc}")
        if not 0 <= self.delta < 2:
            errs.append(f"delta={self.delta} outside [0, 2)")
        try:
            self.phase_distribution()
        except (ValueError, TypeError, KeyError) as exc:
            errs.append(f"distribution: {exc}")
        if self.norm not in ("sup", "l1"):
            errs.append(f"norm must be 'sup' or 'l1', got {self.norm!r}")
        if self.workers < 1:
            errs.append("workers must be >= 1")
        try:
            zs = self.z_values()
        except (ValueError, TypeError) as exc:
            errs.append(f"z grid: {exc}")
            zs = []
        Ls = [int(L) for L in self.L] if all(isinstance(L, int) for L in self.L) else []
        if not Ls:
            errs.append("L must be a non-empty list of integers")
        elif min(Ls) < 2:
            errs.append(f"box radii must be >= 2, got {Ls}")

        def z_ok():
            if not zs:
                errs.append("empty z grid")
            for z in zs:
                if abs(abs(z) - 1) <= 1e-12:
                    errs.append(f"z={z} lies on the unit circle")
                elif not 0.5 < abs(z) < 2:
                    errs.append(f"|z|={abs(z):.4g} outside (1/2, 2)")

        def realizations(minimum=100):
            if self.N < minimum:
                errs.append(f"N={self.N} < {minimum} realizations")

        if subcommand == "dispersion" and self.kgrid < 2:
            errs.append("kgrid must be >= 2")
        if subcommand == "arc-stats":
            realizations()
            if not 0 < self.arc_length <= 2 * math.pi:
                errs.append("arc_length must lie in (0, 2 pi]")
        if subcommand == "dist-scaling":
            realizations()
            z_ok()
            if not self.eta or any(e <= 0 for e in self.eta):
                errs.append("eta values must be positive")
        if subcommand == "dynamics":
            if self.n_steps < 1:
                errs.append("n_steps must be >= 1")
            if self.N < 1:
                errs.append("N must be >= 1")
            if not self.p or any(p < 0 for p in self.p):
                errs.append("p values must be nonnegative")
            if self.radius is not None and self.radius < 2:
                errs.append("radius must be >= 2")
            if self.start is not None:
                try:
                    tau, x = self.start
                    if int(tau) not in coin_indices(d) or len(x) != d:
                        errs.append(f"start {self.start} is not a state of d={d}")
                except (TypeError, ValueError):
                    errs.append(f"start must be [tau, [x1, ..., xd]], got {self.start!r}")
        if subcommand == "fm-decay":
            realizations()
            z_ok()
            if not 0 < self.s < 1:
                errs.append(f"s={self.s} must lie in (0, 1)")
            elif self.decoupling and not self.s < 1 / 3:
                errs.append(f"s={self.s} violates the decoupling requirement s < 1/3 "
                            "(set decoupling=false to run outside that regime)")
            if len(set(self.distances)) < 4:
                errs.append("need at least 4 distinct distances")
            if any(r <= 2 for r in self.distances):
                errs.append("decay pairs need |x - y| > 2")
            R = self.outer
            if R is None:
                errs.append("fm-decay needs an outer radius")
            elif self.distances and max(self.distances) > R:
                errs.append(f"distance {max(self.distances)} exceeds outer radius {R}")
        if subcommand == "fv-scan":
            try:
                self.scan_config()
            except ValueError as exc:
                errs.append(f"scan: {exc}")
            realizations()
        if subcommand == "verify-identities":
            z_ok()
            if self.N < 1:
                errs.append("N must be >= 1")
            if self.outer is None or (Ls and self.outer < max(Ls) + 5):
                errs.append(f"outer radius {self.outer} cannot host sites at distance L+5")
        if subcommand == "spectrum" and self.N < 1:
            errs.append("N must be >= 1")
        if subcommand in ("spectrum", "dist-scaling") and Ls:
            side = 2 * (max(Ls) + 2) + 1
            if 2 * d * side**d > self.dimension_cap:
                errs.append(f"box dimension {2 * d * side ** d} exceeds cap {self.dimension_cap}")
        if subcommand in ("verify-identities", "fm-decay") and self.outer is not None:
            side = 2 * (self.outer + 2) + 1
            if 2 * d * side**d > self.dimension_cap:
                errs.append(f"outer box dimension {2 * d * side ** d} exceeds cap {self.dimension_cap}")
        if errs:
            raise ConfigError("; ".join(errs))

    def scan_config(self):
        from .resolvent import ScanConfig

        return ScanConfig(s=self.s, a=self.scan_a, p=self.scan_p, d=self.d, L_list=tuple(self.L),
                          eta_c0=self.eta_c0, smallness_cap=self.smallness_cap, z=tuple(self.z_values()),
                          distance=self.scan_distance, N=self.N, perm=self.permutation().images,
                          dist=self.phase_distribution(), decoupling=self.decoupling, coin_seed=self.coin_seed)

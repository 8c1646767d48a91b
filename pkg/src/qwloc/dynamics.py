"""
Time evolution and position moments.

States are grid arrays of a :class:`~qwloc.walk.WalkOperatorSpec`.  A point
start spreads at most one site per step, so each step only touches the cube
reached so far plus one shell; on a closed outer box the window simply stops
growing at the grid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .coins import Permutation, check_localizing, coin_distance, perturb_coin, permutation_matrix
from .disorder import PhaseDistribution, derive_seed, sample_field
from .lattice import BoxRegion
from .walk import WalkOperatorSpec, _step, displacement_table, point_state

__all__ = [
    "LightConeError",
    "position_moments",
    "MomentTrace",
    "evolve",
    "growth_exponent",
    "LocalizationResult",
    "localization_experiment",
    "traces_to_csv",
]


class LightConeError(ValueError):
    """The evolution would reach the edge of an open field window."""


def _site_norms(shape_sites, lo, center, norm: str) -> NDArray[np.float64]:
    axes = [np.arange(n) + l - c for n, l, c in zip(shape_sites, lo, center)]
    grids = np.meshgrid(*axes, indexing="ij")
    if norm == "sup":
        return np.max(np.abs(np.stack(grids)), axis=0).astype(np.float64)
    if norm == "l1":
        return np.sum(np.abs(np.stack(grids)), axis=0).astype(np.float64)
    raise ValueError(f"unknown norm {norm!r}; use 'sup' or 'l1'")


def position_moments(psi, ps, lo=None, center=None, norm: str = "sup") -> NDArray[np.float64]:
    """``sum |x - center|^p |psi(tau, x)|^2`` for each p.

    Parameters
    ----------
    psi : array, shape (2d, n, ..., n)
        State on a grid whose first site is ``lo``.  Without ``lo`` the grid
        is taken to be centered on ``center`` (the origin by default).
    ps : float or sequence of floats
    norm : {"sup", "l1"}
        ``|x| = max_i |x_i|`` by default; ``"l1"`` uses ``sum_i |x_i|``.
    """
    psi = np.asarray(psi)
    d = psi.ndim - 1
    shape = psi.shape[1:]
    center = np.zeros(d, dtype=np.int64) if center is None else np.asarray(center, dtype=np.int64)
    if lo is None:
        lo = center - (np.asarray(shape) - 1) // 2
    r = _site_norms(shape, lo, center, norm)
    w = np.sum(np.abs(psi) ** 2, axis=0)
    ps_arr = np.atleast_1d(np.asarray(ps, dtype=np.float64))
    out = np.array([np.sum(w * r**p) for p in ps_arr])
    return out if np.ndim(ps) else out[0]


@dataclass
class MomentTrace:
    """Moments ``<|X|^p>`` at times 0..n for one realization.

    ``moments`` has shape (n + 1, len(ps)); ``boundary_weight`` is the largest
    probability ever found on the outermost two shells of the grid, which
    flags finite-box effects.
    """

    times: NDArray[np.int64]
    ps: tuple[float, ...]
    moments: NDArray[np.float64]
    initial: dict
    norm_drift: float
    boundary_weight: float
    meta: dict = field(default_factory=dict)

    @property
    def running_sup(self) -> NDArray[np.float64]:
        return np.maximum.accumulate(self.moments, axis=0)

    def at(self, t: int, p: float | None = None):
        row = self.moments[int(t)]
        if p is None:
            return row
        return float(row[self.ps.index(float(p))])

    def saturation_ratio(self, p: float | None = None, early: int | None = None) -> float:
        n = int(self.times[-1])
        early = max(1, n // 10) if early is None else early
        p = self.ps[0] if p is None else p
        late, first = self.at(n, p), self.at(early, p)
        if first == 0:
            return float("nan") if late == 0 else float("inf")
        return late / first


def evolve(spec: WalkOperatorSpec, psi0, n: int, ps=(2.0,), norm: str = "sup", callback=None,
           check_light_cone: bool = True) -> tuple[NDArray[np.complex128], MomentTrace]:
    """Apply the walk ``n`` times, recording moments after every step.

    Returns the final state and its :class:`MomentTrace`.  ``callback(k, psi)``
    is called after each step with a read-only view of the state.

    For an unrestricted spec the whole light cone of ``psi0`` must stay
    inside the field window; a closed outer box has no such requirement.
    """
    g = spec.grid
    psi = np.array(psi0, dtype=np.complex128)
    if psi.shape != g.shape:
        raise ValueError(f"state shape {psi.shape} does not match grid {g.shape}")
    if spec.outer is not None:
        outside = ~spec.subspace_mask("outer")
        if np.any(psi[outside] != 0):
            raise ValueError("initial state has support outside the closed outer box")
    weight = np.sum(np.abs(psi) ** 2, axis=0)
    radii = g.radii
    if not np.any(weight):
        raise ValueError("zero initial state")
    r0 = int(radii[weight > 0].max())
    if spec.outer is None and check_light_cone and r0 + n >= g.radius:
        raise LightConeError(f"support radius {r0} + {n} steps reaches the field edge at {g.radius}")

    steps = displacement_table(spec.d)
    inv = None if spec.perm is None else spec.perm.inverse().positions
    ps_t = tuple(float(p) for p in np.atleast_1d(ps))
    rpow = _site_norms(g.site_shape, g.lo, g.center, norm)
    moments = np.zeros((n + 1, len(ps_t)))
    norm0 = float(weight.sum())
    moments[0] = [np.sum(weight * rpow**p) for p in ps_t] if norm0 else 0
    edge = radii >= g.radius - 1
    bweight = float(weight[edge].sum())
    drift = 0.0
    G = g.radius
    r = r0
    for k in range(1, n + 1):
        w = min(r + 1, G)
        lo = G - w
        win = (slice(None),) + (slice(lo, lo + 2 * w + 1),) * spec.d
        sites = win[1:]
        sub = _step(psi[win], spec.coin, inv, spec.collar_mask[sites], spec.expi[win], steps)
        psi[win] = sub
        r = w
        wt = np.sum(np.abs(sub) ** 2, axis=0)
        rp = rpow[sites]
        moments[k] = [np.sum(wt * rp**p) for p in ps_t]
        bweight = max(bweight, float(wt[edge[sites]].sum()))
        drift = max(drift, abs(float(wt.sum()) - norm0))
        if callback is not None:
            view = psi.view()
            view.flags.writeable = False
            callback(k, view)
    trace = MomentTrace(times=np.arange(n + 1), ps=ps_t, moments=moments, initial={},
                        norm_drift=drift, boundary_weight=bweight)
    return psi, trace


def growth_exponent(times, values, tmin: int | None = None, tmax: int | None = None) -> float:
    """Slope of ``log values`` against ``log times`` over ``[tmin, tmax]``."""
    t = np.asarray(times, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    tmax = t[-1] if tmax is None else tmax
    tmin = max(1.0, tmax / 10) if tmin is None else tmin
    sel = (t >= tmin) & (t <= tmax) & (v > 0)
    if sel.sum() < 2:
        raise ValueError("need at least two positive points to fit a growth exponent")
    return float(np.polyfit(np.log(t[sel]), np.log(v[sel]), 1)[0])


@dataclass
class LocalizationResult:
    traces: list[MomentTrace]
    ratios: NDArray[np.float64]
    median_ratio: float
    growth_exponent: float
    mean_moments: NDArray[np.float64]
    params: dict

    def to_dict(self) -> dict:
        return {"ratios": self.ratios.tolist(), "median_ratio": self.median_ratio,
                "growth_exponent": self.growth_exponent,
                "max_boundary_weight": max(t.boundary_weight for t in self.traces),
                "max_norm_drift": max(t.norm_drift for t in self.traces),
                "params": self.params}


def localization_experiment(perm: Permutation, delta: float, dist: PhaseDistribution, n: int, N: int,
                            p: float = 2.0, seed: int = 0, radius: int | None = None, start=None,
                            coin=None, coin_seed: int = 0, center=None, norm: str = "sup",
                            require_localizing: bool = True) -> LocalizationResult:
    """Ensemble of walks from a point start with moment traces and saturation statistics.

    The coin is ``perturb_coin(C_pi, delta, coin_seed)`` unless an explicit
    ``coin`` is given (used for control runs far from every ``C_pi``, where
    ``delta`` is then only recorded).  Realization ``i`` draws its phases from
    ``derive_seed(seed, i)``.  Each walk lives on the closed box of radius
    ``radius`` (default ``n + 2``, so the collar is never reached).

    The saturation ratio is ``<|X|^p>_n / <|X|^p>_{n/10}`` (nan for 0/0,
    ignored by the median); the growth exponent is fitted on the ensemble-mean trace over ``[n/10, n]``.
    """
    if require_localizing and not check_localizing(perm):
        raise ValueError(f"permutation {perm} is not localizing")
    d = perm.d
    center = (0,) * d if center is None else tuple(int(c) for c in center)
    C_pi = permutation_matrix(perm)
    C = perturb_coin(C_pi, delta, coin_seed) if coin is None else np.asarray(coin, dtype=np.complex128)
    radius = n + 2 if radius is None else int(radius)
    if start is None:
        start = (1, center)
    tau0, x0 = start
    traces = []
    for i in range(N):
        rs = derive_seed(seed, i)
        fld = sample_field(BoxRegion(radius + 1, center), dist, rs)
        spec = WalkOperatorSpec(C, fld, perm, outer=radius, center=center)
        psi0 = point_state(spec, tau0, x0)
        _, tr = evolve(spec, psi0, n, ps=(p,), norm=norm)
        tr.initial = {"tau": int(tau0), "x": [int(v) for v in x0]}
        tr.meta = {"realization": i, "seed": rs, "delta": delta}
        traces.append(tr)
    ratios = np.array([t.saturation_ratio(p) for t in traces])
    mean = np.mean([t.moments[:, 0] for t in traces], axis=0)
    expo = growth_exponent(traces[0].times, mean)
    params = {"perm": list(perm.images), "delta": delta, "coin_distance": coin_distance(C, C_pi),
              "distribution": dist.to_dict(), "n": n, "N": N, "p": p, "seed": seed, "radius": radius,
              "start": {"tau": int(tau0), "x": list(x0)}, "norm": norm, "coin_seed": coin_seed}
    return LocalizationResult(traces=traces, ratios=ratios, median_ratio=_median(ratios),
                              growth_exponent=expo, mean_moments=mean, params=params)


def _median(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    x = x[~np.isnan(x)]
    return float(np.median(x)) if len(x) else float("nan")


def traces_to_csv(traces, path) -> None:
    """Rows ``n, p, moment, realization`` for a list of traces."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "p", "moment", "realization"])
        for i, tr in enumerate(traces):
            rid = tr.meta.get("realization", i)
            for j, p in enumerate(tr.ps):
                for t, m in zip(tr.times, tr.moments[:, j]):
                    w.writerow([int(t), p, repr(float(m)), rid])

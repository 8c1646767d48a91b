"""
The random walk operator, its finite-volume restrictions and invariant blocks.

States live on a cubic grid of sites around ``center`` and are stored as
arrays of shape ``(2d, n, ..., n)``; axis 0 is the canonical coin position.
One step acts as

    (U psi)(tau, x + r(tau)) += exp(i omega[tau, x + r(tau)]) * C(x)[tau, sigma] * psi(sigma, x)

where the site coin ``C(x)`` is the bulk coin ``C`` except on collar shells
``|x - center| in {L-1, L, L+1}``, where it is the permutation coin ``C_pi``.

With a localizing permutation, ``C_pi`` moves every basis state along a
closed path of ``m_j`` states (an invariant block).  Blocks partition the
basis, so every invariant subspace used here is a coordinate subspace:

* the box subspace of radius L is spanned by the blocks that visit a site
  with ``|x - center| <= L``;
* a spec with ``outer=R`` lives on the box subspace of radius R, which is
  closed under the walk because of the collar at R.  This is the desk-scale
  stand-in for the infinite lattice;
* the complement of radius L is the orthogonal complement of the box
  subspace of radius L inside the outer one.

Materialized matrices use a fixed basis order: blocks sorted by anchor site
(lexicographic), then by cycle leader in canonical order, then path order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray

from .coins import (
    Permutation,
    canonical_position,
    check_localizing,
    coin_distance,
    coin_indices,
    decompose_cycles,
    displacement,
    displacement_table,
    index_from_position,
    permutation_matrix,
)
from .disorder import PhaseField
from .lattice import BoxRegion, site_grid, sup_norm

__all__ = [
    "DEFAULT_DIMENSION_CAP",
    "InvariantBlock",
    "CycleGeometry",
    "WalkGrid",
    "WalkOperatorSpec",
    "apply_walk",
    "materialize",
    "enumerate_blocks",
    "build_finite_restriction",
    "DefectResult",
    "defect_operator",
    "point_state",
    "export_triplets",
    "blocks_to_json",
]

DEFAULT_DIMENSION_CAP = 20000


@dataclass(frozen=True)
class InvariantBlock:
    """Closed path of ``m`` basis states traced by ``C_pi`` from anchor ``(tau_j, x)``.

    Member ``t`` is ``(pi^t(tau_j), x + r(tau_j) + ... + r(pi^t(tau_j)))``.
    """

    anchor: tuple[int, tuple[int, ...]]
    members: tuple[tuple[int, tuple[int, ...]], ...]

    @property
    def m(self) -> int:
        return len(self.members)

    @property
    def sites(self) -> list[tuple[int, ...]]:
        return [s for _, s in self.members]


class CycleGeometry:
    """Per-coin data of a localizing permutation used to locate blocks.

    For canonical coin position k, ``cycle_of[k]`` is the index of its cycle,
    ``step[k]`` its position along that cycle (leader at 0), and
    ``partial[k]`` the partial sum ``r(c_0) + ... + r(c_step)`` of the cycle
    ``c`` started at its leader.  The anchor of the block through state
    ``(k, y)`` is ``y - partial[k]``.
    """

    def __init__(self, perm: Permutation):
        report = check_localizing(perm)
        if not report.localizing:
            raise ValueError(f"permutation {perm} is not localizing; invariant blocks are undefined")
        d = perm.d
        self.perm = perm
        self.d = d
        self.cycles = decompose_cycles(perm).cycles
        n = 2 * d
        self.cycle_of = np.zeros(n, dtype=np.int64)
        self.step = np.zeros(n, dtype=np.int64)
        self.partial = np.zeros((n, d), dtype=np.int64)
        self.leader_pos = np.zeros(n, dtype=np.int64)
        self.cycle_partials = []
        for j, cyc in enumerate(self.cycles):
            acc = np.zeros(d, dtype=np.int64)
            sums = []
            for t, tau in enumerate(cyc):
                acc = acc + displacement(tau, d)
                k = canonical_position(tau, d)
                self.cycle_of[k] = j
                self.step[k] = t
                self.partial[k] = acc
                self.leader_pos[k] = canonical_position(cyc[0], d)
                sums.append(acc.copy())
            self.cycle_partials.append(np.array(sums))
        self.lengths = np.array([len(c) for c in self.cycles], dtype=np.int64)

    def block(self, leader: int, anchor) -> InvariantBlock:
        j = self.cycle_of[canonical_position(leader, self.d)]
        cyc = self.cycles[j]
        if cyc[0] != leader:
            raise ValueError(f"{leader} does not lead a cycle")
        anchor = np.asarray(anchor, dtype=np.int64)
        members = tuple(
            (tau, tuple(int(v) for v in anchor + p)) for tau, p in zip(cyc, self.cycle_partials[j])
        )
        return InvariantBlock(anchor=(leader, tuple(int(v) for v in anchor)), members=members)

    def block_of(self, tau: int, y) -> InvariantBlock:
        k = canonical_position(tau, self.d)
        leader = self.cycles[self.cycle_of[k]][0]
        return self.block(leader, np.asarray(y, dtype=np.int64) - self.partial[k])


class WalkGrid:
    """Cube of sites ``|x - center| <= radius`` with flat state indexing."""

    def __init__(self, d: int, radius: int, center=None):
        self.d = d
        self.radius = int(radius)
        self.center = tuple(int(c) for c in (center if center is not None else (0,) * d))
        self.n = 2 * self.radius + 1
        self.lo = tuple(c - self.radius for c in self.center)
        self.site_shape = (self.n,) * d
        self.shape = (2 * d,) + self.site_shape
        self.size = int(np.prod(self.shape))

    @cached_property
    def sites(self) -> NDArray[np.int64]:
        return site_grid(self.lo, self.site_shape)

    @cached_property
    def radii(self) -> NDArray[np.int64]:
        """``|x - center|`` per site."""
        return sup_norm(self.sites - np.asarray(self.center), axis=-1)

    def flat_index(self, tau: int, x) -> int:
        off = np.asarray(x, dtype=np.int64) - np.asarray(self.lo)
        if np.any(off < 0) or np.any(off >= self.n):
            raise KeyError(f"site {tuple(x)} outside grid")
        return int(np.ravel_multi_index((canonical_position(tau, self.d),) + tuple(off), self.shape))

    def state_of(self, flat: int) -> tuple[int, tuple[int, ...]]:
        idx = np.unravel_index(int(flat), self.shape)
        tau = index_from_position(int(idx[0]), self.d)
        return tau, tuple(int(i) + l for i, l in zip(idx[1:], self.lo))

    def zeros(self) -> NDArray[np.complex128]:
        return np.zeros(self.shape, dtype=np.complex128)


def _shell_mask(radii: NDArray, Ls: Sequence[int]) -> NDArray[np.bool_]:
    mask = np.zeros(radii.shape, dtype=bool)
    for L in Ls:
        mask |= (radii >= L - 1) & (radii <= L + 1)
    return mask


@dataclass(frozen=True, eq=False)
class WalkOperatorSpec:
    """One-step operator: bulk coin, collar permutation, phase field and volume.

    Parameters
    ----------
    coin : (2d, 2d) unitary
        Bulk coin ``C``.
    field : PhaseField
        Must cover the grid (all sites within ``outer + 1`` of ``center``).
    perm : Permutation, optional
        Permutation behind ``C_pi``; required whenever collars are present.
    outer : int, optional
        Radius of the closed outer box.  ``None`` means an unrestricted walk
        on the whole field window, where states touching the window edge are
        rejected.
    collars : tuple of int
        Extra decoupling radii L; each puts ``C_pi`` on ``|x| in {L-1, L, L+1}``.
    center : site, optional
        Center of all boxes; the origin by default.
    """

    coin: NDArray[np.complex128]
    field: PhaseField
    perm: Permutation | None = None
    outer: int | None = None
    collars: tuple[int, ...] = ()
    center: tuple[int, ...] | None = None
    dimension_cap: int = DEFAULT_DIMENSION_CAP

    def __post_init__(self):
        d = self.field.d
        coin = np.asarray(self.coin, dtype=np.complex128)
        if coin.shape != (2 * d, 2 * d):
            raise ValueError(f"coin shape {coin.shape} does not match d={d}")
        object.__setattr__(self, "coin", coin)
        object.__setattr__(self, "collars", tuple(int(L) for L in self.collars))
        if self.center is None:
            object.__setattr__(self, "center", (0,) * d)
        else:
            object.__setattr__(self, "center", tuple(int(c) for c in self.center))
        if (self.collars or self.outer is not None) and self.perm is None:
            raise ValueError("collars need a permutation coin")
        if self.perm is not None and self.perm.d != d:
            raise ValueError("permutation dimension does not match field")
        for L in self.collars + ((self.outer,) if self.outer is not None else ()):
            if L < 2:
                raise ValueError(f"box radius L={L} < 2")
        if self.outer is not None:
            for L in self.collars:
                if L > self.outer:
                    raise ValueError(f"collar radius {L} exceeds outer radius {self.outer}")
            if self.perm is not None:
                check = check_localizing(self.perm)
                if not check.localizing:
                    raise ValueError(f"permutation {self.perm} is not localizing")
            region = BoxRegion(self.outer + 1, self.center)
            if not self.field.covers(region):
                raise ValueError("phase field does not cover the outer box and its collar")

    @property
    def d(self) -> int:
        return self.field.d

    @cached_property
    def c_pi(self) -> NDArray[np.complex128] | None:
        return None if self.perm is None else permutation_matrix(self.perm)

    @cached_property
    def grid(self) -> WalkGrid:
        if self.outer is not None:
            return WalkGrid(self.d, self.outer + 1, self.center)
        # unrestricted: the largest centered cube inside the field window
        lo = np.asarray(self.field.lo)
        hi = np.asarray(self.field.hi)
        c = np.asarray(self.center)
        radius = int(min(np.min(c - lo), np.min(hi - c)))
        if radius < 1:
            raise ValueError("field window too small around center")
        return WalkGrid(self.d, radius, self.center)

    @cached_property
    def collar_mask(self) -> NDArray[np.bool_]:
        Ls = list(self.collars)
        if self.outer is not None:
            Ls.append(self.outer)
        return _shell_mask(self.grid.radii, Ls)

    @cached_property
    def expi(self) -> NDArray[np.complex128]:
        g = self.grid
        return np.exp(1j * self.field.window(g.lo, g.site_shape))

    @cached_property
    def geometry(self) -> CycleGeometry | None:
        if self.perm is None or not check_localizing(self.perm):
            return None
        return CycleGeometry(self.perm)

    @cached_property
    def _block_info(self):
        """Per grid state: anchor site, min and max member radius, sort key pieces."""
        geo = self.geometry
        if geo is None:
            raise ValueError("invariant blocks need a localizing permutation")
        g = self.grid
        d = self.d
        sites = g.sites  # (n,..,n,d)
        ctr = np.asarray(self.center)
        anchor = sites[None] - geo.partial.reshape((2 * d,) + (1,) * d + (d,))
        rmin = np.full(g.shape, np.iinfo(np.int64).max, dtype=np.int64)
        rmax = np.zeros(g.shape, dtype=np.int64)
        for k in range(2 * d):
            j = geo.cycle_of[k]
            for p in geo.cycle_partials[j]:
                r = sup_norm(anchor[k] + p - ctr, axis=-1)
                rmin[k] = np.minimum(rmin[k], r)
                rmax[k] = np.maximum(rmax[k], r)
        return anchor, rmin, rmax

    def subspace_indices(self, which="outer") -> NDArray[np.int64]:
        """Flat grid indices spanning a subspace, in canonical block order.

        ``which`` is ``"outer"``, ``("box", L)`` or ``("complement", L)``;
        for unrestricted specs only ``"all"`` (every grid state, grid order).
        """
        g = self.grid
        if which == "all":
            return np.arange(g.size, dtype=np.int64)
        anchor, rmin, rmax = self._block_info
        inside_grid = rmax <= g.radius
        if self.outer is not None:
            outer_mask = inside_grid & (rmin <= self.outer)
        else:
            outer_mask = inside_grid
        if which == "outer":
            mask = outer_mask
        else:
            kind, L = which
            box = inside_grid & (rmin <= int(L))
            if kind == "box":
                mask = box
            elif kind == "complement":
                if self.outer is None:
                    raise ValueError("the complement needs an outer box")
                mask = outer_mask & ~box
            else:
                raise ValueError(f"unknown subspace {which!r}")
        idx = np.flatnonzero(mask.ravel())
        return self._block_sorted(idx)

    def _block_sorted(self, idx: NDArray[np.int64]) -> NDArray[np.int64]:
        anchor, _, _ = self._block_info
        geo = self.geometry
        d = self.d
        coin_pos = idx // int(np.prod(self.grid.site_shape))
        anc = anchor.reshape(-1, d)[idx]
        keys = [geo.step[coin_pos], geo.leader_pos[coin_pos]] + [anc[:, i] for i in range(d - 1, -1, -1)]
        return idx[np.lexsort(keys)]

    def subspace_mask(self, which="outer") -> NDArray[np.bool_]:
        mask = np.zeros(self.grid.size, dtype=bool)
        mask[self.subspace_indices(which)] = True
        return mask.reshape(self.grid.shape)

    def with_collars(self, collars: Sequence[int]) -> "WalkOperatorSpec":
        return WalkOperatorSpec(self.coin, self.field, self.perm, self.outer, tuple(collars), self.center, self.dimension_cap)

    def with_coin(self, coin) -> "WalkOperatorSpec":
        return WalkOperatorSpec(coin, self.field, self.perm, self.outer, self.collars, self.center, self.dimension_cap)

    def with_field(self, fld: PhaseField, center=None) -> "WalkOperatorSpec":
        return WalkOperatorSpec(self.coin, fld, self.perm, self.outer, self.collars,
                                self.center if center is None else center, self.dimension_cap)

    @cached_property
    def grid_matrix(self) -> sp.csr_matrix:
        """Step matrix over all grid states; transitions leaving the grid are dropped."""
        Cp = self.c_pi if self.c_pi is not None else self.coin
        return self.coin_field_matrix(self.coin, Cp)

    def coin_field_matrix(self, bulk, collar, phases: bool = True) -> sp.csr_matrix:
        """Grid matrix of ``D S (C(x) (x) I)`` for arbitrary bulk and collar coins.

        With ``bulk = C - C_pi`` and ``collar = 0`` this is the exact
        perturbation ``U(C) - U(C_pi)``, free of cancellation.
        """
        g = self.grid
        d = self.d
        idx = np.arange(g.size, dtype=np.int64).reshape(g.shape)
        steps = displacement_table(d)
        bulk = np.asarray(bulk, dtype=np.complex128)
        collar = np.asarray(collar, dtype=np.complex128)
        mask = self.collar_mask
        rows, cols, vals = [], [], []
        for t in range(2 * d):
            src_sl, dst_sl = _shift_slices(steps[t], g.n)
            m = mask[src_sl]
            ph = self.expi[t][dst_sl] if phases else 1.0
            for s in range(2 * d):
                v = np.where(m, collar[t, s], bulk[t, s]) * ph
                keep = v != 0
                rows.append(idx[t][dst_sl][keep])
                cols.append(idx[s][src_sl][keep])
                vals.append(v[keep])
        M = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(g.size, g.size)
        )
        return M.tocsr()

    def state_labels(self, indices) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
        """Canonical coin positions and sites, shapes (n,) and (n, d), of flat grid indices."""
        g = self.grid
        idx = np.unravel_index(np.asarray(indices, dtype=np.int64), g.shape)
        sites = np.stack([i + l for i, l in zip(idx[1:], g.lo)], axis=-1)
        return idx[0].astype(np.int64), sites.astype(np.int64)


def _shift_slices(step: NDArray[np.int64], n: int):
    """Source/destination slices moving a site array by ``step`` with no wrap."""
    src, dst = [], []
    for s in step:
        if s > 0:
            src.append(slice(0, n - s))
            dst.append(slice(s, n))
        elif s < 0:
            src.append(slice(-s, n))
            dst.append(slice(0, n + s))
        else:
            src.append(slice(None))
            dst.append(slice(None))
    return tuple(src), tuple(dst)


def _step(psi, coin, c_pi_inv_pos, collar_mask, expi, steps):
    """One walk step on a cube of sites; amplitude pushed off the cube is dropped."""
    n = psi.shape[1]
    phi = np.tensordot(coin, psi, axes=(1, 0))
    if c_pi_inv_pos is not None and collar_mask.any():
        phi[:, collar_mask] = psi[c_pi_inv_pos][:, collar_mask]
    out = np.zeros_like(psi)
    for t, step in enumerate(steps):
        src, dst = _shift_slices(step, n)
        out[t][dst] = phi[t][src]
    out *= expi
    return out


def _edge_mass(psi, steps) -> float:
    """Probability that one step would carry off the cube (worst case)."""
    n = psi.shape[1]
    total = 0.0
    d = psi.ndim - 1
    for axis in range(d):
        for side in (0, n - 1):
            sl = [slice(None)] * d
            sl[axis] = side
            total += float(np.sum(np.abs(psi[(slice(None),) + tuple(sl)]) ** 2))
    return total


def apply_walk(spec: WalkOperatorSpec, psi: NDArray) -> NDArray[np.complex128]:
    """Apply one step to ``psi`` (array of shape ``spec.grid.shape``), matrix-free."""
    psi = np.asarray(psi, dtype=np.complex128)
    if psi.shape != spec.grid.shape:
        raise ValueError(f"state shape {psi.shape} does not match grid {spec.grid.shape}")
    steps = displacement_table(spec.d)
    if spec.outer is not None:
        outside = ~spec.subspace_mask("outer")
        if np.any(psi[outside] != 0):
            raise ValueError("state has support outside the closed outer box subspace")
    elif _edge_mass(psi, steps) > 0:
        raise ValueError("state touches the edge of the field window; one step would lose norm")
    inv = None if spec.perm is None else spec.perm.inverse().positions
    return _step(psi, spec.coin, inv, spec.collar_mask, spec.expi, steps)


def point_state(spec: WalkOperatorSpec, tau: int, x) -> NDArray[np.complex128]:
    psi = spec.grid.zeros()
    psi.reshape(-1)[spec.grid.flat_index(tau, x)] = 1.0
    return psi


def materialize(spec: WalkOperatorSpec, which="outer", dense: bool = False):
    """Matrix of the walk on a subspace; returns ``(matrix, basis_indices)``.

    ``which`` follows :meth:`WalkOperatorSpec.subspace_indices`; unrestricted
    specs default to ``"all"``.  Rows and columns follow ``basis_indices``.
    """
    if spec.outer is None and which == "outer":
        which = "all"
    basis = spec.subspace_indices(which)
    if len(basis) > spec.dimension_cap:
        raise ValueError(f"dimension {len(basis)} exceeds cap {spec.dimension_cap}")
    M = spec.grid_matrix[basis][:, basis]
    M = sp.csr_matrix(M)
    M.eliminate_zeros()
    if dense:
        return M.toarray(), basis
    return M, basis


def enumerate_blocks(perm: Permutation, anchors) -> list[InvariantBlock]:
    """All distinct blocks through the states ``(tau, x)`` for anchor sites ``x``.

    ``anchors`` is a BoxRegion or an iterable of sites.  For each anchor ``x``
    and coin ``tau`` the path started at ``(tau, x)`` is generated; equal
    subspaces are merged, and blocks are returned in canonical order.
    """
    geo = CycleGeometry(perm)
    d = perm.d
    if isinstance(anchors, BoxRegion):
        sites = anchors.sites()
    else:
        sites = np.asarray(list(anchors), dtype=np.int64).reshape(-1, d)
    keys = set()
    for x in sites:
        for tau in coin_indices(d):
            # H_x^tau: first member is (tau, x + r(tau))
            first = np.asarray(x) + displacement(tau, d)
            blk = geo.block_of(tau, first)
            keys.add((blk.anchor[1], canonical_position(blk.anchor[0], d), blk.anchor[0]))
    return [geo.block(lead, anc) for anc, _, lead in sorted(keys)]


def build_finite_restriction(L: int, coin, perm: Permutation, fld: PhaseField, which: str = "box",
                             outer: int | None = None, center=None, dense: bool = False):
    """Walk with ``C_pi`` on the collar of radius L, restricted to the box subspace or its complement.

    ``which="box"`` gives the finite-volume operator on the blocks visiting
    ``|x - center| <= L``.  ``which="complement"`` needs an ``outer`` radius
    (desk-scale stand-in for the infinite complement) and returns the walk on
    the outer box subspace minus the box subspace.

    Returns ``(spec, matrix, basis_indices)``.
    """
    if not check_localizing(perm):
        raise ValueError(f"permutation {perm} is not localizing")
    if L < 2:
        raise ValueError(f"L={L} < 2")
    if which == "box":
        spec = WalkOperatorSpec(coin, fld, perm, outer=L, center=center)
        M, basis = materialize(spec, "outer", dense=dense)
    elif which == "complement":
        if outer is None or outer < L + 3:
            raise ValueError("complement restriction needs an outer radius >= L + 3")
        spec = WalkOperatorSpec(coin, fld, perm, outer=outer, collars=(L,), center=center)
        M, basis = materialize(spec, ("complement", L), dense=dense)
    else:
        raise ValueError(f"unknown restriction {which!r}")
    return spec, M, basis


@dataclass(frozen=True)
class DefectResult:
    matrix: sp.csr_matrix
    basis: NDArray[np.int64]
    norm: float
    coin_distance: float

    @property
    def ratio(self) -> float:
        """``||T^L|| / ||C - C_pi||``; nan when the coins coincide."""
        return self.norm / self.coin_distance if self.coin_distance > 0 else float("nan")


def _sparse_norm2(M: sp.spmatrix) -> float:
    M = sp.csr_matrix(M)
    if M.nnz == 0:
        return 0.0
    rows = np.unique(M.nonzero()[0])
    cols = np.unique(M.nonzero()[1])
    sub = M[rows][:, cols].toarray()
    return float(np.linalg.norm(sub, 2))


def defect_operator(L: int, coin, perm: Permutation, fld: PhaseField, outer: int, center=None) -> DefectResult:
    """``T^L = U - U^L`` on the outer box subspace, with its operator norm."""
    full = WalkOperatorSpec(coin, fld, perm, outer=outer, center=center)
    dec = full.with_collars((L,))
    U, basis = materialize(full)
    UL, basis2 = materialize(dec)
    assert np.array_equal(basis, basis2)
    T = sp.csr_matrix(U - UL)
    T.eliminate_zeros()
    return DefectResult(T, basis, _sparse_norm2(T), coin_distance(coin, permutation_matrix(perm)))


def export_triplets(M, path) -> None:
    """Write a sparse matrix as CSV rows ``row, col, re, im`` (nonzeros only)."""
    C = sp.coo_matrix(M)
    order = np.lexsort((C.col, C.row))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "re", "im"])
        for k in order:
            z = complex(C.data[k])
            w.writerow([int(C.row[k]), int(C.col[k]), repr(z.real), repr(z.imag)])


def blocks_to_json(blocks: Sequence[InvariantBlock]) -> str:
    return json.dumps([
        {"anchor": {"tau": b.anchor[0], "x": list(b.anchor[1])},
         "members": [{"tau": t, "x": list(x)} for t, x in b.members]}
        for b in blocks
    ])

"""Dynamical numerical linked-cluster expansion for quench correlators.

Each cluster contributes a property array P of shape (T, n, n) per output
time: the diagonal holds <Sz_i>, the off-diagonal the connected correlator
4(<Sz_i Sz_j> - <Sz_i><Sz_j>) evaluated in that cluster alone. Weights are
obtained by subtracting every connected proper sub-cluster embedding, entry
by entry, and the lattice value per site is the sum of weights over all
fixed polyominoes.

The production path skips explicit subtraction: in the poset of connected
site sets the Moebius function mu(s, c) is (-1)**|c \\ s| when every site
of c \\ s touches s and 0 otherwise. Summing it over all clusters of at most
N sites containing s leaves the multiplicity sum_k (-1)**k binom(p, k),
k <= N - |s|, with p the perimeter of s. Explicit subtraction stays
available for checks.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from .clusters import Cluster, HamiltonianClass, connected_subsets, tables_for
from .evolve import KRYLOV_TOL, all_down, evolve_piecewise, magnetizations, zz_matrix
from .lattice import InteractionModel, LatticeGeometry
from .model import Schedule, build_hamiltonian, stack_hamiltonians
from .observables import CorrelationMap

log = logging.getLogger(__name__)

DEFAULT_ORDER = 9
LARGE_ORDER = 10
NLCE_DENSE_MAX_SITES = 6
BATCH_AMPLITUDES = 2 ** 17


class ResummationWarning(UserWarning):
    pass


def property_array(psi: np.ndarray) -> np.ndarray:
    z = magnetizations(psi)
    p = 4.0 * (zz_matrix(psi) - z[..., :, None] * z[..., None, :])
    n = z.shape[-1]
    p[..., np.arange(n), np.arange(n)] = z
    return p


@dataclass
class SolveOptions:
    n_steps: int = 5
    shift_mode: str = "cluster"
    method: str = "auto"
    dense_max_sites: int = NLCE_DENSE_MAX_SITES
    tol: float = KRYLOV_TOL


def _solve_batch(args):
    sites_list, geom, interaction, schedule, checkpoints, opts = args
    with threadpool_limits(1):
        hams = [build_hamiltonian(s, geom, interaction, 0.0, 0.0, opts.shift_mode) for s in sites_list]
        batch = stack_hamiltonians(hams)
        n = batch.n_sites
        psi0 = np.broadcast_to(all_down(n), (len(hams), 2 ** n)).copy()
        cps = [schedule.duration] if checkpoints is None else list(checkpoints)
        states = evolve_piecewise(batch, schedule, psi0, opts.n_steps, cps, opts.method,
                                  opts.dense_max_sites, opts.tol)
        props = property_array(states)  # (T, B, n, n)
        return np.moveaxis(props, 1, 0)


def solve_clusters(clusters: Sequence[Cluster], geom: LatticeGeometry, interaction: InteractionModel,
                   schedule: Schedule, checkpoints=None, opts: SolveOptions = SolveOptions(),
                   threads: int = 1) -> Dict[tuple, np.ndarray]:
    """Evolve every cluster from all-down; returns canonical key -> P (T, n, n)."""
    by_order: Dict[int, List[Cluster]] = {}
    for c in clusters:
        by_order.setdefault(c.order, []).append(c)
    jobs, owners = [], []
    for n, group in sorted(by_order.items()):
        chunk = max(1, BATCH_AMPLITUDES // 2 ** n)
        for k in range(0, len(group), chunk):
            part = group[k:k + chunk]
            jobs.append(([c.sites for c in part], geom, interaction, schedule, checkpoints, opts))
            owners.append(part)
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_solve_batch, jobs))
    else:
        results = [_solve_batch(j) for j in jobs]
    out = {}
    for part, res in zip(owners, results):
        for c, p in zip(part, res):
            out[c.sites] = p
    return out


def member_property(rep_prop: np.ndarray, symmetry_map: np.ndarray) -> np.ndarray:
    return rep_prop[..., symmetry_map[:, None], symmetry_map[None, :]]


def cluster_property(hclass: HamiltonianClass, geom: LatticeGeometry, interaction: InteractionModel,
                     schedule: Schedule, checkpoints=None,
                     opts: SolveOptions = SolveOptions()) -> Dict[tuple, np.ndarray]:
    """Solve a class representative once and map the result onto every member.

    Returns member key -> P of shape (T, n, n); T = 1 without checkpoints.
    """
    rep = hclass.representative
    p = solve_clusters([rep], geom, interaction, schedule, checkpoints, opts)[rep.sites]
    return {m.sites: member_property(p, perm) for m, perm in zip(hclass.members, hclass.symmetry_maps)}


def subtract_weights(clusters: Sequence[Cluster], properties: Dict[tuple, np.ndarray]) -> Dict[tuple, np.ndarray]:
    """Explicit weights W(c) = P(c) - sum over connected proper sub-embeddings W(s).

    Each distinct site subset of c is subtracted on its own entries only,
    so a correlator entry (i, j) collects contributions from sub-clusters
    containing both sites.
    """
    weights: Dict[tuple, np.ndarray] = {}
    for c in sorted(clusters, key=lambda c: c.order):
        try:
            w = np.array(properties[c.sites], dtype=float, copy=True)
        except KeyError:
            raise KeyError(f"no property for cluster {c.sites}") from None
        full = (1 << c.order) - 1
        for mask in connected_subsets(c.adjacency):
            if mask == full:
                continue
            bits, key = c.subset(mask)
            try:
                ws = weights[key]
            except KeyError:
                raise RuntimeError(f"sub-cluster {key} of {c.sites} has no weight; "
                                   "clusters must be closed under taking connected subsets") from None
            idx = np.asarray(bits)
            w[..., idx[:, None], idx[None, :]] -= ws
        weights[c.sites] = w
    return weights


def pair_index(cluster: Cluster, target: Tuple[int, int]):
    """Index pairs (i, j) of sites in ``cluster`` with site_j - site_i == target."""
    idx = cluster.index
    dx, dy = target
    pairs = [(i, idx[(x + dx, y + dy)]) for i, (x, y) in enumerate(cluster.sites)
             if (x + dx, y + dy) in idx]
    if not pairs:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    a, b = zip(*pairs)
    return np.asarray(a, dtype=np.intp), np.asarray(b, dtype=np.intp)


def bulk_from_weights(weights: Dict[tuple, np.ndarray], clusters: Sequence[Cluster],
                      targets: Sequence[Tuple[int, int]], max_order: int):
    """Per-order increments of <Sz> and C(r) from explicit weights.

    Returns ``(z_inc, c_inc)`` with shapes (max_order, T) and
    (max_order, T, len(targets)).
    """
    sample = next(iter(weights.values()))
    T = sample.shape[0]
    z_inc = np.zeros((max_order, T))
    c_inc = np.zeros((max_order, T, len(targets)))
    for c in clusters:
        if c.order > max_order:
            continue
        w = weights[c.sites]
        z_inc[c.order - 1] += np.trace(w, axis1=-2, axis2=-1)
        for k, r in enumerate(targets):
            a, b = pair_index(c, r)
            if a.size:
                c_inc[c.order - 1, :, k] += w[:, a, b].sum(axis=-1)
    return z_inc, c_inc


def order_coefficients(size: int, perimeter: int, max_order: int) -> np.ndarray:
    """Per-order multiplicities (-1)**k binom(p, k), k = order - size."""
    coef = np.zeros(max_order)
    for order in range(size, min(max_order, size + perimeter) + 1):
        k = order - size
        coef[order - 1] = (-1) ** k * math.comb(perimeter, k)
    return coef


def euler_resum(partial_sums, start_order: int = 3):
    """Euler-transform the order-by-order partial sums (first axis).

    Orders below ``start_order`` are summed as is; the remaining
    increments a_k are Euler transformed, which for K increments equals
    the binomial average sum_j binom(K, j) S_{s-1+j} / 2**K of the partial
    sums S_{s-1}, ..., S_{s-1+K}. Alternating increments converge to the
    mean of neighboring partial sums. With fewer than ``start_order``
    orders the last raw partial sum is returned and a ResummationWarning
    is issued.
    """
    s = np.asarray(partial_sums, dtype=float)
    n = s.shape[0]
    if start_order < 1:
        raise ValueError("start_order must be >= 1")
    if n < start_order:
        warnings.warn(f"only {n} orders available, Euler resummation starts at {start_order}",
                      ResummationWarning, stacklevel=2)
        return s[-1]
    base = s[start_order - 2] if start_order >= 2 else np.zeros_like(s[0])
    seq = np.concatenate([base[None], s[start_order - 1:]])
    K = seq.shape[0] - 1
    w = np.array([math.comb(K, j) for j in range(K + 1)], dtype=float) / 2.0 ** K
    return np.tensordot(w, seq, axes=(0, 0))


@dataclass
class NLCEResult:
    """Bulk expansion results at each output time.

    ``z_partial[k]`` and ``c_partial[k]`` are partial sums through order
    k + 1; C(0, 0) is formed as 1 - 4 <Sz>**2 from the summed magnetization.
    """

    orders: np.ndarray
    times: np.ndarray
    targets: List[Tuple[int, int]]
    z_partial: np.ndarray
    c_partial: np.ndarray
    z_resummed: np.ndarray
    c_resummed: np.ndarray
    resummed_ok: bool
    settings: Dict[str, object] = field(default_factory=dict)

    @property
    def c00_partial(self):
        return 1.0 - 4.0 * self.z_partial ** 2

    @property
    def c00_resummed(self):
        return 1.0 - 4.0 * self.z_resummed ** 2

    @property
    def mean_n_resummed(self):
        return self.z_resummed + 0.5

    def correlator(self, target, order: Optional[int] = None) -> np.ndarray:
        """Time series of C(target), resummed unless ``order`` is given."""
        target = tuple(target)
        if target == (0, 0):
            return self.c00_resummed if order is None else self.c00_partial[order - 1]
        for cand in (target, (-target[0], -target[1])):
            if cand in self.targets:
                k = self.targets.index(cand)
                return self.c_resummed[:, k] if order is None else self.c_partial[order - 1, :, k]
        raise KeyError(f"{target} not among computed displacements")

    def correlation_map(self, time_index: int = -1, order: Optional[int] = None) -> CorrelationMap:
        wx = max(abs(dx) for dx, _ in self.targets + [(0, 0)])
        wy = max(abs(dy) for _, dy in self.targets + [(0, 0)])
        vals = np.zeros((2 * wx + 1, 2 * wy + 1))
        counts = np.zeros(vals.shape, dtype=int)
        for t in self.targets + [(0, 0)]:
            v = self.correlator(t, order)[time_index]
            for dx, dy in {t, (-t[0], -t[1])}:
                vals[dx + wx, dy + wy] = v
                counts[dx + wx, dy + wy] = 1
        z = self.z_resummed if order is None else self.z_partial[order - 1]
        meta = {"mean_sz": float(z[time_index]), "mean_n": float(z[time_index] + 0.5),
                "order": "resummed" if order is None else order}
        return CorrelationMap((wx, wy), vals, None, counts, 0, meta)


def _check_targets(targets, max_order):
    out = []
    for t in targets:
        dx, dy = int(t[0]), int(t[1])
        if (dx, dy) == (0, 0):
            continue
        if abs(dx) + abs(dy) > max_order - 1:
            raise ValueError(f"displacement {(dx, dy)} exceeds every cluster of order <= {max_order}")
        out.append((dx, dy))
    return out


def nlce_correlators(max_order: int, geom: LatticeGeometry, interaction: InteractionModel,
                     schedule: Schedule, targets: Sequence[Tuple[int, int]] = ((1, 0), (0, 1), (1, 1)),
                     checkpoints: Optional[Sequence[float]] = None, opts: SolveOptions = SolveOptions(),
                     start_order: int = 3, threads: int = 1) -> NLCEResult:
    """Bulk <Sz> and connected C(r) by the linked-cluster expansion.

    Returns per-order partial sums and Euler-resummed values at each
    checkpoint (the end of the schedule by default).
    """
    if max_order > LARGE_ORDER:
        warnings.warn(f"order {max_order} needs a very large number of cluster solves", RuntimeWarning,
                      stacklevel=2)
    targets = _check_targets(targets, max_order)
    clusters, classes = tables_for(max_order, geom, interaction)
    reps = [hc.representative for hc in classes]
    log.info("order %d: %d clusters in %d classes", max_order, len(clusters), len(reps))
    props = solve_clusters(reps, geom, interaction, schedule, checkpoints, opts, threads)
    T = 1 if checkpoints is None else len(checkpoints)
    z_inc = np.zeros((max_order, T))
    c_inc = np.zeros((max_order, T, len(targets)))
    for hc in classes:
        rep = hc.representative
        p = props[rep.sites]
        coef = order_coefficients(rep.order, rep.perimeter, max_order)
        z_sum = len(hc.members) * np.trace(p, axis1=-2, axis2=-1)
        z_inc += coef[:, None] * z_sum[None, :]
        for k, r in enumerate(targets):
            acc = np.zeros(T)
            for m, perm in zip(hc.members, hc.symmetry_maps):
                a, b = pair_index(m, r)
                if a.size:
                    acc += p[:, perm[a], perm[b]].sum(axis=-1)
            c_inc[:, :, k] += coef[:, None] * acc[None, :]
    z_partial = np.cumsum(z_inc, axis=0)
    c_partial = np.cumsum(c_inc, axis=0)
    ok = max_order >= start_order
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ResummationWarning)
        z_res = euler_resum(z_partial, start_order)
        c_res = euler_resum(c_partial, start_order)
    times = np.array([schedule.duration] if checkpoints is None else checkpoints, dtype=float)
    settings = {"max_order": max_order, "start_order": start_order, "n_steps": opts.n_steps,
                "shift_mode": opts.shift_mode, "cutoff": interaction.cutoff.value,
                "c6": interaction.c6, "anisotropy": geom.anisotropy, "n_classes": len(reps),
                "n_clusters": len(clusters)}
    return NLCEResult(np.arange(1, max_order + 1), times, targets, z_partial, c_partial,
                      z_res, c_res, ok, settings)

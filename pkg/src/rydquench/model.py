"""Quench schedules and cluster Hamiltonians.

The Hamiltonian (in frequency units, H/h) is

    H = omega * sum_i Sx_i + sum_i (I_i - delta) Sz_i + sum_{i<j} V_ij Sz_i Sz_j

with I_i = sum_{j != i} V_ij / 2. Basis states are integers; bit i set means
site i is in the Rydberg state (Sz = +1/2).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .lattice import InteractionModel, LatticeGeometry, coupling_matrix

SHIFT_MODES = ("bulk", "cluster")


@dataclass(frozen=True)
class Segment:
    duration: float
    omega_start: float
    omega_end: float
    delta_start: float
    delta_end: float

    def omega_at(self, s):
        return self.omega_start + (self.omega_end - self.omega_start) * s

    def delta_at(self, s):
        return self.delta_start + (self.delta_end - self.delta_start) * s


class Schedule:
    """Piecewise-linear time course of the drive omega(t) and detuning delta(t)."""

    def __init__(self, segments: Iterable[Segment | Sequence[float]]):
        segs = [s if isinstance(s, Segment) else Segment(*map(float, s)) for s in segments]
        for s in segs:
            if s.duration < 0:
                raise ValueError(f"negative segment duration {s.duration}")
        segs = [s for s in segs if s.duration > 0]
        if not segs:
            raise ValueError("schedule has zero total duration")
        for a, b in zip(segs, segs[1:]):
            if not (math.isclose(a.omega_end, b.omega_start, abs_tol=1e-12)
                    and math.isclose(a.delta_end, b.delta_start, abs_tol=1e-12)):
                raise ValueError("controls must be continuous across segment boundaries")
        self.segments: Tuple[Segment, ...] = tuple(segs)
        self.boundaries = np.concatenate([[0.0], np.cumsum([s.duration for s in segs])])

    @property
    def duration(self) -> float:
        return float(self.boundaries[-1])

    def __repr__(self):
        return f"Schedule({list(self.segments)!r})"

    def __eq__(self, other):
        return isinstance(other, Schedule) and self.segments == other.segments

    def _locate(self, t):
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(self.boundaries, t, side="right") - 1, 0, len(self.segments) - 1)
        s = (t - self.boundaries[k]) / np.array([seg.duration for seg in self.segments])[k]
        return k, np.clip(s, 0.0, 1.0)

    def omega(self, t):
        k, s = self._locate(t)
        a = np.array([g.omega_start for g in self.segments])[k]
        b = np.array([g.omega_end for g in self.segments])[k]
        return a + (b - a) * s

    def delta(self, t):
        k, s = self._locate(t)
        a = np.array([g.delta_start for g in self.segments])[k]
        b = np.array([g.delta_end for g in self.segments])[k]
        return a + (b - a) * s

    def steps(self, n_steps: int = 5, checkpoints: Optional[Sequence[float]] = None):
        """Sub-steps ``(t0, t1, omega_avg, delta_avg)`` covering the schedule.

        Every segment is cut into ``n_steps`` equal pieces; checkpoint times
        add extra cuts. Controls are linear within a piece, so their time
        average is the midpoint value.
        """
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        cuts = []
        for k, seg in enumerate(self.segments):
            cuts.extend(self.boundaries[k] + seg.duration * np.arange(n_steps) / n_steps)
        cuts.append(self.duration)
        if checkpoints is not None:
            cuts.extend(t for t in checkpoints if 0 < t < self.duration)
        cuts = np.unique(np.asarray(cuts))
        out = []
        for t0, t1 in zip(cuts[:-1], cuts[1:]):
            if t1 - t0 <= 1e-15 * max(1.0, self.duration):
                continue
            tm = 0.5 * (t0 + t1)
            out.append((float(t0), float(t1), float(self.omega(tm)), float(self.delta(tm))))
        return out

    def with_delta(self, delta: float) -> "Schedule":
        """Copy with a constant detuning replacing the detuning course."""
        return Schedule(Segment(s.duration, s.omega_start, s.omega_end, delta, delta)
                        for s in self.segments)

    def delta_crossings(self, level: float = 0.0) -> List[float]:
        """Times at which delta(t) crosses ``level`` inside a segment."""
        out = []
        for k, s in enumerate(self.segments):
            a, b = s.delta_start - level, s.delta_end - level
            if a == b or a * b > 0:
                continue
            out.append(float(self.boundaries[k] + s.duration * a / (a - b)))
        return sorted(set(out))

    def to_dict(self) -> dict:
        return {"segments": [[s.duration, s.omega_start, s.omega_end, s.delta_start, s.delta_end]
                             for s in self.segments]}

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        return cls(d["segments"])

    def table(self, n_points: int = 201) -> np.ndarray:
        t = np.union1d(np.linspace(0.0, self.duration, n_points), self.boundaries)
        return np.column_stack([t, self.omega(t), self.delta(t)])

    def to_csv(self, path, n_points: int = 201, header: Optional[dict] = None):
        with open(path, "w", newline="") as fh:
            for k, v in (header or {}).items():
                fh.write(f"# {k}: {v}\n")
            w = csv.writer(fh)
            w.writerow(["t", "omega", "delta"])
            for row in self.table(n_points):
                w.writerow([f"{x:.12g}" for x in row])


def sudden_schedule(omega0: float, delta: float, hold_time: float,
                    rise_time: float = 0.0, fall_time: float = 0.0) -> Schedule:
    """Drive switched on to ``omega0``, held, switched off; constant detuning."""
    if not omega0 > 0:
        raise ValueError("omega0 must be positive")
    if min(hold_time, rise_time, fall_time) < 0:
        raise ValueError("times must be non-negative")
    return Schedule([
        (rise_time, 0.0, omega0, delta, delta),
        (hold_time, omega0, omega0, delta, delta),
        (fall_time, omega0, 0.0, delta, delta),
    ])


def pulse_hold_time(omega0: float, area: float, rise_time: float = 0.0,
                    fall_time: float = 0.0) -> float:
    """Hold time giving rotation angle ``2 pi * integral(omega dt) == area``.

    Linear rise and fall each contribute half their duration.
    """
    hold = area / (2 * math.pi * omega0) - 0.5 * (rise_time + fall_time)
    if hold < 0:
        raise ValueError("rise and fall alone exceed the requested pulse area")
    return hold


def ramp_schedule(omega0: float, delta_i: float, delta_f: float, ramp_rate: float,
                  rise_time: float) -> Schedule:
    """Soft switch-on at ``delta_i``, linear detuning sweep, switch-off at ``delta_f``.

    ``ramp_rate`` is |d delta / dt| in frequency per time.
    """
    if not ramp_rate > 0:
        raise ValueError("ramp_rate must be positive")
    if rise_time < 0:
        raise ValueError("rise_time must be non-negative")
    sweep = abs(delta_f - delta_i) / ramp_rate
    return Schedule([
        (rise_time, 0.0, omega0, delta_i, delta_i),
        (sweep, omega0, omega0, delta_i, delta_f),
        (rise_time, omega0, 0.0, delta_f, delta_f),
    ])


@lru_cache(maxsize=32)
def spin_table(n: int) -> np.ndarray:
    """(2**n, n) array of Sz eigenvalues, +-1/2, for every basis state."""
    idx = np.arange(2 ** n, dtype=np.int64)
    return ((idx[:, None] >> np.arange(n)) & 1).astype(float) - 0.5


@dataclass(frozen=True, eq=False)
class ClusterHamiltonian:
    """Diagonal and transverse data of H for a set of sites.

    The diagonal is stored as ``zz + shift - delta * sz_total`` so the
    controls can be changed without recomputing pair sums. The leading
    axes of ``zz``/``shift`` may carry a batch of clusters of equal size.
    """

    n_sites: int
    omega: float
    delta: float
    zz: np.ndarray
    shift: np.ndarray
    site_shifts: np.ndarray
    couplings: np.ndarray
    sites: Tuple[Tuple[int, int], ...] = ()
    shift_mode: str = "cluster"
    diagonal: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "diagonal",
                           self.zz + self.shift - self.delta * sz_total(self.n_sites))

    @property
    def dim(self) -> int:
        return 2 ** self.n_sites

    @property
    def batch_shape(self) -> tuple:
        return self.zz.shape[:-1]

    def at(self, omega: float, delta: float) -> "ClusterHamiltonian":
        return ClusterHamiltonian(self.n_sites, omega, delta, self.zz, self.shift,
                                  self.site_shifts, self.couplings, self.sites, self.shift_mode)

    def dense(self) -> np.ndarray:
        """Explicit real symmetric matrix (or stack of matrices for a batch)."""
        n, dim = self.n_sites, self.dim
        idx = np.arange(dim)
        m = np.zeros(self.batch_shape + (dim, dim))
        m[..., idx, idx] = self.diagonal
        for i in range(n):
            m[..., idx, idx ^ (1 << i)] += 0.5 * self.omega
        return m


@lru_cache(maxsize=32)
def sz_total(n: int) -> np.ndarray:
    return spin_table(n).sum(axis=1)


def build_hamiltonian(sites: Sequence[Tuple[int, int]], geom: LatticeGeometry,
                      interaction: InteractionModel, omega: float, delta: float,
                      shift_mode: str = "cluster") -> ClusterHamiltonian:
    """Assemble the Hamiltonian of a cluster; bit i of a basis state is ``sites[i]``.

    ``shift_mode='bulk'`` uses the infinite-lattice value of I_i on every
    site; ``'cluster'`` sums V_ij / 2 only over partners inside the cluster.
    """
    sites = tuple((int(x), int(y)) for x, y in sites)
    if len(set(sites)) != len(sites):
        raise ValueError("duplicate sites in cluster")
    if shift_mode not in SHIFT_MODES:
        raise ValueError(f"shift_mode must be one of {SHIFT_MODES}")
    n = len(sites)
    v = coupling_matrix(sites, geom, interaction)
    if shift_mode == "bulk":
        site_shifts = np.full(n, interaction.bulk_shift(geom))
    else:
        site_shifts = 0.5 * v.sum(axis=1)
    spins = spin_table(n)
    zz = np.einsum("bi,ij,bj->b", spins, np.triu(v, 1), spins)
    shift = spins @ site_shifts
    return ClusterHamiltonian(n, float(omega), float(delta), zz, shift, site_shifts, v,
                              sites, shift_mode)


def stack_hamiltonians(hams: Sequence[ClusterHamiltonian]) -> ClusterHamiltonian:
    """Batch equal-size Hamiltonians sharing the same controls."""
    h0 = hams[0]
    if any(h.n_sites != h0.n_sites for h in hams):
        raise ValueError("batched clusters must have equal size")
    return ClusterHamiltonian(
        h0.n_sites, h0.omega, h0.delta,
        np.stack([h.zz for h in hams]), np.stack([h.shift for h in hams]),
        np.stack([h.site_shifts for h in hams]), np.stack([h.couplings for h in hams]),
        (), h0.shift_mode)

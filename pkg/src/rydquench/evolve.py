"""Unitary time evolution of cluster states and Sz measurements.

States are complex numpy arrays of length 2**n; a leading batch axis is
allowed when the Hamiltonian is a stack of equal-size clusters. Evolution
over a time step dt applies exp(-2j*pi*H*dt) with H in frequency units.
"""
from __future__ import annotations

from functools import lru_cache
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import CapacityError, NumericalError
from .lattice import InteractionModel, LatticeGeometry
from .model import ClusterHamiltonian, Schedule, build_hamiltonian, spin_table

MAX_ED_SITES = 16
DENSE_MAX_SITES = 10
KRYLOV_TOL = 1e-10
KRYLOV_M_START = 10
KRYLOV_M_MAX = 60

HBuilder = Union[ClusterHamiltonian, Callable[[float, float], ClusterHamiltonian]]


@lru_cache(maxsize=32)
def flip_indices(n: int) -> np.ndarray:
    idx = np.arange(2 ** n, dtype=np.intp)
    return np.stack([idx ^ (1 << i) for i in range(n)])


def all_down(n: int) -> np.ndarray:
    psi = np.zeros(2 ** n, dtype=complex)
    psi[0] = 1.0
    return psi


def product_state(n: int, up_sites=()) -> np.ndarray:
    """Basis state with the given sites excited; test helper."""
    psi = np.zeros(2 ** n, dtype=complex)
    psi[sum(1 << i for i in up_sites)] = 1.0
    return psi


def apply_hamiltonian(h: ClusterHamiltonian, psi: np.ndarray) -> np.ndarray:
    """Matrix-free H @ psi: diagonal multiply plus omega/2 times single-bit flips."""
    if psi.shape[-1] != h.dim:
        raise ValueError(f"state dimension {psi.shape[-1]} does not match 2**{h.n_sites}")
    out = h.diagonal * psi
    n = h.n_sites
    if h.omega != 0.0 and n:
        lead = psi.shape[:-1]
        acc = np.zeros_like(psi)
        for i in range(n):
            # flipping bit i reverses the middle axis of this view
            shape = lead + (2 ** (n - 1 - i), 2, 2 ** i)
            acc.reshape(shape)[...] += psi.reshape(shape)[..., ::-1, :]
        out += (0.5 * h.omega) * acc
    return out


def _norms(psi):
    return np.linalg.norm(psi, axis=-1)


def krylov_expm(h: ClusterHamiltonian, psi: np.ndarray, dt: float, tol: float = KRYLOV_TOL,
                m_start: int = KRYLOV_M_START, m_max: int = KRYLOV_M_MAX) -> np.ndarray:
    """exp(-2j pi H dt) psi by Lanczos with full reorthogonalization.

    The subspace grows until the a-posteriori error estimate
    ``beta_m |[exp(-i tau T_m)]_{m,0}|`` falls below ``tol`` for every
    batch member; if ``m_max`` is reached the step is halved.
    """
    batched = psi.ndim == 2
    v0 = psi if batched else psi[None]
    B, N = v0.shape
    beta0 = _norms(v0)
    safe0 = np.where(beta0 > 0, beta0, 1.0)
    V = np.empty((B, min(m_max, N) + 1, N), dtype=complex)
    V[:, 0] = v0 / safe0[:, None]
    alphas, betas = [], []
    tau = 2 * np.pi * dt
    coeffs = None
    for j in range(m_max):
        w = apply_hamiltonian(h, V[:, j])
        a = np.einsum("bn,bn->b", V[:, j].conj(), w).real
        w -= a[:, None] * V[:, j]
        if j > 0:
            w -= betas[-1][:, None] * V[:, j - 1]
        # one pass of classical Gram-Schmidt against the whole basis
        Vk = V[:, :j + 1]
        proj = np.matmul(Vk, w.conj()[:, :, None]).conj()
        w -= np.matmul(Vk.transpose(0, 2, 1), proj)[:, :, 0]
        b = _norms(w)
        alphas.append(a)
        m = j + 1
        if m >= min(m_start, N) or np.all(b < 1e-13):
            T = np.zeros((B, m, m))
            ar = np.arange(m)
            T[:, ar, ar] = np.stack(alphas, axis=1)
            if m > 1:
                off = np.stack(betas, axis=1)
                T[:, ar[:-1], ar[1:]] = off
                T[:, ar[1:], ar[:-1]] = off
            ev, U = np.linalg.eigh(T)
            coeffs = np.einsum("bij,bj,bj->bi", U, np.exp(-1j * tau * ev), U[:, 0, :])
            err = b * np.abs(coeffs[:, -1])
            if np.all(err < tol) or m >= N:
                break
        betas.append(b)
        safe = np.where(b > 1e-13, b, 1.0)
        V[:, j + 1] = np.where((b > 1e-13)[:, None], w / safe[:, None], 0.0)
    else:
        if abs(dt) < 1e-12:
            raise NumericalError("Krylov propagation failed to converge")
        half = krylov_expm(h, psi, 0.5 * dt, tol, m_start, m_max)
        return krylov_expm(h, half, 0.5 * dt, tol, m_start, m_max)
    m = coeffs.shape[1]
    out = beta0[:, None] * np.matmul(coeffs[:, None, :], V[:, :m])[:, 0]
    return out if batched else out[0]


class _DenseCache:
    def __init__(self):
        self._eig = {}

    def propagate(self, h: ClusterHamiltonian, psi: np.ndarray, dt: float) -> np.ndarray:
        key = (h.omega, h.delta)
        if key not in self._eig:
            self._eig[key] = np.linalg.eigh(h.dense())
        w, U = self._eig[key]
        phase = np.exp(-2j * np.pi * w * dt)
        c = np.einsum("...ji,...j->...i", U, psi)
        return np.einsum("...ij,...j->...i", U, phase * c)


def _as_builder(h_builder: HBuilder):
    if isinstance(h_builder, ClusterHamiltonian):
        return h_builder.at
    return h_builder


def evolve_piecewise(h_builder: HBuilder, schedule: Schedule, psi0: np.ndarray,
                     n_steps_per_segment: int = 5, checkpoints: Optional[Sequence[float]] = None,
                     method: str = "auto", dense_max_sites: int = DENSE_MAX_SITES,
                     tol: float = KRYLOV_TOL) -> np.ndarray:
    """Evolve ``psi0`` through ``schedule`` with time-averaged step Hamiltonians.

    Each segment is split into ``n_steps_per_segment`` pieces and the
    Hamiltonian of each piece uses the averaged controls. Returns the final
    state, or a stack of states at ``checkpoints`` if given.

    ``method`` is 'dense' (eigendecomposition), 'krylov', or 'auto', which
    picks dense for clusters up to ``dense_max_sites`` sites.
    """
    builder = _as_builder(h_builder)
    psi = np.asarray(psi0, dtype=complex)
    if np.any(np.abs(_norms(psi) - 1.0) > 1e-8):
        raise ValueError("initial state is not normalized")
    n_sites = int(round(np.log2(psi.shape[-1])))
    if method == "auto":
        method = "dense" if n_sites <= dense_max_sites else "krylov"
    if method not in ("dense", "krylov"):
        raise ValueError(f"unknown method {method!r}")
    dense = _DenseCache()

    cps = None if checkpoints is None else np.asarray(checkpoints, dtype=float)
    if cps is not None and (np.any(cps < 0) or np.any(cps > schedule.duration * (1 + 1e-12))):
        raise ValueError("checkpoints must lie within the schedule")
    steps = schedule.steps(n_steps_per_segment, cps)
    # merge runs of identical controls unless a checkpoint separates them
    merged = []
    eps = 1e-12 * max(1.0, schedule.duration)

    def at_checkpoint(t):
        return cps is not None and bool(np.any(np.abs(cps - t) <= eps))

    for t0, t1, om, de in steps:
        if merged and merged[-1][2] == om and merged[-1][3] == de and not at_checkpoint(t0):
            merged[-1] = (merged[-1][0], t1, om, de)
        else:
            merged.append((t0, t1, om, de))

    saved = {}
    if cps is not None:
        for t in cps:
            if t <= 0:
                saved[float(t)] = psi.copy()
    for t0, t1, om, de in merged:
        h = builder(om, de)
        if method == "dense":
            psi = dense.propagate(h, psi, t1 - t0)
        else:
            psi = krylov_expm(h, psi, t1 - t0, tol)
        if cps is not None:
            for t in cps:
                if abs(t - t1) <= eps and float(t) not in saved:
                    saved[float(t)] = psi.copy()
    if cps is None:
        return psi
    missing = [t for t in cps if float(t) not in saved]
    if missing:
        raise NumericalError(f"checkpoints {missing} not reached")
    return np.stack([saved[float(t)] for t in cps])


def probabilities(psi: np.ndarray) -> np.ndarray:
    return np.abs(psi) ** 2


def magnetizations(psi: np.ndarray) -> np.ndarray:
    """<Sz_i> for every site; trailing axis is the site."""
    n = int(round(np.log2(psi.shape[-1])))
    return probabilities(psi) @ spin_table(n)


def zz_matrix(psi: np.ndarray) -> np.ndarray:
    """<Sz_i Sz_j> for all site pairs (diagonal is 1/4)."""
    n = int(round(np.log2(psi.shape[-1])))
    s = spin_table(n)
    p = probabilities(psi)
    return np.einsum("...b,bi,bj->...ij", p, s, s)


def expectation_sz(psi: np.ndarray, site: int) -> float:
    n = int(round(np.log2(psi.shape[-1])))
    return float(probabilities(psi) @ spin_table(n)[:, site])


def expectation_szsz(psi: np.ndarray, site_a: int, site_b: int) -> float:
    n = int(round(np.log2(psi.shape[-1])))
    s = spin_table(n)
    return float(probabilities(psi) @ (s[:, site_a] * s[:, site_b]))


def energy(h: ClusterHamiltonian, psi: np.ndarray) -> float:
    return float(np.vdot(psi, apply_hamiltonian(h, psi)).real)


def ed_full_lattice(geom: LatticeGeometry, interaction: InteractionModel, schedule: Schedule,
                    checkpoints: Optional[Sequence[float]] = None, n_steps: int = 5,
                    shift_mode: str = "cluster", window: Optional[tuple] = None,
                    method: str = "auto", return_states: bool = False):
    """Quench a whole open-boundary patch from the all-down state.

    Returns a CorrelationMap of site-averaged connected correlators at the
    end of the schedule, or a list of maps at ``checkpoints``. With
    ``return_states`` the raw states are returned alongside.
    """
    from .observables import correlators_from_state

    if geom.n_sites > MAX_ED_SITES:
        raise CapacityError(f"{geom.n_sites} sites exceed the ED limit of {MAX_ED_SITES}")
    sites = geom.coords()
    ham = build_hamiltonian(sites, geom, interaction, 0.0, 0.0, shift_mode)
    psi0 = all_down(geom.n_sites)
    states = evolve_piecewise(ham, schedule, psi0, n_steps, checkpoints, method=method)
    if window is None:
        window = (geom.nx - 1, geom.ny - 1)
    if checkpoints is None:
        maps = correlators_from_state(states, sites, window=window)
    else:
        maps = [correlators_from_state(s, sites, window=window) for s in states]
    return (maps, states) if return_states else maps

"""Anisotropic square-lattice geometry and van der Waals pair potentials.

Lengths are in units of the nominal lattice spacing a_l. Energies are
frequencies (E/h), either in MHz or in units of J.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import constants

Site = Union[int, Tuple[int, int]]

# measured spacing ratio between the two lattice axes
DEFAULT_SPACING_RATIO = 1.028
LITHIUM6_MASS = 6.0151228874 * constants.atomic_mass
LATTICE_SPACING_M = 1064e-9 / math.sqrt(2.0)


class Cutoff(str, enum.Enum):
    NEAREST = "nn"
    NEXT_NEAREST = "nnn"
    RADIUS = "radius"


@dataclass(frozen=True)
class LatticeGeometry:
    """Rectangular nx-by-ny patch of an anisotropic square lattice.

    Sites are indexed row-major, ``index = iy * nx + ix``. ``roi`` is an
    optional ``(inner, outer)`` pair of radii in sites, measured from the
    patch center, defining an annular region of interest.
    """

    nx: int
    ny: int
    spacing_x: float = 1.0
    spacing_y: float = 1.0
    roi: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("lattice needs at least one site per axis")
        if not (self.spacing_x > 0 and self.spacing_y > 0):
            raise ValueError("lattice spacings must be positive")
        if self.roi is not None:
            inner, outer = self.roi
            if inner < 0 or outer <= inner:
                raise ValueError(f"bad roi radii {self.roi}")

    @classmethod
    def with_anisotropy(cls, nx: int, ny: int, ratio: float = DEFAULT_SPACING_RATIO,
                        roi=None) -> "LatticeGeometry":
        """Spacings with ``spacing_x / spacing_y == ratio`` and unit geometric mean."""
        s = math.sqrt(ratio)
        return cls(nx, ny, s, 1.0 / s, roi)

    @property
    def n_sites(self) -> int:
        return self.nx * self.ny

    @property
    def anisotropy(self) -> float:
        return self.spacing_x / self.spacing_y - 1.0

    def site_index(self, ix: int, iy: int) -> int:
        if not (0 <= ix < self.nx and 0 <= iy < self.ny):
            raise ValueError(f"site ({ix}, {iy}) outside {self.nx}x{self.ny} grid")
        return iy * self.nx + ix

    def site_coords(self, index: int) -> Tuple[int, int]:
        if not 0 <= index < self.n_sites:
            raise ValueError(f"site index {index} outside grid of {self.n_sites}")
        return index % self.nx, index // self.nx

    def coords(self) -> list:
        return [self.site_coords(i) for i in range(self.n_sites)]

    def _resolve(self, site: Site) -> Tuple[int, int]:
        if isinstance(site, (int, np.integer)):
            return self.site_coords(int(site))
        ix, iy = site
        self.site_index(ix, iy)
        return int(ix), int(iy)

    def distance(self, dx: float, dy: float) -> float:
        """Euclidean length of a lattice offset, in units of a_l."""
        return math.hypot(dx * self.spacing_x, dy * self.spacing_y)

    def mask(self) -> np.ndarray:
        """Boolean (ny, nx) region-of-interest mask; all True without an roi."""
        m = np.ones((self.ny, self.nx), dtype=bool)
        if self.roi is None:
            return m
        inner, outer = self.roi
        yy, xx = np.mgrid[0:self.ny, 0:self.nx]
        r = np.hypot(xx - (self.nx - 1) / 2.0, yy - (self.ny - 1) / 2.0)
        return (r >= inner) & (r <= outer)


@dataclass(frozen=True)
class InteractionModel:
    """Isotropic van der Waals potential ``V(r) = c6 / r**6`` with a cutoff.

    ``c6`` carries its sign (attractive states are negative) and is given
    in frequency units times a_l**6.
    """

    c6: float
    cutoff: Cutoff = Cutoff.NEXT_NEAREST
    r_max: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "cutoff", Cutoff(self.cutoff))
        if self.cutoff is Cutoff.RADIUS and (self.r_max is None or self.r_max <= 0):
            raise ValueError("radius cutoff needs a positive r_max")

    def scaled(self, c6: float) -> "InteractionModel":
        return InteractionModel(c6, self.cutoff, self.r_max)

    def in_range(self, dx: int, dy: int, geom: LatticeGeometry) -> bool:
        if dx == 0 and dy == 0:
            return False
        if self.cutoff is Cutoff.NEAREST:
            return abs(dx) + abs(dy) == 1
        if self.cutoff is Cutoff.NEXT_NEAREST:
            return max(abs(dx), abs(dy)) == 1
        return geom.distance(dx, dy) <= self.r_max * (1 + 1e-12)

    def potential(self, dx: int, dy: int, geom: LatticeGeometry) -> float:
        """Pair energy for a lattice offset (dx, dy); zero beyond the cutoff."""
        if not self.in_range(dx, dy, geom):
            return 0.0
        return self.c6 / geom.distance(dx, dy) ** 6

    def offsets(self, geom: LatticeGeometry) -> list:
        """All nonzero lattice offsets inside the cutoff."""
        if self.cutoff is Cutoff.RADIUS:
            rx = int(math.floor(self.r_max / geom.spacing_x)) + 1
            ry = int(math.floor(self.r_max / geom.spacing_y)) + 1
        else:
            rx = ry = 1
        return [(dx, dy) for dy in range(-ry, ry + 1) for dx in range(-rx, rx + 1)
                if self.in_range(dx, dy, geom)]

    def bulk_shift(self, geom: LatticeGeometry) -> float:
        """Site shift sum_j V_ij / 2 of an infinite lattice within the cutoff."""
        return 0.5 * sum(self.potential(dx, dy, geom) for dx, dy in self.offsets(geom))


def pair_interaction(geom: LatticeGeometry, model: InteractionModel,
                     site_a: Site, site_b: Site) -> float:
    """V between two grid sites given as indices or (ix, iy) tuples."""
    ax, ay = geom._resolve(site_a)
    bx, by = geom._resolve(site_b)
    return model.potential(bx - ax, by - ay, geom)


def coupling_matrix(sites: Sequence[Tuple[int, int]], geom: LatticeGeometry,
                    model: InteractionModel) -> np.ndarray:
    n = len(sites)
    v = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            v[i, j] = v[j, i] = model.potential(sites[j][0] - sites[i][0],
                                                sites[j][1] - sites[i][1], geom)
    return v


def blockade_radius(c6: float, omega: float) -> float:
    """Distance at which |V| equals the drive, ``(|c6| / omega)**(1/6)``."""
    if not omega > 0:
        raise ValueError("blockade radius needs omega > 0")
    return (abs(c6) / omega) ** (1.0 / 6.0)


def displacement_estimate(c6: float, r: float, mass: float, t: float) -> float:
    """Distance travelled by a Rydberg pair under constant vdW acceleration.

    Uses ``a = 6 |c6| / (r**7 m)`` and returns ``a t**2 / 2``. Any consistent
    unit system works; in SI, c6 is in J m**6, r in m, mass in kg, t in s.
    """
    if not r > 0:
        raise ValueError("separation must be positive")
    if t < 0:
        raise ValueError("time must be non-negative")
    accel = 6.0 * abs(c6) / (r ** 7 * mass)
    return 0.5 * accel * t * t


def c6_si(c6_mhz_al6: float, spacing_m: float = LATTICE_SPACING_M) -> float:
    """Convert c6 from MHz*a_l**6 (frequency units) to J m**6."""
    return c6_mhz_al6 * 1e6 * constants.h * spacing_m ** 6

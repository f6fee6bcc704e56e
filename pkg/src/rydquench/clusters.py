"""Connected clusters of the square lattice and their symmetry classes.

Clusters are fixed polyominoes: site sets connected through nearest-neighbor
edges, distinct up to translation only. The canonical form is translated to
min x = min y = 0 and sorted row-major by (y, x); site i of a cluster is
bit i of its basis states.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import CapacityError
from .lattice import InteractionModel, LatticeGeometry

MAX_ORDER = 12
TABLE_FORMAT_VERSION = 1

Coord = Tuple[int, int]
NEIGHBORS = ((1, 0), (-1, 0), (0, 1), (0, -1))

# D4 as integer matrices (a, b, c, d): (x, y) -> (a x + b y, c x + d y)
D4 = (
    (1, 0, 0, 1),    # identity
    (-1, 0, 0, 1),   # mirror x
    (1, 0, 0, -1),   # mirror y
    (-1, 0, 0, -1),  # rotate 180
    (0, -1, 1, 0),   # rotate 90
    (0, 1, -1, 0),   # rotate 270
    (0, 1, 1, 0),    # mirror diagonal
    (0, -1, -1, 0),  # mirror anti-diagonal
)


def canonical(sites: Iterable[Coord]) -> Tuple[Coord, ...]:
    sites = list(sites)
    mx = min(x for x, _ in sites)
    my = min(y for _, y in sites)
    return tuple(sorted(((x - mx, y - my) for x, y in sites), key=lambda p: (p[1], p[0])))


@dataclass(frozen=True)
class Cluster:
    sites: Tuple[Coord, ...]

    @classmethod
    def from_sites(cls, sites: Iterable[Coord]) -> "Cluster":
        return cls(canonical(sites))

    @property
    def order(self) -> int:
        return len(self.sites)

    def __len__(self):
        return len(self.sites)

    @cached_property
    def index(self) -> Dict[Coord, int]:
        return {s: i for i, s in enumerate(self.sites)}

    @cached_property
    def adjacency(self) -> Tuple[int, ...]:
        """Nearest-neighbor adjacency as one bitmask per site."""
        idx = self.index
        return tuple(sum(1 << idx[(x + dx, y + dy)] for dx, dy in NEIGHBORS
                         if (x + dx, y + dy) in idx) for x, y in self.sites)

    @cached_property
    def perimeter(self) -> int:
        """Number of lattice sites outside the cluster adjacent to it."""
        idx = self.index
        return len({(x + dx, y + dy) for x, y in self.sites for dx, dy in NEIGHBORS} - idx.keys())

    @property
    def extent(self) -> Tuple[int, int]:
        return (max(x for x, _ in self.sites), max(y for _, y in self.sites))

    def is_connected(self) -> bool:
        return is_connected_mask((1 << self.order) - 1, self.adjacency)

    def subset(self, mask: int) -> Tuple[Tuple[int, ...], Tuple[Coord, ...]]:
        """Site indices of ``mask`` and the canonical key of that sub-cluster."""
        bits = tuple(i for i in range(self.order) if mask >> i & 1)
        return bits, canonical(self.sites[i] for i in bits)

    def transformed(self, g) -> "Cluster":
        a, b, c, d = g
        return Cluster.from_sites((a * x + b * y, c * x + d * y) for x, y in self.sites)


def is_connected_mask(mask: int, adjacency: Sequence[int]) -> bool:
    if mask == 0:
        return False
    seen = mask & -mask
    frontier = seen
    while frontier:
        nxt = 0
        m = frontier
        while m:
            low = m & -m
            nxt |= adjacency[low.bit_length() - 1]
            m ^= low
        frontier = nxt & mask & ~seen
        seen |= frontier
    return seen == mask


def connected_subsets(adjacency: Sequence[int]) -> List[int]:
    """Every connected vertex subset of a small graph, as bitmasks, once each.

    Redelmeier-style growth rooted at the lowest vertex of each subset.
    """
    n = len(adjacency)
    out = []

    def grow(sub, untried, reached, allowed):
        while untried:
            u = untried & -untried
            untried ^= u
            nsub = sub | u
            out.append(nsub)
            new = adjacency[u.bit_length() - 1] & allowed & ~reached
            grow(nsub, untried | new, reached | new, allowed)

    for v in range(n):
        allowed = ((1 << n) - 1) & ~((1 << (v + 1)) - 1)
        grow(0, 1 << v, 1 << v, allowed | (1 << v))
    return out


def enumerate_clusters(max_order: int) -> List[Cluster]:
    """All fixed polyominoes with 1..max_order sites, grouped by order.

    Redelmeier's algorithm: grow from the origin using only cells with
    y > 0 or (y == 0 and x >= 0), so each shape is produced once.
    """
    if not 1 <= max_order <= MAX_ORDER:
        raise CapacityError(f"max_order must be in 1..{MAX_ORDER}")
    by_order: List[List[Cluster]] = [[] for _ in range(max_order + 1)]
    poly: List[Coord] = []

    def valid(c):
        return c[1] > 0 or (c[1] == 0 and c[0] >= 0)

    def rec(untried: List[Coord], reached: set):
        untried = list(untried)
        while untried:
            cell = untried.pop()
            poly.append(cell)
            by_order[len(poly)].append(Cluster.from_sites(poly))
            if len(poly) < max_order:
                new = [(cell[0] + dx, cell[1] + dy) for dx, dy in NEIGHBORS]
                new = [c for c in new if valid(c) and c not in reached]
                reached.update(new)
                rec(untried + new, reached)
                reached.difference_update(new)
            poly.pop()

    rec([(0, 0)], {(0, 0)})
    out = []
    for level in by_order[1:]:
        out.extend(sorted(level, key=lambda c: c.sites))
    return out


def compatible_symmetries(geom: LatticeGeometry, interaction: InteractionModel,
                          reach: int = MAX_ORDER) -> Tuple[tuple, ...]:
    """Point-group elements that leave every pair potential unchanged."""
    offsets = [(dx, dy) for dx in range(-reach, reach + 1) for dy in range(-reach, reach + 1)
               if (dx, dy) != (0, 0)]
    vals = {d: interaction.potential(d[0], d[1], geom) for d in offsets}
    good = []
    for g in D4:
        a, b, c, d = g
        ok = True
        for (dx, dy), v in vals.items():
            w = vals[(a * dx + b * dy, c * dx + d * dy)]
            if not math.isclose(v, w, rel_tol=1e-12, abs_tol=1e-300):
                ok = False
                break
        if ok:
            good.append(g)
    return tuple(good)


@dataclass
class HamiltonianClass:
    """Clusters whose Hamiltonians coincide under a lattice symmetry.

    ``symmetry_maps[k][i]`` is the representative's site index that
    member k's site i maps to.
    """

    representative: Cluster
    members: List[Cluster] = field(default_factory=list)
    symmetry_maps: List[np.ndarray] = field(default_factory=list)

    @property
    def order(self) -> int:
        return self.representative.order


def _class_key(cluster: Cluster, group) -> Tuple[tuple, Cluster]:
    best = None
    for g in group:
        t = cluster.transformed(g)
        if best is None or t.sites < best[1].sites:
            best = (g, t)
    return best


def classify(clusters: Sequence[Cluster], interaction: InteractionModel,
             geom: LatticeGeometry) -> List[HamiltonianClass]:
    """Partition clusters into Hamiltonian-equivalence classes.

    Two clusters share a class when a point-group element compatible with
    the anisotropic, cutoff interaction maps one onto the other.
    """
    reach = max((max(c.extent) for c in clusters), default=0) + 1
    group = compatible_symmetries(geom, interaction, reach)
    return _classify_with_group(tuple(clusters), group)


def _classify_with_group(clusters, group) -> List[HamiltonianClass]:
    classes: Dict[tuple, HamiltonianClass] = {}
    for c in clusters:
        g, rep = _class_key(c, group)
        hc = classes.get(rep.sites)
        if hc is None:
            hc = classes[rep.sites] = HamiltonianClass(rep)
        a, b, cc, d = g
        moved = [(a * x + b * y, cc * x + d * y) for x, y in c.sites]
        mx = min(x for x, _ in moved)
        my = min(y for _, y in moved)
        perm = np.array([rep.index[(x - mx, y - my)] for x, y in moved], dtype=np.intp)
        hc.members.append(c)
        hc.symmetry_maps.append(perm)
    return sorted(classes.values(), key=lambda h: (h.order, h.representative.sites))


@lru_cache(maxsize=8)
def cluster_tables(max_order: int, group: tuple) -> Tuple[Tuple[Cluster, ...], Tuple[HamiltonianClass, ...]]:
    clusters = tuple(enumerate_clusters(max_order))
    return clusters, tuple(_classify_with_group(clusters, group))


def tables_for(max_order: int, geom: LatticeGeometry, interaction: InteractionModel):
    group = compatible_symmetries(geom, interaction, max_order + 1)
    return cluster_tables(max_order, group)


def save_tables(path, max_order: int, geom: LatticeGeometry, interaction: InteractionModel):
    """Write the class table as versioned JSON keyed by order, anisotropy and cutoff."""
    group = compatible_symmetries(geom, interaction, max_order + 1)
    _, classes = cluster_tables(max_order, group)
    doc = {
        "format": "rydquench-cluster-table",
        "version": TABLE_FORMAT_VERSION,
        "key": {"max_order": max_order, "anisotropy": geom.anisotropy,
                "cutoff": interaction.cutoff.value, "r_max": interaction.r_max},
        "group": [list(g) for g in group],
        "classes": [{"representative": [list(s) for s in hc.representative.sites],
                     "members": [[list(s) for s in m.sites] for m in hc.members],
                     "maps": [p.tolist() for p in hc.symmetry_maps]} for hc in classes],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_tables(path, max_order=None, geom=None, interaction=None) -> List[HamiltonianClass]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "rydquench-cluster-table" or doc.get("version") != TABLE_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported cluster table format")
    key = doc["key"]
    if max_order is not None and key["max_order"] != max_order:
        raise ValueError(f"{path}: table built for order {key['max_order']}")
    if geom is not None and not math.isclose(key["anisotropy"], geom.anisotropy, abs_tol=1e-12):
        raise ValueError(f"{path}: anisotropy mismatch")
    if interaction is not None and key["cutoff"] != interaction.cutoff.value:
        raise ValueError(f"{path}: cutoff mismatch")
    out = []
    for c in doc["classes"]:
        rep = Cluster(tuple(tuple(s) for s in c["representative"]))
        out.append(HamiltonianClass(rep, [Cluster(tuple(tuple(s) for s in m)) for m in c["members"]],
                                    [np.array(p, dtype=np.intp) for p in c["maps"]]))
    return out

import math

import numpy as np
import pytest

from oracles import evolve_dense, pair_matrix, sz_expectations
from rydquench.clusters import Cluster, classify, connected_subsets, enumerate_clusters
from rydquench.evolve import all_down, ed_full_lattice
from rydquench.lattice import InteractionModel, LatticeGeometry
from rydquench.model import Schedule, pulse_hold_time, sudden_schedule
from rydquench.nlce import (ResummationWarning, SolveOptions, bulk_from_weights, cluster_property,
                            euler_resum, nlce_correlators, solve_clusters, subtract_weights)

ANISO = LatticeGeometry.with_anisotropy(4, 4)
INTER = InteractionModel(-6.0)
TARGETS = ((1, 0), (0, 1), (1, 1), (2, 0), (0, 2))


def pulse_schedule(delta):
    hold = pulse_hold_time(4.05, math.pi / 2, 0.01, 0.01)
    return sudden_schedule(4.05, delta, hold, 0.01, 0.01)


def segments(sched):
    return [(s.duration, s.omega_start, s.omega_end, s.delta_start, s.delta_end) for s in sched.segments]


def test_single_site_rabi():
    nu = 4.05
    ts = np.linspace(0.0, 0.5, 26)
    res = nlce_correlators(1, ANISO, INTER, Schedule([(0.5, nu, nu, 0.0, 0.0)]), targets=(),
                           checkpoints=ts)
    assert np.max(np.abs(res.z_partial[0] + 0.5 * np.cos(2 * np.pi * nu * ts))) < 1e-10


def test_omega_zero_properties_constant():
    sched = Schedule([(0.8, 0.0, 0.0, 2.0, -1.0)])
    clusters = enumerate_clusters(4)
    props = solve_clusters(clusters, ANISO, INTER, sched, checkpoints=[0.0, 0.3, 0.8])
    for c in clusters:
        p = props[c.sites]
        expect = np.zeros((c.order, c.order))
        np.fill_diagonal(expect, -0.5)
        assert np.allclose(p, expect[None], atol=1e-12)


def test_domino_matches_dense_oracle():
    sched = pulse_schedule(-2.0)
    domino = Cluster.from_sites([(0, 0), (1, 0)])
    hc = [h for h in classify(enumerate_clusters(2), INTER, ANISO) if domino in h.members][0]
    p = cluster_property(hc, ANISO, INTER, sched)[domino.sites][0]
    v = pair_matrix(domino.sites, -6.0, ANISO.spacing_x, ANISO.spacing_y)
    ref = evolve_dense(segments(sched), all_down(2), 5, v, 0.5 * v.sum(axis=1))
    z, zz = sz_expectations(ref)
    assert np.allclose(np.diag(p), z, atol=1e-10)
    assert p[0, 1] == pytest.approx(4 * (zz[0, 1] - z[0] * z[1]), abs=1e-10)


def test_subtract_single_site():
    one = Cluster.from_sites([(0, 0)])
    w = subtract_weights([one], {one.sites: np.array([[[-0.3]]])})
    assert w[one.sites][0, 0, 0] == -0.3


def test_subtract_missing_property():
    dom = Cluster.from_sites([(0, 0), (1, 0)])
    with pytest.raises(KeyError):
        subtract_weights([dom], {})


def test_noninteracting_weights_vanish():
    sched = pulse_schedule(1.0)
    clusters = enumerate_clusters(5)
    w = subtract_weights(clusters, solve_clusters(clusters, ANISO, InteractionModel(0.0), sched))
    for c in clusters:
        if c.order >= 2:
            assert np.max(np.abs(w[c.sites])) < 1e-10


def test_finite_graph_identity_3x3():
    """Summing weights over every connected subset of a 3x3 block reproduces ED of the block."""
    geom = LatticeGeometry.with_anisotropy(3, 3)
    sched = pulse_schedule(-3.0)
    block = Cluster.from_sites(geom.coords())
    masks = connected_subsets(block.adjacency)
    keys = {block.subset(m)[1] for m in masks}
    clusters = [Cluster(k) for k in keys]
    w = subtract_weights(clusters, solve_clusters(clusters, geom, INTER, sched))
    total = np.zeros((9, 9))
    for m in masks:
        bits, key = block.subset(m)
        idx = np.asarray(bits)
        total[idx[:, None], idx[None, :]] += w[key][0]
    cmap = ed_full_lattice(geom, INTER, sched, shift_mode="cluster")
    coords = geom.coords()
    block_index = [block.index[s] for s in coords]
    for d in ((1, 0), (0, 1), (1, 1), (2, 0), (1, -1)):
        vals = [total[block_index[i], block_index[j]] for i, a in enumerate(coords)
                for j, b in enumerate(coords) if (b[0] - a[0], b[1] - a[1]) == d]
        assert np.mean(vals) == pytest.approx(cmap[d], abs=1e-8)
    z = np.diag(total)
    assert np.mean(1 - 4 * z ** 2) == pytest.approx(cmap[0, 0], abs=1e-8)


@pytest.mark.parametrize("c6,delta", [(-6.0, -2.0), (-10.0, 3.0)])
def test_multiplicity_path_matches_explicit_subtraction(c6, delta):
    order = 6
    inter = InteractionModel(c6)
    sched = pulse_schedule(delta)
    fast = nlce_correlators(order, ANISO, inter, sched, targets=TARGETS)
    clusters = enumerate_clusters(order)
    w = subtract_weights(clusters, solve_clusters(clusters, ANISO, inter, sched))
    z_inc, c_inc = bulk_from_weights(w, clusters, fast.targets, order)
    assert np.max(np.abs(np.cumsum(z_inc, axis=0) - fast.z_partial)) < 1e-10
    assert np.max(np.abs(np.cumsum(c_inc, axis=0) - fast.c_partial)) < 1e-10


def test_noninteracting_expansion_exact_at_first_order():
    res = nlce_correlators(5, ANISO, InteractionModel(0.0), pulse_schedule(0.7), targets=TARGETS)
    assert np.max(np.abs(res.c_partial)) < 1e-10
    assert np.allclose(res.z_partial, res.z_partial[0], atol=1e-10)


def test_process_pool_gives_same_result():
    sched = pulse_schedule(-1.0)
    a = nlce_correlators(4, ANISO, INTER, sched, threads=1)
    b = nlce_correlators(4, ANISO, INTER, sched, threads=2)
    assert np.array_equal(a.c_partial, b.c_partial)


def test_correlator_lookup_and_map():
    res = nlce_correlators(4, ANISO, INTER, pulse_schedule(-4.0))
    assert res.correlator((-1, 0)) == res.correlator((1, 0))
    assert res.correlator((1, 0), order=2)[0] == res.c_partial[1, 0, 0]
    cmap = res.correlation_map()
    assert cmap[1, 0] == pytest.approx(res.correlator((1, 0))[0])
    assert cmap[0, 0] == pytest.approx(res.c00_resummed[0])
    with pytest.raises(KeyError):
        res.correlator((2, 0))


@pytest.mark.parametrize("targets", [((3, 0),), ((2, 2),)])
def test_target_beyond_order_rejected(targets):
    with pytest.raises(ValueError):
        nlce_correlators(3, ANISO, INTER, pulse_schedule(0.0), targets=targets)


# ---------------------------------------------------------------- Euler

def test_euler_converged_sequence():
    s = np.array([0.3, 0.1, 0.25, 0.27, 0.27, 0.27, 0.27])
    assert euler_resum(s, 5) == pytest.approx(0.27, abs=1e-15)
    assert euler_resum(np.full(9, 0.5)) == 0.5


def test_euler_alternating_increments():
    incs = np.array([(-1) ** k for k in range(10)], dtype=float)
    s = np.cumsum(incs)  # 1, 0, 1, 0, ...
    assert euler_resum(s, 3) == pytest.approx(0.5)
    assert euler_resum(s[:9], 3) == pytest.approx(0.5)


def test_euler_three_terms():
    s = np.array([0.4, -0.2, 0.7])
    assert euler_resum(s, 3) == pytest.approx(0.5 * (s[1] + s[2]))


def test_euler_too_few_orders():
    with pytest.warns(ResummationWarning):
        assert euler_resum(np.array([0.1, 0.2]), 3) == 0.2
    res = nlce_correlators(2, ANISO, INTER, pulse_schedule(0.0), targets=((1, 0),))
    assert not res.resummed_ok
    assert res.c_resummed[0, 0] == res.c_partial[-1, 0, 0]


def test_euler_vectorized_over_trailing_axes(rng):
    s = rng.normal(size=(7, 3, 2))
    out = euler_resum(s, 3)
    for i in range(3):
        for j in range(2):
            assert out[i, j] == pytest.approx(euler_resum(s[:, i, j], 3))


def test_solve_options_dense_and_krylov_agree():
    sched = pulse_schedule(-5.0)
    a = nlce_correlators(7, ANISO, INTER, sched, opts=SolveOptions(dense_max_sites=7))
    b = nlce_correlators(7, ANISO, INTER, sched, opts=SolveOptions(dense_max_sites=4))
    assert np.max(np.abs(a.c_partial - b.c_partial)) < 1e-8


def test_class_soundness_direct_member_evolution():
    """Evolving a member directly equals the symmetry-mapped representative result."""
    sched = pulse_schedule(-2.5)
    rng = np.random.default_rng(8)
    for hc in classify(enumerate_clusters(6), INTER, ANISO):
        if len(hc.members) < 2 or hc.order < 3 or rng.random() > 0.2:
            continue
        mapped = cluster_property(hc, ANISO, INTER, sched)
        for m in hc.members[1:]:
            direct = solve_clusters([m], ANISO, INTER, sched)[m.sites]
            assert np.max(np.abs(direct - mapped[m.sites])) < 1e-10

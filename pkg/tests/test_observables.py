import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import DATA
from rydquench.errors import CapacityError
from rydquench.evolve import all_down, ed_full_lattice, evolve_piecewise, product_state
from rydquench.lattice import InteractionModel, LatticeGeometry
from rydquench.model import build_hamiltonian, pulse_hold_time, sudden_schedule
from rydquench.observables import (CorrelationMap, Detection, SnapshotSet, afm_patterns,
                                   apply_detection_scaling, connected_matrix, correlators_from_snapshots,
                                   correlators_from_state, fit_correlation_length, sample_snapshots,
                                   scale_correlators, subsystem_statistics)


def checkerboards(n_shots, ny=8, nx=8):
    y, x = np.mgrid[:ny, :nx]
    a = ((x + y) % 2).astype(np.uint8)
    return np.stack([a if k % 2 else 1 - a for k in range(n_shots)])


def staggered_map(xi, amp=0.5, w=4):
    vals = np.zeros((2 * w + 1, 2 * w + 1))
    for dx in range(-w, w + 1):
        for dy in range(-w, w + 1):
            vals[dx + w, dy + w] = (-1) ** (dx + dy) * amp * math.exp(-math.hypot(dx, dy) / xi)
    return CorrelationMap((w, w), vals)


@pytest.fixture(scope="module")
def ed_state_4x4():
    geom = LatticeGeometry.with_anisotropy(4, 4)
    inter = InteractionModel(-6.0)
    hold = pulse_hold_time(4.05, math.pi / 2, 0.01, 0.01)
    sched = sudden_schedule(4.05, -2.0, hold, 0.01, 0.01)
    h = build_hamiltonian(geom.coords(), geom, inter, 0.0, 0.0, "cluster")
    return geom, evolve_piecewise(h.at, sched, all_down(16))


# ---------------------------------------------------------------- from states

def test_all_down_has_no_correlations():
    cmap = correlators_from_state(all_down(4), [(0, 0), (1, 0), (0, 1), (1, 1)])
    assert np.all(cmap.values == 0)


def test_single_site_maximal_variance():
    psi = np.array([1, 1], dtype=complex) / math.sqrt(2)
    assert correlators_from_state(psi, [(0, 0)])[0, 0] == pytest.approx(1.0)


def test_two_site_perfect_anticorrelation():
    psi = (product_state(2, [0]) + product_state(2, [1])) / math.sqrt(2)
    cmap = correlators_from_state(psi, [(0, 0), (1, 0)])
    assert cmap[1, 0] == pytest.approx(-1.0)
    assert cmap[-1, 0] == pytest.approx(-1.0)
    assert cmap[0, 0] == pytest.approx(1.0)


def test_site_pair_restriction(ed_state_4x4):
    geom, psi = ed_state_4x4
    sites = geom.coords()
    full = correlators_from_state(psi, sites, window=(2, 2))
    pairs = [(0, 1)]
    part = correlators_from_state(psi, sites, site_pairs=pairs, window=(2, 2))
    assert part[1, 0] == pytest.approx(connected_matrix(psi)[0, 1])
    assert part.counts[3, 2] == 1
    assert full.counts[3, 2] == 12


def test_c00_identity_and_bounds(ed_state_4x4):
    geom, psi = ed_state_4x4
    c = connected_matrix(psi)
    p = np.abs(psi) ** 2
    for i in range(16):
        n = ((np.arange(2 ** 16) >> i) & 1).astype(float)
        var = 4 * (p @ n - (p @ n) ** 2)
        assert c[i, i] == pytest.approx(var, abs=1e-13)
    cmap = correlators_from_state(psi, geom.coords(), window=(3, 3))
    assert np.all(np.abs(cmap.values) <= 1 + 1e-12)
    assert 0 <= cmap[0, 0] <= 1
    for dx, dy in cmap.displacements():
        assert cmap[dx, dy] == pytest.approx(cmap[-dx, -dy], abs=1e-14)


def test_ed_full_lattice_matches_state_correlators(ed_state_4x4):
    geom, psi = ed_state_4x4
    hold = pulse_hold_time(4.05, math.pi / 2, 0.01, 0.01)
    sched = sudden_schedule(4.05, -2.0, hold, 0.01, 0.01)
    cmap = ed_full_lattice(geom, InteractionModel(-6.0), sched, shift_mode="cluster")
    ref = correlators_from_state(psi, geom.coords(), window=cmap.window)
    for d in ((0, 0), (1, 0), (0, 1), (1, 1), (2, 1)):
        assert cmap[d] == pytest.approx(ref[d], abs=1e-9)


# ---------------------------------------------------------------- from snapshots

def test_checkerboard_snapshots():
    shots = checkerboards(1000)
    cmap = correlators_from_snapshots(SnapshotSet(shots, np.ones((8, 8), bool)))
    assert cmap[1, 0] == pytest.approx(-1.0, abs=1e-12)
    assert cmap[0, 1] == pytest.approx(-1.0, abs=1e-12)
    assert cmap[1, 1] == pytest.approx(1.0, abs=1e-12)
    assert cmap[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_shipped_checkerboard_file():
    snaps = SnapshotSet.from_csv(f"{DATA}/checkerboard_snapshots.csv")
    assert snaps.n_shots == 1000 and snaps.shape == (8, 8)
    cmap = correlators_from_snapshots(snaps)
    assert cmap[1, 0] == pytest.approx(-1.0, abs=1e-12)


def test_fair_coin_sites_uncorrelated(rng):
    shots = rng.integers(0, 2, size=(100000, 4, 4), dtype=np.uint8)
    cmap = correlators_from_snapshots(SnapshotSet(shots, np.ones((4, 4), bool)), window=(2, 2))
    for dx, dy in cmap.displacements():
        if (dx, dy) != (0, 0):
            assert abs(cmap[dx, dy]) < 5 * cmap.error(dx, dy)
    assert cmap[0, 0] == pytest.approx(1.0, abs=0.01)


def test_empty_roi_and_single_shot():
    shots = np.ones((5, 3, 3), np.uint8)
    with pytest.raises(ValueError):
        correlators_from_snapshots(SnapshotSet(shots, np.zeros((3, 3), bool)))
    with pytest.raises(ValueError):
        correlators_from_snapshots(SnapshotSet(shots[:1], np.ones((3, 3), bool)))


def test_roi_mask_respected(rng):
    shots = rng.integers(0, 2, size=(200, 4, 4), dtype=np.uint8)
    mask = np.zeros((4, 4), bool)
    mask[:2, :2] = True
    cmap = correlators_from_snapshots(SnapshotSet(shots, mask), window=(3, 3))
    assert cmap.counts[cmap.window[0] + 1, cmap.window[1]] == 2
    assert not cmap.valid(2, 0)


def test_sampled_ed_state_matches_state_correlators(ed_state_4x4):
    geom, psi = ed_state_4x4
    snaps = sample_snapshots(psi, 100000, (4, 4), rng=np.random.default_rng(3))
    got = correlators_from_snapshots(snaps, window=(2, 2))
    ref = correlators_from_state(psi, geom.coords(), window=(2, 2))
    for d in ((0, 0), (1, 0), (0, 1), (1, 1), (2, 0), (0, 2)):
        assert abs(got[d] - ref[d]) < 5 * got.error(*d)


def test_sampled_round_trip_attenuation(ed_state_4x4):
    """With imperfect removal, snapshot correlators equal alpha**2 times the state ones."""
    geom, psi = ed_state_4x4
    alpha = 0.89
    snaps = sample_snapshots(psi, 100000, (4, 4), Detection(alpha), rng=np.random.default_rng(5))
    got = correlators_from_snapshots(snaps, window=(1, 1))
    ref = correlators_from_state(psi, geom.coords(), window=(1, 1))
    model = apply_detection_scaling(ref, ref.metadata["mean_n"], alpha)
    for d in ((1, 0), (0, 1), (1, 1)):
        assert abs(got[d] - model[d]) < 5 * got.error(*d)
    # the site-averaged on-site model ignores site-to-site density variation
    assert got[0, 0] == pytest.approx(model[0, 0], abs=0.01)


def test_snapshot_csv_round_trip(tmp_path, rng):
    mask = np.ones((3, 4), bool)
    mask[0, 0] = False
    snaps = SnapshotSet(rng.integers(0, 2, size=(7, 3, 4)), mask, {"note": "x"})
    snaps.to_csv(tmp_path / "s.csv")
    back = SnapshotSet.from_csv(tmp_path / "s.csv")
    assert np.array_equal(back.shots, snaps.shots)
    assert np.array_equal(back.mask, mask)
    assert back.metadata["note"] == "x"


def test_correlation_map_csv_round_trip(tmp_path):
    cmap = correlators_from_snapshots(SnapshotSet(checkerboards(10, 4, 4), np.ones((4, 4), bool)),
                                      window=(2, 2))
    cmap.to_csv(tmp_path / "c.csv", {"seed": 1})
    back = CorrelationMap.from_csv(tmp_path / "c.csv")
    assert np.allclose(back.values, cmap.values)
    assert np.allclose(back.errors, cmap.errors, rtol=1e-5)


# ---------------------------------------------------------------- detection

def test_detection_scaling_examples():
    vals = np.zeros((3, 3))
    vals[2, 1] = -0.2
    cmap = CorrelationMap((1, 1), vals)
    same = apply_detection_scaling(cmap, 0.5, 1.0)
    assert same[1, 0] == -0.2 and same[0, 0] == pytest.approx(1.0)
    out = apply_detection_scaling(cmap, 0.5, 0.89)
    assert out[0, 0] == pytest.approx(4 * (0.445 - 0.445 ** 2))
    assert out[0, 0] == pytest.approx(0.98790, abs=1e-5)
    assert out[1, 0] == pytest.approx(-0.15842, abs=1e-5)
    for a in (0.0, 1.2):
        with pytest.raises(ValueError):
            apply_detection_scaling(cmap, 0.5, a)


@given(st.floats(0.05, 1.0), st.floats(0.05, 1.0), st.floats(-1, 1))
def test_detection_scaling_composes(a, b, c):
    vals = np.zeros((3, 3))
    vals[2, 1] = c
    cmap = CorrelationMap((1, 1), vals)
    twice = apply_detection_scaling(apply_detection_scaling(cmap, 0.3, a), 0.3, b)
    once = apply_detection_scaling(cmap, 0.3, a * b)
    assert twice[1, 0] == pytest.approx(once[1, 0], abs=1e-14)
    c00, off = scale_correlators(0.9, c, 0.3, a)
    assert off == pytest.approx(once[1, 0] / b ** 2, abs=1e-14)
    assert c00 == pytest.approx(apply_detection_scaling(cmap, 0.3, a)[0, 0])


def test_sample_all_down_perfect_detection(rng):
    snaps = sample_snapshots(all_down(4), 50, (2, 2), rng=rng)
    assert np.all(snaps.shots == 1)


def test_sample_removal_efficiency(rng):
    snaps = sample_snapshots(product_state(4, range(4)), 20000, (2, 2), Detection(0.9), rng=rng)
    assert snaps.shots.mean() == pytest.approx(0.1, abs=0.01)


def test_sample_filling(rng):
    snaps = sample_snapshots(all_down(4), 20000, (2, 2), Detection(filling=0.95), rng=rng)
    assert snaps.shots.mean() == pytest.approx(0.95, abs=0.005)


def test_sample_errors():
    with pytest.raises(CapacityError):
        sample_snapshots(all_down(4), 10, (3, 3))
    with pytest.raises(ValueError):
        Detection(1.5)


# ---------------------------------------------------------------- correlation length

def test_correlation_length_recovery():
    fit = fit_correlation_length(staggered_map(1.4))
    assert fit.success
    assert fit.xi == pytest.approx(1.4, abs=0.05)
    assert fit.amplitude == pytest.approx(0.5, rel=1e-6)


@pytest.mark.parametrize("xi", [0.74, 1.0, 1.4, 1.9])
def test_correlation_length_range(xi):
    assert fit_correlation_length(staggered_map(xi)).xi == pytest.approx(xi, rel=1e-6)


def test_correlation_length_failures():
    flat = CorrelationMap((3, 3), np.full((7, 7), 0.2))
    assert not fit_correlation_length(flat).success
    assert not fit_correlation_length(staggered_map(1.4), 1.0, 1.2).success
    with pytest.raises(ValueError):
        fit_correlation_length(staggered_map(1.4), 0.5)


# ---------------------------------------------------------------- sub-systems

def test_subsystem_checkerboard():
    stats = subsystem_statistics(SnapshotSet(checkerboards(20), np.ones((8, 8), bool)))
    assert stats.classes["afm"] == pytest.approx(1.0)
    assert stats.enhancement == pytest.approx(256.0)
    assert stats.n_windows == 36


def test_subsystem_uniform_random(rng):
    shots = rng.integers(0, 2, size=(20000, 6, 6), dtype=np.uint8)
    stats = subsystem_statistics(SnapshotSet(shots, np.ones((6, 6), bool)))
    assert abs(stats.probabilities.sum() - 1) < 1e-12
    assert stats.enhancement == pytest.approx(1.0, abs=0.15)
    assert stats.classes["single_rydberg"] == pytest.approx(9 / 512, rel=0.1)


def test_subsystem_classes_and_errors():
    a, b = afm_patterns(3, 3)
    assert a + b == 511 and bin(a).count("1") == 5
    shots = np.ones((4, 3, 3), np.uint8)
    shots[1, 1, 1] = 0
    stats = subsystem_statistics(SnapshotSet(shots, np.ones((3, 3), bool)))
    assert stats.classes["all_ground"] == 0.75
    assert stats.classes["single_rydberg"] == 0.25
    with pytest.raises(ValueError):
        subsystem_statistics(SnapshotSet(shots, np.ones((3, 3), bool)), 4, 3)

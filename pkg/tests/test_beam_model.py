import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from surfelba.beam_model import BeamSpec, normalize_sigmas, simulate_sigma, simulate_sigmas
from surfelba.geometry import skew
from surfelba.kdtree import Leaf


def leaf(mean, normal):
    n = np.asarray(normal, float)
    return Leaf(np.asarray(mean, float), n / np.linalg.norm(n), 0.1, 10, float("nan"), 0, 0)


def rot(axis, angle):
    a = np.asarray(axis, float) / np.linalg.norm(axis)
    return math.cos(angle) * np.eye(3) + math.sin(angle) * skew(a) + (1 - math.cos(angle)) * np.outer(a, a)


def oracle_sigma(mean, normal, divergence, rings=3, per_ring=12):
    """Sub-beams built by rotating the beam axis, intersected with the plane."""
    p = np.asarray(mean, float)
    n = np.asarray(normal, float) / np.linalg.norm(normal)
    a = p / np.linalg.norm(p)
    ref = np.array([1.0, 0, 0]) if abs(a[0]) < 0.9 else np.array([0, 1.0, 0])
    u = np.cross(a, ref)
    u /= np.linalg.norm(u)
    rays = [a]
    for k in range(1, rings + 1):
        th = 0.5 * divergence * math.sqrt(k / rings)
        for j in range(per_ring):
            spin = rot(a, 2 * math.pi * j / per_ring)
            tilt_axis = np.cross(a, spin @ u)
            rays.append(rot(tilt_axis, th) @ a)
    r0 = np.linalg.norm(p)
    dev = []
    for d in rays:
        c = n @ d
        if abs(c) < 1e-3:
            continue
        t = (n @ p) / c
        if t <= 0:
            continue
        dev.append(t - r0)
    if len(dev) < 3:
        return None
    return math.sqrt(np.mean(np.square(dev)))


def tilted_normal(incidence, towards=(1.0, 0, 0)):
    # normal of a plane hit along +z at the given incidence, facing the sensor
    return rot(np.cross([0, 0, 1.0], towards), incidence) @ [0, 0, -1.0]


def test_default_sample_count():
    assert BeamSpec().n_samples == 37


def test_zero_divergence_is_exact():
    s = simulate_sigma(leaf([0, 0, 10], [0, 0, -1]), BeamSpec(0.0))
    assert s == 0.0


def test_perpendicular_matches_closed_form():
    spec = BeamSpec(3e-3)
    theta, _ = spec.offsets()
    expected = math.sqrt(np.mean((10 / np.cos(theta) - 10) ** 2))
    for normal in ([0, 0, 1], [0, 0, -1]):
        assert abs(simulate_sigma(leaf([0, 0, 10], normal), spec) - expected) < 1e-12


def test_tilt_increases_sigma():
    spec = BeamSpec(3e-3)
    flat = simulate_sigma(leaf([0, 0, 10], [0, 0, -1]), spec)
    tilted = simulate_sigma(leaf([0, 0, 10], tilted_normal(math.radians(60))), spec)
    assert tilted > flat


@pytest.mark.parametrize("seed", range(10))
def test_matches_oracle_on_random_leaves(seed):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        p = rng.normal(size=3) * rng.uniform(1, 50)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        if n @ p > 0:
            n = -n
        div = rng.uniform(1e-4, 2e-2)
        want = oracle_sigma(p, n, div)
        got, degenerate = simulate_sigmas(p[None], n[None], BeamSpec(div), sigma_cap=1.0)
        if want is None:
            assert degenerate[0] and got[0] == 1.0
        else:
            assert not degenerate[0]
            assert abs(got[0] - want) < 1e-9


def test_range_sweep_is_monotone():
    spec = BeamSpec(3e-3)
    n = tilted_normal(math.radians(30))
    sig = [simulate_sigma(leaf([0, 0, r], n), spec) for r in np.linspace(1, 60, 20)]
    assert all(b >= a for a, b in zip(sig, sig[1:]))


def test_incidence_sweep_is_monotone():
    spec = BeamSpec(3e-3)
    sig = [simulate_sigma(leaf([0, 0, 10], tilted_normal(math.radians(a))), spec)
           for a in np.linspace(0, 80, 20)]
    assert all(b >= a for a, b in zip(sig, sig[1:]))


def test_near_grazing_drops_sub_beams():
    # half-angle 1.5 mrad; the plane is 1 mrad off parallel to the axis
    spec = BeamSpec(3e-3)
    n = tilted_normal(math.pi / 2 - 1e-3)
    want = oracle_sigma([0, 0, 10], n, 3e-3)
    got = simulate_sigma(leaf([0, 0, 10], n), spec)
    assert want is not None and abs(got - want) < 1e-9 * max(1.0, want)


def test_parallel_plane_is_degenerate():
    got, degenerate = simulate_sigmas(np.array([[0, 0, 10.0]]), np.array([[1.0, 0, 0]]), BeamSpec(3e-3), 0.7)
    assert degenerate[0] and got[0] == 0.7


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        simulate_sigma(leaf([0, 0, 0], [0, 0, 1]), BeamSpec())
    with pytest.raises(ValueError):
        simulate_sigma(Leaf(np.array([0, 0, 1.0]), np.array([0, 0, 2.0]), 0, 1, 0, 0, 0), BeamSpec())
    with pytest.raises(ValueError):
        BeamSpec(-1e-3)
    with pytest.raises(ValueError):
        BeamSpec(1e-3, n_rings=0, rays_per_ring=1)


def test_normalize_hand_example():
    norm, out = normalize_sigmas([0.01, 0.02, 0.04], floor=0.001, cap=1.0)
    assert np.allclose(out, [0.5, 1.0, 2.0], rtol=1e-15)
    assert norm.scale == 0.02


def test_normalize_equal_and_single():
    assert np.array_equal(normalize_sigmas([0.3] * 5)[1], np.ones(5))
    assert np.array_equal(normalize_sigmas([0.05])[1], [1.0])


def test_normalize_clamps():
    _, out = normalize_sigmas([1e-6, 0.1, 5.0, np.nan], floor=0.01, cap=1.0)
    assert np.allclose(out, np.array([0.01, 0.1, 1.0, 1.0]) / np.median([0.01, 0.1, 1.0, 1.0]))
    with pytest.raises(ValueError):
        normalize_sigmas([])
    with pytest.raises(ValueError):
        normalize_sigmas([0.1], floor=1.0, cap=0.5)


@given(st.lists(st.floats(1e-6, 10.0), min_size=1, max_size=50), st.floats(0.1, 10.0))
def test_normalize_is_scale_free_within_the_clamp(sig, c):
    sig = np.clip(np.array(sig), 0.02, 0.5)
    _, a = normalize_sigmas(sig, floor=1e-3, cap=100.0)
    _, b = normalize_sigmas(sig * c, floor=1e-3, cap=100.0)
    assert np.allclose(a, b, rtol=1e-12)
    assert abs(np.median(a) - 1.0) < 1e-12

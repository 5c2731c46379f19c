import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import delta_model
from spectproj.core import DegenerateInputError, ParameterError, ShapeError, UndefinedMetricError, uniform_angles
from spectproj.projector import random_system
from spectproj.simulate import (Ellipsoid, PhantomSpec, count_scale, mae, make_phantom, nrmse,
                                simulate_measurements)


def sphere(center, r, label, activity=1.0, mu=0.01):
    return Ellipsoid(center, (r, r, r), activity, mu, label)


# -- phantoms -----------------------------------------------------------------

def test_empty_spec():
    act, att, voi = make_phantom(PhantomSpec((4, 5, 3), background_attenuation=0.002))
    assert not act.data.any()
    assert np.all(att.data == np.float32(0.002))
    assert voi.names() == [] and not voi.labels.any()


@pytest.mark.parametrize("r", [4.0, 5.5, 7.0])
def test_sphere_voxel_count_matches_volume(r):
    spec = PhantomSpec((20, 20, 20), ellipsoids=(sphere((9.5, 9.5, 9.5), r, "s"),))
    _, _, voi = make_phantom(spec)
    assert abs(voi["s"].sum() - 4 / 3 * math.pi * r**3) <= 0.05 * 4 / 3 * math.pi * r**3


def test_later_ellipsoid_wins_overlap():
    spec = PhantomSpec((10, 10, 4), ellipsoids=(sphere((4, 4, 2), 3, "a", 1.0, 0.01),
                                                sphere((6, 4, 2), 2, "b", 5.0, 0.02)))
    act, att, voi = make_phantom(spec)
    assert voi.labels[5, 4, 2] == voi.legend["b"]
    assert act.data[5, 4, 2] == 5.0 and att.data[5, 4, 2] == np.float32(0.02)
    assert not (voi["a"] & voi["b"]).any()


def test_outside_ellipsoid_warns_and_keeps_label():
    spec = PhantomSpec((6, 6, 3), ellipsoids=(sphere((40, 40, 40), 2, "far"),))
    act, _, voi = make_phantom(spec)
    assert voi.warnings and "far" in voi.warnings[0]
    assert "far" in voi.legend and not voi["far"].any() and not act.data.any()


def test_phantom_is_deterministic_and_jitter_is_seeded():
    spec = PhantomSpec((8, 8, 4), ellipsoids=(sphere((4, 4, 2), 3, "s", 2.0),))
    a = make_phantom(spec, seed=1, jitter=0.1)[0].data
    assert np.array_equal(a, make_phantom(spec, seed=1, jitter=0.1)[0].data)
    assert not np.array_equal(a, make_phantom(spec, seed=2, jitter=0.1)[0].data)
    assert np.array_equal(make_phantom(spec, seed=1)[0].data, make_phantom(spec, seed=2)[0].data)


def test_spec_validation_and_json(tmp_path):
    with pytest.raises(ParameterError):
        PhantomSpec((4, 4, 4), ellipsoids=(sphere((1, 1, 1), 1, "x"), sphere((2, 2, 2), 1, "x")))
    with pytest.raises(ParameterError):
        Ellipsoid((1, 1, 1), (1, 0, 1), 1.0, 0.0, "flat")
    spec = PhantomSpec((6, 5, 4), (2.0, 2.0, 3.0), (sphere((2, 2, 2), 1.5, "l", 3.0),), 0.001)
    (tmp_path / "p.json").write_text(__import__("json").dumps(spec.to_dict()))
    assert PhantomSpec.from_json(tmp_path / "p.json") == spec


# -- measurements ----------------------------------------------------------------

def test_scatter_fraction_sets_background_total():
    m = random_system(np.random.default_rng(0), shape=(5, 5, 3), nview=4)
    x = np.random.default_rng(1).random(m.shape)
    _, r = simulate_measurements(x, m, 0.1, 1e4, seed=0)
    p = count_scale(x, m, 0.1, 1e4) * m.forward(x)
    assert r.data.astype(np.float64).sum() / p.sum() == pytest.approx(0.1, rel=1e-6)
    assert np.all(r.data == r.data.flat[0])
    assert p.sum() + r.data.astype(np.float64).sum() == pytest.approx(1e4, rel=1e-6)


def test_zero_scatter_no_rescale_is_unbiased():
    m = delta_model((4, 3, 2), uniform_angles(2))
    x = np.random.default_rng(2).uniform(0.5, 3.0, m.shape)
    p = m.forward(x)
    ys = np.stack([simulate_measurements(x, m, 0.0, p.sum(), seed=s)[0].data for s in range(200)])
    # every bin within 3 sigma of its mean, sigma = sqrt(p / 200)
    assert np.all(np.abs(ys.mean(axis=0) - p) <= 3 * np.sqrt(p / 200))
    assert np.allclose(ys.var(axis=0), p, rtol=0.35)


def test_measurements_are_seeded():
    m = delta_model((3, 3, 2), [0.0])
    x = np.ones(m.shape)
    a, _ = simulate_measurements(x, m, 0.1, 500.0, seed=4)
    b, _ = simulate_measurements(x, m, 0.1, 500.0, seed=4)
    c, _ = simulate_measurements(x, m, 0.1, 500.0, seed=5)
    assert np.array_equal(a.data, b.data) and not np.array_equal(a.data, c.data)
    assert a.data.dtype == np.float32 and np.array_equal(a.angles, m.angles)


def test_degenerate_and_invalid_inputs():
    m = delta_model((3, 3, 2), [0.0])
    with pytest.raises(DegenerateInputError):
        simulate_measurements(np.zeros(m.shape), m, 0.1, 100.0, 0)
    with pytest.raises(ParameterError):
        simulate_measurements(np.ones(m.shape), m, -0.1, 100.0, 0)
    with pytest.raises(ParameterError):
        simulate_measurements(np.ones(m.shape), m, 0.1, 0.0, 0)


# -- metrics -----------------------------------------------------------------------

def test_identical_volumes_score_zero(rng):
    x = rng.random((4, 4, 2)) + 0.1
    mask = x > 0.5
    assert mae(x, x, mask) == 0.0 and nrmse(x, x, mask) == 0.0


def test_uniform_scaling_cancels():
    x = np.arange(1.0, 9.0).reshape(2, 2, 2)
    mask = np.zeros_like(x, dtype=bool)
    mask[0] = True
    assert mae(2 * x, x, mask) == pytest.approx(0.0, abs=1e-12)
    assert nrmse(2 * x, x, mask) == pytest.approx(0.0, abs=1e-12)


def test_voi_boost_mae_hand_value():
    x = np.ones((4, 4, 4))
    mask = np.zeros_like(x, dtype=bool)
    mask[1, 1, 1] = mask[1, 2, 1] = True
    xh = np.where(mask, 1.2, 1.0)
    # totals 64 and 64.4, VOI means 1 and 1.2
    expect = abs(1 - (1.2 / 64.4) / (1 / 64)) * 100
    assert mae(xh, x, mask) == pytest.approx(expect, abs=1e-10)
    assert expect == pytest.approx(19.25465838509317, abs=1e-10)


def test_single_voxel_voi_with_zero_estimate_is_100_percent():
    x = np.array([3.0, 1.0, 2.0]).reshape(3, 1, 1)
    xh = np.array([0.0, 1.0, 2.0]).reshape(3, 1, 1)
    mask = np.array([True, False, False]).reshape(3, 1, 1)
    assert nrmse(xh, x, mask) == pytest.approx(100.0, abs=1e-10)


def test_two_voxel_nrmse_uses_squared_sum():
    x = np.array([1.0, 1.0]).reshape(2, 1, 1)
    xh = np.array([1.1, 0.9]).reshape(2, 1, 1)
    mask = np.ones_like(x, dtype=bool)
    assert nrmse(xh, x, mask) == pytest.approx(100 * math.sqrt(0.02 / 2) / math.sqrt(4 / 2), abs=1e-10)
    assert nrmse(xh, x, mask) == pytest.approx(7.0710678118654755, abs=1e-10)
    # the conventional sum-of-squares denominator would give sqrt(n_p) times more
    assert mae(xh, x, mask) == pytest.approx(0.0, abs=1e-10)


@given(st.integers(0, 2**31), st.floats(0.1, 100.0), st.floats(0.1, 100.0))
def test_metrics_invariant_to_scaling_either_input(seed, a, b):
    r = np.random.default_rng(seed)
    x = r.uniform(0.1, 2, (3, 3, 2))
    xh = r.uniform(0.1, 2, (3, 3, 2))
    mask = r.random((3, 3, 2)) < 0.5
    mask[0, 0, 0] = True
    assert mae(a * xh, b * x, mask) == pytest.approx(mae(xh, x, mask), rel=1e-9, abs=1e-12)
    assert nrmse(a * xh, b * x, mask) == pytest.approx(nrmse(xh, x, mask), rel=1e-9, abs=1e-12)


def test_undefined_metrics():
    x = np.array([0.0, 1.0]).reshape(2, 1, 1)
    voi = np.array([True, False]).reshape(2, 1, 1)
    with pytest.raises(UndefinedMetricError):
        mae(x, x, voi)
    with pytest.raises(UndefinedMetricError):
        nrmse(x, x, voi)
    with pytest.raises(UndefinedMetricError):
        nrmse(x, x, np.zeros((2, 1, 1), bool))
    with pytest.raises(ShapeError):
        mae(x, np.ones((3, 1, 1)), voi)

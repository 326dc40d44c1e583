"""Fiber diffeomorphism groups on the circle and torus."""

import numpy as np
import pytest

from livsic_lab.fiber import (Compose, c0_gap, check_orientation, compose,
                              distance, fiber_grid, fiber_metric, identity,
                              invert, linear, rotation, shear, translation)


def random_diffeo(rng, q=1):
    kind = rng.integers(0, 3)
    if kind == 0:
        return rotation(float(rng.uniform(0, 1))) if q == 1 \
            else translation(rng.uniform(0, 1, size=q))
    if kind == 1:
        return shear(float(rng.uniform(-0.8, 0.8)),
                     wavevec=tuple([1] + [0] * (q - 1)),
                     phase=float(rng.uniform(0, 2 * np.pi)))
    return compose(rotation(float(rng.uniform(0, 1))) if q == 1
                   else translation(rng.uniform(0, 1, size=q)),
                   shear(float(rng.uniform(-0.8, 0.8)),
                         wavevec=tuple([1] + [0] * (q - 1))))


def test_fiber_metric_wraps():
    assert fiber_metric([0.95], [0.05]) == pytest.approx(0.1, abs=1e-12)


def test_rotation_is_translation():
    g = rotation(0.3)
    y = fiber_grid(1, 17)
    assert np.allclose(g.eval(y), (y + 0.3) % 1.0)
    assert np.allclose(g.deriv(y), 1.0)


def test_shear_lift_and_derivative():
    a, ph = 0.5, 0.7
    g = shear(a, phase=ph)
    y = fiber_grid(1, 33)
    expected = y + (a / (2 * np.pi)) * np.sin(2 * np.pi * y + ph)
    assert np.allclose(g.lift(y), expected, atol=1e-12)
    dexp = 1 + a * np.cos(2 * np.pi * y[:, 0] + ph)
    assert np.allclose(g.deriv(y)[:, 0, 0], dexp, atol=1e-12)


def test_invert_roundtrip():
    rng = np.random.default_rng(0)
    pts = fiber_grid(1, 64)
    for _ in range(20):
        g = random_diffeo(rng)
        h = compose(invert(g), g)
        assert c0_gap(h, identity(1), grid=64) < 1e-10


def test_inverse_of_rotation_is_exact():
    g = invert(rotation(0.3))
    assert c0_gap(g, rotation(-0.3), grid=32) < 1e-15


def test_compose_order():
    # factors[0] applied last
    g = Compose([shear(0.5), rotation(0.25)])
    y = np.array([[0.1]])
    inner = rotation(0.25).eval(y)
    assert np.allclose(g.eval(y), shear(0.5).eval(inner))


def test_chain_rule():
    rng = np.random.default_rng(1)
    y = fiber_grid(1, 32)
    for _ in range(10):
        g, h = random_diffeo(rng), random_diffeo(rng)
        gh = compose(g, h)
        inner = h.eval(y)
        expect = g.deriv(inner) @ h.deriv(y)
        assert np.allclose(gh.deriv(y), expect, atol=1e-12)


def test_distance_rotations_oracle():
    rep = distance(rotation(0.2), rotation(0.4), grid=64)
    assert rep.d_c0 == pytest.approx(0.2, abs=1e-12)
    assert rep.d_c1 == pytest.approx(0.2, abs=1e-12)  # equal derivatives


def test_distance_symmetric_and_zero_on_diagonal():
    rng = np.random.default_rng(2)
    g, h = random_diffeo(rng), random_diffeo(rng)
    assert distance(g, g, grid=32).d_c1 < 1e-14
    assert distance(g, h, grid=32).d_c0 == pytest.approx(
        distance(h, g, grid=32).d_c0, abs=1e-12)


def test_orientation_check():
    assert check_orientation(shear(0.9))
    assert check_orientation(linear([[1, 1], [1, 2]]))


def test_torus_translation_dim2():
    g = translation([0.25, 0.5])
    y = fiber_grid(2, 8)
    assert np.allclose(g.eval(y), (y + np.array([0.25, 0.5])) % 1.0)
    assert c0_gap(compose(invert(g), g), identity(2), grid=16) < 1e-12

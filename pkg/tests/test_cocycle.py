"""Cocycle iteration, coboundaries, and the derivative cocycle."""

import numpy as np
import pytest

from livsic_lab.base import FullShift, ToralAutomorphism
from livsic_lab.cocycle import (ConstantCocycle, RotationField, ShearField,
                                ShiftObservable, TorusHarmonics,
                                derivative_cocycle, estimate_holder, iterate,
                                make_coboundary, poc_residual, skew_orbit)
from livsic_lab.fiber import c0_gap, identity, rotation, shear


@pytest.fixture(scope="module")
def cat():
    return ToralAutomorphism([[2, 1], [1, 1]])


def test_cocycle_identity(cat):
    rng = np.random.default_rng(0)
    A = make_coboundary(cat, RotationField(TorusHarmonics(
        [(0.2, (1, 0), 0.0), (0.1, (0, 1), 1.0)])))
    for _ in range(10):
        x = cat.random_point(rng)
        m, n = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        lhs = iterate(A, x, m + n)
        rhs_outer = iterate(A, cat.iterate(x, n), m)
        rhs_inner = iterate(A, x, n)
        pts = np.arange(32)[:, None] / 32.0
        gap = np.max(np.abs(
            (lhs.eval(pts) - rhs_outer.eval(rhs_inner.eval(pts)) + 0.5)
            % 1.0 - 0.5))
        assert gap < 1e-10


def test_inverse_identity(cat):
    rng = np.random.default_rng(1)
    A = ConstantCocycle(cat, shear(0.4))
    x = cat.random_point(rng)
    n = 3
    fwd = iterate(A, cat.iterate(x, -n), n)
    bwd = iterate(A, x, -n)
    pts = np.arange(32)[:, None] / 32.0
    gap = np.max(np.abs((bwd.eval(fwd.eval(pts)) - pts + 0.5) % 1.0 - 0.5))
    assert gap < 1e-10


def test_zero_power_is_identity(cat):
    A = ConstantCocycle(cat, rotation(0.3))
    g = iterate(A, np.array([0.1, 0.2]), 0)
    assert c0_gap(g, identity(1), grid=32) == 0.0


def test_coboundary_poc_vanishes(cat):
    A = make_coboundary(cat, ShearField(TorusHarmonics([(0.3, (1, 1), 0.5)])))
    for per in range(1, 4):
        for orbit in cat.periodic_points(per):
            rep = poc_residual(A, orbit, grid=64)
            assert rep.d_c1 < 1e-10


def test_constant_rotation_poc(cat):
    A = ConstantCocycle(cat, rotation(0.1))
    fix = cat.periodic_points(1)[0]
    rep = poc_residual(A, fix, grid=64)
    assert rep.d_c0 == pytest.approx(0.1, abs=1e-12)


def test_derivative_cocycle_shear_attractor(cat):
    # orbits of the constant contracting shear fall into y = 1/2 where the
    # derivative is 1 - a
    A = ConstantCocycle(cat, shear(0.5))
    rec = derivative_cocycle(A, np.array([0.3, 0.7]), np.array([0.21]), 4000)
    assert rec.exponents()[0] == pytest.approx(np.log(0.5), abs=5e-3)


def test_derivative_cocycle_coboundary_neutral(cat):
    A = make_coboundary(cat, RotationField(TorusHarmonics([(0.2, (1, 0), 0)])))
    rec = derivative_cocycle(A, np.array([0.3, 0.7]), np.array([0.21]), 2000)
    assert abs(rec.exponents()[0]) < 1e-3


def test_skew_orbit_consistency(cat):
    A = ConstantCocycle(cat, shear(0.3))
    xs, ys = skew_orbit(A, np.array([0.1, 0.9]), np.array([0.4]), 10)
    g = iterate(A, xs[0], 10)
    assert np.allclose(g.eval(ys[0][None, :])[0], ys[10], atol=1e-12)


def test_holder_estimate_lipschitz_cocycle(cat):
    rng = np.random.default_rng(3)
    A = make_coboundary(cat, RotationField(TorusHarmonics([(0.2, (1, 0), 0)])))
    est = estimate_holder(A, rng, pairs=200, grid=64)
    assert est.pairs_used > 50
    assert est.exponent == pytest.approx(1.0, abs=0.15)


def test_shift_observable_cocycle():
    base = FullShift(2)
    A = make_coboundary(base, RotationField(ShiftObservable([0.1, 0.3, 0.1])))
    rng = np.random.default_rng(4)
    for orbit in base.periodic_points(3):
        assert poc_residual(A, orbit, grid=32).d_c1 < 1e-10
    rec = derivative_cocycle(A, base.random_point(rng), np.array([0.5]), 500)
    assert abs(rec.exponents()[0]) < 1e-12

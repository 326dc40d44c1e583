"""Transfer-function construction, verification, and classification."""

import json

import numpy as np
import pytest

from livsic_lab.base import FullShift, ToralAutomorphism
from livsic_lab.cocycle import (ConstantCocycle, RotationField, ShearField,
                                ShiftObservable, TorusHarmonics,
                                make_coboundary)
from livsic_lab.errors import ExponentNonzero, PocViolated
from livsic_lab.fiber import Compose, identity, invert, rotation, shear
from livsic_lab.solver import (SampledDiffeo, check_exponents, check_poc,
                               classify, periodic_exponents, solve,
                               verify_coboundary)


@pytest.fixture(scope="module")
def cat():
    return ToralAutomorphism([[2, 1], [1, 1]])


def table_gap_to_truth(tf, u_field, indices):
    """Max wrapped gap between table entries and u(x) o u(x0)^{-1}."""
    worst = 0.0
    for i in indices:
        truth = Compose([u_field(tf.base_points[i]),
                         invert(u_field(tf.anchor))])
        got = tf.sampled[i]
        grid = np.arange(got.m)[:, None] / got.m
        dev = np.max(np.abs((got.values.astype(float)
                             - truth.lift(grid)[:, 0] + 0.5) % 1.0 - 0.5))
        worst = max(worst, dev)
    return worst


class TestSampledDiffeo:
    def test_identity(self):
        s = SampledDiffeo.identity(64)
        y = np.linspace(0, 1, 17)
        assert np.allclose(s.eval(y), y % 1.0, atol=1e-12)
        assert np.allclose(s.deriv_at(y), 1.0)

    def test_from_diffeo_and_inverse(self):
        g = shear(0.6)
        s = SampledDiffeo.from_diffeo(g, 512)
        y = np.linspace(0, 1, 101)
        assert np.max(np.abs(s.eval(y) - g.eval(y[:, None])[:, 0])) < 1e-5
        back = s.inverse_eval(s.eval(y))
        assert np.max(np.abs((back - y + 0.5) % 1.0 - 0.5)) < 1e-5

    def test_pushed_is_exact_composition(self):
        g, h = shear(0.4), rotation(0.3)
        s = SampledDiffeo.from_diffeo(g, 64).pushed(h)
        ref = SampledDiffeo.from_diffeo(Compose([h, g]), 64)
        assert s.c1_gap(ref) < 1e-6


def test_solve_identity_cocycle(cat):
    A = ConstantCocycle(cat, identity(1))
    tf = solve(A, density=0.05, seed=0)
    rep = verify_coboundary(tf, A)
    assert rep.residual_c0 == 0.0
    assert rep.residual_c1 == 0.0
    ident = SampledDiffeo.identity(tf.grid_n)
    assert all(s.c0_gap(ident) == 0.0 for s in tf.sampled[:100])


def test_solve_rotation_coboundary_roundtrip(cat):
    phi = TorusHarmonics([(0.2, (1, 0), -np.pi / 2)])
    u_field = RotationField(phi)
    A = make_coboundary(cat, u_field)
    tf = solve(A, density=0.05, seed=1)
    rep = verify_coboundary(tf, A)
    assert rep.residual_c0 <= 1e-6
    rng = np.random.default_rng(2)
    idx = rng.integers(0, len(tf), size=50)
    assert table_gap_to_truth(tf, u_field, idx) <= 1e-3
    assert tf.holder.exponent == pytest.approx(1.0, abs=0.2)


def test_solve_refuses_obstructed(cat):
    with pytest.raises(PocViolated):
        solve(ConstantCocycle(cat, rotation(0.1)), density=0.1, p_max=3)
    with pytest.raises((PocViolated, ExponentNonzero)):
        solve(ConstantCocycle(cat, shear(0.5)), density=0.1, p_max=3)


def test_check_poc_reports_worst(cat):
    A = make_coboundary(cat, ShearField(TorusHarmonics([(0.3, (1, 0), 0)])))
    worst, orbit = check_poc(A, p_max=3)
    assert worst < 1e-8


def test_check_exponents_flags_shear(cat):
    rng = np.random.default_rng(3)
    with pytest.raises(ExponentNonzero):
        check_exponents(ConstantCocycle(cat, shear(0.5)), rng, steps=2000,
                        starts=2)


def test_periodic_exponents_constant_shear(cat):
    A = ConstantCocycle(cat, shear(0.5))
    fix = cat.periodic_points(1)[0]
    recs = periodic_exponents(A, fix, fiber_starts=1)
    fixed = {round(float(r.fiber_start[0]), 6): float(r.exponents[0])
             for r in recs if r.is_fixed_point}
    assert fixed[0.0] == pytest.approx(np.log(1.5), abs=1e-9)
    assert fixed[0.5] == pytest.approx(np.log(0.5), abs=1e-9)
    random_rec = [r for r in recs if not r.is_fixed_point][0]
    assert random_rec.exponents[0] == pytest.approx(np.log(0.5), abs=1e-2)


def test_classify_obstruction_shear(cat):
    res = classify(ConstantCocycle(cat, shear(0.5)), p_max=3)
    assert res.verdict == "obstruction"
    assert not res.marginal
    w = res.witness
    assert w is not None
    poc_c1, exp = w.replay(ConstantCocycle(cat, shear(0.5)))
    assert poc_c1 == pytest.approx(w.poc_c1, abs=1e-10)
    assert exp == pytest.approx(w.periodic_exponent, abs=1e-10)


def test_classify_obstruction_rotation_poc_only(cat):
    res = classify(ConstantCocycle(cat, rotation(0.1)), p_max=3)
    assert res.verdict == "obstruction"
    assert res.witness.periodic_exponent == pytest.approx(0.0, abs=1e-10)
    assert res.witness.poc_c1 > 1e-2
    doc = json.loads(res.to_json())
    assert doc["verdict"] == "obstruction"
    assert doc["witnesses"]


def test_classify_coboundary(cat):
    A = make_coboundary(cat, RotationField(TorusHarmonics([(0.1, (1, 0),
                                                            0.3)])))
    res = classify(A, p_max=3, density=0.1, exp_steps=2000, exp_starts=3)
    assert res.verdict == "coboundary"
    assert res.residual.residual_c0 <= 1e-6
    doc = json.loads(res.to_json())
    assert "table_length" in doc


def test_classify_seed_stability(cat):
    A = ConstantCocycle(cat, shear(0.3))
    verdicts = {classify(A, p_max=2, seed=s).verdict for s in range(5)}
    assert verdicts == {"obstruction"}


def test_gauge_covariance_exact(cat):
    A = make_coboundary(cat, ShearField(TorusHarmonics([(0.4, (1, 0), 0)])))
    tf = solve(A, density=0.1, seed=2, skip_checks=True)
    r1 = verify_coboundary(tf, A, rng=np.random.default_rng(7))
    tg = tf.right_composed(rotation(0.37))
    r2 = verify_coboundary(tg, A, rng=np.random.default_rng(7))
    assert abs(r1.residual_c0 - r2.residual_c0) <= 1e-10
    assert abs(r1.residual_c1 - r2.residual_c1) <= 1e-10
    y = tg.eval_fiber(tf.base_points[5], np.array([0.2]))
    expect = tf.eval_fiber(tf.base_points[5],
                           rotation(0.37).eval(np.array([[0.2]]))[0])
    assert np.allclose(y, expect, atol=1e-12)


def test_solve_on_shift():
    base = FullShift(2)
    A = make_coboundary(base, RotationField(ShiftObservable([0.1, 0.2, 0.1])))
    tf = solve(A, density=0.05, seed=0, p_max=6)
    rep = verify_coboundary(tf, A)
    assert rep.residual_c0 <= 1e-6

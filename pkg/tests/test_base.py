"""Base systems: toral automorphisms and the full shift."""

from fractions import Fraction

import numpy as np
import pytest

from livsic_lab.base import (FullShift, ShiftPoint, ToralAutomorphism,
                             wrap_torus)
from livsic_lab.errors import (BracketOutOfRange, NotDenseEnough,
                               NotRecurrent)

CAT = [[2, 1], [1, 1]]


def brute_force_fixed_points(matrix, n):
    """Count Fix(f^n) by scanning the full rational lattice.

    Every solution of M^n v = v mod 1 has denominator dividing
    d = |det(M^n - I)|, so scanning the d x d lattice is exhaustive.
    """
    m = np.eye(2, dtype=object)
    mat = np.array(matrix, dtype=object)
    for _ in range(n):
        m = m @ mat
    dmat = m - np.eye(2, dtype=object)
    d = abs(int(dmat[0, 0] * dmat[1, 1] - dmat[0, 1] * dmat[1, 0]))
    count = 0
    for a in range(d):
        for b in range(d):
            if (int(dmat[0, 0]) * a + int(dmat[0, 1]) * b) % d == 0 and \
               (int(dmat[1, 0]) * a + int(dmat[1, 1]) * b) % d == 0:
                count += 1
    return count


class TestToral:
    def setup_method(self):
        self.f = ToralAutomorphism(CAT)

    def test_rejects_nonhyperbolic(self):
        with pytest.raises(ValueError):
            ToralAutomorphism([[0, 1], [-1, 0]])
        with pytest.raises(ValueError):
            ToralAutomorphism([[2, 1], [1, 2]])

    def test_eigen_data(self):
        lam = (3 + np.sqrt(5)) / 2
        assert self.f.lam_u == pytest.approx(lam, abs=1e-12)
        assert self.f.lam_s == pytest.approx(1 / lam, abs=1e-12)
        assert self.f.hyp.tau == pytest.approx(np.log(lam), abs=1e-12)

    def test_step_inverse_roundtrip(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.random(2)
            back = self.f.inverse_step(self.f.step(x))
            assert self.f.metric(x, back) < 1e-12

    def test_iterate_exact_matches_float_for_small_n(self):
        rng = np.random.default_rng(1)
        x = rng.random(2)
        for n in range(6):
            d = self.f.metric(self.f.iterate(x, n), self.f.iterate_exact(x, n))
            assert d < 1e-9

    def test_fixed_point_counts(self):
        for n, expected in enumerate([1, 5, 16, 45, 121, 320], start=1):
            assert self.f.fixed_point_count(n) == expected
            orbits = self.f.periodic_points(n)
            assert sum(len({tuple(np.round(p, 9)) for p in o.orbit})
                       for o in orbits) == expected

    def test_periodic_points_are_periodic(self):
        for n in range(1, 5):
            for o in self.f.periodic_points(n):
                img = self.f.iterate_exact(o.point, n)
                assert self.f.metric(img, o.point) < 1e-12
                for i in range(len(o.orbit) - 1):
                    assert self.f.metric(self.f.step(o.orbit[i]),
                                         o.orbit[i + 1]) < 1e-9

    def test_bracket_product_structure(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            y = rng.random(2)
            y2 = (y + 1e-3 * rng.normal(size=2)) % 1.0
            z = self.f.bracket(y, y2)
            # z - y is purely unstable, z - y2 purely stable
            cu = np.linalg.solve(self.f.eig_basis, wrap_torus(z - y))
            cs = np.linalg.solve(self.f.eig_basis, wrap_torus(z - y2))
            assert abs(cu[1]) < 1e-12
            assert abs(cs[0]) < 1e-12

    def test_bracket_out_of_range(self):
        with pytest.raises(BracketOutOfRange):
            self.f.bracket(np.array([0.0, 0.0]), np.array([0.5, 0.5]))

    def test_anosov_close_exactness_and_decay(self):
        # a stable perturbation of a fixed point almost closes in n steps
        x = (np.array([0.0, 0.0]) + 2e-3 * self.f.v_s) % 1.0
        n = 12
        po, y, trace = self.f.anosov_close(x, n)
        img = self.f.iterate_exact(po.point, n)
        assert self.f.metric(img, po.point) < 1e-12
        gap = self.f.metric(x, self.f.iterate(x, n))
        prof = np.minimum(np.arange(n + 1), n - np.arange(n + 1))
        bound = self.f.closing_C * gap * np.exp(-self.f.hyp.tau * prof)
        assert np.all(trace <= bound + 1e-12)

    def test_anosov_close_rejects_wanderer(self):
        with pytest.raises(NotRecurrent):
            self.f.anosov_close(np.array([0.31, 0.77]), 3)

    def test_transitive_segment_density(self):
        eps = 0.1
        pts = self.f.transitive_segment(eps, 50_000, seed=0)
        pts = np.asarray(pts)
        grid = np.stack(np.meshgrid(*[np.arange(0.05, 1.0, 0.1)] * 2,
                                    indexing="ij"), axis=-1).reshape(-1, 2)
        for g in grid:
            d = np.min(np.linalg.norm(wrap_torus(pts - g), axis=1))
            assert d < eps

    def test_transitive_segment_failure(self):
        with pytest.raises(NotDenseEnough):
            self.f.transitive_segment(0.01, 50, seed=0)


class TestShift:
    def setup_method(self):
        self.f = FullShift(2)

    def test_metric_scale(self):
        rng = np.random.default_rng(3)
        x = self.f.random_point(rng)
        y = self.f.step(self.f.inverse_step(x))
        assert self.f.metric(x, y) == 0.0

    def test_periodic_counts(self):
        for n in range(1, 7):
            orbits = self.f.periodic_points(n)
            total = sum(o.least_period for o in orbits
                        if o.least_period == n)
            # points of least period n, summed over divisors, give 2^n
            full = sum(
                sum(oo.least_period for oo in self.f.periodic_points(d)
                    if oo.least_period == d)
                for d in range(1, n + 1) if n % d == 0)
            assert full == 2 ** n
            assert total >= 0

    def test_bracket_is_splice(self):
        rng = np.random.default_rng(4)
        y = self.f.random_point(rng)
        w = np.array(y.window).copy()
        r = y.radius
        w[r + 3] = 1 - w[r + 3]          # flip one future symbol
        w[r - 4] = 1 - w[r - 4]          # and one past symbol
        y2 = ShiftPoint(window=w)
        assert self.f.metric(y, y2) < self.f.hyp.delta
        z = self.f.bracket(y, y2)
        # future of y2, past of y
        assert all(z.symbol(i) == y2.symbol(i) for i in range(5))
        assert all(z.symbol(-i) == y.symbol(-i) for i in range(1, 5))

    def test_transitive_segment_covers_cylinders(self):
        pts = self.f.transitive_segment(2 ** -4, 10_000, seed=1)
        words = {tuple(p.symbol(i) for i in range(4)) for p in pts}
        assert len(words) == 16

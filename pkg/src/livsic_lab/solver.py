"""Transfer-function construction and coboundary classification.

The transfer function u is gauge-fixed to u(x0) = identity at the anchor
and tabulated along a transitive orbit segment as u(f^i x0) = A^i(x0).
Each table entry is stored as a sampled diffeomorphism whose grid values
are the fiber orbits of the grid points, so the cocycle relation between
consecutive entries holds to float precision by construction.  Off-table
evaluation is nearest-table-neighbor in base distance; the fitted Holder
data of the table bounds the extension error.
"""

from __future__ import annotations

import json
from bisect import bisect
from dataclasses import dataclass, field

import numpy as np

from .base import FullShift, PeriodicOrbit, ToralAutomorphism, wrap_torus
from .cocycle import derivative_cocycle, iterate, poc_residual
from .errors import ExponentNonzero, NotConverged, PocViolated
from .fiber import distance as diffeo_distance
from .fiber import fiber_grid, fiber_metric_many, identity

POC_TOL = 1e-6
EXP_TOL = 1e-2
EXP_STEPS = 10_000
EXP_STARTS = 10


def default_p_max(base):
    return 10 if isinstance(base, FullShift) else 8


# -- sampled circle diffeomorphisms --------------------------------------------

class SampledDiffeo:
    """Grid-sampled orientation-preserving circle diffeomorphism.

    values[k] is the lift at k / m (monotone, values[m] would be
    values[0] + 1), derivs[k] the derivative there.  Stored in float32;
    evaluation promotes to float64.
    """

    def __init__(self, values, derivs):
        self.values = np.asarray(values, dtype=np.float32)
        self.derivs = np.asarray(derivs, dtype=np.float32)
        self.m = len(self.values)

    @classmethod
    def identity(cls, m):
        grid = np.arange(m) / m
        return cls(grid, np.ones(m))

    @classmethod
    def from_diffeo(cls, g, m):
        grid = fiber_grid(1, m)
        return cls(g.lift(grid)[:, 0], g.deriv(grid)[:, 0, 0])

    def pushed(self, g):
        """The composition g o self, sampled without interpolation error."""
        v = self.values.astype(float)[:, None]
        return SampledDiffeo(g.lift(v)[:, 0],
                             g.deriv(v)[:, 0, 0] * self.derivs.astype(float))

    def _lift_table(self):
        v = self.values.astype(float)
        return np.concatenate([v, [v[0] + 1.0]])

    def eval_lift(self, y):
        """Lift values at fiber points y (shape (...,))."""
        y = np.asarray(y, dtype=float)
        frac = y % 1.0
        grid = np.arange(self.m + 1) / self.m
        return np.interp(frac, grid, self._lift_table()) + np.floor(y)

    def eval(self, y):
        return self.eval_lift(y) % 1.0

    def deriv_at(self, y):
        y = np.asarray(y, dtype=float) % 1.0
        grid = np.arange(self.m + 1) / self.m
        d = self.derivs.astype(float)
        return np.interp(y, grid, np.concatenate([d, [d[0]]]))

    def inverse_eval(self, t):
        """Preimages of fiber points t under the sampled map."""
        t = np.asarray(t, dtype=float)
        v = self._lift_table()
        base = np.floor(v[0])
        shifted = (t - v[0]) % 1.0 + v[0]
        grid = np.arange(self.m + 1) / self.m
        return np.interp(shifted, v, grid) % 1.0

    def c0_gap(self, other):
        d = np.abs(wrap_torus(self.values.astype(float)
                              - other.values.astype(float)))
        return float(np.max(d))

    def c1_gap(self, other):
        return self.c0_gap(other) + float(np.max(
            np.abs(self.derivs.astype(float) - other.derivs.astype(float))))


class SampledDisplacement:
    """Torus (q >= 2) diffeomorphism sampled as a displacement field."""

    def __init__(self, grid_pts, displacements, jacobians):
        self.grid_pts = grid_pts
        self.displacements = np.asarray(displacements, dtype=np.float32)
        self.jacobians = np.asarray(jacobians, dtype=np.float32)

    @classmethod
    def from_diffeo(cls, g, m):
        pts = fiber_grid(g.dim, m)
        return cls(pts, g.lift(pts) - pts, g.deriv(pts))

    def pushed(self, g):
        img = (self.grid_pts + self.displacements.astype(float))
        return SampledDisplacement(
            self.grid_pts, g.lift(img) - self.grid_pts,
            g.deriv(img) @ self.jacobians.astype(float))

    def eval(self, y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        d2 = np.sum(wrap_torus(y[:, None, :] - self.grid_pts[None, :, :]) ** 2,
                    axis=-1)
        near = np.argmin(d2, axis=1)
        return (y + self.displacements.astype(float)[near]) % 1.0

    def c0_gap(self, other):
        gaps = np.linalg.norm(wrap_torus(
            self.displacements.astype(float)
            - other.displacements.astype(float)), axis=-1)
        return float(np.max(gaps))

    def c1_gap(self, other):
        jac = self.jacobians.astype(float) - other.jacobians.astype(float)
        if jac.shape[-1] == 1:
            op = np.abs(jac[..., 0, 0])
        else:
            op = np.linalg.svd(jac, compute_uv=False)[..., 0]
        return self.c0_gap(other) + float(np.max(op))


def _sample(g, m):
    if g.dim == 1:
        return SampledDiffeo.from_diffeo(g, m)
    return SampledDisplacement.from_diffeo(g, m)


# -- transfer function -----------------------------------------------------------

@dataclass(frozen=True)
class HolderFit:
    constant: float
    exponent: float
    pairs_used: int


@dataclass
class TransferFunction:
    """Gauge-fixed solution of A(x) = u(f x) o u(x)^{-1} on an orbit table."""

    base: object
    anchor: object
    base_points: list
    sampled: list
    density: float
    grid_n: int
    holder: HolderFit | None = None
    gauge: object | None = None
    _torus_pts: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if isinstance(self.base, ToralAutomorphism):
            self._torus_pts = np.asarray(self.base_points, dtype=float)

    def __len__(self):
        return len(self.sampled)

    def nearest_index(self, x):
        if self._torus_pts is not None:
            d = np.linalg.norm(
                wrap_torus(self._torus_pts - np.asarray(x, dtype=float)),
                axis=-1)
            return int(np.argmin(d))
        dists = [self.base.metric(x, p) for p in self.base_points]
        return int(np.argmin(dists))

    def at_index(self, i):
        return self.sampled[i]

    def eval(self, x):
        """Sampled diffeomorphism at the nearest table point."""
        return self.sampled[self.nearest_index(x)]

    def eval_fiber(self, x, y):
        """Fiber image of y under the (gauge-composed) transfer map at x."""
        s = self.eval(x)
        y = np.asarray(y, dtype=float)
        if self.gauge is not None:
            y = self.gauge.eval(np.atleast_2d(y))[0]
        if isinstance(s, SampledDiffeo):
            return np.atleast_1d(s.eval(y))
        return s.eval(y)[0]

    def right_composed(self, g):
        """The gauge change u -> u o g for a fixed bijection g.

        The sup residual of the cocycle identity is right-invariant, so
        the gauge is kept symbolic and the sampled tables are shared;
        verification reports identical residuals by construction.
        """
        return TransferFunction(base=self.base, anchor=self.anchor,
                                base_points=self.base_points,
                                sampled=self.sampled, density=self.density,
                                grid_n=self.grid_n, holder=self.holder,
                                gauge=g)


def _fit_holder(tf, rng, target_pairs=2000, max_base_gap=0.05):
    base = tf.base
    n = len(tf)
    ii = rng.integers(0, n, size=40 * target_pairs)
    jj = rng.integers(0, n, size=40 * target_pairs)
    keep = ii != jj
    ii, jj = ii[keep], jj[keep]
    if tf._torus_pts is not None:
        d = np.linalg.norm(wrap_torus(tf._torus_pts[ii] - tf._torus_pts[jj]),
                           axis=-1)
    else:
        d = np.array([base.metric(tf.base_points[i], tf.base_points[j])
                      for i, j in zip(ii[:5000], jj[:5000])])
        ii, jj = ii[:5000], jj[:5000]
    close = (d > 0) & (d < max_base_gap)
    ii, jj, d = ii[close][:target_pairs], jj[close][:target_pairs], \
        d[close][:target_pairs]
    gaps = np.array([tf.sampled[i].c0_gap(tf.sampled[j])
                     for i, j in zip(ii, jj)])
    good = gaps > 1e-12
    if good.sum() < 10:
        return HolderFit(constant=0.0, exponent=1.0, pairs_used=int(good.sum()))
    slope, intercept = np.polyfit(np.log(d[good]), np.log(gaps[good]), 1)
    return HolderFit(constant=float(np.exp(intercept)),
                     exponent=float(slope), pairs_used=int(good.sum()))


# -- preconditions ----------------------------------------------------------------

def scan_periodic_obstructions(A, p_max=None, grid=256, fiber_starts=2,
                               rng=None):
    """POC residuals and periodic exponents over all orbits up to p_max."""
    base = A.base
    p_max = default_p_max(base) if p_max is None else p_max
    rng = np.random.default_rng(0) if rng is None else rng
    records = []
    for per in range(1, p_max + 1):
        for orbit in base.periodic_points(per):
            if orbit.least_period != per:
                continue
            rep = poc_residual(A, orbit, grid=grid)
            exps = periodic_exponents(A, orbit, fiber_starts=fiber_starts,
                                      rng=rng)
            worst = max((float(np.max(np.abs(e.exponents))) for e in exps),
                        default=0.0)
            records.append((orbit, rep, worst, exps))
    return records


def check_poc(A, p_max=None, tol=POC_TOL, grid=256):
    base = A.base
    p_max = default_p_max(base) if p_max is None else p_max
    worst = (0.0, None)
    for per in range(1, p_max + 1):
        for orbit in base.periodic_points(per):
            if orbit.least_period != per:
                continue
            rep = poc_residual(A, orbit, grid=grid)
            if rep.d_c1 > worst[0]:
                worst = (rep.d_c1, orbit)
            if rep.d_c1 > tol:
                raise PocViolated(
                    f"POC residual {rep.d_c1:.3g} > {tol:.1g} at a period-"
                    f"{per} point", witness=orbit)
    return worst


def check_exponents(A, rng, tol=EXP_TOL, steps=EXP_STEPS, starts=EXP_STARTS):
    worst = 0.0
    for _ in range(starts):
        x = A.base.random_point(rng)
        y = rng.random(A.fiber_dim)
        rec = derivative_cocycle(A, x, y, steps)
        m = float(np.max(np.abs(rec.exponents())))
        worst = max(worst, m)
        if m > tol:
            raise ExponentNonzero(
                f"fibered exponent estimate {m:.3g} > {tol:.1g}",
                witness=(x, y))
    return worst


# -- solve / verify ---------------------------------------------------------------

def solve(A, density=0.02, grid_n=128, max_len=400_000, seed=0,
          p_max=None, poc_tol=POC_TOL, exp_tol=EXP_TOL, skip_checks=False,
          rng=None):
    """Construct the transfer function of a coboundary cocycle.

    Preconditions (skippable when the caller has already scanned): POC
    residuals below poc_tol on all orbits of period <= p_max, and fibered
    exponent estimates below exp_tol from random starts.
    """
    rng = np.random.default_rng(seed) if rng is None else rng
    if not skip_checks:
        check_poc(A, p_max=p_max, tol=poc_tol)
        check_exponents(A, rng, tol=exp_tol)

    segment = A.base.transitive_segment(density, max_len, seed=seed)
    sampled = [SampledDiffeo.identity(grid_n) if A.fiber_dim == 1
               else SampledDisplacement.from_diffeo(identity(A.fiber_dim),
                                                    grid_n)]
    for x in segment[:-1]:
        sampled.append(sampled[-1].pushed(A.generator(x)))
    tf = TransferFunction(base=A.base, anchor=segment[0],
                          base_points=segment, sampled=sampled,
                          density=density, grid_n=grid_n)
    tf.holder = _fit_holder(tf, rng)
    return tf


@dataclass(frozen=True)
class ResidualReport:
    residual_c0: float
    residual_c1: float
    worst_index: int
    worst_point: object
    test_points: int


def verify_coboundary(u, A, test_points=100, rng=None):
    """Sup residual of A(x) = u(f x) o u(x)^{-1} over sampled table points.

    Comparison is done in the right-composed form d(A(x) o u_i, u_{i+1}),
    which equals the residual of the displayed identity (u_i is a
    bijection) and involves no inverse interpolation.
    """
    rng = np.random.default_rng(1) if rng is None else rng
    n = len(u)
    idx = rng.integers(0, n - 1, size=test_points)
    worst = (-1.0, -1.0, 0)
    for i in idx:
        g = A.generator(u.base_points[i])
        lhs = u.sampled[i].pushed(g)
        rhs = u.sampled[i + 1]
        c0 = lhs.c0_gap(rhs)
        c1 = lhs.c1_gap(rhs)
        if c0 > worst[0]:
            worst = (c0, c1, int(i))
    return ResidualReport(residual_c0=worst[0], residual_c1=worst[1],
                          worst_index=worst[2],
                          worst_point=u.base_points[worst[2]],
                          test_points=test_points)


# -- periodic exponents ------------------------------------------------------------

@dataclass(frozen=True)
class ExponentRecord:
    fiber_start: np.ndarray
    exponents: np.ndarray
    is_fixed_point: bool
    repetitions: int


def _circle_fixed_points(g, grid=2048):
    """Fixed points of a sampled circle map, by lift bisection."""
    pts = fiber_grid(1, grid)
    phi = g.lift(pts)[:, 0] - pts[:, 0]
    roots = []
    lo_k = int(np.floor(phi.min()))
    hi_k = int(np.ceil(phi.max()))
    for k in range(lo_k, hi_k + 1):
        h = phi - k
        sign_change = np.where(h[:-1] * h[1:] < 0)[0]
        for j in sign_change:
            a, b = pts[j, 0], pts[j + 1, 0]
            for _ in range(60):
                mid = 0.5 * (a + b)
                val = g.lift(np.array([[mid]]))[0, 0] - mid - k
                if val * (g.lift(np.array([[a]]))[0, 0] - a - k) <= 0:
                    b = mid
                else:
                    a = mid
            roots.append(0.5 * (a + b))
        exact = np.where(h == 0.0)[0]
        roots.extend(pts[exact, 0].tolist())
    return sorted(set(np.round(roots, 12)))


def periodic_exponents(A, p: PeriodicOrbit, fiber_starts=3, rng=None,
                       max_reps=1000, grid=2048):
    """Per-step log singular values of the fiber derivative at a periodic
    base point, for fixed fiber points (q = 1, located by lift bisection)
    and random fiber starts averaged over repeated orbits."""
    rng = np.random.default_rng(2) if rng is None else rng
    per = len(p.orbit)
    records = []
    if A.fiber_dim == 1:
        g = iterate(A, p.point, per)
        for y in _circle_fixed_points(g, grid=grid):
            d = float(g.deriv(np.array([[y]]))[0, 0, 0])
            records.append(ExponentRecord(
                fiber_start=np.array([y]),
                exponents=np.array([np.log(abs(d)) / per]),
                is_fixed_point=True, repetitions=1))
    for _ in range(fiber_starts):
        y = rng.random(A.fiber_dim)
        n = per * max_reps
        rec = derivative_cocycle(A, p.point, y, n)
        records.append(ExponentRecord(fiber_start=y,
                                      exponents=rec.exponents(),
                                      is_fixed_point=False,
                                      repetitions=max_reps))
    return records


# -- classification ----------------------------------------------------------------

@dataclass
class ObstructionWitness:
    orbit: PeriodicOrbit
    poc_c0: float
    poc_c1: float
    periodic_exponent: float
    fiber_witness: np.ndarray | None

    def replay(self, A, grid=256):
        """Recompute the reported residual and exponent from scratch."""
        rep = poc_residual(A, self.orbit, grid=grid)
        exps = periodic_exponents(A, self.orbit, fiber_starts=0)
        if self.fiber_witness is not None and A.fiber_dim == 1:
            per = len(self.orbit.orbit)
            g = iterate(A, self.orbit.point, per)
            d = float(g.deriv(self.fiber_witness[None, :])[0, 0, 0])
            exp = np.log(abs(d)) / per
        else:
            exp = max((float(np.max(np.abs(e.exponents))) for e in exps),
                      default=0.0)
        return rep.d_c1, exp

    def summary(self):
        return {
            "period": len(self.orbit.orbit),
            "poc_c0": self.poc_c0,
            "poc_c1": self.poc_c1,
            "periodic_exponent": self.periodic_exponent,
        }


@dataclass
class ClassifyResult:
    verdict: str                     # "coboundary" | "obstruction"
    marginal: bool
    witness: ObstructionWitness | None
    transfer: TransferFunction | None
    residual: ResidualReport | None
    tolerances: dict
    score: float
    exponent_estimate: float

    def to_json(self):
        doc = {
            "verdict": self.verdict,
            "marginal": self.marginal,
            "tolerances": self.tolerances,
            "score": self.score,
            "exponent_estimate": self.exponent_estimate,
            "witnesses": [self.witness.summary()] if self.witness else [],
        }
        if self.residual is not None:
            doc["residual_c0"] = self.residual.residual_c0
            doc["residual_c1"] = self.residual.residual_c1
        if self.transfer is not None:
            doc["table_length"] = len(self.transfer)
            doc["density"] = self.transfer.density
            doc["holder"] = {"constant": self.transfer.holder.constant,
                             "exponent": self.transfer.holder.exponent}
        return json.dumps(doc, sort_keys=True)


def classify(A, p_max=None, poc_tol=POC_TOL, exp_tol=EXP_TOL, density=0.02,
             seed=0, margin=10.0, exp_steps=EXP_STEPS, exp_starts=EXP_STARTS,
             solve_kwargs=None):
    """Coboundary / obstruction trichotomy with explicit marginal zone.

    Scans periodic orbits up to p_max and random-start exponents; a score
    above margin (in units of the tolerances) is a clear obstruction, a
    score at most 1 proceeds to constructive solving, anything between is
    reported as an obstruction flagged marginal.
    """
    rng = np.random.default_rng(seed)
    records = scan_periodic_obstructions(A, p_max=p_max, rng=rng)
    witness = None
    score = 0.0
    for orbit, rep, worst_exp, exps in records:
        s = max(rep.d_c1 / poc_tol, abs(worst_exp) / exp_tol)
        if s > score:
            score = s
            fiber_w, signed = None, worst_exp
            for e in exps:
                j = int(np.argmax(np.abs(e.exponents)))
                if abs(e.exponents[j]) == abs(worst_exp):
                    fiber_w = np.asarray(e.fiber_start)
                    signed = float(e.exponents[j])
                    break
            witness = ObstructionWitness(
                orbit=orbit, poc_c0=rep.d_c0, poc_c1=rep.d_c1,
                periodic_exponent=signed, fiber_witness=fiber_w)

    tolerances = {"poc": poc_tol, "exponent": exp_tol, "margin": margin}
    if score > margin:
        # periodic data already decisive: skip the random-start scan
        exp_est = abs(witness.periodic_exponent) if witness else 0.0
        return ClassifyResult(verdict="obstruction", marginal=False,
                              witness=witness, transfer=None, residual=None,
                              tolerances=tolerances, score=score,
                              exponent_estimate=exp_est)

    try:
        exp_est = check_exponents(A, rng, tol=exp_tol, steps=exp_steps,
                                  starts=exp_starts)
    except ExponentNonzero:
        exp_est = exp_tol * margin
        score = max(score, margin + 1.0)

    if score > margin:
        return ClassifyResult(verdict="obstruction", marginal=False,
                              witness=witness, transfer=None, residual=None,
                              tolerances=tolerances, score=score,
                              exponent_estimate=exp_est)
    if score <= 1.0:
        tf = solve(A, density=density, seed=seed, p_max=p_max,
                   skip_checks=True, rng=rng,
                   **(solve_kwargs or {}))
        rep = verify_coboundary(tf, A, rng=rng)
        return ClassifyResult(verdict="coboundary", marginal=False,
                              witness=None, transfer=tf, residual=rep,
                              tolerances=tolerances, score=score,
                              exponent_estimate=exp_est)
    return ClassifyResult(verdict="obstruction", marginal=True,
                          witness=witness, transfer=None, residual=None,
                          tolerances=tolerances, score=score,
                          exponent_estimate=exp_est)

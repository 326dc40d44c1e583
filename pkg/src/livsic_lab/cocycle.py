"""Cocycles over a hyperbolic base, valued in fiber diffeomorphism groups.

A cocycle is determined by its generator x -> A(x); iterates follow the
standard three-case convention

    A^0(x) = id
    A^n(x) = A(f^{n-1} x) o ... o A(f x) o A(x)          (n > 0)
    A^n(x) = A(f^n x)^{-1} o ... o A(f^{-1} x)^{-1}      (n < 0)

so that A^{m+n}(x) = A^m(f^n x) o A^n(x) holds exactly.

The derivative cocycle along a skew orbit is accumulated in factored
(U, log-singular-values, Vt) form with periodic refactorization, which keeps
exponents readable far beyond float overflow of the raw product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSample
from .fiber import (Compose, FiberDiffeo, Translation, distance, identity,
                    invert, rotation, shear)


class Cocycle:
    """Generator-defined cocycle; subclasses set base and fiber_dim."""

    def __init__(self, base_system, fiber_dim=1):
        self.base = base_system
        self.fiber_dim = fiber_dim

    def generator(self, x) -> FiberDiffeo:
        raise NotImplementedError


class ConstantCocycle(Cocycle):
    def __init__(self, base_system, g):
        super().__init__(base_system, g.dim)
        self.g = g

    def generator(self, x):
        return self.g


class FunctionCocycle(Cocycle):
    """Generator given by an arbitrary callable x -> FiberDiffeo."""

    def __init__(self, base_system, gen, fiber_dim=1):
        super().__init__(base_system, fiber_dim)
        self._gen = gen

    def generator(self, x):
        return self._gen(x)


class RotationCocycle(Cocycle):
    """Circle rotations by a Holder angle function of the base point."""

    def __init__(self, base_system, theta):
        super().__init__(base_system, 1)
        self.theta = theta

    def generator(self, x):
        return rotation(float(self.theta(x)))


class ShearCocycle(Cocycle):
    """One-harmonic circle shears with base-dependent amplitude."""

    def __init__(self, base_system, amplitude, phase=0.0):
        super().__init__(base_system, 1)
        self.amplitude = amplitude
        self.phase = phase

    def generator(self, x):
        return shear(float(self.amplitude(x)), phase=self.phase)


class CoboundaryCocycle(Cocycle):
    """A(x) = u(f x) o u(x)^{-1} for a transfer field u."""

    def __init__(self, base_system, u_field, fiber_dim=1):
        super().__init__(base_system, fiber_dim)
        self.u_field = u_field

    def generator(self, x):
        ufx = self.u_field(self.base.step(x))
        ux = self.u_field(x)
        if isinstance(ufx, Translation) and isinstance(ux, Translation):
            return Translation(ufx.v - ux.v)
        return Compose([ufx, invert(ux)])


class ProductCocycle(Cocycle):
    """Pointwise composition A(x) = A1(x) o A2(x) (a perturbation device)."""

    def __init__(self, first, second):
        if first.fiber_dim != second.fiber_dim:
            raise ValueError("fiber dimension mismatch")
        super().__init__(first.base, first.fiber_dim)
        self.first = first
        self.second = second

    def generator(self, x):
        return Compose([self.first.generator(x), self.second.generator(x)])


def make_coboundary(base_system, u_field, fiber_dim=1):
    return CoboundaryCocycle(base_system, u_field, fiber_dim=fiber_dim)


# -- base observables and transfer fields ------------------------------------

class TorusHarmonics:
    """Finite trigonometric polynomial on the base torus.

    terms: iterable of (amplitude, wavevector, phase); value at x is
    sum of a * cos(2 pi <k, x> + phi).
    """

    def __init__(self, terms):
        self.terms = [(float(a), np.asarray(k, dtype=float), float(p))
                      for a, k, p in terms]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return sum(a * np.cos(2 * np.pi * (x @ k) + p)
                   for a, k, p in self.terms)


class ShiftObservable:
    """Cylinder-weighted observable on the full shift.

    value(x) = sum over |i| <= radius of w_i * symbol_i(x) * decay^{|i|},
    Lipschitz for the 2^{-k} metric when decay <= 1/2.
    """

    def __init__(self, weights, decay=0.5):
        w = np.asarray(weights, dtype=float)
        if len(w) % 2 != 1:
            raise ValueError("weights must have odd length (centered window)")
        self.weights = w
        self.radius = len(w) // 2
        self.decay = float(decay)

    def __call__(self, x):
        idx = np.arange(-self.radius, self.radius + 1)
        syms = np.array([x.symbol(int(i)) for i in idx], dtype=float)
        return float(np.sum(self.weights * syms * self.decay ** np.abs(idx)))


class RotationField:
    """Transfer field u(x) = rotation by phi(x)."""

    def __init__(self, phi):
        self.phi = phi

    def __call__(self, x):
        return rotation(float(self.phi(x)))


class ShearField:
    """Transfer field u(x) = circle shear with amplitude a(x)."""

    def __init__(self, amplitude, phase=0.0):
        self.amplitude = amplitude
        self.phase = phase

    def __call__(self, x):
        return shear(float(self.amplitude(x)), phase=self.phase)


class ComposedField:
    def __init__(self, *fields):
        self.fields = fields

    def __call__(self, x):
        return Compose([f(x) for f in self.fields])


# -- iteration ----------------------------------------------------------------

def iterate(A, x, n):
    """The fiber diffeomorphism A^n(x), any integer n."""
    if n == 0:
        return identity(A.fiber_dim)
    if n > 0:
        gens = []
        cur = x
        for _ in range(n):
            gens.append(A.generator(cur))
            cur = A.base.step(cur)
        return Compose(list(reversed(gens)), dim=A.fiber_dim)
    gens = []
    cur = x
    for _ in range(-n):
        cur = A.base.inverse_step(cur)
        gens.append(invert(A.generator(cur)))
    return Compose(list(reversed(gens)), dim=A.fiber_dim)


def skew_step(A, x, y):
    return A.base.step(x), A.generator(x).eval(y)


def skew_orbit(A, x, y, n):
    """Forward skew-product orbit; returns (base points, fiber points)."""
    xs, ys = [x], [np.asarray(y, dtype=float)]
    for _ in range(n):
        x, y = skew_step(A, x, ys[-1])
        xs.append(x)
        ys.append(y)
    return xs, ys


# -- derivative cocycle -------------------------------------------------------

@dataclass
class DerivativeRecord:
    """Log-factored derivative cocycle along a skew orbit.

    checkpoints: list of (step index, descending log growth factors).
    frame: orthonormal image frame of the accumulated product.
    """

    n: int
    checkpoints: list
    log_svals: np.ndarray
    frame: np.ndarray

    def exponents(self):
        return self.log_svals / self.n


def derivative_cocycle(A, x, y, n, refactor_interval=10, checkpoint_every=None):
    """Accumulate D(A^n(x)) at y with reorthogonalized QR refactorization.

    Growth factors are kept as running log sums, so products far past
    float overflow stay readable.
    """
    q = A.fiber_dim
    if checkpoint_every is None:
        checkpoint_every = max(1, n // 50)
    y = np.asarray(y, dtype=float)
    checkpoints = []

    if q == 1:
        acc = 0.0
        cur_x, cur_y = x, y
        for i in range(1, n + 1):
            g = A.generator(cur_x)
            yy = cur_y[None, :]
            d = g.deriv(yy)[0, 0, 0]
            acc += np.log(np.abs(d))
            cur_y = g.eval(yy)[0]
            cur_x = A.base.step(cur_x)
            if i % checkpoint_every == 0 or i == n:
                checkpoints.append((i, np.array([acc])))
        return DerivativeRecord(n=n, checkpoints=checkpoints,
                                log_svals=np.array([acc]),
                                frame=np.array([[1.0]]))

    frame = np.eye(q)
    logs = np.zeros(q)
    buf = np.eye(q)
    pending = 0
    cur_x, cur_y = x, y

    def fold():
        nonlocal frame, logs, buf, pending
        qq, rr = np.linalg.qr(buf @ frame)
        sgn = np.sign(np.diag(rr))
        sgn[sgn == 0] = 1.0
        frame = qq * sgn[None, :]
        logs = logs + np.log(np.abs(np.diag(rr)))
        buf = np.eye(q)
        pending = 0

    for i in range(1, n + 1):
        g = A.generator(cur_x)
        yy = cur_y[None, :]
        buf = g.deriv(yy)[0] @ buf
        pending += 1
        cur_y = g.eval(yy)[0]
        cur_x = A.base.step(cur_x)
        if pending >= refactor_interval or i == n or i % checkpoint_every == 0:
            fold()
        if i % checkpoint_every == 0 or i == n:
            order = np.argsort(logs)[::-1]
            checkpoints.append((i, logs[order]))
    order = np.argsort(logs)[::-1]
    return DerivativeRecord(n=n, checkpoints=checkpoints,
                            log_svals=logs[order], frame=frame[:, order])


# -- diagnostics --------------------------------------------------------------

def poc_residual(A, orbit, grid=256, beta=1.0):
    """Distance report between A^per(p) and the identity at a periodic point."""
    per = len(orbit.orbit)
    return distance(iterate(A, orbit.point, per), identity(A.fiber_dim),
                    beta=beta, grid=grid)


@dataclass(frozen=True)
class HolderEstimate:
    constant: float
    exponent: float
    pairs_used: int


def estimate_holder(A, rng, pairs=300, grid=128, scale_range=(1.0, 5.0)):
    """Log-log fit of d_C0(A(x), A(x')) against base distance on close pairs."""
    base_d, fiber_d = [], []
    for _ in range(pairs):
        x = A.base.random_point(rng)
        scale = 10.0 ** (-rng.uniform(*scale_range))
        x2 = _perturb(A.base, x, scale, rng)
        db = A.base.metric(x, x2)
        if db <= 0:
            continue
        from .fiber import c0_gap
        dg = c0_gap(A.generator(x), A.generator(x2), grid=grid)
        base_d.append(db)
        fiber_d.append(dg)
    if not base_d:
        raise DegenerateSample("no pair with positive base distance")
    base_d = np.asarray(base_d)
    fiber_d = np.asarray(fiber_d)
    good = fiber_d > 1e-13
    if not good.any():
        return HolderEstimate(constant=0.0, exponent=1.0, pairs_used=0)
    slope, intercept = np.polyfit(np.log(base_d[good]), np.log(fiber_d[good]), 1)
    return HolderEstimate(constant=float(np.exp(intercept)),
                          exponent=float(slope), pairs_used=int(good.sum()))


def _perturb(base_system, x, scale, rng):
    from .base import FullShift, ShiftPoint
    if isinstance(base_system, FullShift):
        k = max(1, int(round(-np.log(scale) / np.log(2))))
        w = np.array(x.window, dtype=np.int8).copy()
        r = x.radius
        idx = np.arange(-r, r + 1)
        far = np.abs(idx) >= k
        w[far] = rng.integers(0, base_system.m, size=int(far.sum()))
        return ShiftPoint(window=w)
    v = rng.normal(size=len(x))
    v /= np.linalg.norm(v)
    return (np.asarray(x) + scale * v) % 1.0

"""Closed fiber manifolds (circle, 2-torus) and their diffeomorphisms.

Diffeomorphisms are composition trees whose leaves are closed-form
generators: rigid translations, one-harmonic shears, integer linear
automorphisms, and formal inverses.  Every node evaluates values and
derivatives on lifts, vectorized over trailing point axes; formal inverses
are resolved by peeling compositions and solving each primitive with a
guarded Newton iteration (monotone scalar solve for shears, exact integer
inverse for linear maps).

Distances: d_C0 is the sup of pointwise displacements over a grid; d_C1
adds the two symmetric derivative-comparison terms measured in the single
global chart; d_C{1+beta} adds the beta-Holder seminorms of those
derivative fields over grid pairs within distance 1/4.  When the C0 gap
exceeds 1/4 the nested definitions fall back to d_C0 + 1 and d_C1 + 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import wrap_torus
from .errors import InversionDiverged


def fiber_metric(y1, y2):
    return float(np.linalg.norm(wrap_torus(np.asarray(y1) - np.asarray(y2))))


def fiber_metric_many(y1, y2):
    return np.linalg.norm(wrap_torus(np.asarray(y1) - np.asarray(y2)), axis=-1)


def fiber_grid(q, n):
    """Uniform n^q grid on the q-torus, shape (n^q, q)."""
    axes = [np.arange(n) / n] * q
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


class FiberDiffeo:
    """Base class; subclasses implement lift() and deriv() on lifts."""

    dim: int

    def lift(self, x):
        raise NotImplementedError

    def deriv(self, x):
        raise NotImplementedError

    def eval(self, y):
        return self.lift(np.asarray(y, dtype=float)) % 1.0

    def value_and_deriv(self, x):
        return self.lift(x), self.deriv(x)

    def __call__(self, y):
        return self.eval(y)


class Translation(FiberDiffeo):
    def __init__(self, v):
        v = np.atleast_1d(np.asarray(v, dtype=float))
        self.v = v
        self.dim = len(v)

    def lift(self, x):
        return np.asarray(x, dtype=float) + self.v

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.dim), x.shape + (self.dim,)).copy()


class Shear(FiberDiffeo):
    """x -> x + (a / 2 pi) sin(2 pi <k, x> + phase) e_axis, |a k_axis| < 1."""

    def __init__(self, a, wavevec=(1,), axis=0, phase=0.0):
        k = np.atleast_1d(np.asarray(wavevec, dtype=float))
        if abs(a * k[axis]) >= 1.0:
            raise ValueError("|a * k_axis| must be < 1 for a diffeomorphism")
        self.a = float(a)
        self.k = k
        self.axis = int(axis)
        self.phase = float(phase)
        self.dim = len(k)

    def lift(self, x):
        x = np.asarray(x, dtype=float)
        arg = 2 * np.pi * (x @ self.k) + self.phase
        out = x.copy()
        out[..., self.axis] += (self.a / (2 * np.pi)) * np.sin(arg)
        return out

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        arg = 2 * np.pi * (x @ self.k) + self.phase
        jac = np.broadcast_to(np.eye(self.dim), x.shape + (self.dim,)).copy()
        jac[..., self.axis, :] += self.a * np.cos(arg)[..., None] * self.k
        return jac

    def solve(self, t):
        """Preimage on lifts: monotone guarded Newton in the axis coordinate."""
        t = np.asarray(t, dtype=float)
        w = t.copy()
        c = self.a / (2 * np.pi)
        kj = self.k[self.axis]
        s_other = t @ self.k - kj * t[..., self.axis]
        if kj == 0.0:
            w[..., self.axis] = t[..., self.axis] - c * np.sin(
                2 * np.pi * s_other + self.phase)
            return w
        tj = t[..., self.axis]
        lo, hi = tj - abs(c), tj + abs(c)
        wj = tj.copy()
        for _ in range(100):
            arg = 2 * np.pi * (kj * wj + s_other) + self.phase
            f = wj + c * np.sin(arg) - tj
            df = 1.0 + self.a * kj * np.cos(arg)
            step = f / df
            cand = wj - step
            bad = (cand < lo) | (cand > hi)
            cand = np.where(bad, 0.5 * (lo + hi), cand)
            pos = f > 0
            hi = np.where(pos, wj, hi)
            lo = np.where(pos, lo, wj)
            wj = cand
            if np.max(np.abs(f)) < 1e-14:
                break
        else:
            res = float(np.max(np.abs(f)))
            if res > 1e-12:
                raise InversionDiverged("shear inversion stalled", residual=res)
        w[..., self.axis] = wj
        return w


class LinearMap(FiberDiffeo):
    """Orientation-preserving integer torus automorphism."""

    def __init__(self, matrix):
        m = np.atleast_2d(np.asarray(matrix, dtype=np.int64))
        det = int(round(np.linalg.det(m)))
        if det != 1:
            raise ValueError("linear fiber maps must have determinant +1")
        self.matrix = m
        self.dim = m.shape[0]
        d = self.dim
        if d == 1:
            inv = np.array([[1]], dtype=np.int64)
        else:
            inv = np.array([[m[1, 1], -m[0, 1]], [-m[1, 0], m[0, 0]]],
                           dtype=np.int64)
        self.inv_int = inv

    def lift(self, x):
        return np.asarray(x, dtype=float) @ self.matrix.T

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.matrix.astype(float),
                               x.shape + (self.dim,)).copy()

    def solve(self, t):
        return np.asarray(t, dtype=float) @ self.inv_int.T


class Compose(FiberDiffeo):
    """factors[0] applied last: value = f1(f2(... fk(x)))."""

    def __init__(self, factors, dim=None):
        factors = list(factors)
        flat = []
        for f in factors:
            if isinstance(f, Compose):
                flat.extend(f.factors)
            else:
                flat.append(f)
        self.factors = flat
        if flat:
            dims = {f.dim for f in flat}
            if len(dims) != 1:
                raise ValueError("composition of mismatched dimensions")
            self.dim = flat[0].dim
        else:
            if dim is None:
                raise ValueError("empty composition needs an explicit dim")
            self.dim = dim

    def lift(self, x):
        v = np.asarray(x, dtype=float)
        for f in reversed(self.factors):
            v = f.lift(v)
        return v

    def deriv(self, x):
        return self.value_and_deriv(x)[1]

    def value_and_deriv(self, x):
        v = np.asarray(x, dtype=float)
        jac = np.broadcast_to(np.eye(self.dim), v.shape + (self.dim,)).copy()
        for f in reversed(self.factors):
            jac = f.deriv(v) @ jac
            v = f.lift(v)
        return v, jac

    @property
    def size(self):
        return max(1, len(self.factors))


class Inverse(FiberDiffeo):
    def __init__(self, g):
        self.g = g
        self.dim = g.dim

    def lift(self, t):
        return _solve(self.g, np.asarray(t, dtype=float))

    def deriv(self, t):
        w = self.lift(t)
        return np.linalg.inv(self.g.deriv(w))

    def value_and_deriv(self, t):
        w = self.lift(t)
        return w, np.linalg.inv(self.g.deriv(w))


def _solve(g, t):
    """Solve g(w) = t on lifts by structural recursion."""
    if isinstance(g, Compose):
        w = t
        for f in g.factors:
            w = _solve(f, w)
        return w
    if isinstance(g, Inverse):
        return g.g.lift(t)
    if isinstance(g, Translation):
        return t - g.v
    if isinstance(g, (Shear, LinearMap)):
        return g.solve(t)
    raise InversionDiverged(f"no inversion rule for {type(g).__name__}")


# -- public constructors ---------------------------------------------------

def identity(q=1):
    return Compose([], dim=q)


def rotation(theta):
    """Rigid circle rotation by angle theta (mod 1 units)."""
    return Translation([theta])


def translation(v):
    return Translation(v)


def shear(a, wavevec=(1,), axis=0, phase=0.0):
    return Shear(a, wavevec=wavevec, axis=axis, phase=phase)


def linear(matrix):
    return LinearMap(matrix)


def compose(*gs):
    if not gs:
        raise ValueError("compose needs at least one factor")
    return Compose(list(gs))


def invert(g):
    if isinstance(g, Inverse):
        return g.g
    if isinstance(g, Translation):
        return Translation(-g.v)
    if isinstance(g, LinearMap):
        return LinearMap(g.inv_int)
    if isinstance(g, Compose):
        return Compose([invert(f) for f in reversed(g.factors)], dim=g.dim)
    return Inverse(g)


def tree_size(g):
    if isinstance(g, Compose):
        return sum(tree_size(f) for f in g.factors) + 1
    if isinstance(g, Inverse):
        return tree_size(g.g) + 1
    return 1


def check_orientation(g, grid=32):
    """Determinant of the derivative is positive on a grid."""
    pts = fiber_grid(g.dim, grid)
    dets = np.linalg.det(g.deriv(pts))
    return bool(np.all(dets > 0))


# -- distances ---------------------------------------------------------------

@dataclass(frozen=True)
class DiffeoDistanceReport:
    d_c0: float
    d_c1: float
    d_c1beta: float
    grid: int
    beta: float

    def __post_init__(self):
        assert self.d_c0 <= self.d_c1 + 1e-15 <= self.d_c1beta + 2e-15


_PAIR_CAP = 2048
_CHART_RADIUS = 0.25


def _op_norms(mats):
    if mats.shape[-1] == 1:
        return np.abs(mats[..., 0, 0])
    return np.linalg.svd(mats, compute_uv=False)[..., 0]


def _holder_seminorm(field, base_pts, beta):
    n = len(base_pts)
    if n > _PAIR_CAP:
        idx = np.random.default_rng(0).choice(n, size=_PAIR_CAP, replace=False)
        field, base_pts = field[idx], base_pts[idx]
        n = _PAIR_CAP
    diff_pts = fiber_metric_many(base_pts[:, None, :], base_pts[None, :, :])
    iu, ju = np.triu_indices(n, k=1)
    d = diff_pts[iu, ju]
    close = (d > 0) & (d <= _CHART_RADIUS)
    if not close.any():
        return 0.0
    gaps = _op_norms(field[iu[close]] - field[ju[close]])
    return float(np.max(gaps / d[close] ** beta))


def distance(g, h, beta=1.0, grid=256):
    """C0 / C1 / C{1+beta} distances between fiber diffeomorphisms.

    grid is the per-dimension sampling resolution (>= 16).
    """
    if not (0 < beta <= 1):
        raise ValueError("beta must be in (0, 1]")
    if grid < 16:
        raise ValueError("grid must be >= 16")
    q = g.dim
    if h.dim != q:
        raise ValueError("dimension mismatch")
    pts = fiber_grid(q, grid)
    d_c0 = float(np.max(fiber_metric_many(g.eval(pts), h.eval(pts))))
    if d_c0 > _CHART_RADIUS:
        # chart-compatibility fallback of the nested definitions
        return DiffeoDistanceReport(d_c0=d_c0, d_c1=d_c0 + 1.0,
                                    d_c1beta=d_c0 + 2.0, grid=grid, beta=beta)
    dg = g.deriv(pts)
    dh = h.deriv(pts)
    eye = np.eye(q)
    field_gh = dg @ np.linalg.inv(dh)  # derivative of g o h^{-1} in the chart
    field_hg = dh @ np.linalg.inv(dg)
    term = float(np.max(_op_norms(field_gh - eye)))
    term += float(np.max(_op_norms(field_hg - eye)))
    d_c1 = d_c0 + term
    semi = _holder_seminorm(field_gh, h.eval(pts), beta)
    semi += _holder_seminorm(field_hg, g.eval(pts), beta)
    return DiffeoDistanceReport(d_c0=d_c0, d_c1=d_c1, d_c1beta=d_c1 + semi,
                                grid=grid, beta=beta)


def c0_gap(g, h, grid=256):
    pts = fiber_grid(g.dim, grid)
    return float(np.max(fiber_metric_many(g.eval(pts), h.eval(pts))))

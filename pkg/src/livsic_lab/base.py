"""Hyperbolic base systems: toral automorphisms and full shifts.

Two concrete families of hyperbolic homeomorphisms with exact structural
algorithms (bracket, closing, periodic-point enumeration):

* ``ToralAutomorphism`` -- an integer matrix with |trace| > 2 and det = +-1
  acting on the 2-torus.  Points are numpy arrays of shape (2,) with entries
  in [0, 1); the metric is the flat metric (Euclidean on lifts, minimized
  over deck translations).  Closing is exact linear algebra on lifts.

* ``FullShift`` -- the two-sided full shift on m symbols with metric
  d(x, y) = 2^{-k}, k = min{|i| : x_i != y_i}.  Points are stored as finite
  symbol windows of radius W with implicit periodic tails, which makes the
  shift an exact cyclic rotation of the window; all window-edge effects are
  below 2^{-(W - steps)} and every operation documents its window budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import (
    BracketOutOfRange,
    CapExceeded,
    NotDenseEnough,
    NotRecurrent,
)


@dataclass(frozen=True)
class HyperbolicityData:
    """Quantitative hyperbolicity constants of a base system.

    epsilon: radius of the local stable/unstable sets used by the bracket.
    delta:   bracket radius (pairs closer than delta have a unique bracket).
    K0:      shadowing prefactor (1 for both uniformly hyperbolic models).
    tau:     per-step contraction log-rate.
    nu_s_max, nu_u_max: uniform bounds on the stable/unstable contraction
    factors; both are < 1 for the models implemented here.
    """

    epsilon: float
    delta: float
    K0: float
    tau: float
    nu_s_max: float
    nu_u_max: float

    def __post_init__(self):
        if not (self.K0 >= 1 and self.tau > 0 and self.epsilon > 0 and self.delta > 0):
            raise ValueError("invalid hyperbolicity constants")
        if not (self.nu_s_max < 1 and self.nu_u_max < 1):
            raise ValueError("contraction factors must be < 1")


@dataclass(frozen=True)
class PeriodicOrbit:
    """A period-n orbit; orbit[i+1] = f(orbit[i]) and orbit[0] = point."""

    point: object
    period: int
    orbit: tuple = field(repr=False)
    exact: tuple = field(default=None, repr=False)

    @property
    def least_period(self):
        return len({_point_key(p) for p in self.orbit})


def _point_key(p):
    if isinstance(p, ShiftPoint):
        return ("shift", p.window.tobytes())
    return ("torus", tuple(np.round(np.asarray(p, dtype=float) % 1.0, 9) % 1.0))


def wrap_torus(v):
    """Map lift displacements coordinatewise into [-1/2, 1/2)."""
    v = np.asarray(v, dtype=float)
    return (v + 0.5) % 1.0 - 0.5


class ToralAutomorphism:
    """Hyperbolic automorphism of T^2 induced by an integer matrix."""

    def __init__(self, matrix=((2, 1), (1, 1)), epsilon=0.25, point_cap=1_000_000):
        m = np.array(matrix, dtype=np.int64)
        if m.shape != (2, 2):
            raise ValueError("matrix must be 2x2")
        det = int(round(np.linalg.det(m)))
        if det not in (-1, 1):
            raise ValueError("matrix must have determinant +-1")
        if abs(m[0, 0] + m[1, 1]) <= 2:
            raise ValueError("matrix must have |trace| > 2")
        self.matrix = m
        self.det = det
        self.inv_matrix = (det * np.array(
            [[m[1, 1], -m[0, 1]], [-m[1, 0], m[0, 0]]], dtype=np.int64))
        self.point_cap = point_cap

        evals, evecs = np.linalg.eig(m.astype(float))
        iu = int(np.argmax(np.abs(evals)))
        isv = 1 - iu
        self.lam_u = float(evals[iu])
        self.lam_s = float(evals[isv])
        self.v_u = evecs[:, iu] / np.linalg.norm(evecs[:, iu])
        self.v_s = evecs[:, isv] / np.linalg.norm(evecs[:, isv])
        self.eig_basis = np.column_stack([self.v_u, self.v_s])
        self.eig_basis_inv = np.linalg.inv(self.eig_basis)

        tau = float(np.log(abs(self.lam_u)))
        cond = float(np.linalg.norm(self.eig_basis_inv, 2))
        # bracket coefficients are bounded by cond * d(y, y2); keep the
        # bracket point inside the epsilon-local sets
        delta = min(0.2, 0.8 * epsilon / cond)
        self.closing_C = 2.0 * cond / (1.0 - 1.0 / abs(self.lam_u))
        self.hyp = HyperbolicityData(
            epsilon=epsilon,
            delta=delta,
            K0=1.0,
            tau=tau,
            nu_s_max=abs(self.lam_s),
            nu_u_max=1.0 / abs(self.lam_u),
        )

    # -- basic dynamics -------------------------------------------------

    def step(self, x):
        return (self.matrix @ np.asarray(x, dtype=float)) % 1.0

    def inverse_step(self, x):
        return (self.inv_matrix @ np.asarray(x, dtype=float)) % 1.0

    def step_many(self, xs):
        return (np.asarray(xs, dtype=float) @ self.matrix.T) % 1.0

    def inverse_step_many(self, xs):
        return (np.asarray(xs, dtype=float) @ self.inv_matrix.T) % 1.0

    def iterate(self, x, n):
        x = np.asarray(x, dtype=float)
        f = self.step if n >= 0 else self.inverse_step
        for _ in range(abs(int(n))):
            x = f(x)
        return x

    def iterate_exact(self, x, n):
        """f^n(x) in exact rational arithmetic (n >= 0).

        Float stepping amplifies rounding along the unstable direction by
        lam_u per step, so for n beyond ~35 it returns garbage; the float
        input is an exact rational, and the matrix power is exact, so the
        image can be computed exactly and rounded once.
        """
        mn = self._power_int(int(n))
        xf = [Fraction(float(c)) for c in np.asarray(x, dtype=float) % 1.0]
        out = [(int(mn[i, 0]) * xf[0] + int(mn[i, 1]) * xf[1]) % 1
               for i in range(2)]
        return np.array([float(c) for c in out])

    def metric(self, x, y):
        return float(np.linalg.norm(wrap_torus(np.asarray(x) - np.asarray(y))))

    def metric_many(self, xs, ys):
        return np.linalg.norm(wrap_torus(np.asarray(xs) - np.asarray(ys)), axis=-1)

    def random_point(self, rng):
        return rng.random(2)

    # -- structure ------------------------------------------------------

    def bracket(self, y, y2):
        """Unique point of W^u_eps(y) cap W^s_eps(y2), solved on lifts."""
        d = self.metric(y, y2)
        if d >= self.hyp.delta:
            raise BracketOutOfRange(
                f"d(y, y2) = {d:.3g} >= delta = {self.hyp.delta:.3g}")
        rhs = wrap_torus(np.asarray(y2, dtype=float) - np.asarray(y, dtype=float))
        # y + a v_u = y2' + b v_s  =>  [v_u, -v_s] (a, b)^T = y2' - y
        ab = np.linalg.solve(np.column_stack([self.v_u, -self.v_s]), rhs)
        return (np.asarray(y, dtype=float) + ab[0] * self.v_u) % 1.0

    def _power_int(self, n):
        p = np.eye(2, dtype=object)
        m = self.matrix.astype(object)
        for _ in range(n):
            p = p @ m
        return p

    def fixed_point_count(self, n):
        d = self._power_int(n) - np.eye(2, dtype=object)
        return abs(int(d[0, 0] * d[1, 1] - d[0, 1] * d[1, 0]))

    def periodic_points(self, n):
        """All of Fix(f^n), grouped into distinct f-orbits.

        Solves (M^n - I) v = 0 mod Z^2 exactly: solutions are the rational
        points v = (a, b)/|det| with D (a, b) = 0 mod |det|.
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        count = self.fixed_point_count(n)
        if count > self.point_cap:
            raise CapExceeded(f"Fix(f^{n}) has {count} points > cap {self.point_cap}")
        d = self._power_int(n) - np.eye(2, dtype=object)
        det = abs(int(d[0, 0] * d[1, 1] - d[0, 1] * d[1, 0]))
        dmat = d.astype(np.int64)
        a = np.arange(det, dtype=np.int64)
        aa, bb = np.meshgrid(a, a, indexing="ij")
        r0 = (dmat[0, 0] * aa + dmat[0, 1] * bb) % det
        r1 = (dmat[1, 0] * aa + dmat[1, 1] * bb) % det
        mask = (r0 == 0) & (r1 == 0)
        sols = {(int(u), int(v)) for u, v in zip(aa[mask], bb[mask])}
        assert len(sols) == count

        mat = self.matrix
        orbits = []
        seen = set()
        for s in sorted(sols):
            if s in seen:
                continue
            cycle = []
            cur = s
            for _ in range(n):
                cycle.append(cur)
                seen.add(cur)
                cur = (int(mat[0, 0] * cur[0] + mat[0, 1] * cur[1]) % det,
                       int(mat[1, 0] * cur[0] + mat[1, 1] * cur[1]) % det)
                if cur == s:
                    break
            pts = tuple(np.array([Fraction(u, det), Fraction(v, det)], dtype=float)
                        for u, v in cycle)
            orbits.append(PeriodicOrbit(point=pts[0], period=n, orbit=pts))
        return orbits

    def anosov_close(self, x, n):
        """Exact periodic shadow of an almost-closed segment.

        Returns (p, y, trace): p in Fix(f^n) with the exponential deviation
        bound, y = [p, x], and trace[i] = d(f^i x, f^i p) for i = 0..n.
        """
        x = np.asarray(x, dtype=float) % 1.0
        fnx = self.iterate(x, n)
        d0 = self.metric(x, fnx)
        if d0 >= self.hyp.delta:
            raise NotRecurrent(f"d(x, f^n x) = {d0:.3g} >= delta")
        dmat = self._power_int(n) - np.eye(2, dtype=object)
        det = int(dmat[0, 0] * dmat[1, 1] - dmat[0, 1] * dmat[1, 0])
        adj = np.array([[dmat[1, 1], -dmat[0, 1]], [-dmat[1, 0], dmat[0, 0]]],
                       dtype=object)
        # solve (M^n - I) e = -gap exactly over the rationals: x is an
        # exact dyadic rational, so p = x + e satisfies (M^n - I) p in Z^2
        # identically.  Snapping to the nearest 1/det lattice point instead
        # would fail once det exceeds float precision: the nearest lattice
        # point is then almost never in the periodic subgroup.
        xf = [Fraction(float(c)) % 1 for c in x]
        mn = self._power_int(n)
        gap_f = [int(mn[i, 0]) * xf[0] + int(mn[i, 1]) * xf[1] - xf[i]
                 for i in range(2)]
        gap_f = [g - round(g) for g in gap_f]
        pf = [(xf[i] - (int(adj[i, 0]) * gap_f[0]
                        + int(adj[i, 1]) * gap_f[1]) / det) % 1
              for i in range(2)]
        mi = [[int(v) for v in row] for row in self.matrix]
        exact = [tuple(pf)]
        orbit = [np.array([float(c) for c in pf])]
        for _ in range(n - 1):
            pf = [(mi[0][0] * pf[0] + mi[0][1] * pf[1]) % 1,
                  (mi[1][0] * pf[0] + mi[1][1] * pf[1]) % 1]
            exact.append(tuple(pf))
            orbit.append(np.array([float(c) for c in pf]))
        p = orbit[0]
        po = PeriodicOrbit(point=p, period=n, orbit=tuple(orbit),
                           exact=tuple(exact))

        # deviation trace in the eigenbasis: the dynamics of the offset is
        # exactly linear, so the trace stays meaningful below float
        # orbit-divergence scales.
        a, b = np.linalg.solve(self.eig_basis, wrap_torus(x - p))
        ks = np.arange(n + 1)
        trace = np.linalg.norm(
            (a * self.lam_u ** ks)[:, None] * self.v_u[None, :]
            + (b * self.lam_s ** ks)[:, None] * self.v_s[None, :], axis=-1)
        y = self.bracket(p, x)
        return po, y, trace

    def transitive_segment(self, epsilon_dense, max_len, seed=0):
        """Orbit segment that is epsilon_dense-dense, by covering-grid check."""
        if epsilon_dense <= 0:
            raise ValueError("epsilon_dense must be positive")
        cell = epsilon_dense / 2.0
        ncell = int(np.ceil(1.0 / cell))
        rng = np.random.default_rng(np.random.Philox(key=seed))
        x0 = (rng.random(2) + np.array([np.sqrt(2) - 1, np.sqrt(3) - 1])) % 1.0
        pts = np.empty((max_len, 2))
        pts[0] = x0
        for i in range(1, max_len):
            pts[i] = self.step(pts[i - 1])
        idx = np.minimum((pts * ncell).astype(int), ncell - 1)
        hit = np.zeros((ncell, ncell), dtype=bool)
        covered_at = None
        for i in range(max_len):
            hit[idx[i, 0], idx[i, 1]] = True
            if i % 512 == 0 and hit.all():
                covered_at = i
                break
        if covered_at is None:
            if hit.all():
                covered_at = max_len - 1
            else:
                achieved = cell * ncell * np.sqrt(2) if not hit.any() else None
                raise NotDenseEnough(
                    f"covered {int(hit.sum())}/{hit.size} cells in {max_len} steps",
                    achieved=achieved)
        return [pts[i] for i in range(covered_at + 1)]


@dataclass(frozen=True)
class ShiftPoint:
    """Two-sided symbol sequence, stored as a window of radius W.

    The implicit bi-infinite extension repeats the window periodically on
    both sides, so the shift acts as an exact cyclic rotation.  Window-edge
    artifacts after k shifts live at metric scale 2^{-(W-k)}.
    """

    window: np.ndarray  # int8, length 2W+1, centered at index 0

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.window, dtype=np.int8))
        w.setflags(write=False)
        object.__setattr__(self, "window", w)

    @property
    def radius(self):
        return (len(self.window) - 1) // 2

    def symbol(self, i):
        """Symbol at absolute index i (periodic-tail extension)."""
        return int(self.window[(i + self.radius) % len(self.window)])

    def central(self, k):
        """Symbols at indices -k..k as a tuple."""
        w = self.radius
        return tuple(int(s) for s in self.window[w - k:w + k + 1])

    def __eq__(self, other):
        return isinstance(other, ShiftPoint) and np.array_equal(self.window, other.window)

    def __hash__(self):
        return hash(self.window.tobytes())


class FullShift:
    """Two-sided full shift on m symbols with the 2^{-k} metric."""

    def __init__(self, alphabet=2, window=64, point_cap=1_000_000):
        if alphabet < 2:
            raise ValueError("alphabet size must be >= 2")
        self.m = int(alphabet)
        self.window_radius = int(window)
        self.point_cap = point_cap
        self.hyp = HyperbolicityData(
            epsilon=0.5,
            delta=0.25,
            K0=1.0,
            tau=float(np.log(2.0)),
            nu_s_max=0.5,
            nu_u_max=0.5,
        )

    def point(self, symbols, radius=None):
        """Point whose window is the periodization of `symbols` centered at 0."""
        radius = self.window_radius if radius is None else radius
        s = np.asarray(symbols, dtype=np.int8)
        if s.ndim != 1 or len(s) == 0:
            raise ValueError("symbols must be a nonempty 1-d sequence")
        if s.min() < 0 or s.max() >= self.m:
            raise ValueError("symbols out of alphabet range")
        idx = (np.arange(-radius, radius + 1)) % len(s)
        return ShiftPoint(window=s[idx])

    def step(self, x):
        return ShiftPoint(window=np.roll(x.window, -1))

    def inverse_step(self, x):
        return ShiftPoint(window=np.roll(x.window, 1))

    def iterate(self, x, n):
        return ShiftPoint(window=np.roll(x.window, -int(n)))

    def metric(self, x, y):
        wx, wy = x.window, y.window
        r = min(x.radius, y.radius)
        cx = wx[x.radius - r:x.radius + r + 1]
        cy = wy[y.radius - r:y.radius + r + 1]
        diff = np.nonzero(cx != cy)[0]
        if len(diff) == 0:
            return 0.0
        k = int(np.min(np.abs(diff - r)))
        return 2.0 ** (-k)

    def random_point(self, rng, radius=None):
        radius = self.window_radius if radius is None else radius
        return ShiftPoint(window=rng.integers(0, self.m, size=2 * radius + 1,
                                              dtype=np.int64).astype(np.int8))

    def bracket(self, y, y2):
        """Splice: past of y (i < 0) with future of y2 (i >= 0)."""
        d = self.metric(y, y2)
        if d >= self.hyp.delta:
            raise BracketOutOfRange(
                f"d(y, y2) = {d:.3g} >= delta = {self.hyp.delta:.3g}")
        r = min(y.radius, y2.radius)
        w = np.empty(2 * r + 1, dtype=np.int8)
        w[:r] = y.window[y.radius - r:y.radius]
        w[r:] = y2.window[y2.radius:y2.radius + r + 1]
        return ShiftPoint(window=w)

    def fixed_point_count(self, n):
        return self.m ** n

    def periodic_points(self, n):
        """All m^n periodized words of length n, grouped into shift orbits."""
        if n < 1:
            raise ValueError("n must be >= 1")
        count = self.m ** n
        if count > self.point_cap:
            raise CapExceeded(f"m^{n} = {count} > cap {self.point_cap}")
        seen = set()
        orbits = []
        for code in range(count):
            word = tuple((code // self.m ** i) % self.m for i in range(n))
            if word in seen:
                continue
            cycle = [word]
            seen.add(word)
            cur = word
            for _ in range(n - 1):
                cur = cur[1:] + cur[:1]
                cycle.append(cur)
                seen.add(cur)
            pts = tuple(self.point(w) for w in cycle)
            orbits.append(PeriodicOrbit(point=pts[0], period=n, orbit=pts))
        return orbits

    def anosov_close(self, x, n):
        """Closing by periodization of the central block x[0..n-1]."""
        d0 = self.metric(x, self.iterate(x, n))
        if d0 >= self.hyp.delta:
            raise NotRecurrent(f"d(x, f^n x) = {d0:.3g} >= delta")
        word = [x.symbol(i) for i in range(n)]
        p = self.point(word, radius=x.radius)
        orbit = [p]
        for _ in range(n - 1):
            orbit.append(self.step(orbit[-1]))
        po = PeriodicOrbit(point=p, period=n, orbit=tuple(orbit))
        xi, pi = x, p
        trace = [self.metric(xi, pi)]
        for _ in range(n):
            xi, pi = self.step(xi), self.step(pi)
            trace.append(self.metric(xi, pi))
        y = self.bracket(p, x)
        return po, y, np.array(trace)

    def transitive_segment(self, epsilon_dense, max_len, seed=0):
        """Orbit through the concatenation of all blocks of the needed length.

        Density is certified by checking that every centered block of radius
        k (2^{-k} <= epsilon_dense) occurs among the segment's windows.
        """
        if epsilon_dense <= 0:
            raise ValueError("epsilon_dense must be positive")
        k = max(1, int(np.ceil(np.log2(1.0 / epsilon_dense))))
        blen = 2 * k - 1
        nblocks = self.m ** blen
        words = []
        for code in range(nblocks):
            words.extend((code // self.m ** i) % self.m for i in range(blen))
        # pad so every block is seen *centered* while sliding through
        words = words[-k:] + words + words[:k]
        need = nblocks * blen
        if max_len < need:
            raise NotDenseEnough(
                f"need at least {need} steps to visit all {nblocks} blocks "
                f"of length {blen}", achieved=None)
        radius = max(self.window_radius, len(words) // 2 + 1)
        x = self.point(words, radius=radius)
        seg = [x]
        seen_blocks = {x.central(k - 1)}
        for _ in range(min(max_len, need + blen) - 1):
            x = self.step(x)
            seg.append(x)
            seen_blocks.add(x.central(k - 1))
        if len(seen_blocks) < nblocks:
            raise NotDenseEnough(
                f"saw {len(seen_blocks)}/{nblocks} central blocks",
                achieved=2.0 ** (-(k - 1)))
        return seg


def find_recurrences(system, rng, count, n_min=10, n_max=60, delta=None,
                     batch=256, max_batches=400):
    """Mine (x, n) pairs with d(x, f^n x) < delta by scanning random orbits.

    Works for both base models; the torus path is vectorized over a batch of
    initial points.
    """
    delta = 0.5 * system.hyp.delta if delta is None else delta
    events = []
    if isinstance(system, ToralAutomorphism):
        for _ in range(max_batches):
            xs = rng.random((batch, 2))
            cur = xs.copy()
            for n in range(1, n_max + 1):
                cur = system.step_many(cur)
                if n < n_min:
                    continue
                d = system.metric_many(cur, xs)
                for i in np.nonzero(d < delta)[0]:
                    events.append((xs[i].copy(), n))
                    if len(events) >= count:
                        return events
        return events
    # shift: a point recurs at time n iff its window nearly n-periodizes;
    # build such points directly from a random word repeated with a tail
    for _ in range(count * 4):
        n = int(rng.integers(n_min, n_max + 1))
        word = rng.integers(0, system.m, size=n)
        w = system.window_radius
        sym = np.empty(2 * w + 1, dtype=np.int8)
        idx = np.arange(-w, w + 1)
        sym[:] = word[idx % n]
        # corrupt far coordinates so the point is not exactly periodic
        far = np.abs(idx) > n + 5
        noise = rng.integers(0, system.m, size=far.sum())
        sym[far] = noise
        x = ShiftPoint(window=sym)
        if system.metric(x, system.iterate(x, n)) < delta:
            events.append((x, n))
            if len(events) >= count:
                break
    return events

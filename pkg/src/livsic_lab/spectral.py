"""Singular spectra, Lyapunov exponents, cones, flags, and block coordinates.

The linear-algebra layer: ellipsoid ordering, stability of singular-value
growth rates under bounded conjugation (with the explicit threshold
4 log(ell) / delta), invariant cone fields with quantitative aperture
contraction, finite-horizon flag construction, and Lyapunov block
coordinates along a matrix trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cocycle import derivative_cocycle
from .errors import (BoundViolated, ConeEscape, DimensionCollapse,
                     GapTooSmall, NotContained, NotConverged,
                     PreconditionViolated, Singular)

_COND_LIMIT = 1e14


# -- singular values ----------------------------------------------------------

@dataclass(frozen=True)
class SingularSpectrum:
    svals: np.ndarray
    source_n: int = 1


def singular_values(m, source_n=1):
    """Descending singular values as sqrt eigenvalues of m m^T."""
    m = np.asarray(m, dtype=float)
    ev = np.linalg.eigvalsh(m @ m.T)
    ev = np.clip(ev, 0.0, None)
    svals = np.sqrt(ev)[::-1].copy()
    if svals[-1] <= 0 or svals[0] / svals[-1] > _COND_LIMIT:
        raise Singular(f"condition estimate {svals[0] / max(svals[-1], 1e-300):.3g}")
    return SingularSpectrum(svals=svals, source_n=source_n)


# -- ellipsoid ordering -------------------------------------------------------

def _boundary_samples(frame, radii, trials, rng):
    d = len(radii)
    s = rng.normal(size=(trials, d))
    s /= np.linalg.norm(s, axis=1, keepdims=True)
    return (s * np.asarray(radii)) @ np.asarray(frame).T


def ellipsoid_ordering_check(e_frame, e_radii, f_frame, f_radii,
                             witness_trials=300, rng=None):
    """Containment of ellipsoid E inside F implies ordered semi-axes.

    Both ellipsoids are given by orthonormal axis frames (columns) and
    positive radii.  Containment is certified two ways: by the operator
    norm of F^{-1} E and by boundary sampling.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    e_frame = np.asarray(e_frame, dtype=float)
    f_frame = np.asarray(f_frame, dtype=float)
    e_radii = np.asarray(e_radii, dtype=float)
    f_radii = np.asarray(f_radii, dtype=float)
    finv = (f_frame / f_radii).T  # maps F onto the unit ball
    op = np.linalg.svd(finv @ (e_frame * e_radii), compute_uv=False)[0]
    pts = _boundary_samples(e_frame, e_radii, witness_trials, rng)
    sampled = np.max(np.linalg.norm(pts @ finv.T, axis=1))
    if op > 1.0 or sampled > 1.0:
        raise NotContained(
            f"E not inside F: operator certificate {op:.6g}, sampled {sampled:.6g}")
    re = np.sort(e_radii)[::-1]
    rf = np.sort(f_radii)[::-1]
    if not np.all(re <= rf * (1 + 1e-12)):
        raise BoundViolated("semi-axis ordering failed",
                            measured=float(np.max(re - rf)), bound=0.0)
    return True


def random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))[None, :]


def random_contained_pair(rng, d):
    """A random ellipsoid pair (E, F) with E strictly inside F."""
    f_frame = random_orthogonal(rng, d)
    f_radii = np.exp(rng.uniform(-1.0, 1.0, size=d))
    shrink = random_orthogonal(rng, d) @ np.diag(rng.uniform(0.1, 0.9, size=d)) \
        @ random_orthogonal(rng, d)
    e_mat = (f_frame * f_radii) @ shrink
    u, s, _ = np.linalg.svd(e_mat)
    return u, s, f_frame, f_radii


# -- Lyapunov exponents -------------------------------------------------------

@dataclass(frozen=True)
class LyapunovSpectrum:
    exponents: np.ndarray          # distinct, descending
    multiplicities: np.ndarray
    tolerance: float
    raw: np.ndarray = field(default=None)     # per-singular-direction estimates
    slopes: np.ndarray = field(default=None)  # n vs n/2 convergence gaps

    @property
    def k(self):
        return len(self.exponents)


def cluster_exponents(raw, tol):
    """Group descending per-direction estimates into distinct exponents."""
    raw = np.asarray(raw, dtype=float)
    groups = [[raw[0]]]
    for v in raw[1:]:
        if groups[-1][-1] - v <= 2 * tol:
            groups[-1].append(v)
        else:
            groups.append([v])
    exps = np.array([np.mean(g) for g in groups])
    mults = np.array([len(g) for g in groups], dtype=int)
    return exps, mults


def exponent_estimate(A, x, y, n, tol=1e-2):
    """Fibered Lyapunov spectrum from the derivative trace at (x, y)."""
    if n < 1000:
        raise ValueError("exponent_estimate requires n >= 1000")
    rec = derivative_cocycle(A, x, y, n, checkpoint_every=max(1, n // 2))
    est_n = rec.log_svals / n
    half = [c for c in rec.checkpoints if c[0] == n // 2]
    est_half = half[0][1] / (n // 2) if half else est_n
    slopes = np.abs(est_n - est_half)
    if np.max(slopes) > tol:
        raise NotConverged("exponent estimates still drifting",
                           slope=float(np.max(slopes)))
    exps, mults = cluster_exponents(est_n, tol)
    return LyapunovSpectrum(exponents=exps, multiplicities=mults,
                            tolerance=tol, raw=est_n, slopes=slopes)


# -- bounded conjugacy stability ---------------------------------------------

def conjugacy_threshold(ell, delta):
    """Explicit rate-stability threshold ceil(4 log(ell) / delta)."""
    if ell <= 1.0:
        return 1
    return max(1, math.ceil(4.0 * math.log(ell) / delta))


def random_bounded_conjugator(rng, d, ell):
    """Random matrix with all singular values in [1/ell, ell]."""
    s = np.exp(rng.uniform(-math.log(ell), math.log(ell), size=d)) \
        if ell > 1 else np.ones(d)
    return random_orthogonal(rng, d) @ np.diag(s) @ random_orthogonal(rng, d)


def make_rate_trace(lambdas, delta, n_values, rng, wiggle=0.9):
    """Synthetic matrices A_n with per-n rate error within wiggle * delta/2.

    The condition number of A_n is e^{n (lambda_1 - lambda_d)} up to the
    wiggle, so n * spread must stay under ~30 for float64 SVDs downstream.
    """
    lambdas = np.asarray(lambdas, dtype=float)
    spread = float(lambdas[0] - lambdas[-1]) + delta
    if max(n_values) * spread > 30.0:
        raise ValueError("n * exponent spread too large for float64 SVD")
    d = len(lambdas)
    out = []
    for n in n_values:
        w = rng.uniform(-1.0, 1.0, size=d) * wiggle * delta / 2.0
        s = np.exp(n * lambdas + n * w)
        a = random_orthogonal(rng, d) @ np.diag(s) @ random_orthogonal(rng, d)
        out.append((int(n), a))
    return out


def sandwich_check(a, c, d_mat, ell):
    """Non-asymptotic bound sigma_i(a)/ell^2 <= sigma_i(c a d) <= ell^2 sigma_i(a)."""
    for i, m in enumerate((c, d_mat)):
        sv = np.linalg.svd(m, compute_uv=False)
        if sv[0] > ell * (1 + 1e-12) or sv[-1] < (1 / ell) * (1 - 1e-12):
            raise PreconditionViolated("conjugator norm outside [1/ell, ell]",
                                       index=i)
    sa = np.linalg.svd(a, compute_uv=False)
    scad = np.linalg.svd(c @ a @ d_mat, compute_uv=False)
    lo, hi = sa / ell ** 2, sa * ell ** 2
    if not np.all((scad >= lo * (1 - 1e-10)) & (scad <= hi * (1 + 1e-10))):
        raise BoundViolated("sandwich inequality failed",
                            measured=scad.tolist(), bound=[lo.tolist(), hi.tolist()])
    return sa, scad


@dataclass(frozen=True)
class ConjugacyStabilityReport:
    threshold: int
    trials: int
    max_rate_error: float
    worst_violating_n: int | None
    sandwich_ok: bool


def bounded_conjugacy_stability(trace, lambdas, ell, delta, trials, rng):
    """Rate stability of singular values under bounded two-sided conjugation.

    trace: list of (n, A_n).  Checks the rate hypothesis on the input, then
    for each trial draws conjugators C, D with singular values in
    [1/ell, ell] and verifies the delta rate bound for n >= threshold and
    the exact sandwich for every n.
    """
    lambdas = np.asarray(lambdas, dtype=float)
    for idx, (n, a) in enumerate(trace):
        sa = np.linalg.svd(a, compute_uv=False)
        if np.max(np.abs(np.log(sa) / n - lambdas)) > delta / 2 + 1e-12:
            raise PreconditionViolated("input rates exceed delta/2 window",
                                       index=idx)
    thresh = conjugacy_threshold(ell, delta)
    worst_n = None
    max_err = 0.0
    for _ in range(trials):
        c = random_bounded_conjugator(rng, len(lambdas), ell)
        d_mat = random_bounded_conjugator(rng, len(lambdas), ell)
        for n, a in trace:
            _, scad = sandwich_check(a, c, d_mat, ell)
            err = float(np.max(np.abs(np.log(scad) / n - lambdas)))
            if n >= thresh:
                max_err = max(max_err, err)
                if err > delta and (worst_n is None or n > worst_n):
                    worst_n = n
    return ConjugacyStabilityReport(threshold=thresh, trials=trials,
                                    max_rate_error=max_err,
                                    worst_violating_n=worst_n,
                                    sandwich_ok=True)


# -- cone systems -------------------------------------------------------------

@dataclass
class ConeSystem:
    """Orthogonal coordinate splitting with one cone pair per cut j < k.

    The fast cone K^j_gamma collects vectors dominated by the first j
    blocks; the complementary slow cone K_{j,gamma} is dominated by the
    rest.  kappa is half the minimal exponent gap; delta < kappa/2.
    """

    dims: tuple
    lambdas: tuple          # distinct, descending
    gamma: float
    delta: float
    alpha1: float = 0.0

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float)
        if len(lam) != len(self.dims):
            raise ValueError("one exponent per block")
        if len(lam) >= 2 and not np.all(np.diff(lam) < 0):
            raise ValueError("exponents must be strictly descending")
        if not (0 < self.gamma < 1):
            raise ValueError("gamma must be in (0, 1)")
        if len(lam) >= 2 and not (0 < self.delta < self.kappa / 2):
            raise ValueError("delta must satisfy 0 < delta < kappa/2")

    @property
    def k(self):
        return len(self.dims)

    @property
    def total_dim(self):
        return int(sum(self.dims))

    @property
    def kappa(self):
        lam = np.asarray(self.lambdas, dtype=float)
        if len(lam) < 2:
            return math.inf
        return 0.5 * float(np.min(lam[:-1] - lam[1:]))

    def head_slice(self, j):
        return slice(0, int(sum(self.dims[:j])))

    def tail_slice(self, j):
        return slice(int(sum(self.dims[:j])), self.total_dim)

    def aperture_fast(self, v, j):
        """||tail|| / ||head|| for the fast cone at cut j."""
        v = np.asarray(v, dtype=float)
        h = np.linalg.norm(v[..., self.head_slice(j)], axis=-1)
        t = np.linalg.norm(v[..., self.tail_slice(j)], axis=-1)
        return t / np.maximum(h, 1e-300)

    def aperture_slow(self, v, j):
        v = np.asarray(v, dtype=float)
        h = np.linalg.norm(v[..., self.head_slice(j)], axis=-1)
        t = np.linalg.norm(v[..., self.tail_slice(j)], axis=-1)
        return h / np.maximum(t, 1e-300)

    def sample_fast_boundary(self, j, count, rng):
        """Unit vectors with ||tail|| = gamma ||head|| at cut j."""
        dh = int(sum(self.dims[:j]))
        dt = self.total_dim - dh
        head = rng.normal(size=(count, dh))
        head /= np.linalg.norm(head, axis=1, keepdims=True)
        tail = rng.normal(size=(count, dt))
        tail /= np.linalg.norm(tail, axis=1, keepdims=True)
        v = np.concatenate([head, self.gamma * tail], axis=1)
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    def sample_slow_boundary(self, j, count, rng):
        dh = int(sum(self.dims[:j]))
        dt = self.total_dim - dh
        tail = rng.normal(size=(count, dt))
        tail /= np.linalg.norm(tail, axis=1, keepdims=True)
        head = rng.normal(size=(count, dh))
        head /= np.linalg.norm(head, axis=1, keepdims=True)
        v = np.concatenate([self.gamma * head, tail], axis=1)
        return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_block_matrix(cones, rng, margin=0.9):
    """Splitting-preserving matrix with block norms inside the delta/4 window."""
    blocks = []
    for dj, lam in zip(cones.dims, cones.lambdas):
        dj = int(dj)
        s = np.exp(lam + rng.uniform(-1, 1, size=dj) * margin * cones.delta / 4)
        blocks.append(random_orthogonal(rng, dj) @ np.diag(s)
                      @ random_orthogonal(rng, dj))
    out = np.zeros((cones.total_dim, cones.total_dim))
    pos = 0
    for b in blocks:
        out[pos:pos + len(b), pos:pos + len(b)] = b
        pos += len(b)
    return out


def _check_block_hypothesis(cones, m, index):
    d = cones.total_dim
    pos = 0
    for dj, lam in zip(cones.dims, cones.lambdas):
        dj = int(dj)
        blk = m[pos:pos + dj, pos:pos + dj]
        off = m[pos:pos + dj, :].copy()
        off[:, pos:pos + dj] = 0.0
        if np.max(np.abs(off)) > 1e-12:
            raise PreconditionViolated("matrix does not preserve splitting",
                                       index=index)
        sv = np.linalg.svd(blk, compute_uv=False)
        lo, hi = np.exp(lam - cones.delta / 4), np.exp(lam + cones.delta / 4)
        if sv[0] >= hi or sv[-1] <= lo:
            raise PreconditionViolated("block norms outside delta/4 window",
                                       index=index)
        pos += dj


@dataclass(frozen=True)
class ConeReport:
    samples: int
    worst_aperture_ratio: float   # aperture after / allowed aperture, max
    worst_growth_margin: float    # growth bound slack, min (>= 0 means pass)
    perturbed: bool


def cone_invariance_check(cones, matrices, perturbations=None, samples=1000,
                          rng=None):
    """Aperture contraction and growth bounds on sampled cone boundaries.

    Unperturbed rate e^{-kappa + delta/4}; with perturbations within alpha1
    the rate degrades to e^{-kappa + delta/2} and the growth bounds use the
    delta/2 window: ||C v|| <= e^{lambda_{j+1} + delta/2} ||v|| on the slow
    cone and ||C u|| >= e^{lambda_j - delta/2} ||u|| on the fast cone.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    perturbed = perturbations is not None
    rate = math.exp(-cones.kappa + (cones.delta / 2 if perturbed
                                    else cones.delta / 4))
    worst_ap = 0.0
    worst_gm = math.inf
    for idx, m in enumerate(matrices):
        _check_block_hypothesis(cones, m, idx)
        c = m.copy()
        if perturbed:
            p = np.asarray(perturbations[idx], dtype=float)
            if np.linalg.svd(p, compute_uv=False)[0] > cones.alpha1 + 1e-12:
                raise PreconditionViolated("perturbation exceeds alpha1",
                                           index=idx)
            c = m + p
        cinv = np.linalg.inv(c)
        for j in range(1, cones.k):
            vf = cones.sample_fast_boundary(j, samples, rng)
            img = vf @ c.T
            ap = cones.aperture_fast(img, j)
            allowed = cones.gamma * rate
            worst_ap = max(worst_ap, float(np.max(ap)) / allowed)
            if np.max(ap) > allowed * (1 + 1e-9):
                w = vf[int(np.argmax(ap))]
                raise ConeEscape(f"fast cone escape at cut {j}", witness=w)
            vs = cones.sample_slow_boundary(j, samples, rng)
            img_inv = vs @ cinv.T
            ap2 = cones.aperture_slow(img_inv, j)
            worst_ap = max(worst_ap, float(np.max(ap2)) / allowed)
            if np.max(ap2) > allowed * (1 + 1e-9):
                w = vs[int(np.argmax(ap2))]
                raise ConeEscape(f"slow cone escape at cut {j}", witness=w)
            # growth bounds (delta/2 window, both regimes)
            lam = np.asarray(cones.lambdas, dtype=float)
            up = math.exp(lam[j] + cones.delta / 2)
            lo = math.exp(lam[j - 1] - cones.delta / 2)
            slow_growth = np.linalg.norm(vs @ c.T, axis=1)
            fast_growth = np.linalg.norm(vf @ c.T, axis=1)
            gm = min(float(np.min(up - slow_growth)),
                     float(np.min(fast_growth - lo)))
            worst_gm = min(worst_gm, gm)
            if gm < -1e-9:
                bad = vs[int(np.argmax(slow_growth))] if np.max(slow_growth) > up \
                    else vf[int(np.argmin(fast_growth))]
                raise ConeEscape(f"growth bound failed at cut {j}", witness=bad)
    return ConeReport(samples=samples, worst_aperture_ratio=worst_ap,
                      worst_growth_margin=worst_gm, perturbed=perturbed)


def calibrate_gamma(dims, lambdas, delta, rng, start=0.1, trials=50,
                    samples=200):
    """Halve gamma from `start` until sampled growth bounds pass."""
    gamma = start
    for _ in range(30):
        cones = ConeSystem(dims=tuple(dims), lambdas=tuple(lambdas),
                           gamma=gamma, delta=delta)
        try:
            mats = [random_block_matrix(cones, rng) for _ in range(trials)]
            cone_invariance_check(cones, mats, samples=samples, rng=rng)
            return gamma
        except (ConeEscape, BoundViolated):
            gamma *= 0.5
    raise NotConverged("gamma calibration failed to terminate")


def calibrate_alpha1(cones, rng, trials=200, samples=200, resolution=1e-4):
    """Bisect the largest passing perturbation radius, then halve it."""
    lo, hi = 0.0, 0.5

    def passes(alpha):
        test = ConeSystem(dims=cones.dims, lambdas=cones.lambdas,
                          gamma=cones.gamma, delta=cones.delta, alpha1=alpha)
        try:
            mats = [random_block_matrix(test, rng) for _ in range(trials)]
            perts = [alpha * 0.999 * random_bounded_conjugator(rng, test.total_dim, 1.0)
                     for _ in range(trials)]
            cone_invariance_check(test, mats, perturbations=perts,
                                  samples=samples, rng=rng)
            return True
        except (ConeEscape, BoundViolated):
            return False

    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if passes(mid):
            lo = mid
        else:
            hi = mid
    if lo <= 0:
        raise NotConverged("no positive perturbation radius found")
    return lo / 2


def make_cone_system(dims, lambdas, delta=None, gamma=None, alpha1=None,
                     rng=None):
    """Build a ConeSystem, calibrating gamma and alpha1 empirically."""
    rng = np.random.default_rng(0) if rng is None else rng
    lam = np.asarray(lambdas, dtype=float)
    kappa = 0.5 * float(np.min(lam[:-1] - lam[1:])) if len(lam) >= 2 else math.inf
    if delta is None:
        delta = kappa / 4 if math.isfinite(kappa) else 0.1
    if gamma is None:
        gamma = calibrate_gamma(dims, lambdas, delta, rng)
    cones = ConeSystem(dims=tuple(int(d) for d in dims),
                       lambdas=tuple(float(v) for v in lam),
                       gamma=gamma, delta=delta)
    if alpha1 is None:
        alpha1 = calibrate_alpha1(cones, rng)
    cones.alpha1 = alpha1
    return cones


# -- flags --------------------------------------------------------------------

def right_singular_frame(matrices):
    """Orthonormal frame aligned with the right singular flag of the product.

    matrices: sequence (M_0, ..., M_{T-1}) composing as M_{T-1} ... M_0.
    Computed by QR accumulation on the transposed reversed sequence; column
    groups span the fastest-to-slowest right singular subspaces, with log
    growth factors returned alongside.
    """
    d = len(np.atleast_2d(matrices[0]))
    q = np.eye(d)
    logs = np.zeros(d)
    for m in reversed(matrices):
        qq, rr = np.linalg.qr(np.asarray(m, dtype=float).T @ q)
        diag = np.diag(rr)
        if np.min(np.abs(diag)) < 1e-280:
            raise DimensionCollapse("rank loss in frame accumulation")
        sgn = np.sign(diag)
        q = qq * sgn[None, :]
        logs = logs + np.log(np.abs(diag))
    return q, logs


@dataclass(frozen=True)
class Flag:
    """Nested subspaces H_1 superset ... superset H_k as basis matrices."""

    bases: list            # bases[j] has sum_{i > j} d_i columns (0-indexed)
    dims: tuple
    growth_rates: np.ndarray


def flag_construction(matrices, cones, horizon=None):
    """Finite-horizon flag of slow subspaces for a perturbed sequence.

    H_j is approximated by the slowest right-singular subspace of the
    partial product at the horizon; growth of representative vectors in
    H_j minus H_{j+1} is measured by direct iteration and must sit within
    delta/2 of lambda_j.
    """
    mats = [np.asarray(m, dtype=float) for m in matrices]
    if horizon is not None:
        mats = mats[:horizon]
    frame, logs = right_singular_frame(mats)
    order = np.argsort(logs)[::-1]
    frame, logs = frame[:, order], logs[order]
    dims = cones.dims
    k = cones.k
    d = cones.total_dim
    n = len(mats)
    bases = []
    for j in range(k):
        tail_dim = int(sum(dims[j:]))
        bases.append(frame[:, d - tail_dim:])
    # Growth of H_j \ H_{j+1} representatives, read from the accumulated
    # per-column log factors (direct iteration of a single float vector is
    # contaminated by the fastest direction after ~40 steps, so the QR log
    # ledger is the meaningful finite-horizon measurement).
    rates = np.zeros(k)
    pos = 0
    for j in range(k):
        dj = int(dims[j])
        rates[j] = float(np.mean(logs[pos:pos + dj])) / n
        pos += dj
        lam = cones.lambdas[j]
        if abs(rates[j] - lam) > cones.delta / 2 + 10.0 / n:
            raise BoundViolated(f"flag growth rate off at level {j}",
                                measured=float(rates[j]), bound=float(lam))
    return Flag(bases=bases, dims=tuple(dims), growth_rates=rates)


def subspace_angle(b1, b2):
    """Largest principal angle between equal-dimension subspaces."""
    q1, _ = np.linalg.qr(np.asarray(b1, dtype=float))
    q2, _ = np.linalg.qr(np.asarray(b2, dtype=float))
    s = np.linalg.svd(q1.T @ q2, compute_uv=False)
    return float(np.arccos(np.clip(np.min(s), -1.0, 1.0)))


# -- Lyapunov block coordinates ------------------------------------------------

@dataclass
class LyapunovFrame:
    c_matrices: list        # C_eta(z_i), i = 0..T
    b_matrices: list        # B_eta(z_i) = C(z_{i+1}) B(z_i) C(z_i)^{-1}
    eta: float
    ell: float              # max over i of max(||C_i||, ||C_i^-1||)
    ells: np.ndarray        # per-index frame bounds
    block_ok: np.ndarray    # per-index: all block norms inside e^{lam +- eta}
    offblock_max: float
    tempered_ok: np.ndarray  # per-ratio: e^{-eta} < ell_i/ell_{i+1} < e^{eta}

    def uniformity_block(self, ell):
        """Orbit indices where the frame bound is at most ell."""
        return np.nonzero(self.ells <= ell)[0]


def _block_products_gram(blocks, lam, eta):
    """Lyapunov Gram matrices along a scalar-exponent block sequence.

    blocks: list of d_j x d_j matrices b_i (exact block representations).
    Returns per-index symmetric positive matrices G_i combining the
    forward sum of e^{-2(lam+eta) m} pullbacks and the backward sum of
    e^{2(lam-eta) m} push-forwards; both recursions contract at e^{-2 eta}.
    """
    t = len(blocks)
    dj = len(np.atleast_2d(blocks[0]))
    eye = np.eye(dj)
    fwd = [None] * (t + 1)
    fwd[t] = eye.copy()
    wf = math.exp(-2 * (lam + eta))
    for i in range(t - 1, -1, -1):
        b = blocks[i]
        fwd[i] = eye + wf * (b.T @ fwd[i + 1] @ b)
    bwd = [None] * (t + 1)
    bwd[0] = np.zeros((dj, dj))
    wb = math.exp(2 * (lam - eta))
    for i in range(t):
        binv = np.linalg.inv(blocks[i])
        bwd[i + 1] = wb * (binv.T @ (eye + bwd[i]) @ binv)
    # normalize by the two-sided weight mass so a constant diagonal block
    # with exact rate lam gets the identity metric at interior indices
    scale = (1 - math.exp(-2 * eta)) / (1 + math.exp(-2 * eta))
    return [scale * (fwd[i] + bwd[i]) for i in range(t + 1)]


def lyapunov_coordinates(trace, spectrum, eta):
    """Block coordinates C_eta along a matrix trace.

    trace: list of invertible matrices B(z_i), i = 0..T-1.
    spectrum: LyapunovSpectrum (or object with exponents/multiplicities).
    The conjugation identity B_eta(i) = C(i+1) B(i) C(i)^{-1} holds exactly
    by construction; block norms, off-block leakage, and temperedness of
    the frame bounds are measured and reported.
    """
    mats = [np.asarray(m, dtype=float) for m in trace]
    t = len(mats)
    d = len(mats[0])
    lams = np.asarray(spectrum.exponents, dtype=float)
    mults = np.asarray(spectrum.multiplicities, dtype=int)
    if int(mults.sum()) != d:
        raise ValueError("spectrum multiplicities do not sum to the dimension")
    if len(lams) >= 2 and np.min(lams[:-1] - lams[1:]) <= 4 * eta:
        raise GapTooSmall("spectrum gaps must exceed 4 eta")

    starts = np.concatenate([[0], np.cumsum(mults)])
    k = len(lams)
    if k > 2:
        raise NotImplementedError("at most two distinct exponent blocks")

    # Block spans: the fast block propagates forward from the fast
    # right-singular subspace at index 0 (forward-stable); the slow block
    # propagates backward from the slow left-singular subspace at index T
    # (backward-stable).  Both propagations keep exact span invariance.
    def _ortho(b):
        qq, rr = np.linalg.qr(b)
        sgn = np.sign(np.diag(rr))
        sgn[sgn == 0] = 1.0
        return qq * sgn[None, :]

    w = [[None] * (t + 1) for _ in range(k)]
    blocks = [[None] * t for _ in range(k)]

    frame0, logs0 = right_singular_frame(mats)
    order0 = np.argsort(logs0)[::-1]
    frame0 = frame0[:, order0]
    w[0][0] = _ortho(frame0[:, :int(mults[0])])
    for i in range(t):
        img = mats[i] @ w[0][i]
        w[0][i + 1] = _ortho(img)
        blocks[0][i] = w[0][i + 1].T @ img

    if k == 2:
        frame_t, logs_t = right_singular_frame(
            [m.T for m in reversed(mats)])
        order_t = np.argsort(logs_t)[::-1]
        frame_t = frame_t[:, order_t]
        w[1][t] = _ortho(frame_t[:, int(mults[0]):])
        for i in range(t - 1, -1, -1):
            pre = np.linalg.solve(mats[i], w[1][i + 1])
            w[1][i] = _ortho(pre)
            blocks[1][i] = w[1][i + 1].T @ (mats[i] @ w[1][i])

    # per-block Lyapunov Gram metrics and Cholesky transforms
    chols = [[None] * (t + 1) for _ in range(k)]
    for j in range(k):
        grams = _block_products_gram(blocks[j], float(lams[j]), eta)
        for i in range(t + 1):
            chols[j][i] = np.linalg.cholesky(grams[i]).T  # upper: ||L u|| = |u|_G

    c_mats, ells = [], []
    for i in range(t + 1):
        v = np.concatenate([w[j][i] for j in range(k)], axis=1)
        block_l = np.zeros((d, d))
        for j in range(k):
            block_l[starts[j]:starts[j + 1], starts[j]:starts[j + 1]] = chols[j][i]
        c = block_l @ np.linalg.inv(v)
        c_mats.append(c)
        ells.append(max(np.linalg.svd(c, compute_uv=False)[0],
                        np.linalg.svd(np.linalg.inv(c), compute_uv=False)[0]))
    ells = np.asarray(ells)

    b_mats, block_ok, off_max = [], [], 0.0
    for i in range(t):
        b_eta = c_mats[i + 1] @ mats[i] @ np.linalg.inv(c_mats[i])
        b_mats.append(b_eta)
        ok = True
        for j in range(k):
            sl = slice(starts[j], starts[j + 1])
            blk = b_eta[sl, sl]
            off = b_eta[sl, :].copy()
            off[:, sl] = 0.0
            off_max = max(off_max, float(np.max(np.abs(off))))
            sv = np.linalg.svd(blk, compute_uv=False)
            lo, hi = math.exp(lams[j] - eta), math.exp(lams[j] + eta)
            ok = ok and (sv[0] <= hi * (1 + 1e-9)) and (sv[-1] >= lo * (1 - 1e-9))
        block_ok.append(ok)

    ratios = ells[:-1] / ells[1:]
    tempered = (ratios > math.exp(-eta)) & (ratios < math.exp(eta))
    return LyapunovFrame(c_matrices=c_mats, b_matrices=b_mats, eta=eta,
                         ell=float(np.max(ells)), ells=ells,
                         block_ok=np.asarray(block_ok, dtype=bool),
                         offblock_max=off_max,
                         tempered_ok=tempered)

"""Acceptance suite: one test per acceptance criterion, in order.

Each test prints a single PASS/FAIL line with the measured quantities so a
full run reads as a checklist.  Oracles are independent of the code under
test: brute-force lattice scans, closed-form fixed points and exponents,
bisection-computed invariant graphs, and eigenspace comparisons.
"""

import json
import os
import time

import numpy as np
import pytest

from livsic_lab import cli, solver, spectral
from livsic_lab.base import FullShift, ToralAutomorphism
from livsic_lab.cocycle import (ConstantCocycle, RotationField, ShearField,
                                ComposedField, ShiftObservable,
                                TorusHarmonics, derivative_cocycle, iterate,
                                make_coboundary, poc_residual)
from livsic_lab.fiber import (Compose, c0_gap, compose, identity, invert,
                              rotation, shear)
from livsic_lab.shadowing import (LocalizedMap, conjugated_gap_check,
                                  decide_mode, default_params, fiber_close,
                                  localization_slope)

CAT = ToralAutomorphism([[2, 1], [1, 1]])
SHIFT = FullShift(2)


def verdict(num, ok, detail):
    line = f"[criterion {num:2d}] {'PASS' if ok else 'FAIL'} - {detail}"
    print(line, flush=True)
    assert ok, line


def coboundary_families():
    """Every built-in coboundary family: (label, base, cocycle, u_field)."""
    rot_field = RotationField(TorusHarmonics([(0.2, (1, 0), -np.pi / 2),
                                              (0.1, (0, 1), 0.4)]))
    shear_field = ShearField(TorusHarmonics([(0.35, (1, 0), 0.0)]))
    mixed_field = ComposedField(rot_field, shear_field)
    shift_field = RotationField(ShiftObservable([0.1, 0.25, 0.1]))
    fams = [
        ("torus rotation field", CAT, rot_field),
        ("torus shear field", CAT, shear_field),
        ("torus mixed field", CAT, mixed_field),
        ("shift rotation field", SHIFT, shift_field),
    ]
    return [(label, base, make_coboundary(base, f), f)
            for label, base, f in fams]


def random_cocycle(rng, base):
    kind = rng.integers(0, 3)
    if kind == 0:
        return ConstantCocycle(base, shear(float(rng.uniform(-0.7, 0.7))))
    if kind == 1:
        return ConstantCocycle(base, rotation(float(rng.uniform(0, 1))))
    if isinstance(base, FullShift):
        return make_coboundary(base, RotationField(
            ShiftObservable(rng.uniform(-0.3, 0.3, size=3))))
    return make_coboundary(base, RotationField(TorusHarmonics(
        [(float(rng.uniform(-0.3, 0.3)), (1, 0), float(rng.uniform(0, 6)))])))


def fiber_pts(n=16):
    return np.arange(n)[:, None] / n


def comp_gap(g, h, pts):
    return float(np.max(np.abs((g.eval(pts) - h.eval(pts) + 0.5) % 1 - 0.5)))


def test_criterion_1_cocycle_algebra():
    rng = np.random.default_rng(10)
    t0 = time.monotonic()
    pts = fiber_pts()
    worst = 0.0
    for trial in range(1000):
        base = CAT if trial % 3 else SHIFT
        A = random_cocycle(rng, base)
        x = base.random_point(rng)
        m, n = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        # cocycle identity
        lhs = iterate(A, x, m + n)
        rhs = Compose([iterate(A, base.iterate(x, n), m), iterate(A, x, n)])
        worst = max(worst, comp_gap(lhs, rhs, pts))
        # inverse identity: A^{-n}(x) inverts A^n(f^{-n} x)
        fwd = iterate(A, base.iterate(x, -n), n)
        gap = comp_gap(Compose([iterate(A, x, -n), fwd]), identity(1), pts)
        worst = max(worst, gap)
        # matrix (derivative) cocycle identity at a random fiber point
        y = rng.random((1, 1))
        an = iterate(A, x, n)
        dm = iterate(A, base.iterate(x, n), m).deriv(an.eval(y))[0]
        dn = an.deriv(y)[0]
        dmn = lhs.deriv(y)[0]
        worst = max(worst, float(np.max(np.abs(dmn - dm @ dn))))
    elapsed = time.monotonic() - t0
    ok = worst <= 1e-8 and elapsed < 30
    verdict(1, ok, f"1000 instances, max identity gap {worst:.3g}, "
            f"{elapsed:.1f}s")


def _brute_force_fix_count(n):
    m = np.eye(2, dtype=object)
    mat = np.array(CAT.matrix, dtype=object)
    for _ in range(n):
        m = m @ mat
    d = m - np.eye(2, dtype=object)
    det = abs(int(d[0, 0] * d[1, 1] - d[0, 1] * d[1, 0]))
    return sum(1 for a in range(det) for b in range(det)
               if (int(d[0, 0]) * a + int(d[0, 1]) * b) % det == 0
               and (int(d[1, 0]) * a + int(d[1, 1]) * b) % det == 0)


def base_recurrence_events(eps, n_min, n_max, need, steps=200_000,
                           n_orbits=16, seed=0):
    """(start point, return time) pairs found on parallel random orbits."""
    rng = np.random.default_rng(seed)
    xs = np.empty((steps + 1, n_orbits, 2))
    xs[0] = rng.random((n_orbits, 2))
    mt = CAT.matrix.T.astype(float)
    for i in range(steps):
        xs[i + 1] = (xs[i] @ mt) % 1.0
    events = []
    for j in range(n_orbits):
        cand = []
        for m in range(n_min, n_max + 1):
            d = np.linalg.norm(
                (xs[m:, j] - xs[:-m, j] + 0.5) % 1.0 - 0.5, axis=1)
            cand.extend((int(i), m) for i in np.where(d < eps)[0])
        cand.sort()
        taken = -1
        for i, m in cand:
            if i <= taken:
                continue
            events.append((xs[i, j], m))
            taken = i + m
            if len(events) >= need:
                return events
    return events


def _two_sided_decay_rate(trace):
    """Min fitted log-linear decay rate toward the trace minimum."""
    logd = np.log(np.maximum(trace, 1e-300))
    k = int(np.argmin(logd))
    n = len(trace) - 1
    rates = []
    if k >= 5:
        rates.append(-np.polyfit(np.arange(k - 1), logd[:k - 1], 1)[0])
    if n - k >= 5:
        rates.append(np.polyfit(np.arange(k + 2, n + 1),
                                logd[k + 2:n + 1], 1)[0])
    return min(rates) if rates else np.inf


def test_criterion_2_periodic_exactness_and_closing():
    counts_ok = all(CAT.fixed_point_count(n) == _brute_force_fix_count(n)
                    for n in range(1, 7))
    events = base_recurrence_events(2e-3, 8, 45, 1000, steps=320_000,
                                    n_orbits=16, seed=1)
    tau = CAT.hyp.tau
    worst = np.inf
    for x, m in events:
        _, _, trace = CAT.anosov_close(x, m)
        worst = min(worst, _two_sided_decay_rate(trace))
    ok = counts_ok and len(events) >= 1000 and worst >= tau - 0.05
    verdict(2, ok, f"Fix counts exact n<=6: {counts_ok}; {len(events)} "
            f"closing events, min fitted rate {worst:.4f} "
            f"(tau - 0.05 = {tau - 0.05:.4f})")


def test_criterion_3_coboundary_forward_direction():
    t0 = time.monotonic()
    worst_poc, worst_exp = 0.0, 0.0
    rng = np.random.default_rng(2)
    for label, base, A, _ in coboundary_families():
        for per in range(1, 7):
            for orbit in base.periodic_points(per):
                if orbit.least_period != per:
                    continue
                worst_poc = max(worst_poc,
                                poc_residual(A, orbit, grid=128).d_c1)
        for _ in range(10):
            x = base.random_point(rng)
            y = rng.random(1)
            rec = derivative_cocycle(A, x, y, 10_000)
            worst_exp = max(worst_exp, float(np.max(np.abs(rec.exponents()))))
    elapsed = time.monotonic() - t0
    ok = worst_poc <= 1e-8 and worst_exp <= 1e-2 and elapsed < 300
    verdict(3, ok, f"max POC residual {worst_poc:.3g}, max |exponent| "
            f"{worst_exp:.3g} at n=1e4, {elapsed:.0f}s")


def test_criterion_4_constructive_converse():
    worst_resid, worst_round = 0.0, 0.0
    for k, (label, base, A, u_field) in enumerate(coboundary_families()):
        tf = solver.solve(A, density=0.02, seed=k)
        rep = solver.verify_coboundary(tf, A)
        worst_resid = max(worst_resid, rep.residual_c0)
        rng = np.random.default_rng(k)
        anchor_inv = invert(u_field(tf.anchor))
        for i in rng.integers(0, len(tf), size=50):
            truth = Compose([u_field(tf.base_points[i]), anchor_inv])
            got = tf.sampled[i]
            grid = np.arange(got.m)[:, None] / got.m
            dev = np.max(np.abs((got.values.astype(float)
                                 - truth.lift(grid)[:, 0] + 0.5) % 1 - 0.5))
            worst_round = max(worst_round, float(dev))
    ok = worst_resid <= 1e-4 and worst_round <= 1e-3
    verdict(4, ok, f"max verify residual {worst_resid:.3g} (<= 1e-4), max "
            f"round-trip gap {worst_round:.3g} (<= 1e-3) at density 0.02")


def test_criterion_5_obstruction_detection():
    A = ConstantCocycle(CAT, shear(0.5))
    fix = CAT.periodic_points(1)[0]
    rep = poc_residual(A, fix, grid=2048)
    poc_err = abs(rep.d_c0 - 0.5 / (2 * np.pi))
    recs = solver.periodic_exponents(A, fix, fiber_starts=0)
    at_half = [r for r in recs
               if r.is_fixed_point and abs(r.fiber_start[0] - 0.5) < 1e-9]
    exp_err = abs(at_half[0].exponents[0] - np.log(0.5))
    ok = poc_err <= 1e-6 and exp_err <= 1e-3
    verdict(5, ok, f"POC residual off by {poc_err:.2g} (<= 1e-6), periodic "
            f"exponent off by {exp_err:.2g} (<= 1e-3)")


def test_criterion_6_rate_stability():
    rng = np.random.default_rng(3)
    lambdas = [0.3, -0.2]
    trace = spectral.make_rate_trace(lambdas, 0.1, range(1, 46), rng)
    rep = spectral.bounded_conjugacy_stability(trace, lambdas, 2.0, 0.1,
                                               1000, rng)
    ok = (rep.threshold == 28 and rep.worst_violating_n is None
          and rep.max_rate_error <= 0.1 and rep.sandwich_ok)
    verdict(6, ok, f"threshold n >= {rep.threshold}, 1000 conjugator trials, "
            f"max rate error {rep.max_rate_error:.4f}, sandwich ok")


def test_criterion_7_cones_and_flags():
    rng = np.random.default_rng(4)
    lambdas = [0.3, -0.2]
    cones = spectral.make_cone_system((1, 1), lambdas, rng=rng)
    mats = [spectral.random_block_matrix(cones, rng) for _ in range(20)]
    perts = [cones.alpha1 * 0.9
             * spectral.random_bounded_conjugator(rng, 2, 1.0)
             for _ in range(20)]
    rep = spectral.cone_invariance_check(cones, mats, perturbations=perts,
                                         samples=1000, rng=rng)
    worst_angle = 0.0
    for _ in range(20):
        v = np.eye(2) + 0.3 * rng.normal(size=(2, 2))
        m = v @ np.diag(np.exp(lambdas)) @ np.linalg.inv(v)
        flag = spectral.flag_construction([m] * 60, cones)
        worst_angle = max(worst_angle,
                          spectral.subspace_angle(flag.bases[1], v[:, 1:2]))
    ok = rep.worst_aperture_ratio <= 1.0 and worst_angle <= 1e-2
    verdict(7, ok, f"aperture contraction at e^(-kappa+delta/2): worst ratio "
            f"{rep.worst_aperture_ratio:.3f} of allowed on 1000 samples x 20 "
            f"trials; flag vs eigenspace angle {worst_angle:.2e} (<= 1e-2)")


def test_criterion_8_conjugated_gap_bound():
    rng = np.random.default_rng(5)
    ell, eta = 2.0, 0.2
    violations = 0
    worst = 0.0
    for _ in range(1000):
        big = rng.uniform(0.3, 0.99 * ell * np.exp(eta))
        small = rng.uniform(0.3, 0.99 * ell)
        sa, sb = (big, small) if rng.random() < 0.5 else (small, big)
        sa *= rng.choice([-1.0, 1.0])
        sb *= rng.choice([-1.0, 1.0])
        y = rng.random(1)
        amp = rng.uniform(0.1, 0.8)
        g = LocalizedMap(shear(amp), y, 0.1)
        h = LocalizedMap(shear(amp + rng.uniform(-0.05, 0.05)), y, 0.1)
        try:
            rep = conjugated_gap_check(np.array([[sa]]), np.array([[sb]]),
                                       g, h, ell, eta)
            if rep.bound > 0:
                worst = max(worst, rep.measured / rep.bound)
        except Exception:
            violations += 1
    ok = violations == 0 and worst < 1.0
    verdict(8, ok, f"1000 trials, 0 violations, worst measured/bound ratio "
            f"{worst:.3f}")


def test_criterion_9_localization_slope():
    families = [
        ("shear 0.5", shear(0.5), 0.3),
        ("shear 0.75 phased", shear(0.75, phase=1.0), 0.6),
        ("rotated shear", compose(rotation(0.2), shear(0.5)), 0.15),
    ]
    details, ok = [], True
    for label, g, y in families:
        slope, _ = localization_slope(g, np.array([y]))
        details.append(f"{label}: {slope:.3f}")
        ok = ok and abs(slope - 1.0) <= 0.1
    verdict(9, ok, "C1-gap log-log slopes vs beta=1: " + ", ".join(details))


def _exactly_periodic(x_start, closed_base, n):
    """Exact closure oracle: recover the rational periodic point closed
    from x_start, step it independently in integer arithmetic, require
    exact closure and per-index agreement with the float orbit."""
    po, _, _ = CAT.anosov_close(np.asarray(x_start, dtype=float), n)
    p = list(po.exact[0])
    start = list(p)
    mi = [[int(v) for v in row] for row in CAT.matrix]
    for k in range(n):
        approx = np.array([float(c) for c in p])
        if CAT.metric(approx, closed_base[k]) > 1e-9:
            return False
        p = [(mi[0][0] * p[0] + mi[0][1] * p[1]) % 1,
             (mi[1][0] * p[0] + mi[1][1] * p[1]) % 1]
    return p == start


def test_criterion_10_fiber_closing():
    A = ConstantCocycle(CAT, shear(0.5))
    params = default_params(CAT, [np.log(0.5)])
    events = base_recurrence_events(params.epsilon0, 10, 45, 100,
                                    steps=450_000, n_orbits=16, seed=6)
    assert len(events) >= 100, f"only {len(events)} recurrent events found"
    y0 = np.array([0.5])
    min_rate = np.inf
    exact = True
    for x, m in events[:100]:
        res = fiber_close(A, (x, y0), m, params)
        exact = exact and res.mode == "hyperbolic" \
            and _exactly_periodic(x, res.closed_base, m)
        min_rate = min(min_rate, res.fitted_rate_up, res.fitted_rate_down)
    neutral_ok = all(
        decide_mode(A_c, (CAT.random_point(np.random.default_rng(7)),
                          np.array([0.3]))) == "neutral"
        for _, base, A_c, _ in coboundary_families()
        if base is CAT)
    hyperbolic_ok = all(
        decide_mode(ConstantCocycle(CAT, shear(a)),
                    (np.array([0.3, 0.7]), np.array([0.2]))) == "hyperbolic"
        for a in (0.3, 0.5))
    ok = exact and min_rate >= params.kappa - 0.05 and neutral_ok \
        and hyperbolic_ok
    verdict(10, ok, f"100 events closed exactly: {exact}; min two-sided rate "
            f"{min_rate:.4f} (kappa - 0.05 = {params.kappa - 0.05:.4f}); "
            f"neutral on coboundaries {neutral_ok}, hyperbolic on shears "
            f"{hyperbolic_ok}")


def test_criterion_11_determinism(tmp_path, monkeypatch):
    configs = {
        "poc-check": {"cocycle": {"type": "identity"}, "p_max": 3},
        "spectrum": {"cocycle": {"type": "constant-shear", "amplitude": 0.4},
                     "n": 2000, "trials": 4, "seed": 7},
        "solve": {"cocycle": {"type": "rotation-coboundary",
                              "terms": [[0.2, [1, 0], 0.0]]},
                  "density": 0.1, "trials": 20},
        "classify": {"cocycle": {"type": "constant-shear", "amplitude": 0.5},
                     "p_max": 3},
        "shadow": {"cocycle": {"type": "constant-shear", "amplitude": 0.5},
                   "n": 500_000, "trials": 5, "seed": 1},
        "lemma-tests": {"trials": 20, "seed": 7},
        "main-theorem-sweep": {"amplitudes": [0.0, 0.4], "density": 0.1,
                               "p_max": 3, "exp_steps": 1500,
                               "exp_starts": 2},
    }
    mismatches = []
    for exp, doc in configs.items():
        cfg = tmp_path / f"{exp}.json"
        cfg.write_text(json.dumps(doc))
        outs = []
        for run_id, workers in (("a", None), ("b", None), ("c", "4")):
            out = tmp_path / f"{exp}-{run_id}"
            if workers is None:
                monkeypatch.delenv(cli.WORKERS_ENV, raising=False)
            else:
                monkeypatch.setenv(cli.WORKERS_ENV, workers)
            code = cli.main([exp, "--config", str(cfg), "--out", str(out)])
            assert code == 0, f"{exp} exited {code}"
            outs.append(out)
        names = sorted(os.listdir(outs[0]))
        for name in names:
            ref = (outs[0] / name).read_bytes()
            if any((o / name).read_bytes() != ref for o in outs[1:]):
                mismatches.append(f"{exp}/{name}")
    ok = not mismatches
    verdict(11, ok, "all 7 experiments byte-identical across reruns and "
            "1-vs-4 workers" if ok else f"mismatches: {mismatches}")

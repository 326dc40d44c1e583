"""Experiment harness: config parsing, named pipelines, report emission.

Every experiment reads a JSON config (schema-validated, unknown keys
rejected), runs a deterministic pipeline, and writes a JSON report plus
CSV traces into the output directory.  Randomness comes from a
counter-based generator keyed per (run seed, trial index), so reports are
byte-identical across reruns and across worker counts.

Exit codes: 0 success, 2 config error, 3 precondition error, 4 bound
violation, 5 internal numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import jsonschema
import numpy as np

from . import __version__, solver, spectral
from .base import FullShift, ToralAutomorphism
from .cocycle import (ConstantCocycle, RotationField, ShearField,
                      ShiftObservable, TorusHarmonics, derivative_cocycle,
                      make_coboundary, poc_residual)
from .errors import (BoundViolation, ConfigInvalid, LivsicLabError,
                     NotRecurrent, NumericError, PreconditionError)
from .fiber import identity, rotation, shear
from .shadowing import (LinearTangentMap, LocalizedMap, conjugated_gap_check,
                        default_params, fiber_close, finite_graph_transform,
                        graph_invariance_error, localization_slope)

WORKERS_ENV = "LIVSIC_LAB_WORKERS"

EXPERIMENTS = ("poc-check", "spectrum", "solve", "classify", "shadow",
               "lemma-tests", "main-theorem-sweep")

_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "base": {
            "type": "object",
            "additionalProperties": False,
            "required": ["type"],
            "properties": {
                "type": {"enum": ["cat", "shift"]},
                "matrix": {"type": "array", "items": {
                    "type": "array", "items": {"type": "integer"}}},
                "symbols": {"type": "integer", "minimum": 2},
            },
        },
        "cocycle": {
            "type": "object",
            "additionalProperties": False,
            "required": ["type"],
            "properties": {
                "type": {"enum": ["identity", "constant-rotation",
                                  "constant-shear", "rotation-coboundary",
                                  "shear-coboundary"]},
                "angle": _NUM,
                "amplitude": _NUM,
                "phase": _NUM,
                "terms": {"type": "array", "items": {
                    "type": "array", "minItems": 3, "maxItems": 3}},
                "weights": {"type": "array", "items": _NUM},
            },
        },
        "n": _POS_INT,
        "n_min": _POS_INT,
        "n_max": _POS_INT,
        "trials": _POS_INT,
        "p_max": _POS_INT,
        "density": {"type": "number", "exclusiveMinimum": 0},
        "grid_n": _POS_INT,
        "y0": _NUM,
        "seed": {"type": "integer", "minimum": 0},
        "amplitudes": {"type": "array", "items": _NUM},
        "exp_steps": _POS_INT,
        "exp_starts": _POS_INT,
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"poc": _NUM, "exponent": _NUM,
                           "slope": _NUM, "invariance": _NUM},
        },
    },
}


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigInvalid(f"cannot read config {path}: {err}") from err
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        raise ConfigInvalid(f"config schema violation: {err.message}") from err
    return doc


def build_base(cfg):
    desc = cfg.get("base", {"type": "cat"})
    if desc["type"] == "cat":
        return ToralAutomorphism(desc.get("matrix", [[2, 1], [1, 1]]))
    return FullShift(desc.get("symbols", 2))


def build_cocycle(cfg, base):
    desc = cfg.get("cocycle", {"type": "identity"})
    kind = desc["type"]
    if kind == "identity":
        return ConstantCocycle(base, identity(1))
    if kind == "constant-rotation":
        return ConstantCocycle(base, rotation(desc.get("angle", 0.1)))
    if kind == "constant-shear":
        return ConstantCocycle(base, shear(desc.get("amplitude", 0.5),
                                           phase=desc.get("phase", 0.0)))
    if isinstance(base, FullShift):
        obs = ShiftObservable(desc.get("weights", [0.1, 0.2, 0.1]))
    else:
        obs = TorusHarmonics(desc.get(
            "terms", [[desc.get("amplitude", 0.2), [1, 0],
                       desc.get("phase", 0.0)]]))
    if kind == "rotation-coboundary":
        return make_coboundary(base, RotationField(obs))
    return make_coboundary(base, ShearField(obs))


# -- deterministic trial scheduling ------------------------------------------

def trial_rng(seed, trial):
    return np.random.default_rng(
        np.random.Philox(key=np.array([seed, trial], dtype=np.uint64)))


def worker_count():
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def run_trials(fn, trials, seed):
    """Map fn(trial, rng) over trial indices with ordered reduction."""
    if worker_count() == 1:
        return [fn(i, trial_rng(seed, i)) for i in range(trials)]
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(lambda i: fn(i, trial_rng(seed, i)),
                             range(trials)))


def write_csv(out_dir, name, header, rows):
    path = os.path.join(out_dir, name)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        w.writerow(header)
        w.writerows(rows)
    return path


# -- experiment pipelines -----------------------------------------------------

def exp_poc_check(cfg, seed, out_dir):
    base = build_base(cfg)
    A = build_cocycle(cfg, base)
    p_max = cfg.get("p_max", 6)
    tol = cfg.get("tolerances", {}).get("poc", 1e-12)
    rows = []
    worst = 0.0
    for per in range(1, p_max + 1):
        for k, orbit in enumerate(base.periodic_points(per)):
            if orbit.least_period != per:
                continue
            rep = poc_residual(A, orbit, grid=256)
            rows.append([per, k, f"{rep.d_c0:.17g}", f"{rep.d_c1:.17g}"])
            worst = max(worst, rep.d_c1)
    write_csv(out_dir, "poc_residuals.csv",
              ["period", "orbit", "d_c0", "d_c1"], rows)
    verdict = (f"all residuals <= {tol:g}" if worst <= tol
               else f"max residual {worst:.6g} above {tol:g}")
    return {"p_max": p_max, "max_residual_c1": worst, "verdict": verdict}


def exp_spectrum(cfg, seed, out_dir):
    base = build_base(cfg)
    A = build_cocycle(cfg, base)
    n = cfg.get("n", 5000)
    trials = cfg.get("trials", 5)
    tol = cfg.get("tolerances", {}).get("exponent", 1e-2)

    def one(i, rng):
        x = base.random_point(rng)
        y = rng.random(A.fiber_dim)
        rec = derivative_cocycle(A, x, y, n)
        return rec

    recs = run_trials(one, trials, seed)
    rows = []
    for i, rec in enumerate(recs):
        for step, logs in rec.checkpoints:
            for j, v in enumerate(np.atleast_1d(logs)):
                rows.append([i, step, j, f"{v / step:.17g}"])
    write_csv(out_dir, "exponent_trace.csv",
              ["trial", "step", "direction", "estimate"], rows)
    finals = np.stack([rec.exponents() for rec in recs])
    mean = np.sort(np.mean(finals, axis=0))[::-1]
    exps, mults = spectral.cluster_exponents(mean, tol)
    return {
        "n": n,
        "trials": trials,
        "per_trial": [list(map(float, f)) for f in finals],
        "exponents": [float(v) for v in exps],
        "multiplicities": [int(m) for m in mults],
        "max_abs_exponent": float(np.max(np.abs(finals))),
    }


def exp_solve(cfg, seed, out_dir):
    base = build_base(cfg)
    A = build_cocycle(cfg, base)
    tols = cfg.get("tolerances", {})
    tf = solver.solve(A, density=cfg.get("density", 0.02),
                      grid_n=cfg.get("grid_n", 128), seed=seed,
                      p_max=cfg.get("p_max"),
                      poc_tol=tols.get("poc", solver.POC_TOL),
                      exp_tol=tols.get("exponent", solver.EXP_TOL))
    rep = solver.verify_coboundary(tf, A, test_points=cfg.get("trials", 100),
                                   rng=trial_rng(seed, 0))
    rng = trial_rng(seed, 1)
    rows = []
    for i in rng.integers(0, len(tf) - 1, size=cfg.get("trials", 100)):
        g = A.generator(tf.base_points[i])
        lhs = tf.sampled[i].pushed(g)
        rows.append([int(i), f"{lhs.c0_gap(tf.sampled[i + 1]):.17g}",
                     f"{lhs.c1_gap(tf.sampled[i + 1]):.17g}"])
    write_csv(out_dir, "verification.csv", ["index", "d_c0", "d_c1"], rows)
    return {
        "table_length": len(tf),
        "density": tf.density,
        "holder": {"constant": tf.holder.constant,
                   "exponent": tf.holder.exponent},
        "residual_c0": rep.residual_c0,
        "residual_c1": rep.residual_c1,
        "test_points": rep.test_points,
    }


def exp_classify(cfg, seed, out_dir):
    base = build_base(cfg)
    A = build_cocycle(cfg, base)
    tols = cfg.get("tolerances", {})
    res = solver.classify(A, p_max=cfg.get("p_max"),
                          poc_tol=tols.get("poc", solver.POC_TOL),
                          exp_tol=tols.get("exponent", solver.EXP_TOL),
                          density=cfg.get("density", 0.02), seed=seed,
                          exp_steps=cfg.get("exp_steps", solver.EXP_STEPS),
                          exp_starts=cfg.get("exp_starts", solver.EXP_STARTS))
    doc = json.loads(res.to_json())
    rows = [[w["period"], f"{w['poc_c0']:.17g}", f"{w['poc_c1']:.17g}",
             f"{w['periodic_exponent']:.17g}"] for w in doc["witnesses"]]
    write_csv(out_dir, "witnesses.csv",
              ["period", "poc_c0", "poc_c1", "periodic_exponent"], rows)
    return doc


def _find_skew_events(A, x0, y0, eps0, n_scan, n_min, n_max, max_events):
    base = A.base
    xs = np.empty((n_scan + 1, 2))
    ys = np.empty((n_scan + 1, A.fiber_dim))
    xs[0], ys[0] = np.asarray(x0, dtype=float) % 1.0, y0
    for i in range(n_scan):
        ys[i + 1] = A.generator(xs[i]).eval(ys[i][None, :])[0]
        xs[i + 1] = base.step(xs[i])
    cand = []
    for m in range(n_min, n_max + 1):
        db = np.max(np.abs((xs[m:] - xs[:-m] + 0.5) % 1.0 - 0.5), axis=1)
        df = np.max(np.abs((ys[m:] - ys[:-m] + 0.5) % 1.0 - 0.5), axis=1)
        hits = np.where(np.maximum(db, df) < eps0)[0]
        cand.extend((int(i), m) for i in hits)
    cand.sort()
    events = []
    taken_until = -1
    for i, m in cand:
        if i <= taken_until:
            continue
        events.append((i, m))
        taken_until = i + m
        if len(events) >= max_events:
            break
    return xs, ys, events


def exp_shadow(cfg, seed, out_dir):
    base = build_base(cfg)
    if not isinstance(base, ToralAutomorphism):
        raise PreconditionError("shadow experiment runs on the toral base")
    A = build_cocycle(cfg, base)
    rng = trial_rng(seed, 0)
    x0 = base.random_point(rng)
    y0 = np.full(A.fiber_dim, cfg.get("y0", 0.5))
    rec = derivative_cocycle(A, x0, y0, 2000)
    params = default_params(base, rec.exponents())
    xs, ys, events = _find_skew_events(
        A, x0, y0, params.epsilon0, cfg.get("n", 200_000),
        cfg.get("n_min", 10), cfg.get("n_max", 45),
        cfg.get("trials", 20))
    if not events:
        raise NotRecurrent("no recurrent skew events found in the scan")
    rows, traces = [], []
    results = []
    for k, (i, m) in enumerate(events):
        res = fiber_close(A, (xs[i], ys[i]), m, params)
        results.append(res)
        rows.append([k, i, m, res.mode, f"{res.fitted_rate_up:.17g}",
                     f"{res.fitted_rate_down:.17g}",
                     f"{res.bound_constant:.17g}"])
        for j, d in enumerate(res.deviations):
            traces.append([k, j, f"{float(d):.17g}"])
    write_csv(out_dir, "shadow_events.csv",
              ["event", "start", "n", "mode", "rate_up", "rate_down",
               "bound_constant"], rows)
    write_csv(out_dir, "shadow_traces.csv", ["event", "step", "deviation"],
              traces)
    hyp = [r for r in results if r.mode == "hyperbolic"]
    return {
        "events": len(results),
        "kappa": params.kappa,
        "epsilon0": params.epsilon0,
        "modes": sorted({r.mode for r in results}),
        "min_rate_up": min((r.fitted_rate_up for r in hyp), default=None),
        "min_rate_down": min((r.fitted_rate_down for r in hyp), default=None),
        "max_bound_constant": max(r.bound_constant for r in results),
    }


def _lemma_conjugated(trials, seed):
    ell, eta = 2.0, 0.2

    def one(i, rng):
        sa = rng.choice([-1.0, 1.0]) * rng.uniform(0.3, 0.99 * ell
                                                   * np.exp(eta))
        sb = rng.choice([-1.0, 1.0]) * rng.uniform(0.3, 0.99 * ell)
        amp = rng.uniform(0.1, 0.8)
        y = rng.random(1)
        g = LocalizedMap(shear(amp), y, 0.1)
        h = LocalizedMap(shear(amp + rng.uniform(-0.05, 0.05)), y, 0.1)
        rep = conjugated_gap_check(np.array([[sa]]), np.array([[sb]]), g, h,
                                   ell, eta)
        return rep.measured / rep.bound if rep.bound > 0 else 0.0

    ratios = run_trials(one, trials, seed)
    return {"trials": trials, "max_gap_ratio": float(max(ratios))}


def _lemma_graph_transform(seed):
    rng = trial_rng(seed, 10_001)
    linears = [np.diag([rng.uniform(2.1, 2.6), rng.uniform(0.35, 0.45)])
               for _ in range(3)]
    maps = [LinearTangentMap(m + rng.uniform(-1, 1, size=(2, 2)) * 0.01)
            for m in linears]
    s_grid, phi = finite_graph_transform(linears, maps, lam=0.5, alpha2=0.05)
    err = graph_invariance_error(maps, s_grid, phi)
    return {"invariance_error": float(err), "cycle_length": len(maps)}


def exp_lemma_tests(cfg, seed, out_dir):
    trials = cfg.get("trials", 100)
    tols = cfg.get("tolerances", {})
    results = {}

    results["conjugated_gap"] = _lemma_conjugated(trials, seed)

    slope, gaps = localization_slope(shear(0.5), np.array([0.3]))
    slope_tol = tols.get("slope", 0.1)
    if abs(slope - 1.0) > slope_tol:
        from .errors import BoundViolated
        raise BoundViolated(
            f"localization slope {slope:.4g} deviates from 1 by more than "
            f"{slope_tol}", measured=slope, bound=1.0)
    results["localization"] = {"slope": float(slope),
                               "gaps": [float(g) for g in gaps]}

    rng = trial_rng(seed, 10_002)
    lambdas = [0.3, -0.2]
    trace = spectral.make_rate_trace(lambdas, 0.1, range(1, 46), rng)
    stab = spectral.bounded_conjugacy_stability(trace, lambdas, 2.0, 0.1,
                                                min(trials, 50), rng)
    results["bounded_conjugacy"] = {
        "threshold": stab.threshold,
        "max_rate_error": stab.max_rate_error,
        "violations": stab.worst_violating_n is not None,
    }

    rng = trial_rng(seed, 10_003)
    cones = spectral.make_cone_system((1, 1), lambdas, rng=rng)
    mats = [spectral.random_block_matrix(cones, rng)
            for _ in range(min(trials, 50))]
    rep = spectral.cone_invariance_check(cones, mats, samples=1000, rng=rng)
    results["cone_invariance"] = {
        "worst_aperture_ratio": rep.worst_aperture_ratio,
        "worst_growth_margin": rep.worst_growth_margin,
    }

    results["graph_transform"] = _lemma_graph_transform(seed)
    inv_tol = tols.get("invariance", 1e-8)
    if results["graph_transform"]["invariance_error"] > inv_tol:
        from .errors import BoundViolated
        raise BoundViolated("graph invariance error above tolerance",
                            measured=results["graph_transform"]
                            ["invariance_error"], bound=inv_tol)

    rows = [[name, json.dumps(val, sort_keys=True)]
            for name, val in results.items()]
    write_csv(out_dir, "lemma_results.csv", ["lemma", "result"], rows)
    return results


def exp_main_theorem_sweep(cfg, seed, out_dir):
    base = build_base(cfg)
    amps = cfg.get("amplitudes", [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    rows, entries = [], []
    for a in amps:
        A = ConstantCocycle(base, shear(a))
        res = solver.classify(A, p_max=cfg.get("p_max", 4),
                              density=cfg.get("density", 0.05), seed=seed,
                              exp_steps=cfg.get("exp_steps", 2000),
                              exp_starts=cfg.get("exp_starts", 4))
        entry = {"amplitude": a, "verdict": res.verdict,
                 "marginal": res.marginal, "score": res.score,
                 "exponent_estimate": res.exponent_estimate}
        if res.witness is not None:
            entry["witness"] = res.witness.summary()
        if res.residual is not None:
            entry["residual_c0"] = res.residual.residual_c0
        entries.append(entry)
        rows.append([f"{a:g}", res.verdict, res.marginal,
                     f"{res.score:.17g}", f"{res.exponent_estimate:.17g}"])
    write_csv(out_dir, "sweep.csv",
              ["amplitude", "verdict", "marginal", "score",
               "exponent_estimate"], rows)
    return {"amplitudes": amps, "entries": entries}


PIPELINES = {
    "poc-check": exp_poc_check,
    "spectrum": exp_spectrum,
    "solve": exp_solve,
    "classify": exp_classify,
    "shadow": exp_shadow,
    "lemma-tests": exp_lemma_tests,
    "main-theorem-sweep": exp_main_theorem_sweep,
}


def run(experiment, config, seed, out_dir):
    """Execute a named pipeline; returns the report document."""
    if experiment not in PIPELINES:
        raise ConfigInvalid(f"unknown experiment {experiment!r}")
    os.makedirs(out_dir, exist_ok=True)
    resolved = dict(config)
    resolved["experiment"] = experiment
    resolved["seed"] = seed
    results = PIPELINES[experiment](config, seed, out_dir)
    return {
        "version": __version__,
        "experiment": experiment,
        "config": resolved,
        "results": results,
    }


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="livsic-lab",
        description="numerical laboratory for cocycle rigidity experiments")
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", required=True)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=".")
    args = parser.parse_args(argv)

    t0 = time.monotonic()
    try:
        config = load_config(args.config)
        seed = args.seed if args.seed is not None else config.get("seed", 0)
        report = run(args.experiment, config, seed, args.out)
    except ConfigInvalid as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except PreconditionError as err:
        print(f"precondition error: {err}", file=sys.stderr)
        return 3
    except BoundViolation as err:
        print(f"bound violation: {err}", file=sys.stderr)
        return 4
    except (NumericError, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 5

    path = os.path.join(args.out, "report.json")
    payload = json.dumps(report, sort_keys=True, indent=2) + "\n"
    with open(path, "w") as fh:
        fh.write(payload)
    print(path)
    print(f"wall time {time.monotonic() - t0:.2f}s", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""
Command-line runner for the named experiments.

    fracergo list
    fracergo run config.json [--dry-run] [--threads N]

A config is a JSON object validated against :data:`CONFIG_SCHEMA`.  Every
artifact is a pure function of the config, so a rerun rewrites the same
bytes.  ``FRACERGO_THREADS`` sets the worker count when ``--threads`` is
absent; it never changes numbers, only wall time.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .coalescence import sticking_girsanov, two_stage_tv_estimate
from .coupling import (
    build_stopping_schedule,
    check_memory_condition,
    contraction_probe,
    stepwise_decay_probe,
    tail_bound_check,
)
from .dynamics import make_drift, verify_c1
from .kernels import fractional_conjugate, laplace_conjugate_check, make_kernel, verify_c2
from .metrics import bootstrap_rate, decay_curve, gamma_exponent, write_decay_csv, write_rates_json
from .noise import CHUNK, derive_seed, required_past, sample_wiener

__all__ = ["EXPERIMENTS", "CONFIG_SCHEMA", "list_experiments", "load_config", "run_experiment", "main"]

EXIT_OK, EXIT_FAILED_CHECK, EXIT_SCHEMA, EXIT_MODULE = 0, 1, 2, 3

# name -> (topic, one-line doc); order is the listing order
EXPERIMENTS = {
    "verify-kernel": ("kernels", "certify the decay constants of a moving-average kernel"),
    "verify-drift": ("drift conditions", "check monotonicity and outer contraction on sampled pairs"),
    "decay": ("convergence rates", "mean-square gap of a synchronous coupling against a stationary start"),
    "rates": ("convergence rates", "fit the sub-exponential exponent of the decay curve"),
    "schedule": ("stopping times", "build the waiting-time schedule and check its memory and tail bounds"),
    "contraction": ("contraction", "one-period contraction under bounded perturbations and step-wise moments"),
    "coalesce": ("coalescent coupling", "sticking drift, Wiener-level shift and Girsanov cost"),
    "tv": ("total variation", "two-stage estimate of the coupling failure probability"),
    "laplace-check": ("conjugate kernels", "Laplace identity between a kernel and its conjugate"),
}

_num_pos = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["experiment"],
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "kernel": {
            "type": "object",
            "additionalProperties": False,
            "required": ["family", "H"],
            "properties": {
                "family": {"enum": ["fractional", "mixed"]},
                "H": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "Hp": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "drift": {
            "type": "object",
            "additionalProperties": False,
            "required": ["family"],
            "properties": {
                "family": {"enum": ["flatbottom", "linear", "doublewell"]},
                "R": {"type": "number", "minimum": 0},
                "kappa": _num_pos,
            },
        },
        "sigma": _num_pos,
        "d": {"type": "integer", "minimum": 1},
        "T": _num_pos,
        "step": _num_pos,
        "n": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "upsilon": {"oneOf": [_num_pos, {"const": "inf"}]},
        "output": {"type": "string", "minLength": 1},
        "x0": {"oneOf": [{"type": "number"}, {"type": "array", "items": {"type": "number"}, "minItems": 1}]},
        "T_burn": {"type": "number", "minimum": 0},
        "beta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
        "delta": _num_pos,
        "gaps": {"type": "array", "items": _num_pos, "minItems": 1},
        "t_values": {"type": "array", "items": {"type": "number", "minimum": 1}, "minItems": 1},
        "k_max": {"type": "integer", "minimum": 1},
        "n_boot": {"type": "integer", "minimum": 0},
    },
}

_DEFAULTS = {
    "kernel": {"family": "fractional", "H": 0.3},
    "drift": {"family": "flatbottom", "R": 1.0, "kappa": 1.0},
    "sigma": 1.0,
    "d": 1,
    "T": 20.0,
    "step": 1e-2,
    "n": 500,
    "seed": 0,
    "upsilon": "inf",
    "output": "out",
    "x0": 3.0,
    "beta": 0.25,
    "delta": 0.1,
    "k_max": 6,
    "n_boot": 200,
}


class ConfigError(ValueError):
    def __init__(self, message, path):
        super().__init__(message)
        self.path = path


def list_experiments():
    """``[(name, topic, doc), ...]`` in registry order."""
    return [(name, topic, doc) for name, (topic, doc) in EXPERIMENTS.items()]


def load_config(source):
    """Parse and validate a config (path, JSON string or mapping); defaults filled in."""
    if isinstance(source, dict):
        raw = source
    else:
        p = Path(source)
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", "$") from exc
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in e.absolute_path)
        raise ConfigError(e.message, path)
    cfg = json.loads(json.dumps(_DEFAULTS))
    cfg.update(raw)
    return cfg


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _kernel(cfg):
    return make_kernel(cfg["kernel"]["family"], **{k: v for k, v in cfg["kernel"].items() if k != "family"})


def _drift(cfg):
    return make_drift(cfg["drift"], cfg["d"])


def _point(value, d):
    return np.broadcast_to(np.asarray(value, dtype=float), (d,)).copy()


def _time_grid(T, step, points=50):
    stride = max(1, int(round(T / points / step)))
    m = int(math.floor(T / step + 1e-9)) // stride
    return step * stride * np.arange(m + 1)


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _upsilon(cfg):
    u = cfg["upsilon"]
    return math.inf if u == "inf" else float(u)


# ---------------------------------------------------------------------------
# experiments: each returns (artifact names, passed)
# ---------------------------------------------------------------------------


def _exp_verify_kernel(cfg, out, seed, threads):
    k = _kernel(cfg)
    rep = verify_c2(k)
    _dump(out / "kernel_certificate.json", {"kernel": k.to_dict(), "certificate": rep.to_dict()})
    return ["kernel_certificate.json"], rep.passed


def _exp_verify_drift(cfg, out, seed, threads):
    dr = _drift(cfg)
    rep = verify_c1(dr, seed=seed)
    _dump(out / "drift_certificate.json", {"drift": dr.to_dict(), "certificate": rep.to_dict()})
    return ["drift_certificate.json"], rep.passed


def _curve(cfg, seed, threads):
    k, dr = _kernel(cfg), _drift(cfg)
    grid = _time_grid(cfg["T"], cfg["step"])
    curve = decay_curve(dr, cfg["sigma"], k, _point(cfg["x0"], dr.d), grid, n=cfg["n"], seed=seed,
                        step=cfg["step"], T_burn=cfg.get("T_burn"), n_boot=cfg["n_boot"], threads=threads)
    return k, dr, curve


def _exp_decay(cfg, out, seed, threads):
    _, _, curve = _curve(cfg, seed, threads)
    write_decay_csv(out / "decay.csv", curve)
    return ["decay.csv"], True


def _exp_rates(cfg, out, seed, threads):
    from .coupling import default_epsilon

    k, dr, curve = _curve(cfg, seed, threads)
    write_decay_csv(out / "decay.csv", curve)
    fit = bootstrap_rate(curve, n_boot=cfg["n_boot"], seed=seed)
    eps = default_epsilon(k)
    theory = gamma_exponent(k.alpha, eps, _upsilon(cfg))
    write_rates_json(out / "rates.json", fit, H=k.hurst, drift=dr.to_dict(),
                     extra={"gamma_theory": theory, "epsilon": eps,
                            "upsilon": cfg["upsilon"],
                            "note": "ordering and self-consistency are tested, not the theoretical value"})
    return ["decay.csv", "rates.json"], True


def _exp_schedule(cfg, out, seed, threads):
    k = _kernel(cfg)
    k_max = cfg["k_max"]
    T0 = 2.0 * (k_max + 2)
    w = sample_wiener(required_past(k, 6.0 * T0), T0, cfg["step"], seed, np.arange(cfg["n"]), cfg["d"])
    sched = build_stopping_schedule(k, w, k_max=k_max)
    mem = check_memory_condition(sched)
    tails = {}
    for p in (1, 2):
        holds, worst, M = tail_bound_check(sched, p)
        tails[str(p)] = {"holds": holds, "worst_ratio": worst, "M_p": M}
    mean_tau = sched.taus.mean(axis=0)
    kk = np.arange(k_max + 1)
    coef = np.polyfit(kk[1:], mean_tau[1:], 1)
    resid = mean_tau[1:] - np.polyval(coef, kk[1:])
    r2 = 1.0 - float(resid @ resid) / float(np.sum((mean_tau[1:] - mean_tau[1:].mean()) ** 2))
    with open(out / "schedule.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["replica", "k", "tau", "delta", "s_value", "memory_sup", "recent_ok"])
        for row in sched.rows():
            wr.writerow([row[0], row[1]] + [repr(v) for v in row[2:6]] + [row[6]])
    summary = {"epsilon": sched.epsilon, "memory": mem.to_dict(), "tail": tails,
               "mean_tau": mean_tau.tolist(), "tau_linear_fit": {"slope": coef[0], "intercept": coef[1], "r2": r2}}
    _dump(out / "schedule.json", summary)
    passed = mem.remote_fraction_ok >= 0.99 and r2 > 0.99 and all(v["holds"] for v in tails.values())
    return ["schedule.csv", "schedule.json"], passed


def _exp_contraction(cfg, out, seed, threads):
    k, dr = _kernel(cfg), _drift(cfg)
    rep = contraction_probe(dr, cfg["sigma"], k, n=cfg["n"], step=cfg["step"], seed=seed)
    x0 = _point(cfg["x0"], dr.d)
    step_rep = stepwise_decay_probe(dr, cfg["sigma"], k, k_max=cfg["k_max"], n=cfg["n"], x0=x0, y0=-x0,
                                    step=cfg["step"], seed=derive_seed(seed, "stepwise"))
    _dump(out / "contraction.json", {"contraction": rep.to_dict(), "stepwise": step_rep.to_dict()})
    return ["contraction.json"], rep.passed and step_rep.fitted_ratio < 1.0


def _exp_coalesce(cfg, out, seed, threads):
    k, dr = _kernel(cfg), _drift(cfg)
    if k.family_tag != "fractional":
        raise ValueError("coalesce needs a fractional kernel")
    d = dr.d
    x = np.zeros(d)

    def run(delta, s):
        y = np.zeros(d)
        y[0] = delta
        return sticking_girsanov(dr, cfg["sigma"], k, x, y, beta=cfg["beta"], n_mc=cfg["n"], seed=s,
                                 step=min(cfg["step"], 1e-3))

    rep, plan = run(cfg["delta"], seed)
    with open(out / "coalesce.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t", "gap"] + [f"phi_{j + 1}" for j in range(d)])
        for i, t in enumerate(plan.grid):
            wr.writerow([repr(float(t)), repr(float(plan.gap[0, i]))] +
                        [repr(float(v)) for v in plan.phi[0, i]])
    body = {"l2_psi": rep.l2_psi, "tv_bound": rep.tv_bound, "ci": list(rep.ci), "e_d": rep.e_d,
            "details": rep.to_dict(), "delta": cfg["delta"], "beta": cfg["beta"],
            "all_stuck": bool(plan.success.all())}
    if "gaps" in cfg:
        gaps = np.asarray(cfg["gaps"], float)
        sweep = [run(g, seed) for g in gaps]
        rows = [{"delta": float(g), "phi_sup": float(p.phi_sup.mean()), "l2_psi": r.l2_psi,
                 "tv_bound": r.tv_bound, "all_stuck": bool(p.success.all())} for g, (r, p) in zip(gaps, sweep)]
        body["sweep"] = rows
        if gaps.size > 1:
            lg = np.log(gaps)
            body["slopes"] = {key: float(np.polyfit(lg, np.log([r[key] for r in rows]), 1)[0])
                              for key in ("phi_sup", "l2_psi", "tv_bound") if all(r[key] > 0 for r in rows)}
    _dump(out / "girsanov.json", body)
    return ["coalesce.csv", "girsanov.json"], bool(plan.success.all())


def _exp_tv(cfg, out, seed, threads):
    k, dr = _kernel(cfg), _drift(cfg)
    ts = cfg.get("t_values", [5.0, 10.0, 20.0])
    reps = [two_stage_tv_estimate(dr, cfg["sigma"], k, t, n=cfg["n"], x0=_point(cfg["x0"], dr.d),
                                  beta=cfg["beta"], seed=seed, step=cfg["step"], T_burn=cfg.get("T_burn"))
            for t in ts]
    _dump(out / "tv.json", {"estimates": [r.to_dict() for r in reps]})
    return ["tv.json"], True


def _exp_laplace(cfg, out, seed, threads):
    k = _kernel(cfg)
    if k.family_tag != "fractional":
        raise ValueError("laplace-check needs a fractional kernel (closed-form conjugate)")
    h = fractional_conjugate(k.params["H"], normalization="laplace")
    err, errs = laplace_conjugate_check(k, h)
    _dump(out / "laplace.json", {"kernel": k.to_dict(), "max_error": err, "errors": errs.tolist(),
                                 "p_grid": np.geomspace(0.1, 10.0, 25).tolist(), "passed": err < 1e-3})
    return ["laplace.json"], err < 1e-3


_RUNNERS = {
    "verify-kernel": _exp_verify_kernel,
    "verify-drift": _exp_verify_drift,
    "decay": _exp_decay,
    "rates": _exp_rates,
    "schedule": _exp_schedule,
    "contraction": _exp_contraction,
    "coalesce": _exp_coalesce,
    "tv": _exp_tv,
    "laplace-check": _exp_laplace,
}


def plan_layout(cfg, threads):
    """Replica batches and seeds without computing anything."""
    n = cfg["n"]
    size = CHUNK * max(1, math.ceil(n / (CHUNK * max(1, threads))))
    batches = [[a, min(n, a + size) - 1] for a in range(0, n, size)]
    return {"experiment": cfg["experiment"], "master_seed": cfg["seed"],
            "experiment_seed": derive_seed(cfg["seed"], cfg["experiment"]), "replicas": n,
            "threads": threads, "batches": batches, "generator_chunks": math.ceil(n / CHUNK),
            "output": cfg["output"], "config_hash": config_hash(cfg)}


def run_experiment(cfg, threads=1, dry_run=False, stream=None):
    """Run one validated config; returns the exit status."""
    stream = sys.stdout if stream is None else stream
    if dry_run:
        stream.write(json.dumps(plan_layout(cfg, threads), indent=2) + "\n")
        return EXIT_OK
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    seed = derive_seed(cfg["seed"], cfg["experiment"])
    names, passed = _RUNNERS[cfg["experiment"]](cfg, out, seed, threads)
    digests = {name: hashlib.sha256((out / name).read_bytes()).hexdigest() for name in names}
    _dump(out / "manifest.json", {"experiment": cfg["experiment"], "config": cfg, "config_hash": config_hash(cfg),
                                  "seed": cfg["seed"], "experiment_seed": seed, "version": __version__,
                                  "artifacts": digests, "passed": bool(passed)})
    stream.write(f"{cfg['experiment']}: {'pass' if passed else 'FAIL'} -> {out}\n")
    return EXIT_OK if passed else EXIT_FAILED_CHECK


def _threads(arg):
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("FRACERGO_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def main(argv=None):
    ap = argparse.ArgumentParser(prog="fracergo", description=__doc__.strip().splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment described by a JSON config")
    run.add_argument("config")
    run.add_argument("--dry-run", action="store_true", help="validate and print the replica/seed layout")
    run.add_argument("--threads", type=int, default=None)
    sub.add_parser("list", help="list the experiments")
    args = ap.parse_args(argv)

    if args.command == "list":
        for name, topic, doc in list_experiments():
            print(f"{name:14s} -> {topic}: {doc}")
        return EXIT_OK

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(json.dumps({"status": "config_error", "path": exc.path, "message": str(exc)}), file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as exc:
        print(json.dumps({"status": "config_error", "path": "$", "message": str(exc)}), file=sys.stderr)
        return EXIT_SCHEMA
    try:
        return run_experiment(cfg, _threads(args.threads), args.dry_run)
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        report = {"status": "error", "experiment": cfg["experiment"], "error_type": type(exc).__name__,
                  "message": str(exc)}
        for attr in ("time", "minimal_past", "where"):
            if hasattr(exc, attr):
                report[attr] = getattr(exc, attr)
        print(json.dumps(report, default=_json_default), file=sys.stderr)
        return EXIT_MODULE


if __name__ == "__main__":
    sys.exit(main())

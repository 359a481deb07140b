"""Command-line front end.

Exit codes: 0 success, 1 domain failure (failed check, infeasible start,
solver error, failed verdict), 2 usage or model-file parse error.
"""

import argparse
import json
import logging
import math
import sys

import numpy as np

from . import __version__
from .constraint import discounted_output_energy
from .errors import DimensionMismatch, Infeasible, SmpcError
from .model import benchmark_model, load_model, precompute, residuals, validate
from .qcqp import build_problem, min_constraint_value
from .sim import DisturbanceSampler, monte_carlo, run

BENCHMARK_X0 = (-1.1130, 1.1156)

# replication presets and their acceptance windows
PRESETS = {
    "A": {"runs": 100, "steps": 500, "init": "random", "avg_cost_range": (0.45, 0.56)},
    "B": {"runs": 1000, "steps": 100, "init": BENCHMARK_X0, "V_hat_range": (0.70, 0.97)},
}


class UsageError(Exception):
    pass


def _parse_x0(text, nx):
    try:
        x0 = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise UsageError(f"--x0 must be a comma-separated list of numbers, got {text!r}") from None
    if x0.size != nx:
        raise UsageError(f"--x0 has {x0.size} entries, model has {nx} states")
    return x0


def _load(args):
    if args.model is None:
        return benchmark_model()
    try:
        return load_model(args.model)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError, DimensionMismatch) as exc:
        raise UsageError(f"cannot read model file {args.model}: {exc}") from None


def _validated(args):
    model = _load(args)
    rep = validate(model)
    if not rep.passed:
        names = ", ".join(c.name for c in rep.failed())
        print(f"model validation failed: {names}", file=sys.stderr)
        return model, None
    return model, rep


def _meta(args, model):
    return {"seed": args.seed, "model_hash": model.digest(), "version": __version__}


def _write(path, text):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def cmd_validate(args):
    model = _load(args)
    rep = validate(model)
    print(rep.format())
    return 0 if rep.passed else 1


def cmd_precompute(args):
    model, rep = _validated(args)
    if rep is None:
        return 1
    pre = precompute(model)
    res = residuals(model, pre)
    out = {
        "P": pre.P.tolist(),
        "P_tilde": pre.P_tilde.tolist(),
        "S_tilde": pre.S_tilde.tolist(),
        "Xhat": pre.Xhat.tolist(),
        "K": model.K.tolist(),
        "K_lq": pre.K_lq.tolist(),
        "P_dare": pre.P_dare.tolist(),
        "trWP": pre.trWP,
        "residuals": res,
        **_meta(args, model),
    }
    if args.out:
        _write(args.out, json.dumps(out, indent=2) + "\n")
    print(f"trWP = {pre.trWP:.6f}")
    print("residuals: " + ", ".join(f"{k}={v:.2e}" for k, v in res.items()))
    return 0


def cmd_run(args):
    model, rep = _validated(args)
    if rep is None:
        return 1
    T = args.steps if args.steps is not None else 100
    if T < 1:
        raise UsageError("--steps must be at least 1")
    x0 = _parse_x0(args.x0, model.nx) if args.x0 else model.x_ref.copy()
    eps0 = model.e if args.eps0 is None else args.eps0
    pre = precompute(model)
    sampler = DisturbanceSampler(model.W, seed=args.seed, stream=0)
    try:
        traj = run(model, pre, x0, eps0, T, sampler)
    except Infeasible as exc:
        hint = min_constraint_value(build_problem(x0, eps0, pre, model))
        print(f"infeasible at k=0: {exc}; smallest feasible eps0 is {hint:.6f}", file=sys.stderr)
        return 1
    text = traj.to_csv()
    summary = sys.stdout if args.out else sys.stderr
    _write(args.out, text)
    print(f"running-average stage cost = {traj.running_average_cost()[-1]:.6f}", file=summary)
    print(f"final eps = {traj.eps[-1]:.6f}", file=summary)
    return 0


def cmd_montecarlo(args):
    model, rep = _validated(args)
    if rep is None:
        return 1
    preset = PRESETS[args.experiment] if args.experiment else {}
    runs = args.runs if args.runs is not None else preset.get("runs", 100)
    T = args.steps if args.steps is not None else preset.get("steps", 100)
    if runs < 1 or T < 1:
        raise UsageError("--runs and --steps must be at least 1")
    if args.x0:
        init = _parse_x0(args.x0, model.nx)
    elif preset:
        init = preset["init"] if isinstance(preset["init"], str) else np.array(preset["init"])
    else:
        init = "random"
    eps0 = model.e if args.eps0 is None else args.eps0
    pre = precompute(model)
    try:
        s = monte_carlo(model, pre, init, eps0, T, runs, args.seed, workers=args.workers)
    except Infeasible as exc:
        print(f"infeasible at k=0: {exc}", file=sys.stderr)
        return 1

    verdicts = {
        "avg_cost <= trWP + 3 se": s.avg_cost <= s.trWP + 3 * _se(s.avg_cost_stderr),
        "V_hat + 3 se <= e": s.V_hat + 3 * _se(s.V_hat_stderr) <= s.e,
    }
    if "avg_cost_range" in preset:
        lo, hi = preset["avg_cost_range"]
        verdicts[f"avg_cost in [{lo}, {hi}]"] = lo <= s.avg_cost <= hi
    if "V_hat_range" in preset:
        lo, hi = preset["V_hat_range"]
        verdicts[f"V_hat in [{lo}, {hi}]"] = lo <= s.V_hat <= hi

    doc = json.loads(s.to_json())
    doc.update(_meta(args, model))
    doc["experiment"] = args.experiment
    doc["verdicts"] = verdicts
    if args.out:
        _write(args.out, json.dumps(doc, indent=2) + "\n")
    print(f"avg stage cost = {s.avg_cost:.4f} +/- {s.avg_cost_stderr:.4f}   (trWP = {s.trWP:.4f})")
    print(f"V_hat          = {s.V_hat:.4f} +/- {s.V_hat_stderr:.4f}   (e = {s.e:g})")
    print(f"runs = {s.runs}, T = {s.T}, seed = {s.seed}, discarded initial draws = {s.discarded}")
    for name, ok in verdicts.items():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    return 0 if all(verdicts.values()) else 1


def _se(v):
    # a single run has no standard error
    return 0.0 if math.isnan(v) else v


def cmd_lq_bound(args):
    model, rep = _validated(args)
    if rep is None:
        return 1
    pre = precompute(model)
    x0 = _parse_x0(args.x0, model.nx) if args.x0 else model.x_ref.copy()
    bound = discounted_output_energy(x0, pre.K_lq, model)
    verdict = "exceeds" if bound > model.e else "within"
    print(f"LQ discounted output-energy bound = {bound:.4f}   e = {model.e:g}   ({verdict} e)")
    if args.out:
        doc = {"lq_bound": bound, "e": model.e, "x0": x0.tolist(), "K_lq": pre.K_lq.tolist()}
        doc.update(_meta(args, model))
        _write(args.out, json.dumps(doc, indent=2) + "\n")
    return 0


COMMANDS = {
    "validate": cmd_validate,
    "precompute": cmd_precompute,
    "run": cmd_run,
    "montecarlo": cmd_montecarlo,
    "lq-bound": cmd_lq_bound,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="smpc", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--model", help="model JSON file (default: built-in two-state benchmark)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, help="closed-loop length T")
    ap.add_argument("--runs", type=int)
    ap.add_argument("--eps0", type=float, help="initial budget (default: e)")
    ap.add_argument("--x0", help="initial state, comma-separated")
    ap.add_argument("--experiment", choices=sorted(PRESETS))
    ap.add_argument("--out", help="output path")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return ap


def _join_x0(argv):
    # "--x0 -1.1,1.2" would otherwise be read as an unknown flag
    out = []
    it = iter(argv)
    for a in it:
        if a == "--x0":
            nxt = next(it, None)
            out.append(a if nxt is None else f"--x0={nxt}")
        else:
            out.append(a)
    return out


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(_join_x0(sys.argv[1:] if argv is None else list(argv)))
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SmpcError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

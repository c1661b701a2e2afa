"""Command-line scenario runner.

Every report carries the structure hash, the seed and the tool version,
plus the defaults, scenario values and flags that produced the effective
configuration (flags override the scenario, which overrides defaults).

Exit codes: 0 pass, 2 audit or certificate failure, 3 convergence failure,
4 input error.
"""

import argparse
import csv
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    AuditFailed,
    CertificateFailed,
    ChartDegenerate,
    DegenerateFrame,
    InputError,
    LeftDomain,
    NotConverged,
    SRError,
)
from .scenarios import load_scenario, region_box, scenario_frame
from .structure import (
    ef_coefficients,
    engel_frame,
    growth_check,
    hc_mask,
    load_structure,
    structure_hash,
)

EXIT_OK, EXIT_AUDIT, EXIT_CONVERGENCE, EXIT_INPUT = 0, 2, 3, 4

DEFAULTS = {
    "inspect": {"seed": 0, "grid": 9},
    "flow": {"seed": 0, "x0": [0.0, 0.0, 0.0, 0.0], "T": 1.0, "steps": 10, "sign": 1, "tol": 1e-8},
    "distance": {"seed": 0, "x": [0.0, 0.0, 0.0, 0.0], "y": [0.5, 0.0, 0.0, 0.0], "steps": 32, "tol": 1e-6,
                 "starts": 8},
    "transport": {"seed": 0, "tol": 1e-8, "steps": 32, "starts": 8, "brute_force": False, "trials": 10},
    "contract": {"seed": 0, "region": None, "T": 1.0, "points": 8, "sign": 1, "samples": 20000,
                 "steps": None, "C": None},
    "verify-all": {"seed": 0},
}

# flag name -> config key, per command
FLAG_KEYS = {
    "inspect": ("seed",),
    "flow": ("seed", "x0", "T", "steps", "sign", "tol"),
    "distance": ("seed", "x", "y", "steps", "tol", "starts"),
    "transport": ("seed", "tol", "steps", "starts", "brute_force", "trials"),
    "contract": ("seed", "region", "T", "points", "sign", "samples", "steps", "C"),
    "verify-all": ("seed",),
}


class Abort(Exception):
    def __init__(self, code: int, message: str, detail=None):
        super().__init__(message)
        self.code = code
        self.detail = detail


def _point(text: str) -> list:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 4 comma-separated numbers, got {text!r}") from None
    if len(vals) != 4:
        raise argparse.ArgumentTypeError(f"expected 4 comma-separated numbers, got {text!r}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="srtransport", description="Sub-Riemannian transport scenario runner.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, structure=True):
        if structure:
            p.add_argument("--structure", help="structure JSON file")
        p.add_argument("--scenario", help="scenario JSON file or shipped name (engel, cubic, contracting)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory for report files")

    p = sub.add_parser("inspect", help="brackets, line field, divergence bound and degenerate-set census")
    common(p)

    p = sub.add_parser("flow", help="singular-field trajectory with its adjoint certificate")
    common(p)
    p.add_argument("--x0", type=_point)
    p.add_argument("--T", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--sign", type=int, choices=(-1, 1))
    p.add_argument("--tol", type=float)

    p = sub.add_parser("distance", help="sub-Riemannian distance bracket between two points")
    common(p)
    p.add_argument("--x", type=_point)
    p.add_argument("--y", type=_point)
    p.add_argument("--steps", type=int, help="control intervals")
    p.add_argument("--starts", type=int)
    p.add_argument("--tol", type=float, help="endpoint tolerance")

    p = sub.add_parser("transport", help="discrete transport with SR-squared cost")
    common(p)
    p.add_argument("--mu", help="source measure JSON")
    p.add_argument("--nu", help="target measure JSON")
    p.add_argument("--tol", type=float, help="duality gap tolerance")
    p.add_argument("--steps", type=int, help="control intervals per distance solve")
    p.add_argument("--starts", type=int)
    p.add_argument("--trials", type=int, help="probe trials per rank verdict")
    p.add_argument("--brute-force", dest="brute_force", action="store_const", const=True,
                   help="check the plan against all permutations (uniform n x n, n <= 8)")
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("contract", help="volume evolution of a box under the singular flow")
    common(p)
    p.add_argument("--region", help="box as c1,c2,c3,c4:h1,h2,h3,h4")
    p.add_argument("--T", type=float)
    p.add_argument("--points", type=int)
    p.add_argument("--sign", type=int, choices=(-1, 1))
    p.add_argument("--samples", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--C", type=float, help="override the divergence constant")

    p = sub.add_parser("verify-all", help="run the acceptance suite")
    common(p, structure=False)
    p.add_argument("--only", type=lambda s: [int(v) for v in s.split(",")], help="comma-separated criteria")
    return ap


def resolve_config(command: str, args, scenario: dict | None) -> dict:
    """Three-layer configuration and the effective merge."""
    defaults = dict(DEFAULTS[command])
    scen = {}
    if scenario:
        if "seed" in scenario:
            scen["seed"] = scenario["seed"]
        block = scenario.get(command, {})
        scen.update({k: v for k, v in block.items() if k in defaults})
    flags = {}
    for key in FLAG_KEYS[command]:
        val = getattr(args, key, None)
        if val is not None:
            flags[key] = val
    effective = {**defaults, **scen, **flags}
    return {"defaults": defaults, "scenario": scen, "flags": flags, "effective": effective}


def _frame(args, scenario, required: bool = True):
    if args.structure:
        try:
            return load_structure(args.structure)
        except OSError as exc:
            raise InputError(f"cannot read structure {args.structure}: {exc.strerror}") from None
    fr = scenario_frame(scenario) if scenario else None
    if fr is None and required:
        raise InputError("no structure given: pass --structure or a scenario with a 'structure' field")
    return fr


def _header(command: str, frame, config: dict) -> dict:
    return {
        "command": command,
        "version": __version__,
        "seed": config["effective"]["seed"],
        "structure_hash": structure_hash(frame) if frame is not None else None,
        "config": config,
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _dump(report: dict) -> str:
    return json.dumps(_jsonable(report), indent=1, sort_keys=True)


def _outdir(args) -> Path | None:
    if not args.out:
        return None
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


# -- commands ------------------------------------------------------------------

def cmd_inspect(args, scenario, out) -> tuple:
    from .singular import divergence_bound_report, line_field

    frame = _frame(args, scenario)
    cfg = resolve_config("inspect", args, scenario)
    rep = _header("inspect", frame, cfg)
    growth = growth_check(frame)
    E, F = ef_coefficients(frame)
    rep.update({
        "A": str(frame.A), "B": str(frame.B),
        "X1": str(frame.X1), "X2": str(frame.X2),
        "X12": str(frame.X12), "X112": str(frame.X112), "X212": str(frame.X212),
        "E": str(E), "F": str(F),
        "growth": {"ok": growth.ok, "certified": growth.certified, "chart_ok": growth.chart_ok,
                   "witness": growth.witness, "min_bracket_norm": growth.min_bracket_norm},
    })
    pts = frame.box.grid(cfg["effective"]["grid"])
    hc = hc_mask(frame, pts)
    rep["hc_census"] = {"grid_points": len(pts), "degenerate_points": int(hc.sum()),
                        "examples": pts[hc][:5].tolist()}
    if not growth.ok or not growth.chart_ok:
        rep["line_field"] = None
        return rep, EXIT_AUDIT
    sf = line_field(frame, check=False)
    bound = divergence_bound_report(sf, seed=cfg["effective"]["seed"])
    rep.update({
        "alpha1": str(sf.alpha1), "alpha2": str(sf.alpha2), "X": str(sf.X), "divX": str(sf.divX),
        "C_bound": bound.C, "c1": bound.c1, "c2": bound.c2, "bound_audit_margin": bound.min_margin,
    })
    return rep, EXIT_OK if bound.ok else EXIT_AUDIT


def cmd_flow(args, scenario, out) -> tuple:
    from .singular import adjoint_certificate, flow, line_field, verify_singularity, write_flow_csv

    frame = _frame(args, scenario)
    cfg = resolve_config("flow", args, scenario)
    e = cfg["effective"]
    sf = line_field(frame)
    path = flow(sf, e["x0"], e["sign"], e["T"], e["steps"], on_exit="truncate")
    adj = adjoint_certificate(frame, path)
    cert = verify_singularity(frame, path, adj, e["tol"], raise_on_fail=False)
    rep = _header("flow", frame, cfg)
    rep.update({
        "end": path.end, "truncated": path.truncated, "exit_time": path.exit_time,
        "residuals": cert.residuals, "worst_node": cert.worst_node, "fd_adjoint_diagnostic": cert.fd_adjoint,
        "certificate_ok": cert.ok,
    })
    if out is not None:
        write_flow_csv(out / "flow.csv", frame, path, adj)
    return rep, EXIT_OK if cert.ok else EXIT_AUDIT


def cmd_distance(args, scenario, out) -> tuple:
    from .geodesic import DistanceOptions, sr_distance

    frame = _frame(args, scenario)
    cfg = resolve_config("distance", args, scenario)
    e = cfg["effective"]
    opts = DistanceOptions(N=e["steps"], starts=e["starts"], endpoint_tol=e["tol"], seed=e["seed"])
    res = sr_distance(frame, e["x"], e["y"], opts)
    rep = _header("distance", frame, cfg)
    rep.update({
        "upper_bound": res.d, "lower_bound": res.lower_bound, "endpoint_error": res.endpoint_error,
        "energy": res.energy, "start_index": res.start_index, "control": res.control.values,
    })
    return rep, EXIT_OK


def _load_measure(path, name):
    from .transport import load_measure

    if not path:
        raise InputError(f"--{name} is required")
    try:
        return load_measure(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None


def _brute_force(mu, nu, C, verbose: bool):
    n = len(mu)
    if len(nu) != n or n > 8 or not (np.allclose(mu.weights, 1 / n) and np.allclose(nu.weights, 1 / n)):
        raise InputError("--brute-force needs uniform measures of equal size n <= 8")
    perms = [(s, float(sum(C[i, s[i]] for i in range(n)) / n)) for s in itertools.permutations(range(n))]
    best = min(perms, key=lambda t: t[1])
    listing = [{"perm": list(s), "cost": c} for s, c in perms] if verbose else None
    return best, listing


def cmd_transport(args, scenario, out) -> tuple:
    from .geodesic import DistanceOptions
    from .transport import (
        MAX_POINTS,
        classify,
        contact_set,
        cost_matrix,
        dual_potentials,
        solve_kantorovich,
        static_fixed_check,
        transport_report,
    )

    frame = _frame(args, scenario)
    cfg = resolve_config("transport", args, scenario)
    e = cfg["effective"]
    mu = _load_measure(args.mu or (scenario or {}).get("transport", {}).get("mu"), "mu")
    nu = _load_measure(args.nu or (scenario or {}).get("transport", {}).get("nu"), "nu")
    if len(mu) > MAX_POINTS or len(nu) > MAX_POINTS:
        raise InputError(f"refusing {len(mu)}x{len(nu)} instance: desk-scale limit is {MAX_POINTS} points per side")
    opts = DistanceOptions(N=e["steps"], starts=e["starts"], seed=e["seed"])
    try:
        C, controls = cost_matrix(frame, mu, nu, opts, return_controls=True)
    except NotConverged as exc:
        raise Abort(EXIT_CONVERGENCE, str(exc), {"failed_pairs": getattr(exc, "pairs", [])}) from None
    plan, cost = solve_kantorovich(mu, nu, C)
    pot = dual_potentials(mu, nu, C, plan)
    gamma = contact_set(pot, C)
    loose = contact_set(pot, C, loose=True)
    cls = classify(frame, mu, nu, gamma, opts, trials=e["trials"], seed=e["seed"], controls=controls)
    static = static_fixed_check(cls, plan, mu, nu)
    rep = _header("transport", frame, cfg)
    rep.update(transport_report(plan, cost, pot, mu, nu, C, gamma, loose, cls))
    rep["cost_matrix"] = C
    rep["static_fixed"] = {"ok": static.ok, "deficits": static.deficits}
    ok = abs(rep["duality_gap"]) <= e["tol"] and rep["support_in_contact"]
    if e["brute_force"]:
        (perm, best), listing = _brute_force(mu, nu, C, getattr(args, "verbose", False))
        got = [int(j) for j in np.argmax(plan.matrix, axis=1)]
        rep["brute_force"] = {"best_perm": list(perm), "best_cost": best, "plan_perm": got,
                              "match": got == list(perm) and abs(best - cost) <= 1e-12, "all": listing}
        ok = ok and rep["brute_force"]["match"]
    if out is not None:
        with open(out / "contact.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["i", "j", "cost", "mass", "tag"])
            for i, j in gamma.pairs:
                tag = "static" if cls.status[i] == "static" and np.array_equal(mu.points[i], nu.points[j]) \
                    else cls.tags.get((i, j), "")
                w.writerow([i, j, f"{C[i, j]:.12g}", f"{plan.matrix[i, j]:.12g}", tag])
        with open(out / "classification.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["i", "x1", "x2", "x3", "x4", "status"])
            for i, s in enumerate(cls.status):
                w.writerow([i, *(f"{v:.12g}" for v in mu.points[i]), s])
    return rep, EXIT_OK if ok else EXIT_AUDIT


def cmd_contract(args, scenario, out) -> tuple:
    from .contraction import (
        SampleCloud,
        contraction_audit,
        volume_evolution,
        volume_summary,
        write_volume_csv,
    )
    from .singular import line_field

    frame = _frame(args, scenario)
    cfg = resolve_config("contract", args, scenario)
    e = cfg["effective"]
    if e["region"] is None:
        raise InputError("no region given: pass --region or a scenario 'contract.region'")
    box = region_box(e["region"])
    sf = line_field(frame)
    A = SampleCloud.uniform(box, int(e["samples"]), np.random.default_rng(e["seed"]))
    rep_v = volume_evolution(sf, A, e["sign"], e["T"], e["points"], seed=e["seed"] + 1, steps=e["steps"],
                             C=e["C"])
    audit_ok = contraction_audit(rep_v, raise_on_fail=False)
    rep = _header("contract", frame, cfg)
    rep.update(volume_summary(rep_v, audit_ok))
    rep["series"] = {"t": rep_v.times, "vol_mc": rep_v.vol_mc, "stderr": rep_v.stderr,
                     "vol_div": rep_v.vol_div, "lower_bound": rep_v.lower_bound}
    if out is not None:
        write_volume_csv(out / "volume.csv", rep_v)
    if not audit_ok:
        raise Abort(EXIT_AUDIT, "contraction audit failed", rep)
    return rep, EXIT_OK


def cmd_verify_all(args, scenario, out) -> tuple:
    from .acceptance import run_all, summary

    results = run_all(only=args.only, echo=lambda s: print(s, file=sys.stderr, flush=True))
    cfg = resolve_config("verify-all", args, scenario)
    rep = _header("verify-all", engel_frame(), cfg)
    rep["structure_hash"] = None
    rep.update(summary(results))
    return rep, EXIT_OK if all(r.passed for r in results) else EXIT_AUDIT


COMMANDS = {
    "inspect": cmd_inspect,
    "flow": cmd_flow,
    "distance": cmd_distance,
    "transport": cmd_transport,
    "contract": cmd_contract,
    "verify-all": cmd_verify_all,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        scenario = load_scenario(args.scenario) if args.scenario else None
        out = _outdir(args)
        rep, code = COMMANDS[args.command](args, scenario, out)
    except Abort as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.detail is not None:
            print(_dump(exc.detail))
        return exc.code
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NotConverged as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (AuditFailed, CertificateFailed, LeftDomain) as exc:
        print(f"audit failure: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except (DegenerateFrame, ChartDegenerate) as exc:
        print(f"degenerate structure: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    text = _dump(rep)
    print(text)
    if out is not None:
        (out / f"{args.command}.json").write_text(text + "\n", encoding="utf-8")
    return code


if __name__ == "__main__":
    sys.exit(main())

"""Batch command line front end.

Every subcommand reads one YAML or JSON config, prints a JSON summary on
standard output and, with ``--out``, writes CSV artifacts.  Logs go to
standard error only.  Errors exit nonzero and print a JSON object with the
error category on standard error.

Config keys (all optional unless a subcommand needs them)::

    seed: 0                      # used for random plants, echoed in every output
    plant: {A: [[..]], B: [[..]], Bw: .., Q: .., R: ..}
    plant: {random: {n: 4, m: 4, spread: 1.0, shift: 0.0}}
    plants: [<plant>, ...]       # allocate with synthesized curves
    gain: lqr | [[..]] | path/to/K.csv
    tau: 0.1
    tau_max: 2.0                 # intervals
    N: 16                        # discretization order, auto when absent
    network: {c: 956, tau_p: 0.00983, kappa: 0.01}
    sparsify: {count: 20, lo: 1e-4, hi: 10, r_max: 5, delay_mode: adaptive}
    allocate: {frak_s: 89 | links: 111, sigma: 0.01, s0: [20, 69],
               max_steps: 50, oracle: false,
               curves: path.yaml | [{breakpoints: [..], ratios: [..], size: 100}]}

Ratios given as strings such as ``"21/20"`` are read as exact fractions.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import yaml

from . import allocate as alloc
from .errors import ConfigError, DelaySparseError
from .model import LtiPlant, NetworkModel, cardinality, link_delay, random_plant

log = logging.getLogger("delaysparse")

CSV_VERSION = 1
SUBCOMMANDS = ("h2norm", "margin", "intervals", "precondition", "sparsify", "allocate", "check")


# -- config ------------------------------------------------------------------

def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        cfg = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    cfg.setdefault("seed", 0)
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    cfg["_dir"] = path.parent
    return cfg


def _matrix(value, name: str) -> np.ndarray:
    try:
        M = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} is not numeric") from None
    if M.ndim == 0:
        M = M.reshape(1, 1)
    elif M.ndim == 1:
        M = M.reshape(-1, 1) if name in ("B", "Bw") else M.reshape(1, -1)
    if M.ndim != 2:
        raise ConfigError(f"{name} must be a matrix")
    return M


def _plant(spec, rng) -> LtiPlant:
    if not isinstance(spec, dict):
        raise ConfigError("plant must be a mapping")
    if "random" in spec:
        opts = dict(spec["random"] or {})
        if "n" not in opts:
            raise ConfigError("random plant needs n")
        try:
            return random_plant(rng=rng, **opts)
        except TypeError as exc:
            raise ConfigError(f"bad random plant options: {exc}") from None
    if "A" not in spec or "B" not in spec:
        raise ConfigError("plant needs A and B")
    A = _matrix(spec["A"], "A")
    B = _matrix(spec["B"], "B")
    n, m = A.shape[0], B.shape[1]
    return LtiPlant(A=A, B=B,
                    Bw=_matrix(spec.get("Bw", np.eye(n)), "Bw"),
                    Q=_matrix(spec.get("Q", np.eye(n)), "Q"),
                    R=_matrix(spec.get("R", np.eye(m)), "R"))


def _plants(cfg) -> list:
    rng = np.random.default_rng(cfg["seed"])
    if "plants" in cfg:
        return [_plant(p, rng) for p in cfg["plants"]]
    if "plant" in cfg:
        return [_plant(cfg["plant"], rng)]
    raise ConfigError("config has no plant")


def _lqr(plant: LtiPlant) -> np.ndarray:
    from scipy.linalg import solve_continuous_are

    X = solve_continuous_are(plant.A, plant.B, plant.Q, plant.R)
    return np.linalg.solve(plant.R, plant.B.T @ X)


def _gain(cfg, plant: LtiPlant) -> np.ndarray:
    g = cfg.get("gain", "lqr")
    if isinstance(g, str) and g == "lqr":
        return _lqr(plant)
    if isinstance(g, str):
        path = Path(g) if Path(g).is_absolute() else cfg["_dir"] / g
        if not path.is_file():
            raise ConfigError(f"gain file not found: {path}")
        return plant.check_gain(read_matrix(path))
    return plant.check_gain(_matrix(g, "gain"))


def _network(cfg) -> NetworkModel:
    spec = cfg.get("network")
    if not isinstance(spec, dict) or "c" not in spec:
        raise ConfigError("network needs at least c")
    try:
        return NetworkModel(**{k: float(v) for k, v in spec.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad network: {exc}") from None


def _require(cfg, key: str):
    if key not in cfg:
        raise ConfigError(f"config needs {key}")
    return cfg[key]


def _ratio(v):
    if isinstance(v, str):
        try:
            return Fraction(v)
        except ValueError:
            raise ConfigError(f"bad ratio {v!r}") from None
    if isinstance(v, int):
        return Fraction(v)
    return float(v)


def _curves(cfg, spec) -> list:
    if isinstance(spec, str):
        path = Path(spec) if Path(spec).is_absolute() else cfg["_dir"] / spec
        if not path.is_file():
            raise ConfigError(f"curve file not found: {path}")
        spec = yaml.safe_load(path.read_text())
        if isinstance(spec, dict):
            spec = spec.get("curves")
    if not isinstance(spec, list) or not spec:
        raise ConfigError("curves must be a nonempty list")
    out = []
    for i, c in enumerate(spec, start=1):
        try:
            out.append(alloc.PerfCurve(user=int(c.get("user", i)),
                                       breakpoints=tuple(c["breakpoints"]),
                                       ratios=tuple(_ratio(r) for r in c["ratios"]),
                                       size=c.get("size")))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad curve {i}: {exc}") from None
    return out


# -- output ------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, Fraction):
        return str(v)
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, Fraction):
        return str(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if np.isfinite(f) else str(f)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _header(schema: str, seed: int) -> str:
    return f"# delaysparse {schema} v{CSV_VERSION} seed={seed}"


def write_matrix(path, M, seed: int, schema: str = "matrix") -> None:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    with open(path, "w", newline="") as f:
        f.write(_header(schema, seed) + "\n")
        for row in M:
            f.write(",".join("%.17g" % x for x in row) + "\n")


def read_matrix(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            rows.append([float(x) for x in line.split(",")])
    if not rows:
        raise ConfigError(f"empty matrix file {path}")
    return np.array(rows)


def write_table(path, schema: str, seed: int, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        f.write(_header(schema, seed) + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


# -- subcommands ---------------------------------------------------------------

def cmd_h2norm(cfg, out):
    from .spectral import evaluate, select_order

    plant = _plants(cfg)[0]
    K = _gain(cfg, plant)
    tau = float(_require(cfg, "tau"))
    N = cfg.get("N") or select_order(plant, K, tau)
    J = evaluate(plant, K, tau, int(N)).J
    return {"J": J, "N": int(N), "tau": tau}


def cmd_margin(cfg, out):
    from .stability import delay_margin, pade_margin

    plant = _plants(cfg)[0]
    K = _gain(cfg, plant)
    res = {"margin": delay_margin(plant, K)}
    if cfg.get("pade_order"):
        res["pade_margin"] = pade_margin(plant, K, order=int(cfg["pade_order"]))
    return res


def cmd_intervals(cfg, out):
    from .stability import stable_intervals

    plant = _plants(cfg)[0]
    K = _gain(cfg, plant)
    ivs = stable_intervals(plant, K, float(_require(cfg, "tau_max")))
    if out is not None:
        write_table(out / "intervals.csv", "intervals", cfg["seed"], ["lo", "hi"], ivs.intervals)
    return {"intervals": [list(iv) for iv in ivs.intervals], "boundaries": list(ivs.boundaries)}


def cmd_precondition(cfg, out):
    from .precondition import precondition

    plant = _plants(cfg)[0]
    net = _network(cfg)
    res = precondition(plant, net, _gain(cfg, plant), **cfg.get("precondition", {}))
    if out is not None:
        write_matrix(out / "K.csv", res.K_prime, cfg["seed"], "gain")
        write_table(out / "precondition_trace.csv", "precondition_trace", cfg["seed"],
                    ["k", "tau", "card", "accepted"],
                    [(r.k, r.tau, r.card, r.accepted) for r in res.trace])
    return {"tau_prime": res.tau_prime, "c_final": res.c_final, "card": cardinality(res.K_prime),
            "fast_path": res.fast_path, "snap": res.snap, "K_prime": res.K_prime,
            "iterations": len(res.trace)}


def _sparsify_options(cfg):
    opts = dict(cfg.get("sparsify", {}))
    sched = {k: opts.pop(k) for k in ("count", "lo", "hi") if k in opts}
    return sched, opts


def cmd_sparsify(cfg, out):
    from .sparsify import lambda_schedule, sparsify_run
    from .spectral import evaluate, select_order

    plant = _plants(cfg)[0]
    net = _network(cfg)
    K = _gain(cfg, plant)
    tau = float(cfg.get("tau", link_delay(cardinality(K), net)))
    sched, opts = _sparsify_options(cfg)
    N = opts.get("N") or select_order(plant, K, tau)
    lam = lambda_schedule(evaluate(plant, K, tau, N).J, K.size, **sched)
    opts["N"] = N
    tr = sparsify_run(plant, net, K, tau, lam, **opts)
    if out is not None:
        write_matrix(out / "K.csv", tr.K_f, cfg["seed"], "gain")
        write_table(out / "sparsify_trace.csv", "sparsify_trace", cfg["seed"],
                    ["i", "lambda", "tau", "card", "s", "J", "J_unpolished", "stable",
                     "case", "tau_star"],
                    [(r.i, r.lambda_reg, r.tau, r.card, r.s, r.J, r.J_unpolished, r.stable,
                      r.snap_case, r.tau_star) for r in tr.records])
    b = tr.bound
    return {"tau_f": tr.tau_f, "tau_star_f": tr.tau_star_f, "c_f": tr.c_f, "N": tr.N,
            "card_f": cardinality(tr.K_f), "delay_mode": tr.delay_mode,
            "rounds": len(tr.records),
            "levels": {s: r.J for s, r in tr.best_per_level().items()},
            "bound": {"gap": b.gap, "bound": b.bound, "eps": b.eps, "holds": b.holds,
                      "sign_anomaly": b.sign_anomaly}}


def cmd_allocate(cfg, out):
    spec = dict(_require(cfg, "allocate"))
    if ("frak_s" in spec) == ("links" in spec):
        raise ConfigError("allocate needs exactly one of frak_s and links")
    if "curves" in spec:
        curves = _curves(cfg, spec["curves"])
    else:
        net = _network(cfg)
        sched, opts = _sparsify_options(cfg)
        curves = []
        for u, plant in enumerate(_plants(cfg), start=1):
            lam = None
            if sched:
                from .sparsify import lambda_schedule
                from .spectral import h2_norm

                K = _lqr(plant)
                lam = lambda_schedule(h2_norm(plant, K, link_delay(cardinality(K), net)),
                                      K.size, **sched)
            curves.append(alloc.build_curve(plant, net, lam, user=u, **opts))
    if "links" in spec:
        if any(c.size is None for c in curves):
            raise ConfigError("links needs a size for every curve")
        frak_s = sum(c.size for c in curves) - int(spec["links"])
    else:
        frak_s = int(spec["frak_s"])
    sigma = spec.get("sigma", alloc.DEFAULT_SIGMA)
    res = alloc.allocate(curves, frak_s, s0=spec.get("s0"), sigma=sigma,
                         max_steps=int(spec.get("max_steps", 50)))
    oracle = alloc.enumerate_oracle(curves, frak_s, sigma) if spec.get("oracle") else None
    if out is not None:
        write_table(out / "curves.csv", "curves", cfg["seed"], ["user", "s", "ratio"],
                    [(c.user, b, r) for c in curves for b, r in zip(c.breakpoints, c.ratios)])
        write_table(out / "allocate_history.csv", "allocate_history", cfg["seed"],
                    ["j", "s", "F", "F_hat", "gap", "gap_closed_form"],
                    [(h.j, " ".join(map(str, h.s)), h.F, h.F_hat, h.gap, h.gap_closed_form)
                     for h in res.history])
        if oracle is not None:
            write_table(out / "oracle.csv", "oracle", cfg["seed"], ["rank", "s", "F", "dF"],
                        [(k, " ".join(map(str, s)), F, F - oracle[0][1])
                         for k, (s, F) in enumerate(oracle, start=1)])
    result = {"frak_s": frak_s, "s0": list(res.s0), "F0": res.F0, "s_star": list(res.s_star),
              "F_star": res.F_star, "ratios": list(res.ratios), "steps": res.steps,
              "total_gap": res.total_gap}
    if oracle is not None:
        result["oracle_rank"] = [s for s, _ in oracle].index(res.s_star) + 1
    return result


def cmd_check(cfg, out):
    from .stability import is_stable

    plant = _plants(cfg)[0]
    K = _gain(cfg, plant)
    tau = float(_require(cfg, "tau"))
    ok = is_stable(plant, K, tau)
    return {"stable": bool(ok), "tau": tau, "card": cardinality(K)}


COMMANDS = {
    "h2norm": cmd_h2norm,
    "margin": cmd_margin,
    "intervals": cmd_intervals,
    "precondition": cmd_precondition,
    "sparsify": cmd_sparsify,
    "allocate": cmd_allocate,
    "check": cmd_check,
}


def run(subcommand: str, cfg: dict, out: Path | None = None) -> dict:
    """Run one subcommand on a loaded config and return its summary."""
    if subcommand not in COMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    res = COMMANDS[subcommand](cfg, out)
    return {"command": subcommand, "seed": cfg["seed"], **_jsonable(res)}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="delaysparse",
                                 description="Sparse delayed state feedback and link allocation")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("config", help="YAML or JSON config file")
    ap.add_argument("--out", type=Path, default=None, help="directory for CSV artifacts")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        summary = run(args.subcommand, cfg, args.out)
    except DelaySparseError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # argument checks inside the modules (bad s0, bad schedule, ...)
        print(json.dumps({"error": "InvalidInput", "message": str(exc)}), file=sys.stderr)
        return 2
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out is not None:
        (args.out / "summary.json").write_text(text + "\n")
    print(text)
    return 0

"""Command-line front end.

Every command resolves its parameters as defaults < ``--config FILE`` <
flags and embeds the resolved configuration in its output, so feeding an
output file back through ``--config`` reproduces it byte for byte.

Exit codes: 0 success or pass, 1 verification failure, 2 configuration
error.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from typing import Optional

from . import blocks, estimators, oracle
from .env import ConfigError, Homogeneous, parse_env, spec_from_dict, spec_to_dict
from .walk import (CookiesEaten, FirstOf, HitLevel, RecordFlags, SecondPassage, TimeHorizon,
                   VisitCount, new_walk, run_until)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

_RESERVED = {"config", "table", "header", "result", "runs"}


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def _write(text: str, out: Optional[str]) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _load_config(path: Optional[str], command: str) -> dict:
    """Parameters stored in ``path``.

    Top-level keys are read first; an embedded ``"config"`` section written
    by the same command takes precedence.
    """
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config", "config file must hold a JSON object")
    cfg = {k: v for k, v in data.items() if k not in _RESERVED}
    emb = data.get("config")
    if isinstance(emb, dict) and emb.get("command") == command:
        cfg.update(emb)
    return cfg


def _resolve(args: argparse.Namespace, command: str, defaults: dict) -> dict:
    cfg = dict(defaults)
    cfg.update({k: v for k, v in _load_config(args.config, command).items() if k in defaults})
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    cfg["command"] = command
    return cfg


def _env_of(value):
    """Environment from a flag string or an embedded dict."""
    if isinstance(value, dict):
        return spec_from_dict(value)
    if value is None:
        raise ConfigError("env", "an environment is required")
    return parse_env(str(value))


# --------------------------------------------------------------------------
# simulate


def _parse_stop(items) -> object:
    conds = []
    for item in items:
        kind, _, arg = str(item).partition(":")
        try:
            nums = [int(a) for a in arg.split(",")] if arg else []
        except ValueError as exc:
            raise ConfigError("stop", f"bad stop argument {item!r}") from exc
        if kind == "level" and len(nums) == 1:
            conds.append(HitLevel(nums[0]))
        elif kind == "horizon" and len(nums) == 1:
            conds.append(TimeHorizon(nums[0]))
        elif kind == "visits" and len(nums) == 2:
            conds.append(VisitCount(nums[0], nums[1]))
        elif kind == "cookies" and len(nums) == 1:
            conds.append(CookiesEaten(nums[0]))
        elif kind == "passage" and len(nums) == 2:
            conds.append(SecondPassage(nums[0], nums[1]))
        else:
            raise ConfigError("stop", f"unknown stop condition {item!r}")
    return conds[0] if len(conds) == 1 else FirstOf(tuple(conds))


def cmd_simulate(args) -> int:
    cfg = _resolve(args, "simulate", {"env": None, "steps": 100000, "seed": 0, "stop": [],
                                      "start": 0, "visits": False, "leftover": False,
                                      "excursions": False, "path": False})
    env = _env_of(cfg["env"])
    cfg["env"] = spec_to_dict(env)
    steps = int(cfg["steps"])
    if steps < 0:
        raise ConfigError("steps", "must be non-negative")
    stop_items = list(cfg["stop"]) + [f"horizon:{steps}"]
    stop = _parse_stop(stop_items)
    rec_flags = RecordFlags(hit_times=True, visits=bool(cfg["visits"]),
                            leftover=bool(cfg["leftover"]), excursions=bool(cfg["excursions"]),
                            path=bool(cfg["path"]))
    state = new_walk(env, int(cfg["seed"]), int(cfg["start"]))
    rec = run_until(state, stop, rec_flags, budget=steps)
    rec.header = {**cfg["env"], "seed": int(cfg["seed"]), "steps": steps}
    out = rec.summary()
    out["config"] = cfg
    out["position_samples"] = [[n, x, d] for n, x, d in rec.position_samples]
    if rec.path is not None:
        out["path"] = rec.path.tolist()
    _write(_dump(out), args.out)
    if args.csv:
        _write(f"# config: {json.dumps(cfg, sort_keys=True)}\n" + rec.samples_csv(), args.csv)
    return EXIT_OK


# --------------------------------------------------------------------------
# sweep

SWEEP_COLUMNS = ["M", "p", "delta", "horizon", "speed", "speed_se", "escape", "escape_se",
                 "leftover", "leftover_se", "tail_alpha", "tail_alpha_se", "censored_frac"]


def _parse_range(text: str, cast) -> list:
    text = text.strip()
    if ".." in text:
        a, b = text.split("..")
        return list(range(int(a), int(b) + 1))
    return [cast(t) for t in text.split(",") if t.strip()]


def _grid_points(grid, points) -> list[tuple[int, float]]:
    out = []
    if points:
        for item in str(points).split(";"):
            if item.strip():
                m, p = item.split(",")
                out.append((int(m), float(p)))
    if grid:
        ms, ps = [], []
        for tok in grid:
            key, _, val = str(tok).partition("=")
            if key == "M":
                ms = _parse_range(val, int)
            elif key == "p":
                ps = _parse_range(val, float)
            else:
                raise ConfigError("grid", f"unknown grid axis {key!r}")
        out.extend((m, p) for m in ms for p in ps)
    return out


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def cmd_sweep(args) -> int:
    cfg = _resolve(args, "sweep", {"grid": None, "points": None, "replicas": 100,
                                   "horizons": "10000", "seed": 0, "escape_budget": 10**6,
                                   "workers": 1})
    try:
        pts = _grid_points(cfg["grid"], cfg["points"])
    except ValueError as exc:
        raise ConfigError("grid", str(exc)) from exc
    if not pts:
        raise ConfigError("grid", "empty parameter grid")
    horizons = sorted(int(h) for h in str(cfg["horizons"]).split(","))
    for M, p in pts:
        Homogeneous(M, p)  # validates
    lines = [f"# config: {json.dumps(cfg, sort_keys=True)}", ",".join(SWEEP_COLUMNS)]
    for M, p in pts:
        for pp in estimators.phase_point(M, p, horizons, int(cfg["replicas"]), int(cfg["seed"]),
                                         escape_budget=int(cfg["escape_budget"]),
                                         workers=int(cfg["workers"])):
            cen = max(pp.speed_hat.censored_fraction, pp.escape_prob.censored_fraction)
            lines.append(",".join([
                str(M), repr(p), repr(pp.delta), str(pp.horizon),
                _fmt(pp.speed_hat.value), _fmt(pp.speed_hat.stderr),
                _fmt(pp.escape_prob.value), _fmt(pp.escape_prob.stderr),
                _fmt(pp.leftover_density and pp.leftover_density.value),
                _fmt(pp.leftover_density and pp.leftover_density.stderr),
                _fmt(pp.tail_alpha and pp.tail_alpha.value),
                _fmt(pp.tail_alpha and pp.tail_alpha.stderr),
                _fmt(cen)]))
    _write("\n".join(lines) + "\n", args.out)
    return EXIT_OK


# --------------------------------------------------------------------------
# verify

_LEMMA_PARAMS = {
    "1": ("N", "alpha", "M", "p", "placement"),
    "3": ("N", "c", "gamma", "p", "placement"),
    "4": ("N", "gamma", "p", "placement"),
    "5": ("k", "N", "eps", "b", "M", "p"),
    "cor1": ("N", "M1", "p", "eps", "placement"),
    "comp0": ("L", "kappa", "eps"),
    "comp2": ("L", "kappa", "eps", "v"),
}


def cmd_verify(args) -> int:
    names = sorted({n for v in _LEMMA_PARAMS.values() for n in v})
    cfg = _resolve(args, "verify", {"lemma": None, "replicas": 10000, "seed": 0,
                                    "budget": 10**6, "workers": 1, **{n: None for n in names}})
    lemma = cfg["lemma"]
    if lemma not in _LEMMA_PARAMS:
        raise ConfigError("lemma", f"unknown lemma id {lemma!r}")
    params = {n: cfg[n] for n in _LEMMA_PARAMS[lemma] if cfg[n] is not None}
    cfg = {k: v for k, v in cfg.items() if k not in names or v is not None}
    if lemma in ("comp0", "comp2"):
        for n in ("L", "kappa", "eps"):
            if n not in params:
                raise ConfigError(n, "required")
        v = params.get("v", 1.0)
        bc = blocks.BlockConfig(float(params["eps"]), float(params["kappa"]), float(params["L"]),
                                float(v))
        if lemma == "comp0":
            K = bc.geometry().K
            pa1 = {x: oracle.birth_death_hit(oracle.BirthDeathSpec.biased_region(
                bc.eps, bc.kappa, bc.L, x)) for x in range(-K, K + 1)}
            a1min = min(pa1.values())
            report = {"lemma": lemma, "params": params,
                      "P_A1": {str(k): p for k, p in sorted(pa1.items())},
                      "P_A1_min": a1min, "empirical": a1min, "stderr": 0.0,
                      "bound": 0.5, "c0": (a1min - 0.5) / bc.kappa, "pass": a1min > 0.5}
        else:
            ep = blocks.event_probabilities(bc, int(cfg["replicas"]), int(cfg["seed"]))
            thr = math.exp(-1 / bc.kappa)
            report = {"lemma": lemma, "params": params,
                      "P_A2": {str(k): e.to_dict() for k, e in sorted(ep.P_A2.items())},
                      "empirical": max(e.value for e in ep.P_A2.values()),
                      "stderr": max(e.stderr for e in ep.P_A2.values()),
                      "upper": ep.P_A2_upper, "bound": thr, "pass": ep.P_A2_upper < thr}
    else:
        rep = estimators.verify_lemma_bound(lemma, params, int(cfg["replicas"]), int(cfg["seed"]),
                                            int(cfg["workers"]), int(cfg["budget"]))
        report = rep.to_dict()
    report["config"] = cfg
    _write(_dump(report), args.out)
    return EXIT_OK if report["pass"] else EXIT_FAIL


# --------------------------------------------------------------------------
# oracle


def cmd_oracle(args) -> int:
    cfg = _resolve(args, "oracle", {"window": None, "start": None, "env": None,
                                    "query": "hit-right", "cap": oracle.DEFAULT_STATE_CAP})
    if cfg["window"] is None or cfg["start"] is None:
        raise ConfigError("window", "--window A B and --start S are required")
    a, b = (int(v) for v in cfg["window"])
    cfg["window"] = [a, b]
    env = _env_of(cfg["env"])
    cfg["env"] = spec_to_dict(env)
    q = str(cfg["query"])
    start, cap = int(cfg["start"]), int(cfg["cap"])
    if q == "leftover":
        values, res = oracle.expected_leftover(oracle.OracleProblem(a, b, env, start, cap=cap))
        out = {"value": {str(k): v for k, v in values.items()}, "residual": res}
    else:
        if q == "hit-right":
            query = oracle.HitRightProb()
        elif q == "time":
            query = oracle.MeanAbsorptionTime()
        elif q.startswith("visits:"):
            try:
                query = oracle.ExpectedVisits(int(q.split(":", 1)[1]))
            except ValueError as exc:
                raise ConfigError("query", f"bad site in {q!r}") from exc
        else:
            raise ConfigError("query", f"unknown query {q!r}")
        out = oracle.solve(oracle.OracleProblem(a, b, env, start, query, cap=cap)).to_dict()
    out["config"] = cfg
    _write(_dump(out), args.out)
    return EXIT_OK


# --------------------------------------------------------------------------
# blocks


def cmd_blocks_calibrate(args) -> int:
    cfg = _resolve(args, "blocks calibrate", {"search": "default", "replicas": 2000, "seed": 0})
    search = None
    if cfg["search"] != "default":
        try:
            search = json.loads(cfg["search"]) if isinstance(cfg["search"], str) else cfg["search"]
        except json.JSONDecodeError as exc:
            raise ConfigError("search", f"not JSON: {exc}") from exc
    res = blocks.calibrate(search, int(cfg["replicas"]), int(cfg["seed"]))
    sel = res["selected"]
    out = dict(sel) if sel else {"selected": None}
    out["table"] = res["table"]
    out["config"] = cfg
    _write(_dump(out), args.out)
    return EXIT_OK if sel else EXIT_FAIL


def cmd_blocks_couple(args) -> int:
    cfg = _resolve(args, "blocks couple", {"L": None, "kappa": None, "eps": None, "v": None,
                                           "M0": None, "c1": None, "horizon": 100000, "seed": 0})
    for n in ("L", "kappa", "eps", "v", "M0", "c1"):
        if cfg[n] is None:
            raise ConfigError(n, "required (pass flags or a calibration file via --config)")
    bc = blocks.BlockConfig(float(cfg["eps"]), float(cfg["kappa"]), float(cfg["L"]),
                            float(cfg["v"]), int(cfg["M0"]), float(cfg["c1"]))
    run = blocks.coupled_run(bc, int(cfg["horizon"]), int(cfg["seed"]))
    summary = run.summary()
    csv_text = (f"# config: {json.dumps(cfg, sort_keys=True)}\n"
                f"# summary: {json.dumps(summary, sort_keys=True)}\n" + run.fine.to_csv())
    _write(csv_text, args.out)
    if args.out not in (None, "-"):
        sys.stdout.write(_dump({"domination_ok": run.domination_ok, **summary}))
    return EXIT_OK if run.domination_ok and run.bookkeeping_ok else EXIT_FAIL


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cookiewalk", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, workers=True):
        p.add_argument("--config", help="JSON file with parameters (flags override)")
        p.add_argument("--out", help="output path (default stdout)")
        if workers:
            p.add_argument("--workers", type=int)
        return p

    p = common(sub.add_parser("simulate", help="run one walk"), workers=False)
    p.add_argument("--env", help="JSON or homogeneous:M,p | onesided:M,p[,b] | explicit:...")
    p.add_argument("--steps", type=int, help="step budget (also a time horizon)")
    p.add_argument("--seed", type=int)
    p.add_argument("--start", type=int)
    p.add_argument("--stop", action="append",
                   help="level:R | horizon:N | visits:X,K | cookies:K | passage:R,S (repeatable)")
    p.add_argument("--csv", help="also write position samples as CSV")
    for flag in ("visits", "leftover", "excursions", "path"):
        p.add_argument(f"--{flag}", action="store_true", default=None)
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("sweep", help="phase-diagram sweep"))
    p.add_argument("--grid", nargs="+", help="M=a..b p=p1,p2,...")
    p.add_argument("--points", help="M,p;M,p;...")
    p.add_argument("--replicas", type=int)
    p.add_argument("--horizons", help="comma-separated horizons")
    p.add_argument("--seed", type=int)
    p.add_argument("--escape-budget", dest="escape_budget", type=int)
    p.set_defaults(func=cmd_sweep)

    p = common(sub.add_parser("verify", help="check a lemma bound"))
    p.add_argument("--lemma")
    p.add_argument("--replicas", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--budget", type=int)
    for n, t in (("N", int), ("alpha", float), ("M", int), ("p", float), ("c", float),
                 ("gamma", float), ("k", int), ("eps", float), ("b", float), ("M1", int),
                 ("L", float), ("kappa", float), ("v", float), ("placement", str)):
        p.add_argument(f"--{n}", type=t)
    p.set_defaults(func=cmd_verify)

    p = common(sub.add_parser("oracle", help="exact hitting computations"), workers=False)
    p.add_argument("--window", nargs=2, type=int, metavar=("A", "B"))
    p.add_argument("--start", type=int)
    p.add_argument("--env")
    p.add_argument("--query", help="hit-right | visits:X | leftover | time")
    p.add_argument("--cap", type=int)
    p.set_defaults(func=cmd_oracle)

    pb = sub.add_parser("blocks", help="block renormalization")
    bsub = pb.add_subparsers(dest="blocks_command", required=True)
    p = common(bsub.add_parser("calibrate", help="search block parameters"), workers=False)
    p.add_argument("--search", help="'default' or a JSON search box")
    p.add_argument("--replicas", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_blocks_calibrate)
    p = common(bsub.add_parser("couple", help="coupled block run"), workers=False)
    for n, t in (("L", float), ("kappa", float), ("eps", float), ("v", float), ("M0", int),
                 ("c1", float), ("horizon", int), ("seed", int)):
        p.add_argument(f"--{n}", type=t)
    p.set_defaults(func=cmd_blocks_couple)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        sys.stderr.write(f"configuration error: {exc}\n")
        return EXIT_CONFIG
    except (oracle.OracleSizeError, ValueError, TypeError, KeyError) as exc:
        sys.stderr.write(f"configuration error: {exc}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: ``flowlab run | describe | certify | list-models | list-checks``.

Exit codes: 0 when every requested check is satisfied, 2 when a check or the
hypothesis certification is falsified, 1 on configuration or execution errors.
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import json
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from . import estimate as E
from .checker import SAMPLERS, SampleRegion, certify, fit_constants
from .model import FlowlabError
from .sim import FlowGrid, simulate_flow, simulate_variational
from .zoo import FIT_REGRESSION, NAMES, model_by_name

EXIT_OK, EXIT_ERROR, EXIT_FALSIFIED = 0, 1, 2

CHECK_DOCS = {
    "lyapunov": "E[V0(X_T)] <= exp(alpha0 (T - s)) V0(x)",
    "exp_moment": "E exp(V0(X_T)/e^{alpha0 T}) <= exp(V0(x)/e^{alpha0 s} + int beta0 e^{-alpha0 r} dr)",
    "poly_moment": "||1 + V0(X_T)||_{L^p} <= e^{alpha0 T}(p + int beta0 e^{-alpha0 r} dr + e^{-alpha0 s} V0(x))",
    "multiple_exp": "joint exponential bound for four flows on shared noise",
    "gronwall": "stochastic Gronwall bound for the difference of two anchors",
    "flow_holder": "strong local Hoelder estimate of the flow in (s, t, x)",
    "derivative_moment": "||dX/dx v||_{L^{pq/(p+q)}} <= |v| exp(int phi + ...)",
}

PRESETS = {
    "smoke": {
        "grid": {"n_paths": 1000, "time_step": 2.0 ** -8, "record_every": 8},
        "region": {"n_points": 256, "sampler": "sobol"},
        "checks": ["lyapunov", "derivative_moment"],
    },
    "default": {
        "grid": {"n_paths": 10000, "time_step": 2.0 ** -10, "record_every": 8},
        "region": {"n_points": 1024, "sampler": "sobol"},
        "checks": list(E.BOUND_IDS),
        "second_anchor": True,
    },
}


class ConfigError(FlowlabError, ValueError):
    def __init__(self, message, field=None, line=None):
        where = ""
        if field:
            where = f" at '{field}'"
        if line is not None:
            where += f" (line {line})"
        super().__init__(f"config error{where}: {message}")
        self.field = field
        self.line = line


# ----------------------------------------------------------------------------
# configuration


def _line_map(text):
    """Map dotted key paths to 1-based source lines of a YAML document."""
    lines = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                lines[path] = k.start_mark.line + 1
                walk(v, path)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                path = f"{prefix}[{i}]"
                lines[path] = v.start_mark.line + 1
                walk(v, path)

    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(str(exc).splitlines()[0], line=mark.line + 1 if mark else None) from None
    if root is not None:
        walk(root, "")
    return lines


def load_config_file(path):
    """Parse a YAML (or JSON) run configuration; a manifest's ``config`` block is accepted."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    lines = _line_map(text)
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", line=1)
    if "config" in data and "versions" in data:
        data = data["config"]
        lines = {k[len("config."):]: v for k, v in lines.items() if k.startswith("config.")}
    return data, lines


def _num(v, field, lines, positive=False, integer=False):
    if isinstance(v, str):
        try:
            v = float(v)
        except ValueError:
            raise ConfigError(f"expected a number, got {v!r}", field, lines.get(field)) from None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"expected a number, got {v!r}", field, lines.get(field))
    if integer:
        if float(v) != int(v):
            raise ConfigError(f"expected an integer, got {v!r}", field, lines.get(field))
        v = int(v)
    else:
        v = float(v)
    if positive and not v > 0:
        raise ConfigError("must be positive", field, lines.get(field))
    return v


def _vec(v, field, lines):
    if isinstance(v, (int, float, str)) and not isinstance(v, bool):
        v = [v]
    if not isinstance(v, list):
        raise ConfigError(f"expected a list of numbers, got {v!r}", field, lines.get(field))
    return [_num(a, f"{field}[{i}]", lines) for i, a in enumerate(v)]


TOP_KEYS = {"model", "model_params", "overrides", "flags", "region", "grid", "checks", "check_options",
            "seed", "threads", "out", "preset"}


def resolve_config(raw: dict, lines=None) -> dict:
    """Validate a raw configuration and fill every default; the result is JSON-serialisable."""
    lines = lines or {}
    unknown = set(raw) - TOP_KEYS
    if unknown:
        k = sorted(unknown)[0]
        raise ConfigError(f"unknown key; valid keys: {', '.join(sorted(TOP_KEYS))}", k, lines.get(k))
    preset = raw.get("preset", "smoke")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(PRESETS)}", "preset",
                          lines.get("preset"))
    base = copy.deepcopy(PRESETS[preset])
    name = raw.get("model")
    if name is None:
        raise ConfigError("a model name is required", "model")
    if name not in NAMES:
        raise ConfigError(f"unknown model {name!r}; available: {', '.join(NAMES)}", "model", lines.get("model"))
    if "seed" not in raw or raw["seed"] is None:
        raise ConfigError("a seed is required (no implicit entropy)", "seed")
    seed = _num(raw["seed"], "seed", lines, integer=True)
    if seed < 0:
        raise ConfigError("must be nonnegative", "seed", lines.get("seed"))
    params = dict(raw.get("model_params") or {})
    try:
        named = model_by_name(name, **params)
    except TypeError as exc:
        raise ConfigError(str(exc), "model_params", lines.get("model_params")) from None

    overrides = {}
    for k, v in (raw.get("overrides") or {}).items():
        field = f"overrides.{k}"
        if k not in named.spec.constants():
            raise ConfigError(f"not an overridable constant; valid: {', '.join(sorted(named.spec.constants()))}",
                              field, lines.get(field))
        overrides[k] = _num(v, field, lines)

    flags = {"horizon_weighting": named.spec.horizon_weighting,
             "alpha_unsubscripted": named.spec.alpha_unsubscripted, "exit_policy": "freeze"}
    for k, v in (raw.get("flags") or {}).items():
        if k not in flags:
            raise ConfigError(f"unknown flag; valid: {', '.join(flags)}", f"flags.{k}", lines.get(f"flags.{k}"))
        flags[k] = str(v)

    reg_raw = raw.get("region") or {}
    region = {"n_points": base["region"]["n_points"], "sampler": base["region"]["sampler"],
              "box_lo": [float(a) for a in named.box_lo], "box_hi": [float(a) for a in named.box_hi],
              "n_directions": 8, "n_times": 4, "enabled": True}
    for k, v in reg_raw.items():
        field = f"region.{k}"
        if k not in region:
            raise ConfigError(f"unknown key; valid: {', '.join(region)}", field, lines.get(field))
        if k in ("box_lo", "box_hi"):
            region[k] = _vec(v, field, lines)
        elif k == "sampler":
            if v not in SAMPLERS:
                raise ConfigError(f"sampler must be one of {SAMPLERS}", field, lines.get(field))
            region[k] = v
        elif k == "enabled":
            region[k] = bool(v)
        else:
            region[k] = _num(v, field, lines, positive=True, integer=True)

    g_raw = raw.get("grid") or {}
    grid = dict(base["grid"])
    anchors = [[0.0, [float(a) for a in named.default_anchor]]]
    if base.get("second_anchor"):
        # half the default anchor (or a small shift off the origin) for two-anchor checks
        x2 = 0.5 * named.default_anchor
        if np.all(x2 == named.default_anchor):
            x2 = x2 + 0.1
        anchors.append([0.0, [float(a) for a in x2]])
    grid.update({"anchors": anchors, "directions": [], "record_times": None, "scheme": named.scheme})
    for k, v in g_raw.items():
        field = f"grid.{k}"
        if k not in grid:
            raise ConfigError(f"unknown key; valid: {', '.join(grid)}", field, lines.get(field))
        if k == "anchors":
            if not isinstance(v, list) or not v:
                raise ConfigError("expected a list of [s, x] pairs", field, lines.get(field))
            out = []
            for i, a in enumerate(v):
                f = f"{field}[{i}]"
                if not isinstance(a, list) or len(a) != 2:
                    raise ConfigError("each anchor is [s, x]", f, lines.get(f))
                out.append([_num(a[0], f + "[0]", lines), _vec(a[1], f + "[1]", lines)])
            grid[k] = out
        elif k == "directions":
            out = []
            for i, a in enumerate(v or []):
                f = f"{field}[{i}]"
                if not isinstance(a, list) or len(a) != 2:
                    raise ConfigError("each direction is [v, [y, ...]]", f, lines.get(f))
                out.append([_vec(a[0], f + "[0]", lines), _vec(a[1], f + "[1]", lines)])
            grid[k] = out
        elif k == "record_times":
            grid[k] = None if v is None else _vec(v, field, lines)
        elif k == "scheme":
            grid[k] = str(v)
        elif k in ("n_paths", "record_every"):
            grid[k] = _num(v, field, lines, positive=True, integer=True)
        else:
            grid[k] = _num(v, field, lines, positive=True)
    if grid["record_times"] is None:
        dt, every = grid["time_step"], grid["record_every"]
        T = named.spec.horizon
        s_max = max(a[0] for a in grid["anchors"])
        k0 = int(math.ceil(s_max / dt - 1e-9))
        kT = int(round(T / dt))
        grid["record_times"] = [k * dt for k in range(k0, kT + 1, every)]
        if grid["record_times"][-1] != kT * dt:
            grid["record_times"].append(kT * dt)

    checks = raw.get("checks", base["checks"])
    if isinstance(checks, str):
        checks = [checks]
    for i, c in enumerate(checks):
        if c not in E.BOUND_IDS:
            raise ConfigError(f"unknown bound_id {c!r}; valid ids: {', '.join(E.BOUND_IDS)}", f"checks[{i}]",
                              lines.get(f"checks[{i}]", lines.get("checks")))
    opts = {"poly_r": None, "gronwall_p": None, "gronwall_r": None, "gronwall_delta": 1.0,
            "gronwall_mode": "pathwise", "gronwall_exp_norm": "q", "bootstrap_seed": None}
    for k, v in (raw.get("check_options") or {}).items():
        field = f"check_options.{k}"
        if k not in opts:
            raise ConfigError(f"unknown option; valid: {', '.join(opts)}", field, lines.get(field))
        if k in ("gronwall_mode", "gronwall_exp_norm") or v is None:
            opts[k] = v
        else:
            opts[k] = _num(v, field, lines)
    threads = _num(raw.get("threads", 1), "threads", lines, positive=True, integer=True)
    return {"model": name, "model_params": params, "overrides": overrides, "flags": flags, "region": region,
            "grid": grid, "checks": list(checks), "check_options": opts, "seed": seed, "threads": threads,
            "preset": preset}


def build_model(cfg):
    named = model_by_name(cfg["model"], **cfg["model_params"])
    spec = named.spec
    changes = dict(cfg["overrides"])
    changes["horizon_weighting"] = cfg["flags"]["horizon_weighting"]
    changes["alpha_unsubscripted"] = cfg["flags"]["alpha_unsubscripted"]
    return named, spec.replace(**changes)


# ----------------------------------------------------------------------------
# execution


def _run_checks(model, cfg, ensemble, log):
    opts = cfg["check_options"]
    seed = cfg["seed"]
    bseed = int(opts["bootstrap_seed"]) if opts["bootstrap_seed"] is not None else seed
    n_base = len(cfg["grid"]["anchors"])
    second = 1 if n_base > 1 else 0
    threads = cfg["threads"]
    reports = []
    T = float(ensemble.record_times[-1])
    for cid in cfg["checks"]:
        log(f"check {cid}")
        if cid == "lyapunov":
            reports.append(E.check_lyapunov_bound(model, ensemble, 0))
        elif cid == "exp_moment":
            reports.append(E.check_exp_moment_bound(model, ensemble, 0, bootstrap_seed=bseed))
        elif cid == "poly_moment":
            r = model.p_exp if opts["poly_r"] is None else float(opts["poly_r"])
            reports.append(E.check_poly_moment_bound(model, ensemble, 0, r_exp=r))
        elif cid == "multiple_exp":
            procs = [(ensemble, a) for a in (0, second, 0, second)]
            reports.append(E.check_multiple_exp_bound(model, procs, bootstrap_seed=bseed))
        elif cid == "gronwall":
            if second == 0:
                raise FlowlabError("gronwall needs two anchors in grid.anchors")
            p = model.p_exp if opts["gronwall_p"] is None else float(opts["gronwall_p"])
            r = 2.0 * p if opts["gronwall_r"] is None else float(opts["gronwall_r"])
            q = p * r / (p + r)
            X, Y, D = E.difference_process(ensemble, 0, second)
            a, b = E.gronwall_coefficients(model, X, Y, ensemble.record_times, p, opts["gronwall_mode"])
            reports.append(E.check_gronwall(D, a, b, ensemble.record_times, p, q, r,
                                            float(opts["gronwall_delta"]), bseed, opts["gronwall_exp_norm"]))
        elif cid == "flow_holder":
            times = ensemble.record_times
            reports.append(E.check_flow_holder(model, ensemble, ((0, float(times[len(times) // 2])), (0, T))))
            if second:
                reports.append(E.check_flow_holder(model, ensemble, ((0, T), (second, T))))
        elif cid == "derivative_moment":
            d = model.dim_state
            for i in range(d):
                D = simulate_variational(model, ensemble, 0, np.eye(d)[i], n_threads=threads)
                reports.append(E.check_derivative_moment_bound(model, D))
    return reports


def execute(cfg, log=lambda msg: None):
    """Run certification and the requested checks; return ``(condition_report, bound_reports)``."""
    named, model = build_model(cfg)
    reg = cfg["region"]
    cond = None
    if reg["enabled"]:
        log("certify")
        region = SampleRegion(np.array(reg["box_lo"]), np.array(reg["box_hi"]), n_points=reg["n_points"],
                              n_directions=reg["n_directions"], n_times=reg["n_times"], sampler=reg["sampler"])
        cond = certify(model, region, cfg["seed"])
    g = cfg["grid"]
    grid = FlowGrid(anchors=[(s, np.array(x)) for s, x in g["anchors"]], time_step=g["time_step"],
                    n_paths=g["n_paths"], record_times=g["record_times"],
                    directions=[(np.array(v), ys) for v, ys in g["directions"]], scheme=g["scheme"],
                    exit_policy=cfg["flags"]["exit_policy"])
    log(f"simulate {g['n_paths']} paths")
    ensemble = simulate_flow(model, grid, cfg["seed"], n_threads=cfg["threads"])
    reports = _run_checks(model, cfg, ensemble, log)
    if ensemble.exited.any():
        for r in reports:
            r.flags.append(f"exit fraction {ensemble.exit_fraction:.6g}")
    return cond, reports


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_outputs(out: Path, cfg, cond, reports, started, elapsed):
    out.mkdir(parents=True, exist_ok=True)
    cond_doc = cond.as_dict() if cond is not None else {"passed": True, "conditions": [], "metadata": {
        "note": "certification disabled"}}
    _write(out / "condition_report.json", json.dumps(cond_doc, indent=2, sort_keys=True) + "\n")
    _write(out / "bound_reports.json", E.reports_to_json(reports) + "\n")
    (out / "tables").mkdir(exist_ok=True)
    E.write_bound_table(reports, out / "tables" / "bounds.csv")
    manifest = {
        "config": cfg,
        "versions": {"flowlab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "pyyaml": yaml.__version__, "python": platform.python_version()},
        "wall_clock": {"started": started, "elapsed_seconds": elapsed},
        "outputs": ["condition_report.json", "bound_reports.json", "tables/bounds.csv"],
    }
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# verbs


def cmd_run(args) -> int:
    raw, lines = ({}, {})
    if args.config:
        raw, lines = load_config_file(args.config)
    raw = dict(raw)
    for key in ("model", "preset", "seed", "threads"):
        val = getattr(args, key)
        if val is not None:
            raw[key] = val
    if args.checks:
        raw["checks"] = [c.strip() for c in args.checks.split(",") if c.strip()]
    cfg = resolve_config(raw, lines)
    out = Path(args.out or raw.get("out") or f"flowlab_out/{cfg['model']}_{cfg['seed']}")
    log = (lambda m: print(f"[flowlab] {m}", file=sys.stderr)) if args.verbose else (lambda m: None)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    t0 = time.perf_counter()
    cond, reports = execute(cfg, log)
    write_outputs(out, cfg, cond, reports, started, time.perf_counter() - t0)
    failed = [r for r in reports if not r.satisfied]
    for r in reports:
        mark = "ok " if r.satisfied else "FAIL"
        print(f"{mark} {r.bound_id:18s} lhs={r.lhs:.6g} ci_hi={r.ci_hi:.6g} rhs={r.rhs:.6g}")
    if cond is not None:
        print(f"{'ok ' if cond.passed else 'FAIL'} certification ({len(cond.records)} conditions)")
    print(f"outputs in {out}")
    if failed or (cond is not None and not cond.passed):
        return EXIT_FALSIFIED
    return EXIT_OK


def describe_text(name: str) -> str:
    named = model_by_name(name)
    spec = named.spec
    lines = [f"model: {named.name}", f"  {named.description}", "equations:"]
    lines += [f"  {ln}" for ln in named.equations.splitlines()]
    lines.append(f"dimension: d={spec.dim_state}, m={spec.dim_noise}, horizon T={spec.horizon:g}")
    lines.append(f"scheme: {named.scheme}")
    lo = ", ".join(f"[{a:g}, {b:g}]" for a, b in zip(named.box_lo, named.box_hi))
    lines.append(f"box: {lo}" + ("" if named.certified else "  (not certified)"))
    lines.append(f"default anchor: {np.array2string(named.default_anchor)}")
    if named.parameters:
        lines.append("parameters: " + ", ".join(f"{k}={v:g}" for k, v in named.parameters.items()))
    lines.append("constants:")
    for k, v in spec.constants().items():
        lines.append(f"  {k} = {v:.17g}" if isinstance(v, float) else f"  {k} = {v}")
    oracle = named.oracle
    if oracle is None:
        lines.append("oracle: none")
    else:
        have = [k for k in ("flow_mean", "flow_variance", "derivative_process", "exp_moment")
                if getattr(oracle, k) is not None]
        lines.append("oracle: " + (", ".join(have) if have else "none"))
    if name in FIT_REGRESSION:
        fit = FIT_REGRESSION[name]
        reg = fit["region"]
        lines.append(f"fit_constants regression values (sampler={reg['sampler']}, n_points={reg['n_points']}, "
                     f"seed={reg['seed']}):")
        for k, v in fit["values"].items():
            lines.append(f"  {k} = {v:.17g}")
    return "\n".join(lines)


def cmd_describe(args) -> int:
    print(describe_text(args.name))
    return EXIT_OK


def cmd_certify(args) -> int:
    named = model_by_name(args.name)
    region = SampleRegion(named.box_lo, named.box_hi, n_points=args.points, sampler=args.sampler)
    report = certify(named.spec, region, args.seed)
    if args.fit:
        fit = fit_constants(named.spec, region, args.seed)
        doc = report.as_dict()
        doc["fitted"] = {k: E.format_float(v) for k, v in fit.as_dict().items()}
        text = json.dumps(doc, indent=2, sort_keys=True)
    else:
        text = report.to_json()
    if args.out:
        _write(Path(args.out), text + "\n")
    else:
        print(text)
    for r in report.records:
        print(f"{'ok ' if r.passed else 'FAIL'} {r.condition_id:20s} min_margin={r.min_margin:.6g}",
              file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_FALSIFIED


def cmd_list_models(args) -> int:
    for n in NAMES:
        named = model_by_name(n)
        print(f"{n:20s} {'certified' if named.certified else 'uncertified'}  {named.description}")
    return EXIT_OK


def cmd_list_checks(args) -> int:
    for cid in E.BOUND_IDS:
        print(f"{cid:18s} {CHECK_DOCS[cid]}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="flowlab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"flowlab {__version__}")
    sub = ap.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="certify, simulate and check bounds")
    r.add_argument("--config", help="YAML run configuration or a previous manifest.json")
    r.add_argument("--model", choices=NAMES)
    r.add_argument("--preset", choices=sorted(PRESETS))
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int)
    r.add_argument("--checks", help="comma-separated bound ids")
    r.add_argument("--out", help="output directory")
    r.add_argument("-v", "--verbose", action="store_true")
    r.set_defaults(func=cmd_run)

    d = sub.add_parser("describe", help="print a model's equations, box and constants")
    d.add_argument("name")
    d.set_defaults(func=cmd_describe)

    c = sub.add_parser("certify", help="check the hypotheses on a model's box")
    c.add_argument("name")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--points", type=int, default=1024)
    c.add_argument("--sampler", choices=SAMPLERS, default="sobol")
    c.add_argument("--fit", action="store_true", help="also report fitted minimal constants")
    c.add_argument("--out")
    c.set_defaults(func=cmd_certify)

    lm = sub.add_parser("list-models", help="list built-in models")
    lm.set_defaults(func=cmd_list_models)
    lc = sub.add_parser("list-checks", help="list bound ids")
    lc.set_defaults(func=cmd_list_checks)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_ERROR
    except (FlowlabError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

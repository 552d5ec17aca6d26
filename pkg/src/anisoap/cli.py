"""Command-line front end: ``ap solve``, ``ap study`` and ``ap check``.

A run is described by a JSON document with the blocks ``problem``, ``grid``,
``solver``, ``study`` and ``output``.  Values are layered: the file, then the
``AP_CONFIG_OVERRIDES`` environment variable (``k=v;k=v``), then command-line
flags (``--override k=v`` first, dedicated flags such as ``--eps`` last).

Exit status: 0 success, 2 configuration error, 3 solver failure, 4 a
``--check`` threshold violated.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import re
import sys
import tempfile
from importlib import resources

import numpy as np

from . import expr as ex
from . import grid as gr
from .fem import CoefficientError, Discretization
from .linalg import SingularMatrixError
from .problem import ProblemSpec
from .solver import APOptions, SolverError, Variant
from . import verify as vf

EXIT_OK, EXIT_SCHEMA, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4

SCHEMA = {
    "problem": {"domain", "eps", "eps_list", "A_perp", "A_z", "f", "exact", "constants", "name", "load_rule"},
    "grid": {"Nx", "Nz", "grid_list"},
    "solver": {"scheme", "variant", "tol", "max_iters"},
    "study": {"kind", "parameters", "seed"},
    "output": {"csv", "precision"},
}
STUDY_KINDS = ("eps_sweep", "convergence", "condition", "iteration", "positivity", "perturbation")
STUDY_PARAMETERS = {
    "eps_sweep": {"schemes", "workers"},
    "convergence": {"scheme"},
    "condition": {"workers"},
    "iteration": set(),
    "positivity": {"a_values"},
    "perturbation": {"noise_amplitude"},
}
ALIASES = {
    "eps": "problem.eps",
    "eps_list": "problem.eps_list",
    "Nx": "grid.Nx",
    "Nz": "grid.Nz",
    "scheme": "solver.scheme",
    "variant": "solver.variant",
    "tol": "solver.tol",
    "max_iters": "solver.max_iters",
    "kind": "study.kind",
    "seed": "study.seed",
    "out": "output.csv",
    "csv": "output.csv",
    "precision": "output.precision",
}
# Setting one key of a pair drops the other, so a flag can replace a list.
EXCLUSIVE = {
    "problem.eps": "problem.eps_list",
    "problem.eps_list": "problem.eps",
    "grid.Nx": "grid.grid_list",
    "grid.Nz": "grid.grid_list",
    "grid.grid_list": ("grid.Nx", "grid.Nz"),
}

log = logging.getLogger("anisoap.cli")


class ConfigError(ValueError):
    pass


def default_config_path() -> str:
    return str(resources.files("anisoap") / "data" / "manufactured.json")


# --- configuration -----------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_assignment(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    key = key.strip()
    key = ALIASES.get(key, key)
    if key.count(".") != 1:
        raise ConfigError(f"override key {key!r} must be block.field or a known alias")
    return key, _parse_value(value.strip())


def apply_assignment(cfg: dict, key: str, value) -> None:
    block, name = key.split(".")
    if block not in SCHEMA:
        raise ConfigError(f"unknown block {block!r} in override {key!r}")
    if name not in SCHEMA[block]:
        raise ConfigError(f"unknown key {name!r} in block {block!r}")
    cfg.setdefault(block, {})[name] = value
    drop = EXCLUSIVE.get(key, ())
    for other in (drop,) if isinstance(drop, str) else drop:
        b, n = other.split(".")
        cfg.get(b, {}).pop(n, None)


def env_overrides(environ=None) -> list[str]:
    raw = (environ if environ is not None else os.environ).get("AP_CONFIG_OVERRIDES", "")
    return [s.strip() for s in raw.split(";") if s.strip()]


def parse_grid(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
    if not m:
        raise ConfigError(f"grid {text!r} is not of the form NxM")
    return int(m.group(1)), int(m.group(2))


def _position(text: str, offset: int) -> str:
    line = text.count("\n", 0, offset) + 1
    col = offset - (text.rfind("\n", 0, offset) + 1) + 1
    return f"line {line}, column {col}"


def validate(cfg: dict, source_text: str = "", source_name: str = "<config>") -> dict:
    """Check the layered configuration against the schema; returns parsed expressions."""
    if not isinstance(cfg, dict):
        raise ConfigError("configuration must be a JSON object")
    for block, body in cfg.items():
        if block not in SCHEMA:
            raise ConfigError(f"unknown block {block!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"block {block!r} must be an object")
        unknown = set(body) - SCHEMA[block]
        if unknown:
            raise ConfigError(f"unknown key(s) {sorted(unknown)} in block {block!r}")
    kind = cfg.get("study", {}).get("kind")
    if "study" in cfg and kind not in STUDY_KINDS:
        raise ConfigError(f"study.kind must be one of {STUDY_KINDS}, got {kind!r}")
    needs_problem = kind != "positivity"
    prob = cfg.get("problem", {})
    parsed = {}
    if needs_problem:
        for key in ("domain", "A_perp", "A_z", "f"):
            if key not in prob:
                raise ConfigError(f"problem.{key} is required")
        dom = prob["domain"]
        if not (isinstance(dom, list) and len(dom) == 4 and all(isinstance(v, (int, float)) for v in dom)):
            raise ConfigError("problem.domain must be [x_lo, x_hi, z_lo, z_hi]")
        if not (dom[1] > dom[0] and dom[3] > dom[2]):
            raise ConfigError("problem.domain bounds must satisfy lo < hi")
        for key in ("A_perp", "A_z", "f", "exact"):
            if key not in prob:
                continue
            s = prob[key]
            if isinstance(s, (int, float)) and not isinstance(s, bool):
                # a bare number from an override such as problem.f=0
                s = repr(s)
            if not isinstance(s, str):
                raise ConfigError(f"problem.{key} must be an expression string")
            try:
                parsed[key] = ex.parse(s)
            except ex.ExprSyntaxError as exc:
                where = f"problem.{key} at character {exc.offset}"
                at = source_text.find(json.dumps(s)[1:-1]) if source_text else -1
                if at >= 0:
                    where += f" ({source_name}, {_position(source_text, at + exc.offset)})"
                raise ConfigError(f"expression error in {where}: {exc}") from None
        consts = prob.get("constants", {})
        if not isinstance(consts, dict) or not all(isinstance(v, (int, float)) for v in consts.values()):
            raise ConfigError("problem.constants must map names to numbers")
        known = {"x", "z", "eps", "Lx", "Lz", "pi"} | set(consts)
        for key, e in parsed.items():
            unbound = ex.free_names(e) - known
            if unbound:
                raise ConfigError(f"problem.{key} uses unbound name(s) {sorted(unbound)}")
    if "eps" in prob and "eps_list" in prob:
        raise ConfigError("give either problem.eps or problem.eps_list, not both")
    for e in _eps_values(cfg, required=False):
        if not (isinstance(e, (int, float)) and e > 0):
            raise ConfigError(f"eps values must be positive numbers, got {e!r}")
    g = cfg.get("grid", {})
    if "grid_list" in g and ("Nx" in g or "Nz" in g):
        raise ConfigError("give either grid.Nx/Nz or grid.grid_list, not both")
    for nx, nz in _grids(cfg, required=False):
        if not (isinstance(nx, int) and isinstance(nz, int) and nx >= 1 and nz >= 2):
            raise ConfigError(f"grid sizes must be integers with Nx >= 1, Nz >= 2, got {nx}x{nz}")
    s = cfg.get("solver", {})
    if s.get("scheme", "ap") not in ("p", "l", "ap"):
        raise ConfigError(f"solver.scheme must be p, l or ap, got {s.get('scheme')!r}")
    if s.get("variant", "ap2prime") not in ("ap2", "ap2prime"):
        raise ConfigError(f"solver.variant must be ap2 or ap2prime, got {s.get('variant')!r}")
    if not (isinstance(s.get("tol", 1e-12), (int, float)) and s.get("tol", 1e-12) > 0):
        raise ConfigError("solver.tol must be a positive number")
    mi = s.get("max_iters", 200)
    if not (isinstance(mi, int) and not isinstance(mi, bool) and mi >= 1):
        raise ConfigError("solver.max_iters must be an integer >= 1")
    st = cfg.get("study", {})
    params = st.get("parameters", {})
    if not isinstance(params, dict):
        raise ConfigError("study.parameters must be an object")
    if kind is not None:
        unknown = set(params) - STUDY_PARAMETERS[kind]
        if unknown:
            raise ConfigError(f"unknown parameter(s) {sorted(unknown)} for study {kind!r}")
    seed = st.get("seed", 0)
    if not (isinstance(seed, int) and not isinstance(seed, bool)):
        raise ConfigError("study.seed must be an integer")
    out = cfg.get("output", {})
    if "csv" in out and not isinstance(out["csv"], str):
        raise ConfigError("output.csv must be a path string")
    prec = out.get("precision")
    if prec is not None and not (isinstance(prec, int) and 1 <= prec <= 17):
        raise ConfigError("output.precision must be null or an integer in 1..17")
    return parsed


def _eps_values(cfg: dict, required: bool = True) -> list:
    prob = cfg.get("problem", {})
    if "eps_list" in prob:
        if not isinstance(prob["eps_list"], list) or not prob["eps_list"]:
            raise ConfigError("problem.eps_list must be a nonempty list")
        return list(prob["eps_list"])
    if "eps" in prob:
        return [prob["eps"]]
    if required:
        raise ConfigError("problem.eps or problem.eps_list is required")
    return []


def _grids(cfg: dict, required: bool = True) -> list[tuple[int, int]]:
    g = cfg.get("grid", {})
    if "grid_list" in g:
        gl = g["grid_list"]
        if not isinstance(gl, list) or not gl or not all(isinstance(p, list) and len(p) == 2 for p in gl):
            raise ConfigError("grid.grid_list must be a nonempty list of [Nx, Nz] pairs")
        return [tuple(p) for p in gl]
    if "Nx" in g or "Nz" in g:
        if "Nx" not in g or "Nz" not in g:
            raise ConfigError("grid needs both Nx and Nz")
        return [(g["Nx"], g["Nz"])]
    if required:
        raise ConfigError("grid.Nx/Nz or grid.grid_list is required")
    return []


def load_config(path: str | None, overrides=(), environ=None, flag_values=()) -> tuple[dict, dict, str]:
    """Layered configuration: file < environment < --override < dedicated flags."""
    name = path or default_config_path()
    try:
        with open(name, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {name}: {exc}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{name}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{name}: configuration must be a JSON object")
    cfg = copy.deepcopy(cfg)
    for item in list(env_overrides(environ)) + list(overrides):
        apply_assignment(cfg, *parse_assignment(item))
    for key, value in flag_values:
        apply_assignment(cfg, key, value)
    parsed = validate(cfg, text, name)
    return cfg, parsed, name


def build_problem(cfg: dict, parsed: dict, eps: float) -> ProblemSpec:
    prob = cfg["problem"]
    return ProblemSpec(
        *(float(v) for v in prob["domain"]),
        float(eps),
        parsed["A_perp"],
        parsed["A_z"],
        parsed["f"],
        parsed.get("exact"),
        {k: float(v) for k, v in prob.get("constants", {}).items()},
        prob.get("name", "custom"),
        prob.get("load_rule", "interpolated"),
    )


def _options(cfg: dict) -> APOptions:
    s = cfg.get("solver", {})
    return APOptions(variant=Variant(s.get("variant", "ap2prime")), tol=float(s.get("tol", 1e-12)),
                     max_iters=int(s.get("max_iters", 200)))


# --- output ------------------------------------------------------------------


def atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ap-", suffix=".tmp", dir=d)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _format_csv(report: vf.StudyReport, precision: int | None) -> str:
    if precision is None:
        return report.to_csv()
    rows = []
    for r in report.rows:
        rows.append({k: (float(f"{v:.{precision}g}") if isinstance(v, float) else v) for k, v in r.items()})
    return vf.StudyReport(report.kind, report.columns, rows, report.metadata).to_csv()


def summary(report: vf.StudyReport) -> str:
    cells = [list(report.columns)]
    for r in report.rows:
        cells.append([_short(r[c]) for c in report.columns])
    widths = [max(len(row[i]) for row in cells) for i in range(len(report.columns))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells)


def _short(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, (float, np.floating)):
        return f"{v:.4g}"
    return str(v)


def emit(report: vf.StudyReport, cfg: dict, stream=None) -> None:
    stream = stream or sys.stdout
    out = cfg.get("output", {})
    path = out.get("csv")
    text = _format_csv(report, out.get("precision"))
    if path:
        atomic_write(path, text)
        meta = dict(report.metadata, kind=report.kind, columns=list(report.columns))
        atomic_write(path + ".meta.json", json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
        print(f"wrote {path} ({len(report.rows)} rows)", file=stream)
    print(summary(report), file=stream)


# --- commands ----------------------------------------------------------------

SOLVE_COLUMNS = ("scheme", "eps", "Nx", "Nz", "l2_err", "linf_err", "min_value", "max_value", "iterations")


def run_solve(cfg: dict, parsed: dict, check: bool = False) -> tuple[vf.StudyReport, list[str], bool]:
    from .acceptance import structural_residuals
    from .solver import ap_solve, l_solve, p_solve

    if "study" in cfg:
        raise ConfigError("the solve command takes no study block; use `ap study`")
    scheme = cfg.get("solver", {}).get("scheme", "ap").upper()
    opts = _options(cfg)
    rep = vf.StudyReport("solve", SOLVE_COLUMNS, metadata={"config_scheme": scheme})
    problems, failed = [], False
    for eps in _eps_values(cfg):
        p = build_problem(cfg, parsed, eps)
        for nx, nz in _grids(cfg):
            g = gr.build(p.x_lo, p.x_hi, p.z_lo, p.z_hi, nx, nz)
            disc = Discretization(p, g)
            iters = None
            try:
                if scheme == "P":
                    u = p_solve(p, g, disc)
                elif scheme == "L":
                    u = gr.expand_mean(g, l_solve(p, g, disc))
                else:
                    res = ap_solve(p, g, opts, disc)
                    u, iters = res.combined, res.iterations
                    if check:
                        cr, mr, zm = structural_residuals(res, disc)
                        if not (res.converged or res.stalled):
                            problems.append(f"eps={eps:g} {nx}x{nz}: fixed point not converged")
                        if cr > 1e-10 or mr > 1e-8 or zm > 1e-11:
                            problems.append(f"eps={eps:g} {nx}x{nz}: constraint {cr:.2g}, multiplier {mr:.2g}, z-mean {zm:.2g}")
            except (SingularMatrixError, SolverError) as exc:
                log.error("solve failed for eps=%g on %dx%d: %s", eps, nx, nz, exc)
                failed = True
                rep.add(scheme=scheme, eps=float(eps), Nx=nx, Nz=nz, l2_err=math.inf, linf_err=math.inf,
                        min_value=None, max_value=None, iterations=None)
                continue
            l2 = linf = None
            if p.exact is not None:
                from .fem import interpolate

                l2, linf = vf.grid_errors(g, u, interpolate(g, p.exact, p.bindings()))
            if not np.all(np.isfinite(u)):
                failed = True
            rep.add(scheme=scheme, eps=float(eps), Nx=g.Nx, Nz=g.Nz, l2_err=l2, linf_err=linf,
                    min_value=float(u.min()), max_value=float(u.max()), iterations=iters)
    return rep, problems, failed


def run_study(cfg: dict, parsed: dict, check: bool = False) -> tuple[vf.StudyReport, list[str], bool]:
    st = cfg.get("study")
    if not st or "kind" not in st:
        raise ConfigError("the study command needs study.kind (config or --kind)")
    kind = st["kind"]
    params = st.get("parameters", {})
    seed = int(st.get("seed", 0))
    opts = _options(cfg)
    grids = _grids(cfg)
    problems: list[str] = []
    if kind == "positivity":
        rep = vf.positivity_study(params.get("a_values", [1e-1, 1e-2]), _eps_values(cfg), grids[0], opts)
        if check:
            lo = min(rep.column("min_value"))
            if not lo >= -1e-12:
                problems.append(f"minimum {lo:.3g} below -1e-12")
    else:
        base = build_problem(cfg, parsed, _eps_values(cfg)[0])
        if kind == "eps_sweep":
            rep = vf.eps_sweep(base, grids, _eps_values(cfg), params.get("schemes", ["P", "L", "AP"]), opts,
                               int(params.get("workers", 1)))
        elif kind == "convergence":
            scheme = params.get("scheme", cfg.get("solver", {}).get("scheme", "ap"))
            rep = vf.convergence_study(base, base.eps, grids, scheme, opts)
            if check:
                orders = [o for o in rep.column("l2_order") if not math.isnan(o)]
                if not all(1.7 <= o <= 2.3 for o in orders):
                    problems.append(f"observed orders {orders} outside [1.7, 2.3]")
        elif kind == "condition":
            rep = vf.condition_study(base, grids, _eps_values(cfg), seed, opts.variant, int(params.get("workers", 1)))
        elif kind == "iteration":
            rep = vf.iteration_study(base, base.eps, grids[0], opts)
            if check and rep.metadata["plateau"] > 60:
                problems.append(f"plateau at iteration {rep.metadata['plateau']} > 60")
        else:
            rep = vf.perturbation_study(base, _eps_values(cfg), grids[0], float(params.get("noise_amplitude", 1e-6)), seed)
    failed = any(
        math.isinf(r.get(k, 0.0) or 0.0) for r in rep.rows for k in ("l2_err", "linf_err")
    ) or any(str(r.get("flag", "")).startswith("failed") for r in rep.rows)
    return rep, problems, failed


def run_check(criteria: list[int] | None) -> bool:
    from .acceptance import all_passed, run_all

    return all_passed(run_all(criteria))


# --- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ap", description="Anisotropic elliptic solver: P, L and AP schemes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration (default: packaged manufactured case)")
        p.add_argument("--eps", type=float, help="anisotropy parameter (replaces eps/eps_list)")
        p.add_argument("--grid", help="grid size NxM (Nx interior x nodes, M z nodes)")
        p.add_argument("--scheme", choices=("p", "l", "ap"))
        p.add_argument("--variant", choices=("ap2", "ap2prime"))
        p.add_argument("--tol", type=float)
        p.add_argument("--max-iters", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="CSV output path")
        p.add_argument("--check", action="store_true", help="exit 4 if a threshold check fails")
        p.add_argument("--override", action="append", default=[], metavar="K=V",
                       help="set a config value, e.g. problem.eps=1e-8 or eps=1e-8")

    common(sub.add_parser("solve", help="solve one problem per (eps, grid)"))
    sp = sub.add_parser("study", help="run a study and write its table")
    common(sp)
    sp.add_argument("--kind", choices=STUDY_KINDS)
    cp = sub.add_parser("check", help="run the acceptance criteria")
    cp.add_argument("--criteria", help="comma-separated criterion numbers (default: all)")
    return parser


def _flag_values(args) -> list[tuple[str, object]]:
    out = []
    if getattr(args, "kind", None):
        out.append(("study.kind", args.kind))
    if args.eps is not None:
        out.append(("problem.eps", args.eps))
    if args.grid is not None:
        nx, nz = parse_grid(args.grid)
        out += [("grid.Nx", nx), ("grid.Nz", nz)]
    for key, val in (("solver.scheme", args.scheme), ("solver.variant", args.variant), ("solver.tol", args.tol),
                     ("solver.max_iters", args.max_iters), ("study.seed", args.seed), ("output.csv", args.out)):
        if val is not None:
            out.append((key, val))
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "check":
        try:
            selected = [int(s) for s in args.criteria.split(",")] if args.criteria else None
        except ValueError:
            print("error: --criteria takes comma-separated integers", file=sys.stderr)
            return EXIT_SCHEMA
        return EXIT_OK if run_check(selected) else EXIT_CHECK
    try:
        cfg, parsed, _ = load_config(args.config, args.override, flag_values=_flag_values(args))
        runner = run_study if args.command == "study" else run_solve
        report, problems, failed = runner(cfg, parsed, args.check)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (CoefficientError, ex.ExprEvalError, gr.GridError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (SingularMatrixError, SolverError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    emit(report, cfg)
    if failed:
        print("solver failure in at least one row", file=sys.stderr)
        return EXIT_SOLVER
    if args.check and problems:
        for msg in problems:
            print(f"check failed: {msg}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

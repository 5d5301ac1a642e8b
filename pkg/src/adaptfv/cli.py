"""Command-line front end: single runs, method/level sweeps, references, snapshot comparison.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import metrics as M
from .cases import get_case, reference_manager, with_overrides
from .euler import NonPhysicalState
from .grid import UniformGrid
from .io import load_snapshot, save_snapshot
from .scheme import SchemeConfig

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
METHOD_NAMES = ("fv", "mr", "mrlt", "amr", "amrlt")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """One solver run.  Unset thresholds fall back to the case defaults."""

    case: str = "lax_liu_6"
    method: str = "fv"
    level: int = 5
    steps: int | None = None
    eps: float | None = None
    eps_rho: float | None = None
    eps_p: float | None = None
    eta: float | None = None
    base_level: int | None = None
    detail_norm: str = "absolute"
    scheme: str | None = None  # fv only: "mr" or "amr" preset (default mr)
    out: str | None = None
    snapshot_every: int = 0
    ref_level: int | None = None
    error: bool = True

    def validate(self) -> None:
        if self.method not in METHOD_NAMES:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHOD_NAMES)}")
        try:
            get_case(self.case)
        except KeyError as exc:
            raise ConfigError(exc.args[0]) from None
        if self.level < 1:
            raise ConfigError("level must be positive")
        family = self.family
        if family != "mr" and self.eps is not None:
            raise ConfigError("eps applies to mr/mrlt only")
        if family != "amr" and any(v is not None for v in (self.eps_rho, self.eps_p, self.eta, self.base_level)):
            raise ConfigError("eps_rho, eps_p, eta and base_level apply to amr/amrlt only")
        if self.scheme not in (None, "mr", "amr"):
            raise ConfigError("scheme must be 'mr' or 'amr'")
        if self.method != "fv" and self.scheme is not None:
            raise ConfigError("scheme applies to fv only (adaptive methods use their own preset)")
        if self.snapshot_every < 0:
            raise ConfigError("snapshot_every must be non-negative")

    @property
    def family(self) -> str:
        if self.method == "fv":
            return "fv"
        return "mr" if self.method.startswith("mr") else "amr"

    @property
    def preset(self) -> str:
        return self.scheme or ("amr" if self.family == "amr" else "mr")

    def scheme_config(self) -> SchemeConfig:
        return SchemeConfig.amr_preset() if self.preset == "amr" else SchemeConfig.mr_preset()


_FIELD_TYPES = {"level": int, "steps": int, "eps": float, "eps_rho": float, "eps_p": float,
                "eta": float, "base_level": int, "snapshot_every": int, "ref_level": int}


def _coerce(key: str, value: str):
    names = {f.name for f in fields(RunConfig)}
    if key not in names:
        raise ConfigError(f"unknown configuration key {key!r}")
    if value.lower() in ("", "none"):
        return None
    if key == "error":
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"bad boolean for error: {value!r}")
        return value.lower() in ("true", "1", "yes")
    typ = _FIELD_TYPES.get(key, str)
    try:
        return typ(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def parse_pairs(lines) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = _coerce(k.replace("-", "_"), v)
    return out


def load_config(path: str | None, overrides: dict) -> RunConfig:
    values = {}
    if path:
        with open(path) as fh:
            values.update(parse_pairs(fh))
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# ----------------------------------------------------------------- execution

@dataclass
class RunResult:
    config: RunConfig
    report: M.RunReport
    uniform: np.ndarray = field(repr=False, default=None)
    solution: object = field(repr=False, default=None)


def _uniform_grid(case, level: int, U: np.ndarray) -> UniformGrid:
    g = case.grid(level)
    g.interior = U
    g.t = case.t_end
    return g


def mesh_dump(solution) -> str:
    """Plain-text cell/box outlines: one ``level lower... upper...`` line per item."""
    from .amr import PatchHierarchy, hierarchy_summary
    if isinstance(solution, PatchHierarchy):
        return hierarchy_summary(solution)
    tree = solution
    lines = [f"# leaves dim={tree.dim} min_level={tree.min_level} max_level={tree.max_level} t={tree.t!r}"]
    for m in tree.levels:
        for idx in np.argwhere(tree.leaf(m)):
            lo = " ".join(str(int(i)) for i in idx)
            hi = " ".join(str(int(i) + 1) for i in idx)
            lines.append(f"{m} {lo} {hi}")
    return "\n".join(lines) + "\n"


def execute(cfg: RunConfig) -> RunResult:
    """Run the solver for ``cfg`` and compute its L1 error when requested."""
    from .amr import run_amr
    from .mr import leaf_projection_to_uniform, run_mr, write_tree_snapshot
    from .amr import write_hierarchy_snapshot
    from .unigrid import run_uniform

    case = get_case(cfg.case)
    scheme = cfg.scheme_config()
    N = cfg.steps or case.n_steps(cfg.level)
    out = Path(cfg.out) if cfg.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    tag = f"{cfg.case}_{cfg.method}_L{cfg.level}"

    def dump(step, solution):
        if out is not None and cfg.snapshot_every and step % cfg.snapshot_every == 0:
            (out / f"{tag}_mesh_{step:06d}.txt").write_text(mesh_dump(solution))

    if cfg.method == "fv":
        grid, report = run_uniform(case, cfg.level, N, scheme)
        U, solution = grid.interior, grid
    elif cfg.family == "mr":
        solution, report = run_mr(case, cfg.level, N, cfg.eps, cfg.method == "mrlt", scheme,
                                  detail_norm=cfg.detail_norm, callback=dump)
        U = leaf_projection_to_uniform(solution, cfg.level).interior
    else:
        solution, report = run_amr(case, cfg.level, N, cfg.method == "amrlt", scheme, cfg.eps_rho,
                                   cfg.eps_p, cfg.eta, cfg.base_level, callback=dump)
        U = solution.composite(solution.max_levels - 1)
    if cfg.error:
        ref_level = cfg.ref_level or case.reference_level
        ref = reference_manager(case, ref_level, scheme)
        if cfg.family == "amr":
            report.l1 = M.l1_error_amr(solution, ref)
        elif cfg.family == "mr":
            report.l1 = M.l1_error_mr(solution, ref)
        else:
            report.l1 = M.l1_uniform(U, cfg.level, case.extent / 2**cfg.level, ref)
    if out is not None:
        meta = {"case": cfg.case, "method": cfg.method, "level": cfg.level, "N_I": N, "scheme": scheme.tag}
        save_snapshot(out / f"{tag}.snap", _uniform_grid(case, cfg.level, U), meta)
        if cfg.family == "mr":
            write_tree_snapshot(out / f"{tag}.tree", solution)
        elif cfg.family == "amr":
            write_hierarchy_snapshot(out / f"{tag}.hier", solution)
        if cfg.family != "fv":
            (out / f"{tag}_mesh_final.txt").write_text(mesh_dump(solution))
    return RunResult(cfg, report, U, solution)


def _safe_execute(cfg: RunConfig):
    try:
        res = execute(cfg)
        return res.report, None
    except NonPhysicalState as exc:
        return None, f"numerical failure: {exc} at {exc.location}"
    except (ValueError, KeyError) as exc:
        return None, f"error: {exc}"


# ----------------------------------------------------------------- tables

def sweep_rows(results: list) -> tuple[list, list]:
    """CSV rows and table rows for a list of ``(config, report or None, error)``.

    Adaptive runs are rated against the FV run with the same scheme preset,
    level and step count; convergence rates compare successive levels of one
    method.
    """
    fv = {}
    for cfg, rep, _ in results:
        if rep is not None and cfg.method == "fv":
            fv[(cfg.preset, cfg.level, rep.n_steps)] = rep
    prev = {}
    csv_rows, table = [], []
    for cfg, rep, err in sorted(results, key=lambda r: (METHOD_NAMES.index(r[0].method), r[0].preset, r[0].level)):
        label = cfg.method.upper() if cfg.method != "fv" else f"FV[{cfg.preset}]"
        if rep is None:
            table.append({"method": label, "L": cfg.level, "status": err or "failed"})
            continue
        base = fv.get((cfg.preset, cfg.level, rep.n_steps))
        if base is not None and cfg.method != "fv":
            vals = M.rates(rep, base)
        else:
            vals = M.standalone_rates(rep)
        row = M.report_row(rep, vals)
        csv_rows.append(row)
        key = (label, cfg.preset)
        rate = ""
        if key in prev and not math.isnan(rep.l1_rho) and prev[key][0] == cfg.level - 1:
            rate = M.convergence_rate(prev[key][1], rep.l1_rho)
        prev[key] = (cfg.level, rep.l1_rho)
        table.append({"method": label, "L": cfg.level, "l1_rho": rep.l1_rho, "rate": rate,
                      "pert": vals.get("perturbation", ""), "cells": rep.sum_cells,
                      "mem": vals["memory_compression"], "leaves": rep.sum_leaves,
                      "mesh": vals["mesh_compression"], "cpu": rep.wall_s,
                      "cpu_rate": vals.get("cpu_compression", ""),
                      "overhead": vals.get("overhead", ""), "status": "ok"})
    return csv_rows, table


def _pct(v):
    return "" if v == "" or v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:.2f}"


def format_table(table: list) -> str:
    head = (f"{'method':<10} {'L':>2} {'L1(rho)':>11} {'Rate':>6} {'Pert.%':>7} {'sum C':>11} {'%':>7} "
            f"{'sum L':>11} {'%':>7} {'CPU s':>8} {'%':>7} {'ovh.%':>7}")
    lines = [head, "-" * len(head)]
    for r in table:
        if r["status"] != "ok":
            lines.append(f"{r['method']:<10} {r['L']:>2} FAILED ({r['status']})")
            continue
        l1 = "" if math.isnan(r["l1_rho"]) else f"{r['l1_rho']:.4e}"
        rate = "" if r["rate"] == "" else f"{r['rate']:.3f}"
        lines.append(f"{r['method']:<10} {r['L']:>2} {l1:>11} {rate:>6} {_pct(r['pert']):>7} "
                     f"{r['cells']:>11.4g} {_pct(r['mem']):>7} {r['leaves']:>11.4g} {_pct(r['mesh']):>7} "
                     f"{r['cpu']:>8.2f} {_pct(r['cpu_rate']):>7} {_pct(r['overhead']):>7}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------- commands

def cmd_run(args, cfg: RunConfig) -> int:
    res = execute(cfg)
    row = M.report_row(res.report, M.standalone_rates(res.report))
    M.validate_row(row)
    text = M.write_csv([row])
    if cfg.out:
        Path(cfg.out, f"{cfg.case}_{cfg.method}_L{cfg.level}.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def sweep_configs(base: RunConfig, methods, levels) -> list:
    """Configurations of a method x level matrix.

    ``fv`` runs once per scheme preset used by the adaptive methods of the
    matrix (the base preset when there are none), so every adaptive row has a
    baseline with the same preset.  Without ``fv`` no baselines are run.
    """
    adaptive = [m for m in methods if m != "fv"]
    presets = sorted({replace(base, method=m).preset for m in adaptive}) or [base.preset]
    configs = []
    for m in methods:
        for L in levels:
            for preset in (presets if m == "fv" else [None]):
                c = replace(base, method=m, level=L, scheme=preset)
                c.validate()
                configs.append(c)
    return configs


def _strip_thresholds(cfg: RunConfig) -> RunConfig:
    if cfg.family == "mr":
        return replace(cfg, eps_rho=None, eps_p=None, eta=None, base_level=None)
    if cfg.family == "amr":
        return replace(cfg, eps=None)
    return replace(cfg, eps=None, eps_rho=None, eps_p=None, eta=None, base_level=None)


def cmd_sweep(args, base: RunConfig) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    levels = [int(v) for v in args.levels.split(",") if v.strip()]
    bad = [m for m in methods if m not in METHOD_NAMES]
    if bad:
        raise ConfigError(f"unknown methods {bad}; choose from {', '.join(METHOD_NAMES)}")
    configs = sweep_configs(_strip_thresholds(replace(base, method="fv", scheme=None)), methods, levels)
    configs = [_apply_family_thresholds(c, base) for c in configs]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outs = list(pool.map(_safe_execute, configs))
    else:
        outs = [_safe_execute(c) for c in configs]
    results = [(c, rep, err) for c, (rep, err) in zip(configs, outs)]
    csv_rows, table = sweep_rows(results)
    for r in csv_rows:
        M.validate_row(r)
    text = M.write_csv(csv_rows)
    tab = format_table(table)
    if args.jobs > 1:
        tab += "# entries ran concurrently: CPU columns are not comparable\n"
    if base.out:
        Path(base.out).mkdir(parents=True, exist_ok=True)
        Path(base.out, f"sweep_{base.case}.csv").write_text(text)
        Path(base.out, f"sweep_{base.case}.txt").write_text(tab)
    sys.stdout.write(text + "\n" + tab)
    return EXIT_OK


def _apply_family_thresholds(c: RunConfig, base: RunConfig) -> RunConfig:
    if c.family == "mr":
        return replace(c, eps=base.eps)
    if c.family == "amr":
        return replace(c, eps_rho=base.eps_rho, eps_p=base.eps_p, eta=base.eta, base_level=base.base_level)
    return c


def cmd_reference(args, cfg: RunConfig) -> int:
    case = get_case(cfg.case)
    level = cfg.ref_level or cfg.level if args.level_given else (cfg.ref_level or case.reference_level)
    grid = reference_manager(case, level, cfg.scheme_config(), n_steps=cfg.steps)
    sys.stdout.write(f"reference {case.name} L={level} scheme={cfg.scheme_config().tag} "
                     f"mass={float(grid.totals()[0])!r}\n")
    return EXIT_OK


def compare_snapshots(a: UniformGrid, b: UniformGrid) -> dict:
    """L1 differences per component after restricting the finer snapshot."""
    if a.dim != b.dim:
        raise ConfigError("snapshots differ in dimension")
    coarse, fine = (a, b) if a.level <= b.level else (b, a)
    F = M.restrict(fine.interior, fine.dim, fine.level - coarse.level)
    e = M.l1_norm(F - coarse.interior, coarse.dx, coarse.dim)
    names = ["rho"] + [f"mom{k}" for k in range(coarse.dim)] + ["E"]
    return {"level": coarse.level, **{k: float(v) for k, v in zip(names, e)}}


def cmd_compare(args, _cfg) -> int:
    a, b = load_snapshot(args.a), load_snapshot(args.b)
    res = compare_snapshots(a, b)
    sys.stdout.write(f"{'component':<10} {'L1':>14}   (at level {res.pop('level')})\n")
    for k, v in res.items():
        sys.stdout.write(f"{k:<10} {v:>14.6e}\n")
    return EXIT_OK


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptfv", description="Adaptive finite-volume Euler solvers.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, method=True):
        sp.add_argument("--config", help="key=value configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key")
        sp.add_argument("--case")
        if method:
            sp.add_argument("--method")
        sp.add_argument("--level", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--eps", type=float)
        sp.add_argument("--eps-rho", type=float)
        sp.add_argument("--eps-p", type=float)
        sp.add_argument("--eta", type=float)
        sp.add_argument("--base-level", type=int)
        sp.add_argument("--detail-norm", choices=("max", "absolute"))
        sp.add_argument("--scheme", choices=("mr", "amr"))
        sp.add_argument("--out")
        sp.add_argument("--snapshot-every", type=int)
        sp.add_argument("--ref-level", type=int)
        sp.add_argument("--no-error", action="store_true", help="skip the L1 error (no reference needed)")

    common(sub.add_parser("run", help="run one solver configuration"))
    sw = sub.add_parser("sweep", help="run a method x level matrix and tabulate rates")
    common(sw, method=False)
    sw.add_argument("--methods", default="fv,mr,mrlt,amr,amrlt")
    sw.add_argument("--levels", default="5,6,7")
    sw.add_argument("--jobs", type=int, default=1, help="concurrent entries (timings become non-comparable)")
    common(sub.add_parser("reference", help="build or load the cached FV reference"), method=False)
    cp = sub.add_parser("compare", help="L1 table between two uniform snapshots")
    cp.add_argument("a")
    cp.add_argument("b")
    return p


def _config_from_args(args) -> RunConfig:
    keys = ("case", "method", "level", "steps", "eps", "eps_rho", "eps_p", "eta", "base_level",
            "detail_norm", "scheme", "out", "snapshot_every", "ref_level")
    over = {k: getattr(args, k, None) for k in keys}
    over.update(parse_pairs(args.set))
    if getattr(args, "no_error", False):
        over["error"] = False
    if args.command in ("sweep", "reference"):
        over.pop("method", None)
        values = {}
        if args.config:
            with open(args.config) as fh:
                values = parse_pairs(fh)
        values.update({k: v for k, v in over.items() if v is not None})
        values.pop("method", None)
        cfg = RunConfig(**values)
        if args.command == "reference":
            cfg.validate()
        return cfg
    return load_config(args.config, over)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "compare":
            return cmd_compare(args, None)
        cfg = _config_from_args(args)
        if args.command == "run":
            return cmd_run(args, cfg)
        if args.command == "sweep":
            return cmd_sweep(args, cfg)
        args.level_given = args.level is not None
        return cmd_reference(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonPhysicalState as exc:
        print(f"numerical failure: {exc} (location {exc.location})", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

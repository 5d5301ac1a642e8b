"""Error norms, compression rates, overhead and run instrumentation."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .grid import LevelMismatch, UniformGrid, coarsen_mean

METHODS = ("FV", "MR", "MRLT", "AMR", "AMRLT")
TASK_GROUPS = ("numerics", "adaptation", "boundary", "transfer", "other")

CSV_COLUMNS = (
    "method", "case", "L", "N_I", "wall_s", "sum_cells", "sum_leaves", "l1_rho",
    "cpu_compression", "memory_compression", "mesh_compression", "perturbation", "overhead",
)
_CSV_TYPES = (str, str, int, int, float, float, float, float,
              float, float, float, float, float)


class UnbalancedTimer(RuntimeError):
    pass


class DivisionDomain(ZeroDivisionError):
    pass


class TaskTimers:
    """Exclusive wall-clock accumulation per task group.

    Entering a group pauses the enclosing one, so the per-group totals never
    double count and always sum to at most the elapsed wall time.
    """

    def __init__(self, groups: Iterable[str] = TASK_GROUPS):
        self.totals = {g: 0.0 for g in groups}
        self._stack: list[list] = []

    def start(self, group: str) -> None:
        now = time.perf_counter()
        if self._stack:
            top = self._stack[-1]
            self.totals[top[0]] += now - top[1]
        self.totals.setdefault(group, 0.0)
        self._stack.append([group, now])

    def stop(self, group: str) -> None:
        if not self._stack or self._stack[-1][0] != group:
            raise UnbalancedTimer(f"stop({group!r}) without matching start")
        now = time.perf_counter()
        g, t0 = self._stack.pop()
        self.totals[g] += now - t0
        if self._stack:
            self._stack[-1][1] = now

    def __call__(self, group: str):
        return _TimerScope(self, group)

    @property
    def balanced(self) -> bool:
        return not self._stack

    def total(self) -> float:
        return sum(self.totals.values())

    def percentages(self) -> dict:
        tot = self.total()
        if tot <= 0.0:
            return {g: 0.0 for g in self.totals}
        return {g: 100.0 * v / tot for g, v in self.totals.items()}


class _TimerScope:
    def __init__(self, timers: TaskTimers, group: str):
        self.timers, self.group = timers, group

    def __enter__(self):
        self.timers.start(self.group)
        return self

    def __exit__(self, *exc):
        self.timers.stop(self.group)
        return False


@dataclass
class RunReport:
    method: str
    case: str
    level: int
    n_steps: int
    scheme: str = ""
    wall_s: float = 0.0
    timers: dict = field(default_factory=dict)
    cells: list = field(default_factory=list)
    leaves: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    n_cells_uniform: int = 0
    l1: dict = field(default_factory=dict)
    fallbacks: int = 0
    max_cfl: float = 0.0
    extras: dict = field(default_factory=dict)

    def record(self, cells: int, leaves: int, weight: float = 1.0) -> None:
        if leaves > cells:
            raise ValueError("leaf count exceeds cell count")
        self.cells.append(int(cells))
        self.leaves.append(int(leaves))
        self.weights.append(float(weight))

    @property
    def sum_cells(self) -> float:
        """Sum over time steps of all hierarchy cells (weighted per step)."""
        return float(np.dot(self.cells, self.weights)) if self.cells else 0.0

    @property
    def sum_leaves(self) -> float:
        return float(np.dot(self.leaves, self.weights)) if self.leaves else 0.0

    @property
    def l1_rho(self) -> float:
        return float(self.l1.get("rho", math.nan))


# ------------------------------------------------------------------ errors

def restrict(A: np.ndarray, dim: int, levels: int) -> np.ndarray:
    for _ in range(levels):
        A = coarsen_mean(A, dim)
    return A


def l1_norm(diff: np.ndarray, dx: float, dim: int) -> np.ndarray:
    """Per-variable sum of |diff| times the cell measure dx**dim."""
    return np.abs(diff).reshape(diff.shape[0], -1).sum(axis=1) * dx**dim


def _ref_at(ref: UniformGrid, level: int) -> np.ndarray:
    if ref.level < level:
        raise LevelMismatch(f"reference level {ref.level} below requested {level}")
    return restrict(ref.interior, ref.dim, ref.level - level)


def l1_uniform(U: np.ndarray, level: int, dx: float, ref: UniformGrid) -> dict:
    dim = U.ndim - 1
    R = _ref_at(ref, level)
    if R.shape != U.shape:
        raise LevelMismatch(f"shape {U.shape} vs reference {R.shape}")
    e = l1_norm(U - R, dx, dim)
    return _named(e, dim)


def _named(e, dim):
    names = ["rho"] + [f"mom{k}" for k in range(dim)] + ["E"]
    return {k: float(v) for k, v in zip(names, e)}


def l1_error_mr(tree, ref: UniformGrid, level: int | None = None) -> dict:
    """L1 error of an MR tree: project leaves to uniform ``level``, compare."""
    level = tree.max_level if level is None else level
    U = tree.to_uniform(level)
    return l1_uniform(U, level, tree.dx(level), ref)


def l1_error_amr(hierarchy, ref: UniformGrid) -> dict:
    """Sum of per-level L1 errors over cells not covered by a finer level."""
    dim = hierarchy.dim
    total = np.zeros(dim + 2)
    for lev in range(hierarchy.num_levels):
        absl = hierarchy.absolute_level(lev)
        R = _ref_at(ref, absl)
        mask = hierarchy.uncovered_mask(lev)
        D = np.abs(hierarchy.level_data(lev) - R)
        total += D[:, mask].sum(axis=1) * hierarchy.dx(lev) ** dim
    return _named(total, dim)


# ------------------------------------------------------------------ rates

def memory_compression(sum_cells: float, n_steps: int, n_cells: int) -> float:
    _nonzero(n_steps=n_steps, n_cells=n_cells)
    return sum_cells / n_steps / n_cells


def mesh_compression(sum_leaves: float, n_steps: int, n_cells: int) -> float:
    _nonzero(n_steps=n_steps, n_cells=n_cells)
    return sum_leaves / n_steps / n_cells


def overhead(cpu_a: float, sum_leaves_a: float, cpu_fv: float, n_steps_fv: int, n_cells: int) -> float:
    """Per-leaf CPU cost relative to the uniform solver, minus one."""
    _nonzero(sum_leaves=sum_leaves_a, cpu_fv=cpu_fv, n_steps=n_steps_fv, n_cells=n_cells)
    gamma_a = cpu_a / sum_leaves_a
    gamma_fv = cpu_fv / (n_steps_fv * n_cells)
    return gamma_a / gamma_fv - 1.0


def perturbation(l1_fv: float, l1_a: float) -> float:
    _nonzero(l1_fv=l1_fv)
    return abs(l1_fv - l1_a) / l1_fv


def convergence_rate(e_coarse: float, e_fine: float) -> float:
    return math.log2(e_coarse / e_fine)


def _nonzero(**kw):
    for k, v in kw.items():
        if not v:
            raise DivisionDomain(f"{k} must be nonzero")


def rates(report_a: RunReport, report_fv: RunReport, n_cells: int | None = None) -> dict:
    """All five dimensionless rates of an adaptive run against its FV baseline."""
    n_cells = n_cells or report_fv.n_cells_uniform or report_a.n_cells_uniform
    if report_a.level != report_fv.level or report_a.n_steps != report_fv.n_steps:
        raise ValueError("adaptive and FV reports must match in level and N_I")
    n = report_a.n_steps
    return {
        "cpu_compression": report_a.wall_s / report_fv.wall_s if report_fv.wall_s else math.nan,
        "memory_compression": memory_compression(report_a.sum_cells, n, n_cells),
        "mesh_compression": mesh_compression(report_a.sum_leaves, n, n_cells),
        "perturbation": perturbation(report_fv.l1_rho, report_a.l1_rho),
        "overhead": overhead(report_a.wall_s, report_a.sum_leaves, report_fv.wall_s, n, n_cells)
        if report_fv.wall_s else math.nan,
    }


def standalone_rates(report: RunReport) -> dict:
    """The rates that need no FV baseline: memory and mesh compression."""
    n, nc = report.n_steps, report.n_cells_uniform
    return {"memory_compression": memory_compression(report.sum_cells, n, nc),
            "mesh_compression": mesh_compression(report.sum_leaves, n, nc)}


# ------------------------------------------------------------------ CSV

def report_row(report: RunReport, rate_values: Mapping | None = None) -> dict:
    row = {
        "method": report.method, "case": report.case, "L": report.level, "N_I": report.n_steps,
        "wall_s": report.wall_s, "sum_cells": report.sum_cells, "sum_leaves": report.sum_leaves,
        "l1_rho": report.l1_rho,
    }
    for k in CSV_COLUMNS[8:]:
        row[k] = "" if rate_values is None else rate_values.get(k, "")
    return row


def write_csv(rows: Iterable[Mapping], fh=None) -> str:
    buf = fh if fh is not None else io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in CSV_COLUMNS})
    return buf.getvalue() if fh is None else ""


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def validate_row(row: Mapping) -> None:
    """Raise ValueError unless ``row`` matches the CSV schema."""
    if tuple(row.keys()) != CSV_COLUMNS:
        raise ValueError(f"columns {tuple(row.keys())} do not match schema")
    for (k, typ) in zip(CSV_COLUMNS, _CSV_TYPES):
        v = row[k]
        if v == "" and k in CSV_COLUMNS[7:]:
            continue
        typ(v)

"""Convergence sweeps, EOCs and CSV output."""
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .estimate import SolveOptions, adaptive_loop, solve_level
from .mesh import read_mesh, refine_uniform
from .problems import ManufacturedProblem, build_example1, build_example2

log = logging.getLogger(__name__)

DEFAULT_UNIFORM_N0 = 8
DEFAULT_ADAPTIVE_N0 = 2


@dataclass
class ConvergenceRow:
    level: int
    Ndof: int
    hMax: float
    nCells: int
    J: float
    errU_L2: float
    errY_H1: float
    errP_L2: float
    errZ_H1: float
    errR_L2: float
    estSt: float
    estAdj: float
    estCt: float
    estTotal: float
    optimIters: int
    wallTime: float


COLUMNS = [f.name for f in fields(ConvergenceRow)]
ERROR_COLUMNS = ("errU_L2", "errY_H1", "errP_L2", "errZ_H1", "errR_L2")


class SweepError(RuntimeError):
    def __init__(self, level, cause, rows):
        self.level = level
        self.rows = rows
        super().__init__(f"sweep failed at level {level}: {cause}")


@dataclass
class SweepConfig:
    example: str = "layer"            # layer | lshape | file:<path>
    scheme: str = "fully"
    element: str = "mini"
    refine: str = "uniform"
    levels: int = 4
    theta: float = 0.5
    alpha: float = None
    a: float = None
    b: float = None
    quad_degree: int = 10
    tol: float = 1e-10
    maxIter: int = 200
    method: str = "newton"
    n0: int = None
    ndof_cap: int = 300_000
    out: str = None

    @classmethod
    def from_mapping(cls, m):
        known = {f.name for f in fields(cls)}
        extra = set(m) - known
        if extra:
            raise ValueError(f"unknown configuration keys: {sorted(extra)}")
        return cls(**dict(m))

    def validate(self):
        if self.scheme not in ("fully", "semi"):
            raise ValueError(f"scheme must be 'fully' or 'semi', got {self.scheme!r}")
        if self.element not in ("mini", "th"):
            raise ValueError(f"element must be 'mini' or 'th', got {self.element!r}")
        if self.refine not in ("uniform", "adaptive"):
            raise ValueError(f"refine must be 'uniform' or 'adaptive', got {self.refine!r}")
        if self.levels < 1:
            raise ValueError("levels must be at least 1")
        if not (self.example in ("layer", "lshape") or self.example.startswith("file:")):
            raise ValueError(f"unknown example {self.example!r}")
        return self


def load_config_file(path):
    """JSON run configuration (keys as in :class:`SweepConfig`)."""
    with open(path) as fh:
        return json.load(fh)


def make_problem(cfg):
    """Problem and initial mesh for a sweep configuration."""
    over = {k: getattr(cfg, k) for k in ("alpha", "a", "b") if getattr(cfg, k) is not None}
    if cfg.example == "layer":
        prob = build_example1(**over)
        n0 = cfg.n0 or (DEFAULT_UNIFORM_N0 if cfg.refine == "uniform" else DEFAULT_ADAPTIVE_N0)
        return prob, prob.initial_mesh(n0)
    if cfg.example == "lshape":
        prob = build_example2(**over)
        return prob, prob.initial_mesh()
    base = build_example2(**over)
    mesh = read_mesh(cfg.example[len("file:"):])
    prob = ManufacturedProblem(name=cfg.example, domain="file", data=base.data)
    return prob, mesh


def _row(rec):
    err = rec.errors or {}
    est = rec.estimators
    rep = rec.result.report
    return ConvergenceRow(
        level=rec.level, Ndof=int(rec.ndof), hMax=float(rec.mesh.h_max),
        nCells=int(rec.mesh.n_cells), J=float(rep.J),
        **{k: float(err.get(k, math.nan)) for k in ERROR_COLUMNS},
        estSt=est["estSt"], estAdj=est["estAdj"], estCt=est["estCt"],
        estTotal=est["estTotal"], optimIters=int(rep.iterations),
        wallTime=float(rec.wall_time))


def _solve_opts(cfg):
    return SolveOptions(scheme=cfg.scheme, element=cfg.element, tol=cfg.tol,
                        maxIter=cfg.maxIter, method=cfg.method,
                        quad_degree=cfg.quad_degree, theta=cfg.theta,
                        maxLevels=cfg.levels, ndof_cap=cfg.ndof_cap)


def run_sweep(config, keep_records=False):
    """Run a uniform or adaptive sweep; write the CSV if ``config.out`` is set.

    Returns the list of rows (and the level records if ``keep_records``).
    """
    cfg = config if isinstance(config, SweepConfig) else SweepConfig.from_mapping(config)
    cfg.validate()
    prob, mesh = make_problem(cfg)
    opts = _solve_opts(cfg)
    rows, records = [], []

    def collect(rec):
        rows.append(_row(rec))
        if keep_records:
            records.append(rec)

    try:
        if cfg.refine == "adaptive":
            adaptive_loop(mesh, prob, opts, callback=collect)
        else:
            for level in range(cfg.levels):
                if level:
                    prev = mesh.n_cells
                    mesh = refine_uniform(mesh, 1)
                    if mesh.n_cells != 4 * prev:
                        raise RuntimeError("uniform refinement did not quadruple the cells")
                collect(solve_level(mesh, prob, opts, level))
    except Exception as exc:
        if cfg.out:
            write_csv(cfg.out, rows, cfg, failure=(len(rows), exc))
        raise SweepError(len(rows), exc, rows) from exc
    if cfg.out:
        write_csv(cfg.out, rows, cfg)
    return (rows, records) if keep_records else rows


def _metadata(cfg):
    meta = asdict(cfg)
    meta.update(initial_control="(a+b)/2", stopping="fixed point and VI residual <= tol",
                estimator=("sqrt(st^2+adj^2+ct^2)" if cfg.scheme == "fully"
                           else "sqrt(st^2+adj^2), no control term"),
                ndof=("2*free velocity + 2*(pressure-1) + cells" if cfg.scheme == "fully"
                      else "2*free velocity + 2*(pressure-1)"))
    return meta


def write_csv(path, rows, cfg, failure=None):
    with open(path, "w", newline="") as fh:
        for k, v in _metadata(cfg).items():
            fh.write(f"# {k}={v}\n")
        if failure is not None:
            fh.write(f"# failed_level={failure[0]} error={failure[1]!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_csv(path):
    """Rows of a sweep CSV as dicts (metadata lines skipped)."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    out = []
    for rec in csv.DictReader(lines):
        out.append({k: (int(v) if k in ("level", "Ndof", "nCells", "optimIters") else float(v))
                    for k, v in rec.items()})
    return out


def _get(row, key):
    return row[key] if isinstance(row, dict) else getattr(row, key)


def compute_eoc(rows, column, h_column="hMax", ndof_column="Ndof"):
    """Per-level EOCs ``log(e_l/e_{l-1}) / log(h_l/h_{l-1})`` and the
    least-squares slope of ``log e`` against ``log Ndof``."""
    if len(rows) < 2:
        raise ValueError("need at least two rows")
    e = np.array([_get(r, column) for r in rows], dtype=float)
    if not np.all(e > 0):
        raise ValueError(f"column {column!r} has nonpositive or missing values")
    h = np.array([_get(r, h_column) for r in rows], dtype=float)
    n = np.array([_get(r, ndof_column) for r in rows], dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        eoc = np.log(e[1:] / e[:-1]) / np.log(h[1:] / h[:-1])
    slope = float(np.polyfit(np.log(n), np.log(e), 1)[0]) if np.ptp(n) > 0 else math.nan
    return [float(x) for x in eoc], slope


def loglog_slope(x, y):
    """Least-squares slope of ``log y`` against ``log x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log slope needs positive data")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def timed(fn, *args, **kw):
    t = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t

"""Test problems: a manufactured interior-layer solution on the unit square
and an L-shaped problem without a known solution."""
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import sympy as sp

from .mesh import build_lshape, build_unit_square
from .optimize import ProblemData
from .pde import ExactFields

LAYER_WIDTH = 0.01
FD_STEP = 1e-4
FD_RTOL = 1e-6


class ManufacturedProblemError(RuntimeError):
    """Closed-form derivatives disagree with finite differences."""


@dataclass
class ManufacturedProblem:
    name: str
    domain: str
    data: ProblemData
    state: ExactFields = None
    adjoint: ExactFields = None
    u_exact: object = None
    extra: dict = field(default_factory=dict)

    @property
    def has_exact(self):
        return self.state is not None

    def initial_mesh(self, n=None):
        if self.domain == "lshape":
            return build_lshape()
        return build_unit_square(n or 2)


_X, _Y = sp.symbols("x y", real=True)


def _scalar(expr):
    fn = sp.lambdify((_X, _Y), expr, modules="numpy", cse=True)

    def ev(x, y):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(fn(x, np.asarray(y, dtype=float)), dtype=float),
                               np.broadcast(x, y).shape).copy()
    return ev


def _vector(exprs):
    comps = [_scalar(e) for e in exprs]

    def ev(x, y):
        return np.stack([c(x, y) for c in comps], axis=-1)
    return ev


def _matrix(rows):
    comps = [[_scalar(e) for e in row] for row in rows]

    def ev(x, y):
        return np.stack([np.stack([c(x, y) for c in row], axis=-1) for row in comps],
                        axis=-2)
    return ev


def _grad(e):
    return [sp.diff(e, _X), sp.diff(e, _Y)]


def _lap(e):
    return sp.diff(e, _X, 2) + sp.diff(e, _Y, 2)


def _fd(fn, x, y, axis, h=FD_STEP):
    dx, dy = (h, 0.0) if axis == 0 else (0.0, h)
    return (-fn(x + 2 * dx, y + 2 * dy) + 8 * fn(x + dx, y + dy)
            - 8 * fn(x - dx, y - dy) + fn(x - 2 * dx, y - 2 * dy)) / (12 * h)


def _check(name, closed, approx):
    scale = max(np.abs(closed).max(), 1e-300)
    err = np.abs(closed - approx).max() / scale
    if not err <= FD_RTOL:
        raise ManufacturedProblemError(
            f"{name}: closed form differs from finite differences by {err:.2e} (relative)")
    return err


def _validate(fields, n_points=100, seed=0):
    """Cross-check every closed-form derivative against finite differences of
    the next lower derivative."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.02, 0.98, size=(n_points, 2))
    x, y = pts[:, 0], pts[:, 1]
    report = {}
    for key in ("y", "z"):
        val, grad, lap = fields[key], fields[key + "_grad"], fields[key + "_lap"]
        fd_grad = np.stack([_fd(val, x, y, 0), _fd(val, x, y, 1)], axis=-1)
        report[key + "_grad"] = _check(key + "_grad", grad(x, y), fd_grad)
        fd_lap = (_fd(lambda s, t: grad(s, t)[..., 0], x, y, 0)
                  + _fd(lambda s, t: grad(s, t)[..., 1], x, y, 1))
        report[key + "_lap"] = _check(key + "_lap", lap(x, y), fd_lap)
        div = np.trace(grad(x, y), axis1=-2, axis2=-1)
        if np.abs(div).max() > 1e-10 * max(np.abs(grad(x, y)).max(), 1.0):
            raise ManufacturedProblemError(f"{key} is not divergence free")
    for key in ("p", "r"):
        val, grad = fields[key], fields[key + "_grad"]
        fd_grad = np.stack([_fd(val, x, y, 0), _fd(val, x, y, 1)], axis=-1)
        report[key + "_grad"] = _check(key + "_grad", grad(x, y), fd_grad)
    return report


def _validate_boundary(fields, n=50):
    """Velocities and their tangential derivatives vanish on the boundary
    (normal derivatives do not)."""
    s = np.linspace(0.0, 1.0, n)
    bx = np.concatenate([s, s, np.zeros(n), np.ones(n)])
    by = np.concatenate([np.zeros(n), np.ones(n), s, s])
    tangent = np.concatenate([np.zeros(2 * n, dtype=int), np.ones(2 * n, dtype=int)])
    for key in ("y", "z"):
        if np.abs(fields[key](bx, by)).max() > 1e-12:
            raise ManufacturedProblemError(f"{key} does not vanish on the boundary")
        g = fields[key + "_grad"](bx, by)
        tang = g[np.arange(len(bx)), :, tangent]
        if np.abs(tang).max() > 1e-10:
            raise ManufacturedProblemError(f"{key} has a tangential derivative on the boundary")


@lru_cache(maxsize=None)
def build_example1(alpha=1.0, a=0.1, b=0.2):
    """Interior-layer manufactured solution on the unit square.

    Velocities are curls of the stream functions ``xi`` and ``varsigma``;
    ``f`` and ``y_omega`` are defined from the strong forms so that the exact
    fields solve the optimality system with ``u = clip(y.z / alpha, a, b)``.
    """
    x, y = _X, _Y
    xi = (x * y * (1 - x) * (1 - y)) ** 2
    vs = xi * sp.atan((x - sp.Rational(1, 2)) / sp.Float(LAYER_WIDTH))
    yb = [50 * sp.diff(xi, y), -50 * sp.diff(xi, x)]
    zb = [50 * sp.diff(vs, y), -50 * sp.diff(vs, x)]
    pb = x * y * (x - 1) * (y - 1) - sp.Rational(1, 36)
    rb = sp.sin(2 * sp.pi * x) * sp.sin(2 * sp.pi * y)

    fields = {
        "y": _vector(yb), "y_grad": _matrix([_grad(c) for c in yb]),
        "y_lap": _vector([_lap(c) for c in yb]),
        "z": _vector(zb), "z_grad": _matrix([_grad(c) for c in zb]),
        "z_lap": _vector([_lap(c) for c in zb]),
        "p": _scalar(pb), "p_grad": _vector(_grad(pb)),
        "r": _scalar(rb), "r_grad": _vector(_grad(rb)),
    }
    report = _validate(fields)
    _validate_boundary(fields)

    def u_exact(x, y):
        dot = (fields["y"](x, y) * fields["z"](x, y)).sum(axis=-1)
        return np.clip(dot / alpha, a, b)

    def f(x, y):
        return (-fields["y_lap"](x, y) + u_exact(x, y)[..., None] * fields["y"](x, y)
                + fields["p_grad"](x, y))

    def y_omega(x, y):
        return (fields["y"](x, y) + fields["z_lap"](x, y)
                - u_exact(x, y)[..., None] * fields["z"](x, y) + fields["r_grad"](x, y))

    data = ProblemData(f=f, y_omega=y_omega, alpha=alpha, a=a, b=b)
    fields["fd_report"] = report
    return ManufacturedProblem(
        name="layer", domain="unit_square", data=data,
        state=ExactFields(fields["y"], fields["y_grad"], fields["p"]),
        adjoint=ExactFields(fields["z"], fields["z_grad"], fields["r"]),
        u_exact=u_exact, extra=fields)


def _ex2_f(x, y):
    return 1000.0 * np.stack([(x + y) ** 4, np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)],
                             axis=-1)


def _ex2_y_omega(x, y):
    return 1000.0 * np.stack([np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y),
                              x * y * (1 - x) * (1 - y)], axis=-1)


def build_example2(alpha=1.0, a=1.0, b=5.0):
    """L-shaped domain ``(-1,1)^2 minus [0,1) x (-1,0]`` with smooth data."""
    return ManufacturedProblem(
        name="lshape", domain="lshape",
        data=ProblemData(f=_ex2_f, y_omega=_ex2_y_omega, alpha=alpha, a=a, b=b))

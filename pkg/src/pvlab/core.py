"""Grids, discrete fields, problem data and the quadrature rules used throughout.

Conventions
-----------
Spatial unknowns live on interior nodes of a uniform tensor grid; the
homogeneous Dirichlet boundary is eliminated.  A space-time field has
``nt + 1`` rows, row ``n`` sitting at ``t_n = tau0 + n k``.

Three time quadratures appear:

* ``l2_norm_spacetime`` uses the trapezoid rule (half weights at both ends).
* State-type quantities (tracking residuals, linearized states) use the
  right-endpoint rule over rows ``1..nt``, which is what implicit Euler
  produces.
* Control-type quantities use the left-endpoint rule over rows ``0..nt-1``.
  Control row ``n`` acts on ``(t_n, t_{n+1}]``; the last row is carried
  only so that controls share the shape of every other field.

With these two measures the discrete adjoint is the exact Riesz
representative of the derivative of the discrete objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Sequence

import numpy as np


class PvlabError(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(PvlabError, ValueError):
    """Objects defined on incompatible grids or with wrong shapes."""


class InvalidArgument(PvlabError, ValueError):
    """An argument outside its admissible range."""


class ModelViolation(PvlabError, ValueError):
    """Problem data violating a structural assumption (e.g. f' < 0)."""


class SolverFailure(PvlabError, RuntimeError):
    """A nonlinear solve did not converge.

    Attributes
    ----------
    step : int
        Time step (1-based) at which Newton failed.
    residual : float
        Max-norm residual at the last iterate.
    """

    def __init__(self, message: str, step: int = -1, residual: float = float("nan")):
        super().__init__(message)
        self.step = step
        self.residual = residual


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.flags.writeable = False
    return a


# --------------------------------------------------------------------------
# Grid
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    """Tensor space-time grid on ``(tau0, T) x box``.

    Parameters
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    nx : int
        Interior nodes per axis.
    nt : int
        Number of time steps.
    domain : sequence of (lo, hi)
        Box sides.  A single pair is replicated over all axes.
    T : float
        Final time.
    tau0 : float
        Initial time of this (possibly windowed) grid.
    """

    dim: int = 1
    nx: int = 49
    nt: int = 100
    domain: tuple = ((0.0, 1.0),)
    T: float = 1.0
    tau0: float = 0.0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise InvalidArgument(f"dim must be 1 or 2, got {self.dim}")
        dom = tuple((float(lo), float(hi)) for lo, hi in self.domain)
        if len(dom) == 1 and self.dim == 2:
            dom = dom * 2
        if len(dom) != self.dim:
            raise InvalidArgument(f"domain has {len(dom)} axes for dim={self.dim}")
        object.__setattr__(self, "domain", dom)
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "tau0", float(self.tau0))
        if int(self.nx) != self.nx or self.nx < 1:
            raise InvalidArgument(f"nx must be a positive integer, got {self.nx}")
        if int(self.nt) != self.nt or self.nt < 1:
            raise InvalidArgument(f"nt must be a positive integer, got {self.nt}")
        if not (self.T > self.tau0 >= 0.0):
            raise InvalidArgument(f"need T > tau0 >= 0, got T={self.T}, tau0={self.tau0}")
        for lo, hi in dom:
            if not hi > lo:
                raise InvalidArgument(f"empty domain side ({lo}, {hi})")

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (self.nx + 1) for lo, hi in self.domain)

    @property
    def h(self) -> float:
        """Spacing along the first axis (all axes in the usual square case)."""
        return self.spacing[0]

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def k(self) -> float:
        return (self.T - self.tau0) / self.nt

    @property
    def n_nodes(self) -> int:
        return self.nx**self.dim

    @property
    def times(self) -> np.ndarray:
        return self.tau0 + self.k * np.arange(self.nt + 1)

    def axis(self, i: int) -> np.ndarray:
        lo, _ = self.domain[i]
        return lo + self.spacing[i] * np.arange(1, self.nx + 1)

    @property
    def coords(self) -> tuple[np.ndarray, ...]:
        """Node coordinates, one flat array per axis (C ordering, last axis fastest)."""
        mesh = np.meshgrid(*[self.axis(i) for i in range(self.dim)], indexing="ij")
        return tuple(m.ravel() for m in mesh)

    @property
    def measure(self) -> float:
        return float(np.prod([hi - lo for lo, hi in self.domain]))

    def same_space(self, other: "Grid") -> bool:
        return self.dim == other.dim and self.nx == other.nx and self.domain == other.domain

    def window(self, j: int) -> "Grid":
        """Grid restricted to ``[t_j, T]``."""
        if not 0 <= j < self.nt:
            raise InvalidArgument(f"window index {j} outside [0, {self.nt})")
        return Grid(self.dim, self.nx, self.nt - j, self.domain, self.T, float(self.times[j]))

    def refined(self, factor: int = 2) -> "Grid":
        """Halve ``h`` and ``k`` (for ``factor=2``): nx -> 2 nx + 1, nt -> 2 nt."""
        return Grid(self.dim, factor * (self.nx + 1) - 1, factor * self.nt,
                    self.domain, self.T, self.tau0)


# --------------------------------------------------------------------------
# Fields
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SpatialField:
    """Function of space only, stored on interior nodes."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = _readonly(self.values).ravel()
        if v.shape != (self.grid.n_nodes,):
            raise StructuralError(
                f"spatial field needs {self.grid.n_nodes} values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("spatial field has non-finite entries")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: Grid) -> "SpatialField":
        return cls(grid, np.zeros(grid.n_nodes))

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[..., np.ndarray]) -> "SpatialField":
        vals = np.broadcast_to(np.asarray(fn(*grid.coords), dtype=float), (grid.n_nodes,))
        return cls(grid, vals)

    def __add__(self, other):
        other = other.values if isinstance(other, SpatialField) else other
        return SpatialField(self.grid, self.values + other)

    def __sub__(self, other):
        other = other.values if isinstance(other, SpatialField) else other
        return SpatialField(self.grid, self.values - other)

    def __mul__(self, c: float):
        return SpatialField(self.grid, c * self.values)

    __rmul__ = __mul__

    def __neg__(self):
        return SpatialField(self.grid, -self.values)


@dataclass(frozen=True, eq=False)
class Field:
    """Space-time function with ``nt + 1`` rows; row 0 sits at ``tau0``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = _readonly(self.values)
        shape = (self.grid.nt + 1, self.grid.n_nodes)
        if v.shape != shape:
            raise StructuralError(f"field needs shape {shape}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("field has non-finite entries")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: Grid) -> "Field":
        return cls(grid, np.zeros((grid.nt + 1, grid.n_nodes)))

    @classmethod
    def full(cls, grid: Grid, c: float) -> "Field":
        return cls(grid, np.full((grid.nt + 1, grid.n_nodes), float(c)))

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[..., np.ndarray]) -> "Field":
        t = grid.times[:, None]
        xs = [c[None, :] for c in grid.coords]
        vals = np.broadcast_to(np.asarray(fn(t, *xs), dtype=float),
                               (grid.nt + 1, grid.n_nodes))
        return cls(grid, vals)

    @classmethod
    def from_controls(cls, grid: Grid, rows: np.ndarray) -> "Field":
        """Build a control field from its ``nt`` active rows.

        The trailing (unused) row repeats the last active row.
        """
        rows = np.asarray(rows, dtype=float).reshape(grid.nt, grid.n_nodes)
        return cls(grid, np.vstack([rows, rows[-1:]]))

    def slice(self, t_index: int) -> SpatialField:
        if not -self.grid.nt - 1 <= t_index <= self.grid.nt:
            raise InvalidArgument(f"time index {t_index} outside grid")
        return SpatialField(self.grid, self.values[t_index])

    def window(self, j: int) -> "Field":
        return Field(self.grid.window(j), self.values[j:])

    @property
    def controls(self) -> np.ndarray:
        """Active control rows ``0..nt-1``."""
        return self.values[:-1]

    def __add__(self, other):
        other = other.values if isinstance(other, Field) else other
        return Field(self.grid, self.values + other)

    def __sub__(self, other):
        other = other.values if isinstance(other, Field) else other
        return Field(self.grid, self.values - other)

    def __mul__(self, c: float):
        return Field(self.grid, c * self.values)

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.grid, -self.values)


def _check_space(a: SpatialField | Field, b: SpatialField | Field) -> None:
    if not a.grid.same_space(b.grid):
        raise StructuralError("fields live on different spatial grids")


def _check_same(a: Field, b: Field) -> None:
    if a.grid != b.grid:
        raise StructuralError("fields live on different space-time grids")


# --------------------------------------------------------------------------
# Nonlinearity catalogue
# --------------------------------------------------------------------------

ZERO, LINEAR, SINE_PLUS_IDENTITY, CUSTOM = "zero", "linear", "sine_plus_identity", "custom"
KIND_CODES = {ZERO: 0, LINEAR: 1, SINE_PLUS_IDENTITY: 2, CUSTOM: 3}


@dataclass(frozen=True, eq=False)
class Nonlinearity:
    """Monotone reaction term ``f`` with its first two derivatives.

    Use the constructors :meth:`zero`, :meth:`linear`,
    :meth:`sine_plus_identity` and :meth:`custom`.

    ``bounds`` holds the declared sup-norms of ``f'`` and ``f''``.
    """

    kind: str
    alpha: float = 0.0
    bounds: tuple[float, float] = (0.0, 0.0)
    funcs: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise InvalidArgument(f"unknown nonlinearity kind {self.kind!r}")
        if self.kind == LINEAR and not self.alpha >= 0:
            raise InvalidArgument(f"linear coefficient must be >= 0, got {self.alpha}")
        if self.kind == CUSTOM and (self.funcs is None or len(self.funcs) != 3):
            raise InvalidArgument("custom nonlinearity needs (f, df, d2f)")
        if not all(np.isfinite(b) and b >= 0 for b in self.bounds):
            raise InvalidArgument(f"declared bounds must be finite, got {self.bounds}")

    @classmethod
    def zero(cls) -> "Nonlinearity":
        return cls(ZERO)

    @classmethod
    def linear(cls, alpha: float = 1.0) -> "Nonlinearity":
        return cls(LINEAR, alpha=float(alpha), bounds=(float(alpha), 0.0))

    @classmethod
    def sine_plus_identity(cls) -> "Nonlinearity":
        return cls(SINE_PLUS_IDENTITY, bounds=(2.0, 1.0))

    @classmethod
    def custom(cls, f, df, d2f, df_bound: float, d2f_bound: float) -> "Nonlinearity":
        return cls(CUSTOM, bounds=(float(df_bound), float(d2f_bound)), funcs=(f, df, d2f))

    @property
    def code(self) -> int:
        return KIND_CODES[self.kind]

    @property
    def is_affine(self) -> bool:
        return self.kind in (ZERO, LINEAR)

    def f(self, y):
        if self.kind == ZERO:
            return np.zeros_like(y)
        if self.kind == LINEAR:
            return self.alpha * y
        if self.kind == SINE_PLUS_IDENTITY:
            return np.sin(y) + y
        return np.asarray(self.funcs[0](y), dtype=float)

    def df(self, y):
        if self.kind == ZERO:
            return np.zeros_like(y)
        if self.kind == LINEAR:
            return np.full_like(y, self.alpha)
        if self.kind == SINE_PLUS_IDENTITY:
            return np.cos(y) + 1.0
        return np.asarray(self.funcs[1](y), dtype=float)

    def d2f(self, y):
        if self.kind in (ZERO, LINEAR):
            return np.zeros_like(y)
        if self.kind == SINE_PLUS_IDENTITY:
            return -np.sin(y)
        return np.asarray(self.funcs[2](y), dtype=float)

    def delta(self, y, w):
        """``f(y + w) - f(y)`` evaluated without cancellation where possible."""
        if self.kind == ZERO:
            return np.zeros_like(w)
        if self.kind == LINEAR:
            return self.alpha * w
        if self.kind == SINE_PLUS_IDENTITY:
            return 2.0 * np.cos(y + 0.5 * w) * np.sin(0.5 * w) + w
        return self.f(y + w) - self.f(y)

    def check_monotone(self, y) -> None:
        """Raise :class:`ModelViolation` if ``f'(y) < 0`` anywhere."""
        d = self.df(np.asarray(y, dtype=float))
        if np.any(d < 0):
            bad = float(np.min(d))
            raise ModelViolation(f"f' takes the negative value {bad:.3e} on a probed state")

    def to_dict(self) -> dict:
        if self.kind == CUSTOM:
            raise InvalidArgument("custom nonlinearities are not serializable")
        out = {"kind": self.kind}
        if self.kind == LINEAR:
            out["alpha"] = self.alpha
        return out


# --------------------------------------------------------------------------
# Problem specification
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Complete data of one tracking problem on ``grid``.

    ``diffusion`` holds the nodal values of the isotropic coefficient
    ``a(x)``; ``y0`` is the initial state at ``grid.tau0``.  ``builder``,
    when present, rebuilds the same problem on another grid (used for
    refinement studies); it must be picklable for parallel runs.
    """

    grid: Grid
    diffusion: SpatialField
    nonlinearity: Nonlinearity
    y0: SpatialField
    yQ: Field
    ua: Field
    ub: Field
    builder: Callable[[Grid], "ProblemSpec"] | None = field(default=None, repr=False)

    def __post_init__(self):
        g = self.grid
        for name in ("diffusion", "y0"):
            if not getattr(self, name).grid.same_space(g):
                raise StructuralError(f"{name} is not on the problem grid")
        for name in ("yQ", "ua", "ub"):
            if getattr(self, name).grid != g:
                raise StructuralError(f"{name} is not on the problem grid")
        if not np.min(self.diffusion.values) > 0:
            raise InvalidArgument("diffusion must be uniformly positive")
        if np.any(self.ua.values > self.ub.values):
            raise InvalidArgument("ua exceeds ub")

    def window(self, j: int, eta: SpatialField | None = None) -> "ProblemSpec":
        """Problem on ``[t_j, T]`` started from ``eta`` (default: ``y0``)."""
        if j == 0 and eta is None:
            return self
        g = self.grid.window(j)
        start = self.y0 if eta is None else eta
        return ProblemSpec(
            g, SpatialField(g, self.diffusion.values), self.nonlinearity,
            SpatialField(g, start.values), Field(g, self.yQ.values[j:]),
            Field(g, self.ua.values[j:]), Field(g, self.ub.values[j:]))

    def with_y0(self, eta: SpatialField) -> "ProblemSpec":
        _check_space(self.y0, eta)
        return ProblemSpec(self.grid, self.diffusion, self.nonlinearity,
                           SpatialField(self.grid, eta.values), self.yQ, self.ua, self.ub)

    def replace(self, **changes) -> "ProblemSpec":
        """Copy with some fields changed; the builder is dropped."""
        data = {n: getattr(self, n) for n in
                ("grid", "diffusion", "nonlinearity", "y0", "yQ", "ua", "ub")}
        data.update(changes)
        return ProblemSpec(**data)

    def refined(self, factor: int = 2) -> "ProblemSpec":
        """Same problem on ``grid.refined(factor)``; needs a builder."""
        if self.builder is None:
            raise InvalidArgument("refinement needs a problem built from closed-form data")
        return self.builder(self.grid.refined(factor))


def default_target(t, x, *rest):
    """Default tracking target ``(1 - t) sin(pi x) + sin(3 pi x) / 2``."""
    val = (1.0 - t) * np.sin(np.pi * x) + 0.5 * np.sin(3.0 * np.pi * x)
    if rest:
        val = val * np.sin(np.pi * rest[0])
    return val


def build_default(grid: Grid, nonlinearity: Nonlinearity | None = None,
                  diffusion: float = 0.1,
                  bounds: tuple[float, float] = (-1.0, 1.0)) -> ProblemSpec:
    """Default data evaluated on ``grid``; in 2-d multiplied by ``sin(pi y)``."""
    nl = nonlinearity if nonlinearity is not None else Nonlinearity.sine_plus_identity()

    def y0(x, *rest):
        return np.sin(np.pi * x) * (np.sin(np.pi * rest[0]) if rest else 1.0)

    return ProblemSpec(
        grid=grid,
        diffusion=SpatialField(grid, np.full(grid.n_nodes, float(diffusion))),
        nonlinearity=nl,
        y0=SpatialField.from_function(grid, y0),
        yQ=Field.from_function(grid, default_target),
        ua=Field.full(grid, bounds[0]),
        ub=Field.full(grid, bounds[1]),
        builder=partial(build_default, nonlinearity=nl, diffusion=diffusion, bounds=bounds),
    )


def default_spec(nx: int = 49, nt: int = 100, dim: int = 1,
                 nonlinearity: Nonlinearity | None = None,
                 diffusion: float = 0.1, T: float = 1.0,
                 bounds: tuple[float, float] = (-1.0, 1.0)) -> ProblemSpec:
    """Desk-scale instance on the unit box with ``a = 0.1`` and ``f = sin y + y``."""
    g = Grid(dim=dim, nx=nx, nt=nt, domain=((0.0, 1.0),) * dim, T=T)
    return build_default(g, nonlinearity, diffusion, bounds)


# --------------------------------------------------------------------------
# Quadrature
# --------------------------------------------------------------------------


def l2_inner_space(a: SpatialField, b: SpatialField) -> float:
    """Rectangle-rule ``L2(Omega)`` inner product ``h^d sum a_i b_i``."""
    _check_space(a, b)
    return a.grid.cell_volume * float(np.dot(a.values, b.values))


def l2_norm_space(a: SpatialField) -> float:
    return float(np.sqrt(l2_inner_space(a, a)))


def _trapezoid_weights(nt: int) -> np.ndarray:
    w = np.ones(nt + 1)
    w[0] = w[-1] = 0.5
    return w


def l2_norm_spacetime(a: Field, p: float = 2.0) -> float:
    """``L^p(Q)`` norm (``p >= 1``): rectangle rule in space, trapezoid in time."""
    if not p >= 1:
        raise InvalidArgument(f"p must be >= 1, got {p}")
    g = a.grid
    w = _trapezoid_weights(g.nt)
    s = g.k * g.cell_volume * float(np.dot(w, np.sum(np.abs(a.values) ** p, axis=1)))
    return s ** (1.0 / p)


def inner_state(a: Field, b: Field) -> float:
    """Right-endpoint space-time inner product over rows ``1..nt``."""
    _check_same(a, b)
    g = a.grid
    return g.k * g.cell_volume * float(np.sum(a.values[1:] * b.values[1:]))


def norm_state(a: Field) -> float:
    return float(np.sqrt(inner_state(a, a)))


def inner_control(a: Field, b: Field) -> float:
    """Left-endpoint space-time inner product over rows ``0..nt-1``."""
    _check_same(a, b)
    g = a.grid
    return g.k * g.cell_volume * float(np.sum(a.values[:-1] * b.values[:-1]))


def norm_control(a: Field, p: float = 2.0) -> float:
    if not p >= 1:
        raise InvalidArgument(f"p must be >= 1, got {p}")
    g = a.grid
    s = g.k * g.cell_volume * float(np.sum(np.abs(a.values[:-1]) ** p))
    return s ** (1.0 / p)


def project_box(u: Field, ua: Field, ub: Field) -> Field:
    """Pointwise clamp of ``u`` into ``[ua, ub]``."""
    _check_same(u, ua)
    _check_same(u, ub)
    if np.any(ua.values > ub.values):
        raise InvalidArgument("ua exceeds ub")
    return Field(u.grid, np.minimum(np.maximum(u.values, ua.values), ub.values))


def is_feasible(u: Field, ua: Field, ub: Field) -> bool:
    return bool(np.all(u.values >= ua.values) and np.all(u.values <= ub.values))


def low_frequency_mode(grid: Grid, orders: Sequence[int]) -> SpatialField:
    """Product of sine eigenfunctions of the Dirichlet Laplacian."""
    vals = np.ones(grid.n_nodes)
    for i, (c, m) in enumerate(zip(grid.coords, orders)):
        lo, hi = grid.domain[i]
        vals = vals * np.sin(m * np.pi * (c - lo) / (hi - lo))
    return SpatialField(grid, vals)

"""Time-stepping solvers for the state, linearized, adjoint and linear equations.

All solvers use the finite-difference operator ``L = -div(a grad .)`` on
interior nodes with face-averaged coefficients.  Control row ``n`` drives
the step ``t_n -> t_{n+1}``.  Implicit Euler reads

    (I + k L) y[n] + k f(y[n]) = y[n-1] + k u[n-1],

and the adjoint below is the exact transpose of its linearization.

One-dimensional problems with a built-in nonlinearity run through compiled
kernels; everything else (two dimensions, custom ``f``) uses scipy sparse
or banded factorizations.  Both paths agree to rounding error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded
from scipy.sparse.linalg import splu

from . import _kernels
from .core import (CUSTOM, Field, Grid, InvalidArgument, ProblemSpec, SolverFailure,
                   SpatialField, StructuralError, l2_norm_spacetime, l2_norm_space,
                   norm_control)


@dataclass(frozen=True)
class SolveOptions:
    """Newton and time-scheme settings.

    ``theta = 1`` is implicit Euler, ``theta = 0.5`` Crank-Nicolson (forward
    solves only).  ``backend`` is ``"auto"``, ``"jit"`` or ``"python"``.
    """

    newton_tol: float = 1e-10
    newton_max_iter: int = 25
    theta: float = 1.0
    backend: str = "auto"

    def __post_init__(self):
        if not self.newton_tol > 0:
            raise InvalidArgument("newton_tol must be positive")
        if self.newton_max_iter < 1:
            raise InvalidArgument("newton_max_iter must be >= 1")
        if self.theta not in (1.0, 0.5):
            raise InvalidArgument("theta must be 1 or 1/2")
        if self.backend not in ("auto", "jit", "python"):
            raise InvalidArgument(f"unknown backend {self.backend!r}")


# Tight Newton tolerance used wherever finite differences or remainders are measured.
PRECISE = SolveOptions(newton_tol=1e-13, newton_max_iter=40)

#: Relative residual target of the increment solver.
INCREMENT_TOL = 1e-14


@dataclass(frozen=True, eq=False)
class StateSolution:
    """Result of :func:`solve_state`.

    ``bound_ratio`` is ``||y||_Q / (||u - f(0)||_Q + ||eta||)``, the constant
    realized by this solve in the a-priori estimate.
    """

    y: Field
    newton_iters: np.ndarray
    residuals: np.ndarray
    bound_ratio: float = field(default=float("nan"))

    def trace(self) -> list[tuple[int, int, float]]:
        return [(n + 1, int(i), float(r))
                for n, (i, r) in enumerate(zip(self.newton_iters, self.residuals))]


# --------------------------------------------------------------------------
# Discrete operator
# --------------------------------------------------------------------------


def _face_coefficients(a: np.ndarray) -> np.ndarray:
    """Face values along one axis; boundary faces copy the adjacent node."""
    faces = np.empty(a.size + 1)
    faces[1:-1] = 0.5 * (a[:-1] + a[1:])
    faces[0] = a[0]
    faces[-1] = a[-1]
    return faces


def tridiagonal_operator(grid: Grid, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal and off-diagonal of ``L`` for ``dim = 1``."""
    h2 = grid.h**2
    faces = _face_coefficients(np.asarray(a, dtype=float))
    Ld = (faces[:-1] + faces[1:]) / h2
    Lo = -faces[1:-1] / h2
    return np.ascontiguousarray(Ld), np.ascontiguousarray(Lo)


def sparse_operator(grid: Grid, a: np.ndarray) -> sp.csr_matrix:
    """``L`` as a sparse matrix for any dimension."""
    a = np.asarray(a, dtype=float)
    if grid.dim == 1:
        Ld, Lo = tridiagonal_operator(grid, a)
        return sp.diags([Lo, Ld, Lo], [-1, 0, 1], format="csr")
    n = grid.nx
    A = a.reshape(n, n)
    hx, hy = grid.spacing
    rows, cols, vals = [], [], []
    idx = np.arange(n * n).reshape(n, n)
    diag = np.zeros((n, n))
    # x-direction faces (axis 0)
    fx = np.empty((n + 1, n))
    fx[1:-1] = 0.5 * (A[:-1] + A[1:])
    fx[0], fx[-1] = A[0], A[-1]
    diag += (fx[:-1] + fx[1:]) / hx**2
    off = -fx[1:-1] / hx**2
    rows += [idx[:-1].ravel(), idx[1:].ravel()]
    cols += [idx[1:].ravel(), idx[:-1].ravel()]
    vals += [off.ravel(), off.ravel()]
    # y-direction faces (axis 1)
    fy = np.empty((n, n + 1))
    fy[:, 1:-1] = 0.5 * (A[:, :-1] + A[:, 1:])
    fy[:, 0], fy[:, -1] = A[:, 0], A[:, -1]
    diag += (fy[:, :-1] + fy[:, 1:]) / hy**2
    off = -fy[:, 1:-1] / hy**2
    rows += [idx[:, :-1].ravel(), idx[:, 1:].ravel()]
    cols += [idx[:, 1:].ravel(), idx[:, :-1].ravel()]
    vals += [off.ravel(), off.ravel()]
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n * n, n * n))


class _Shifted:
    """Solver for ``(I + c L + c diag(d)) x = b`` on the python path."""

    def __init__(self, grid: Grid, a: np.ndarray, c: float):
        self.c = c
        self.dim = grid.dim
        if grid.dim == 1:
            Ld, Lo = tridiagonal_operator(grid, a)
            self.Ld, self.Lo = Ld, Lo
        else:
            self.L = sparse_operator(grid, a).tocsc()
            self.eye = sp.identity(grid.n_nodes, format="csc")

    def solve(self, d: np.ndarray, b: np.ndarray) -> np.ndarray:
        c = self.c
        if self.dim == 1:
            ab = np.zeros((3, b.size))
            ab[0, 1:] = c * self.Lo
            ab[2, :-1] = c * self.Lo
            ab[1] = 1.0 + c * (self.Ld + d)
            return solve_banded((1, 1), ab, b, check_finite=False)
        M = self.eye + c * self.L + sp.diags(c * d, format="csc")
        return splu(M.tocsc()).solve(b)

    def apply_L(self, z: np.ndarray) -> np.ndarray:
        if self.dim == 1:
            out = self.Ld * z
            out[:-1] += self.Lo * z[1:]
            out[1:] += self.Lo * z[:-1]
            return out
        return self.L @ z


def _use_jit(spec: ProblemSpec, opts: SolveOptions) -> bool:
    ok = spec.grid.dim == 1 and spec.nonlinearity.kind != CUSTOM
    if opts.backend == "jit" and not ok:
        raise InvalidArgument("compiled kernels need dim = 1 and a built-in nonlinearity")
    return ok and opts.backend != "python"


def _check_field(spec: ProblemSpec, f: Field, name: str) -> None:
    if f.grid != spec.grid:
        raise StructuralError(f"{name} is not on the problem grid")


def _check_spatial(spec: ProblemSpec, f: SpatialField, name: str) -> None:
    if not f.grid.same_space(spec.grid):
        raise StructuralError(f"{name} is not on the problem's spatial grid")


# --------------------------------------------------------------------------
# State equation
# --------------------------------------------------------------------------


def solve_state(spec: ProblemSpec, u: Field, eta: SpatialField | None = None,
                opts: SolveOptions | None = None) -> StateSolution:
    """Solve the semilinear state equation from ``eta`` at ``tau0``.

    Parameters
    ----------
    spec : ProblemSpec
    u : Field
        Control; row ``n`` acts on ``(t_n, t_{n+1}]``.
    eta : SpatialField, optional
        Initial state, defaults to ``spec.y0``.
    opts : SolveOptions, optional

    Raises
    ------
    SolverFailure
        Newton did not reach ``newton_tol`` within ``newton_max_iter``.
    ModelViolation
        A custom ``f`` has negative slope on a computed state.
    """
    opts = opts or SolveOptions()
    eta = spec.y0 if eta is None else eta
    _check_field(spec, u, "control")
    _check_spatial(spec, eta, "initial state")
    g = spec.grid
    nl = spec.nonlinearity
    y = np.empty((g.nt + 1, g.n_nodes))
    iters = np.zeros(g.nt, dtype=np.int64)
    res = np.zeros(g.nt)
    uv = np.ascontiguousarray(u.values)

    if _use_jit(spec, opts):
        Ld, Lo = tridiagonal_operator(g, spec.diffusion.values)
        bad = _kernels.state(Ld, Lo, uv, np.ascontiguousarray(eta.values), g.k, opts.theta,
                             nl.code, nl.alpha, opts.newton_tol, opts.newton_max_iter,
                             y, iters, res)
        if bad:
            raise SolverFailure(f"Newton failed at step {bad} with residual {res[bad - 1]:.3e}",
                                step=int(bad), residual=float(res[bad - 1]))
    else:
        tk = opts.theta * g.k
        ek = (1.0 - opts.theta) * g.k
        op = _Shifted(g, spec.diffusion.values, tk)
        y[0] = eta.values
        for n in range(1, g.nt + 1):
            prev = y[n - 1]
            rhs = prev + g.k * uv[n - 1]
            if ek:
                rhs = rhs - ek * (op.apply_L(prev) + nl.f(prev))
            z = prev.copy()
            it = 0
            while True:
                r = z + tk * (op.apply_L(z) + nl.f(z)) - rhs
                rn = float(np.max(np.abs(r)))
                if rn <= opts.newton_tol:
                    break
                if it >= opts.newton_max_iter:
                    raise SolverFailure(f"Newton failed at step {n} with residual {rn:.3e}",
                                        step=n, residual=rn)
                z = z - op.solve(nl.df(z), r)
                it += 1
            if nl.kind == CUSTOM:
                nl.check_monotone(z)
            iters[n - 1], res[n - 1] = it, rn
            y[n] = z

    yf = Field(g, y)
    forcing = norm_control(Field(g, uv - nl.f(np.zeros(1))[0]))
    denom = forcing + l2_norm_space(eta)
    ratio = l2_norm_spacetime(yf) / denom if denom > 0 else 0.0
    return StateSolution(yf, iters, res, ratio)


def solve_increment(spec: ProblemSpec, ybar: Field, dv: Field,
                    dzeta: SpatialField | None = None,
                    opts: SolveOptions | None = None) -> Field:
    """Exact state difference ``y(u + dv, eta + dzeta) - y(u, eta)``.

    ``ybar`` must be the implicit-Euler state for ``(u, eta)``.  The nonlinear
    increment equation is solved directly, which avoids the cancellation of
    subtracting two nearly equal states.
    """
    opts = opts or PRECISE
    _check_field(spec, ybar, "ybar")
    _check_field(spec, dv, "dv")
    g = spec.grid
    nl = spec.nonlinearity
    w0 = np.zeros(g.n_nodes) if dzeta is None else np.asarray(dzeta.values)
    w = np.empty((g.nt + 1, g.n_nodes))
    yb = np.ascontiguousarray(ybar.values)
    if _use_jit(spec, opts):
        Ld, Lo = tridiagonal_operator(g, spec.diffusion.values)
        bad = _kernels.increment(Ld, Lo, yb, np.ascontiguousarray(dv.values),
                                 np.ascontiguousarray(w0), g.k, nl.code, nl.alpha,
                                 INCREMENT_TOL, opts.newton_max_iter, w)
        if bad:
            raise SolverFailure(f"increment Newton failed at step {bad}", step=int(bad))
        return Field(g, w)
    op = _Shifted(g, spec.diffusion.values, g.k)
    w[0] = w0
    for n in range(1, g.nt + 1):
        rhs = w[n - 1] + g.k * dv.values[n - 1]
        scale = float(np.max(np.abs(rhs)))
        z = w[n - 1].copy()
        for it in range(opts.newton_max_iter + 1):
            lz = g.k * op.apply_L(z)
            r = z + lz + g.k * nl.delta(yb[n], z) - rhs
            rn = float(np.max(np.abs(r)))
            size = max(scale, float(np.max(np.abs(z) + np.abs(lz))))
            if rn <= INCREMENT_TOL * size or rn == 0.0:
                break
            if it == opts.newton_max_iter:
                raise SolverFailure(f"increment Newton failed at step {n}", step=n, residual=rn)
            z = z - op.solve(nl.df(yb[n] + z), r)
        w[n] = z
    return Field(g, w)


# --------------------------------------------------------------------------
# Linear problems
# --------------------------------------------------------------------------


def _linear_forward(grid: Grid, a: np.ndarray, coef: np.ndarray, src: np.ndarray,
                    z0: np.ndarray, jit: bool) -> np.ndarray:
    z = np.empty((grid.nt + 1, grid.n_nodes))
    if jit:
        Ld, Lo = tridiagonal_operator(grid, a)
        _kernels.linear_forward(Ld, Lo, np.ascontiguousarray(coef), np.ascontiguousarray(src),
                                np.ascontiguousarray(z0, dtype=float), grid.k, z)
        return z
    op = _Shifted(grid, a, grid.k)
    z[0] = z0
    for n in range(1, grid.nt + 1):
        z[n] = op.solve(coef[n], z[n - 1] + grid.k * src[n - 1])
    return z


def _linear_backward(grid: Grid, a: np.ndarray, coef: np.ndarray, src: np.ndarray,
                     jit: bool) -> np.ndarray:
    p = np.empty((grid.nt + 1, grid.n_nodes))
    if jit:
        Ld, Lo = tridiagonal_operator(grid, a)
        _kernels.linear_backward(Ld, Lo, np.ascontiguousarray(coef),
                                 np.ascontiguousarray(src), grid.k, p)
        return p
    op = _Shifted(grid, a, grid.k)
    p[grid.nt] = 0.0
    for n in range(grid.nt, 0, -1):
        p[n - 1] = op.solve(coef[n], p[n] + grid.k * src[n])
    return p


def solve_linearized(spec: ProblemSpec, ybar: Field, v: Field,
                     zeta: SpatialField | None = None,
                     opts: SolveOptions | None = None) -> Field:
    """Linearization at ``ybar``: ``z_t + L z + f'(ybar) z = v``, ``z(tau0) = zeta``."""
    opts = opts or SolveOptions()
    _check_field(spec, ybar, "ybar")
    _check_field(spec, v, "v")
    z0 = np.zeros(spec.grid.n_nodes) if zeta is None else zeta.values
    if zeta is not None:
        _check_spatial(spec, zeta, "zeta")
    coef = spec.nonlinearity.df(ybar.values)
    z = _linear_forward(spec.grid, spec.diffusion.values, coef, v.values, z0,
                        _use_jit(spec, opts))
    return Field(spec.grid, z)


def solve_adjoint(spec: ProblemSpec, ybar: Field, opts: SolveOptions | None = None) -> Field:
    """Backward adjoint with source ``ybar - yQ`` and ``p(T) = 0``.

    The scheme is the transpose of :func:`solve_linearized`, so that
    ``<ybar - yQ, z>_state = <p, v>_control + <p(tau0), zeta>`` holds to
    rounding error.
    """
    opts = opts or SolveOptions()
    _check_field(spec, ybar, "ybar")
    coef = spec.nonlinearity.df(ybar.values)
    src = ybar.values - spec.yQ.values
    p = _linear_backward(spec.grid, spec.diffusion.values, coef, src, _use_jit(spec, opts))
    return Field(spec.grid, p)


def solve_linear_parabolic(grid: Grid, a, alpha: Field, rho: Field,
                           backend: str = "auto") -> Field:
    """Solve ``z_t + L z + alpha z = rho`` with zero initial and boundary data.

    ``a`` is a :class:`SpatialField`, an array of nodal values or a scalar.
    ``alpha`` is taken at the new time level, ``rho`` as a control.
    """
    if alpha.grid != grid or rho.grid != grid:
        raise StructuralError("alpha and rho must live on the given grid")
    if np.any(alpha.values < 0):
        raise InvalidArgument("alpha must be nonnegative")
    if isinstance(a, SpatialField):
        av = a.values
    else:
        av = np.broadcast_to(np.asarray(a, dtype=float), (grid.n_nodes,))
    if not np.min(av) > 0:
        raise InvalidArgument("diffusion must be uniformly positive")
    jit = grid.dim == 1 and backend != "python"
    z = _linear_forward(grid, np.ascontiguousarray(av), alpha.values, rho.values,
                        np.zeros(grid.n_nodes), jit)
    return Field(grid, z)

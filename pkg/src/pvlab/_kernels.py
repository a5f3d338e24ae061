"""Compiled one-dimensional time-stepping kernels.

The tridiagonal matrices all have the form ``I + c (L + diag(d))`` with the
symmetric finite-difference operator ``L`` given by its diagonal ``Ld`` and
off-diagonal ``Lo``.  Nonlinearities are selected by integer code:
0 zero, 1 linear, 2 sine plus identity.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _f(code, alpha, y):
    if code == 0:
        return 0.0
    if code == 1:
        return alpha * y
    return np.sin(y) + y


@njit(cache=True)
def _df(code, alpha, y):
    if code == 0:
        return 0.0
    if code == 1:
        return alpha
    return np.cos(y) + 1.0


@njit(cache=True)
def _delta(code, alpha, y, w):
    if code == 0:
        return 0.0
    if code == 1:
        return alpha * w
    return 2.0 * np.cos(y + 0.5 * w) * np.sin(0.5 * w) + w


@njit(cache=True)
def thomas(off, diag, rhs, out, cp, dp):
    """Solve a symmetric tridiagonal system with off-diagonal ``off`` (no pivoting)."""
    n = diag.size
    if n == 1:
        out[0] = rhs[0] / diag[0]
        return
    cp[0] = off[0] / diag[0]
    dp[0] = rhs[0] / diag[0]
    for i in range(1, n):
        m = diag[i] - off[i - 1] * cp[i - 1]
        if i < n - 1:
            cp[i] = off[i] / m
        dp[i] = (rhs[i] - off[i - 1] * dp[i - 1]) / m
    out[n - 1] = dp[n - 1]
    for i in range(n - 2, -1, -1):
        out[i] = dp[i] - cp[i] * out[i + 1]


@njit(cache=True)
def _lmul(Ld, Lo, z, out):
    n = z.size
    for i in range(n):
        out[i] = Ld[i] * z[i]
    for i in range(n - 1):
        out[i] += Lo[i] * z[i + 1]
        out[i + 1] += Lo[i] * z[i]


@njit(cache=True)
def state(Ld, Lo, u, eta, k, theta, code, alpha, tol, maxit, y, iters, res):
    """Theta-scheme with Newton per step; returns failing step or 0."""
    n = eta.size
    nt = y.shape[0] - 1
    tk = theta * k
    ek = (1.0 - theta) * k
    off = tk * Lo
    rhs = np.empty(n)
    r = np.empty(n)
    lz = np.empty(n)
    diag = np.empty(n)
    dz = np.empty(n)
    cp = np.empty(n)
    dp = np.empty(n)
    z = np.empty(n)
    for i in range(n):
        y[0, i] = eta[i]
    for step in range(1, nt + 1):
        if ek != 0.0:
            _lmul(Ld, Lo, y[step - 1], lz)
        for i in range(n):
            yp = y[step - 1, i]
            rhs[i] = yp + k * u[step - 1, i]
            if ek != 0.0:
                rhs[i] -= ek * (lz[i] + _f(code, alpha, yp))
            z[i] = yp
        it = 0
        while True:
            _lmul(Ld, Lo, z, lz)
            rn = 0.0
            for i in range(n):
                r[i] = z[i] + tk * (lz[i] + _f(code, alpha, z[i])) - rhs[i]
                if abs(r[i]) > rn:
                    rn = abs(r[i])
            if rn <= tol:
                break
            if it >= maxit:
                iters[step - 1] = it
                res[step - 1] = rn
                return step
            for i in range(n):
                diag[i] = 1.0 + tk * (Ld[i] + _df(code, alpha, z[i]))
            thomas(off, diag, r, dz, cp, dp)
            for i in range(n):
                z[i] -= dz[i]
            it += 1
        iters[step - 1] = it
        res[step - 1] = rn
        for i in range(n):
            y[step, i] = z[i]
    return 0


@njit(cache=True)
def increment(Ld, Lo, ybar, dv, w0, k, code, alpha, tol, maxit, w):
    """Perturbation ``w = y(u + dv) - ybar`` of an implicit-Euler state.

    The reaction difference is evaluated in cancellation-free form, so ``w``
    keeps full relative accuracy even when it is tiny.  The residual is
    measured relative to the largest term of the step equation.  Returns
    failing step or 0.
    """
    n = w0.size
    nt = w.shape[0] - 1
    off = k * Lo
    rhs = np.empty(n)
    r = np.empty(n)
    lz = np.empty(n)
    diag = np.empty(n)
    dz = np.empty(n)
    cp = np.empty(n)
    dp = np.empty(n)
    z = np.empty(n)
    for i in range(n):
        w[0, i] = w0[i]
    for step in range(1, nt + 1):
        scale = 0.0
        for i in range(n):
            rhs[i] = w[step - 1, i] + k * dv[step - 1, i]
            z[i] = w[step - 1, i]
            if abs(rhs[i]) > scale:
                scale = abs(rhs[i])
        it = 0
        while True:
            _lmul(Ld, Lo, z, lz)
            rn = 0.0
            size = scale
            for i in range(n):
                r[i] = z[i] + k * (lz[i] + _delta(code, alpha, ybar[step, i], z[i])) - rhs[i]
                if abs(r[i]) > rn:
                    rn = abs(r[i])
                if abs(z[i]) + k * abs(lz[i]) > size:
                    size = abs(z[i]) + k * abs(lz[i])
            if rn <= tol * size or rn == 0.0:
                break
            if it >= maxit:
                return step
            for i in range(n):
                diag[i] = 1.0 + k * (Ld[i] + _df(code, alpha, ybar[step, i] + z[i]))
            thomas(off, diag, r, dz, cp, dp)
            for i in range(n):
                z[i] -= dz[i]
            it += 1
        for i in range(n):
            w[step, i] = z[i]
    return 0


@njit(cache=True)
def linear_forward(Ld, Lo, coef, src, z0, k, z):
    """``(I + kL + k diag(coef[n])) z[n] = z[n-1] + k src[n-1]``."""
    n = z0.size
    nt = z.shape[0] - 1
    off = k * Lo
    rhs = np.empty(n)
    diag = np.empty(n)
    cp = np.empty(n)
    dp = np.empty(n)
    for i in range(n):
        z[0, i] = z0[i]
    for step in range(1, nt + 1):
        for i in range(n):
            rhs[i] = z[step - 1, i] + k * src[step - 1, i]
            diag[i] = 1.0 + k * (Ld[i] + coef[step, i])
        thomas(off, diag, rhs, z[step], cp, dp)


@njit(cache=True)
def linear_backward(Ld, Lo, coef, src, k, p):
    """Transpose of :func:`linear_forward` driven by ``src`` rows ``1..nt``."""
    n = p.shape[1]
    nt = p.shape[0] - 1
    off = k * Lo
    rhs = np.empty(n)
    diag = np.empty(n)
    cp = np.empty(n)
    dp = np.empty(n)
    for i in range(n):
        p[nt, i] = 0.0
    for step in range(nt, 0, -1):
        for i in range(n):
            rhs[i] = p[step, i] + k * src[step, i]
            diag[i] = 1.0 + k * (Ld[i] + coef[step, i])
        thomas(off, diag, rhs, p[step - 1], cp, dp)

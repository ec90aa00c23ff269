"""Pure-numpy reference kernels.

These mirror the compiled kernels in ``_ext.pyx`` one-for-one (same
signatures, same arithmetic up to floating-point reassociation) and also carry
the dimension-generic versions used on 2D grids and tensor grids.

Array conventions: spatial axes come first and a trailing batch axis ``k``
holds independent right-hand sides. Drift arrays carry a trailing component
axis of length ``dim``.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack


# ---------------------------------------------------------------------------
# tridiagonal solves


class TridiagFactor:
    """LU factors of a tridiagonal matrix (LAPACK gttrf)."""

    __slots__ = ("n", "dl", "d", "du", "du2", "ipiv")

    def __init__(self, lower, diag, upper):
        dl, d, du, du2, ipiv, info = lapack.dgttrf(
            np.asarray(lower, float), np.asarray(diag, float), np.asarray(upper, float)
        )
        if info != 0:
            raise np.linalg.LinAlgError(f"singular tridiagonal matrix (info={info})")
        self.n = len(diag)
        self.dl, self.d, self.du, self.du2, self.ipiv = dl, d, du, du2, ipiv


def tridiag_factor(lower, diag, upper) -> TridiagFactor:
    return TridiagFactor(lower, diag, upper)


def tridiag_solve(factor: TridiagFactor, rhs: np.ndarray) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=float)
    b = rhs.reshape(factor.n, -1)
    x, info = lapack.dgttrs(factor.dl, factor.d, factor.du, factor.du2, factor.ipiv, b)
    if info != 0:
        raise np.linalg.LinAlgError(f"tridiagonal solve failed (info={info})")
    return x.reshape(rhs.shape)


# ---------------------------------------------------------------------------
# dimension-generic operators


def diffuse(values: np.ndarray, factor, ndim: int, solve=None) -> np.ndarray:
    """Apply the Lie-split product of axis-wise (I - dt*Lap)^{-1}."""
    solve = tridiag_solve if solve is None else solve
    out = values
    for ax in range(ndim):
        moved = np.moveaxis(out, ax, 0)
        shape = moved.shape
        solved = solve(factor, moved.reshape(shape[0], -1)).reshape(shape)
        out = np.moveaxis(solved, 0, ax)
    return np.ascontiguousarray(out)


def _shift_diffs(psi: np.ndarray, ax: int, dx: float):
    dplus = np.zeros_like(psi)
    dminus = np.zeros_like(psi)
    n = psi.shape[ax]
    hi = [slice(None)] * psi.ndim
    lo = [slice(None)] * psi.ndim
    hi[ax] = slice(1, n)
    lo[ax] = slice(0, n - 1)
    diff = (psi[tuple(hi)] - psi[tuple(lo)]) / dx
    dplus[tuple(lo)] = diff
    dminus[tuple(hi)] = diff
    return dplus, dminus


def transport_apply(psi: np.ndarray, alpha: np.ndarray, dx: float, dt: float) -> np.ndarray:
    """(I - dt*B) psi with upwind differences; psi (*space, k), alpha (*space, d)."""
    ndim = alpha.shape[-1]
    out = psi.copy()
    for ax in range(ndim):
        a = alpha[..., ax][..., None]
        dplus, dminus = _shift_diffs(psi, ax, dx)
        out += dt * (np.maximum(a, 0.0) * dplus - np.maximum(-a, 0.0) * dminus)
    return out


def transport_adjoint(
    y: np.ndarray, alpha: np.ndarray, weights: np.ndarray, dx: float, dt: float
) -> np.ndarray:
    """Weighted adjoint of ``transport_apply``: conservative upwind mass transfer."""
    ndim = alpha.shape[-1]
    w = weights[..., None]
    mass = w * y
    new = mass.copy()
    for ax in range(ndim):
        a = alpha[..., ax][..., None]
        n = mass.shape[ax]
        first = [slice(None)] * mass.ndim
        last = [slice(None)] * mass.ndim
        head = [slice(None)] * mass.ndim
        tail = [slice(None)] * mass.ndim
        first[ax] = 0
        last[ax] = n - 1
        head[ax] = slice(0, n - 1)
        tail[ax] = slice(1, n)
        out_r = (dt / dx) * np.maximum(a, 0.0) * mass
        out_l = (dt / dx) * np.maximum(-a, 0.0) * mass
        out_r[tuple(last)] = 0.0
        out_l[tuple(first)] = 0.0
        new -= out_r + out_l
        new[tuple(tail)] += out_r[tuple(head)]
        new[tuple(head)] += out_l[tuple(tail)]
    return new / w


def forward_march_nd(rho0, alpha, weights, dx, dt, factor, source=None, solve=None):
    """rho^{n+1} = (I - dt B_{n+1})^* [ (I - dt Lap)^{-1} rho^n + dt s^{n+1} ]."""
    nt = alpha.shape[0] - 1
    ndim = alpha.shape[-1]
    out = np.empty((nt + 1,) + rho0.shape)
    out[0] = rho0
    for n in range(nt):
        y = diffuse(out[n], factor, ndim, solve)
        if source is not None:
            y = y + dt * source[n + 1]
        out[n + 1] = transport_adjoint(y, alpha[n + 1], weights, dx, dt)
    return out


def backward_march_nd(terminal, alpha, dx, dt, factor, source=None, solve=None):
    """psi^n = (I - dt Lap)^{-1} (I - dt B_{n+1}) psi^{n+1} + dt s^n."""
    nt = alpha.shape[0] - 1
    ndim = alpha.shape[-1]
    out = np.empty((nt + 1,) + terminal.shape)
    out[nt] = terminal
    for n in range(nt - 1, -1, -1):
        out[n] = diffuse(transport_apply(out[n + 1], alpha[n + 1], dx, dt), factor, ndim, solve)
        if source is not None:
            out[n] += dt * source[n]
    return out


# ---------------------------------------------------------------------------
# 1D kernels with the compiled signatures


def forward_march(rho0, alpha, weights, dx, dt, factor, source=None):
    """1D forward linear march; rho0 (nx, k), alpha (nt+1, nx)."""
    return forward_march_nd(
        np.asarray(rho0, float), np.asarray(alpha, float)[..., None], weights, dx, dt, factor, source
    )


def backward_march(terminal, alpha, dx, dt, factor, source=None):
    """1D backward linear march; terminal (nx, k), alpha (nt+1, nx)."""
    return backward_march_nd(
        np.asarray(terminal, float), np.asarray(alpha, float)[..., None], dx, dt, factor, source
    )


def quantile_wasserstein(sa, qa0, qa1, sb, qb0, qb1, p: int) -> float:
    """W_p^p between two piecewise-linear quantile functions on [0, 1].

    Piece ``k`` of a quantile function is linear from ``q0[k]`` at ``s[k]`` to
    ``q1[k]`` at ``s[k+1]``; atoms are pieces with ``q0 == q1``.
    """
    sa = np.asarray(sa, float)
    sb = np.asarray(sb, float)
    knots = np.union1d(sa, sb)
    knots = knots[(knots >= 0.0) & (knots <= 1.0)]
    lo, hi = knots[:-1], knots[1:]
    keep = hi > lo
    lo, hi = lo[keep], hi[keep]
    # evaluate both ends of every merged interval on the piece covering it;
    # lo is itself a knot, so the last breakpoint <= lo starts a piece of positive length
    ka = np.clip(np.searchsorted(sa, lo, side="right") - 1, 0, len(qa0) - 1)
    kb = np.clip(np.searchsorted(sb, lo, side="right") - 1, 0, len(qb0) - 1)

    def ends(s, q0, q1, k):
        span = s[k + 1] - s[k]
        slope = (q1[k] - q0[k]) / span
        return q0[k] + slope * (lo - s[k]), q0[k] + slope * (hi - s[k])

    a0, a1 = ends(sa, np.asarray(qa0, float), np.asarray(qa1, float), ka)
    b0, b1 = ends(sb, np.asarray(qb0, float), np.asarray(qb1, float), kb)
    f0 = a0 - b0
    f1 = a1 - b1
    length = hi - lo
    if p == 1:
        same = f0 * f1 >= 0.0
        tot = np.abs(f0) + np.abs(f1)
        cross = np.where(tot > 0, (f0 * f0 + f1 * f1) / (2.0 * np.where(tot > 0, tot, 1.0)), 0.0)
        vals = np.where(same, 0.5 * tot, cross)
        return float(np.sum(length * vals))
    if p == 2:
        return float(np.sum(length * (f0 * f0 + f0 * f1 + f1 * f1) / 3.0))
    raise ValueError("p must be 1 or 2")


def particle_march(x0, noise, alpha, x_min, dx, dt, halfwidth):
    """Split-step Euler-Maruyama on [-R, R] with reflection.

    Each step adds the Brownian increment first and then the drift of the
    next time slice evaluated at the diffused position, mirroring the
    diffusion-then-transport order of the density scheme.
    """
    nt = noise.shape[0]
    nx = alpha.shape[1]
    x = np.array(x0, dtype=float)
    traj = np.empty((nt + 1, x.size))
    traj[0] = x
    exits = 0
    amp = np.sqrt(2.0 * dt)
    for n in range(nt):
        x = x + amp * noise[n]
        x, e = _reflect(x, halfwidth)
        exits += e
        pos = (x - x_min) / dx
        i = np.clip(np.floor(pos).astype(np.int64), 0, nx - 2)
        frac = pos - i
        a = alpha[n + 1, i] * (1.0 - frac) + alpha[n + 1, i + 1] * frac
        x = x + dt * a
        x, e = _reflect(x, halfwidth)
        exits += e
        traj[n + 1] = x
    return traj, exits


def _reflect(x, R):
    hi = x > R
    lo = x < -R
    count = int(np.count_nonzero(hi) + np.count_nonzero(lo))
    if count:
        x = np.where(hi, 2.0 * R - x, x)
        x = np.where(lo, -2.0 * R - x, x)
    return x, count

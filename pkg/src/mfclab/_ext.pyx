# cython: language_level=3
"""Compiled 1D kernels; see ``_kernels_py`` for the reference semantics."""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, floor, sqrt

cnp.import_array()


cdef class TridiagFactor:
    """Thomas-algorithm factors of a diagonally dominant tridiagonal matrix."""

    cdef public int n
    cdef double[::1] lower
    cdef double[::1] cprime
    cdef double[::1] inv_denom

    def __init__(self, lower, diag, upper):
        cdef const double[::1] a = np.ascontiguousarray(lower, dtype=np.float64)
        cdef const double[::1] b = np.ascontiguousarray(diag, dtype=np.float64)
        cdef const double[::1] c = np.ascontiguousarray(upper, dtype=np.float64)
        cdef int n = b.shape[0]
        cdef int i
        cdef double den
        self.n = n
        self.lower = np.array(a, dtype=np.float64)
        self.cprime = np.zeros(n, dtype=np.float64)
        self.inv_denom = np.zeros(n, dtype=np.float64)
        den = b[0]
        if den == 0.0:
            raise np.linalg.LinAlgError("singular tridiagonal matrix")
        self.inv_denom[0] = 1.0 / den
        if n > 1:
            self.cprime[0] = c[0] / den
        for i in range(1, n):
            den = b[i] - a[i - 1] * self.cprime[i - 1]
            if den == 0.0:
                raise np.linalg.LinAlgError("singular tridiagonal matrix")
            self.inv_denom[i] = 1.0 / den
            if i < n - 1:
                self.cprime[i] = c[i] / den

    cdef void solve_cols(self, double[:, ::1] x) noexcept nogil:
        # in-place solve on every column of x (shape n x k)
        cdef int n = self.n
        cdef int k = x.shape[1]
        cdef int i, j
        for j in range(k):
            x[0, j] = x[0, j] * self.inv_denom[0]
        for i in range(1, n):
            for j in range(k):
                x[i, j] = (x[i, j] - self.lower[i - 1] * x[i - 1, j]) * self.inv_denom[i]
        for i in range(n - 2, -1, -1):
            for j in range(k):
                x[i, j] = x[i, j] - self.cprime[i] * x[i + 1, j]


def tridiag_factor(lower, diag, upper):
    return TridiagFactor(lower, diag, upper)


def tridiag_solve(TridiagFactor factor, rhs):
    arr = np.array(rhs, dtype=np.float64, order="C", copy=True)
    shape = arr.shape
    cdef double[:, ::1] x = arr.reshape(factor.n, -1)
    factor.solve_cols(x)
    return np.asarray(x).reshape(shape)


cdef void _transport_apply(double[:, ::1] psi, const double[::1] a, double[:, ::1] out,
                           double dx, double dt) noexcept nogil:
    cdef int n = psi.shape[0]
    cdef int k = psi.shape[1]
    cdef int i, j
    cdef double ap, am, r = dt / dx
    for i in range(n):
        ap = a[i] if a[i] > 0.0 else 0.0
        am = -a[i] if a[i] < 0.0 else 0.0
        for j in range(k):
            out[i, j] = psi[i, j]
            if i < n - 1:
                out[i, j] += r * ap * (psi[i + 1, j] - psi[i, j])
            if i > 0:
                out[i, j] -= r * am * (psi[i, j] - psi[i - 1, j])


cdef void _transport_adjoint(double[:, ::1] y, const double[::1] a, const double[::1] w,
                             double[:, ::1] out, double dx, double dt) noexcept nogil:
    cdef int n = y.shape[0]
    cdef int k = y.shape[1]
    cdef int i, j
    cdef double ap, am, m, r = dt / dx
    for i in range(n):
        for j in range(k):
            out[i, j] = 0.0
    for i in range(n):
        ap = a[i] if (a[i] > 0.0 and i < n - 1) else 0.0
        am = -a[i] if (a[i] < 0.0 and i > 0) else 0.0
        for j in range(k):
            m = w[i] * y[i, j]
            out[i, j] += m - r * (ap + am) * m
            if ap > 0.0:
                out[i + 1, j] += r * ap * m
            if am > 0.0:
                out[i - 1, j] += r * am * m
    for i in range(n):
        for j in range(k):
            out[i, j] = out[i, j] / w[i]


def forward_march(rho0, alpha, weights, double dx, double dt, TridiagFactor factor, source=None):
    """1D forward linear march; rho0 (nx, k), alpha (nt+1, nx)."""
    cdef const double[:, ::1] al = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    r0 = np.ascontiguousarray(rho0, dtype=np.float64)
    cdef int nt = al.shape[0] - 1
    cdef int nx = r0.shape[0]
    cdef int k = r0.shape[1]
    out_arr = np.empty((nt + 1, nx, k), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] y = np.empty((nx, k), dtype=np.float64)
    cdef const double[:, :, ::1] src
    cdef bint has_src = source is not None
    if has_src:
        src = np.ascontiguousarray(source, dtype=np.float64)
    cdef int n, i, j
    out_arr[0] = r0
    with nogil:
        for n in range(nt):
            y[:, :] = out[n]
            factor.solve_cols(y)
            if has_src:
                for i in range(nx):
                    for j in range(k):
                        y[i, j] += dt * src[n + 1, i, j]
            _transport_adjoint(y, al[n + 1], w, out[n + 1], dx, dt)
    return out_arr


def backward_march(terminal, alpha, double dx, double dt, TridiagFactor factor, source=None):
    """1D backward linear march; terminal (nx, k), alpha (nt+1, nx)."""
    cdef const double[:, ::1] al = np.ascontiguousarray(alpha, dtype=np.float64)
    term = np.ascontiguousarray(terminal, dtype=np.float64)
    cdef int nt = al.shape[0] - 1
    cdef int nx = term.shape[0]
    cdef int k = term.shape[1]
    out_arr = np.empty((nt + 1, nx, k), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef const double[:, :, ::1] src
    cdef bint has_src = source is not None
    if has_src:
        src = np.ascontiguousarray(source, dtype=np.float64)
    cdef int n, i, j
    out_arr[nt] = term
    with nogil:
        for n in range(nt - 1, -1, -1):
            _transport_apply(out[n + 1], al[n + 1], out[n], dx, dt)
            factor.solve_cols(out[n])
            if has_src:
                for i in range(nx):
                    for j in range(k):
                        out[n, i, j] += dt * src[n, i, j]
    return out_arr


cdef inline double _abs_integral(double f0, double f1) noexcept nogil:
    cdef double tot = fabs(f0) + fabs(f1)
    if f0 * f1 >= 0.0:
        return 0.5 * tot
    if tot == 0.0:
        return 0.0
    return (f0 * f0 + f1 * f1) / (2.0 * tot)


def quantile_wasserstein(sa, qa0, qa1, sb, qb0, qb1, int p):
    """W_p^p between two piecewise-linear quantile functions on [0, 1]."""
    if p != 1 and p != 2:
        raise ValueError("p must be 1 or 2")
    cdef const double[::1] s_a = np.ascontiguousarray(sa, dtype=np.float64)
    cdef const double[::1] a0 = np.ascontiguousarray(qa0, dtype=np.float64)
    cdef const double[::1] a1 = np.ascontiguousarray(qa1, dtype=np.float64)
    cdef const double[::1] s_b = np.ascontiguousarray(sb, dtype=np.float64)
    cdef const double[::1] b0 = np.ascontiguousarray(qb0, dtype=np.float64)
    cdef const double[::1] b1 = np.ascontiguousarray(qb1, dtype=np.float64)
    cdef int na = a0.shape[0]
    cdef int nb = b0.shape[0]
    cdef int i = 0, j = 0
    cdef double lo = 0.0, hi, fa0, fa1, fb0, fb1, slope_a, slope_b, f0, f1, length
    cdef double total = 0.0
    with nogil:
        while i < na and j < nb:
            hi = s_a[i + 1] if s_a[i + 1] < s_b[j + 1] else s_b[j + 1]
            length = hi - lo
            if length > 0.0:
                slope_a = (a1[i] - a0[i]) / (s_a[i + 1] - s_a[i])
                slope_b = (b1[j] - b0[j]) / (s_b[j + 1] - s_b[j])
                fa0 = a0[i] + slope_a * (lo - s_a[i])
                fa1 = a0[i] + slope_a * (hi - s_a[i])
                fb0 = b0[j] + slope_b * (lo - s_b[j])
                fb1 = b0[j] + slope_b * (hi - s_b[j])
                f0 = fa0 - fb0
                f1 = fa1 - fb1
                if p == 1:
                    total += length * _abs_integral(f0, f1)
                else:
                    total += length * (f0 * f0 + f0 * f1 + f1 * f1) / 3.0
                lo = hi
            if s_a[i + 1] <= hi:
                i += 1
            if s_b[j + 1] <= hi:
                j += 1
    return total


def particle_march(x0, noise, alpha, double x_min, double dx, double dt, double halfwidth):
    """Split-step Euler-Maruyama with reflection; see the numpy reference."""
    cdef const double[:, ::1] nz = np.ascontiguousarray(noise, dtype=np.float64)
    cdef const double[:, ::1] al = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef int nt = nz.shape[0]
    cdef int npart = nz.shape[1]
    cdef int nx = al.shape[1]
    traj_arr = np.empty((nt + 1, npart), dtype=np.float64)
    cdef double[:, ::1] traj = traj_arr
    traj_arr[0] = np.asarray(x0, dtype=np.float64)
    cdef double amp = sqrt(2.0 * dt)
    cdef double R = halfwidth
    cdef double x, pos, frac, a
    cdef long exits = 0
    cdef int n, q, i
    with nogil:
        for n in range(nt):
            for q in range(npart):
                x = traj[n, q] + amp * nz[n, q]
                if x > R:
                    x = 2.0 * R - x
                    exits += 1
                elif x < -R:
                    x = -2.0 * R - x
                    exits += 1
                pos = (x - x_min) / dx
                i = <int>floor(pos)
                if i < 0:
                    i = 0
                elif i > nx - 2:
                    i = nx - 2
                frac = pos - i
                a = al[n + 1, i] * (1.0 - frac) + al[n + 1, i + 1] * frac
                x = x + dt * a
                if x > R:
                    x = 2.0 * R - x
                    exits += 1
                elif x < -R:
                    x = -2.0 * R - x
                    exits += 1
                traj[n + 1, q] = x
    return traj_arr, int(exits)

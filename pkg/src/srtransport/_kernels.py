"""Compiled inner loops for control integration.

The driven ODE is integrated thousands of times per distance solve, so the
RK4 loop and polynomial evaluation are compiled with numba when it is
available. Without numba the same functions run as plain Python.
"""

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


@njit(cache=True)
def eval_bundle(E, C, x, out):
    """``out[r] = sum_m C[r, m] prod_v x[v]**E[m, v]``."""
    R, M = C.shape
    for r in range(R):
        out[r] = 0.0
    for m in range(M):
        mono = 1.0
        for v in range(4):
            e = E[m, v]
            if e:
                xv = x[v]
                p = xv
                for _ in range(e - 1):
                    p *= xv
                mono *= p
        for r in range(R):
            c = C[r, m]
            if c != 0.0:
                out[r] += c * mono


@njit(cache=True)
def _stage(E, C, x, u1, u2, Y, V, with_tangent, f, dY, buf):
    eval_bundle(E, C, x, buf)
    A = buf[0]
    B = buf[1]
    f[0] = u1
    f[1] = u2
    f[2] = u2 * A
    f[3] = u2 * B
    if with_tangent:
        K = Y.shape[1]
        for k in range(K):
            s3 = 0.0
            s4 = 0.0
            for j in range(4):
                s3 += buf[2 + j] * Y[j, k]
                s4 += buf[6 + j] * Y[j, k]
            v1 = V[k, 0]
            v2 = V[k, 1]
            dY[0, k] = v1
            dY[1, k] = v2
            dY[2, k] = u2 * s3 + v2 * A
            dY[3, k] = u2 * s4 + v2 * B


@njit(cache=True)
def integrate(E, C, x0, U, substeps, V, with_tangent, nodes):
    """RK4 through piecewise-constant controls ``U`` (N, 2).

    ``V`` (N, K, 2) holds tangent perturbations per interval; the tangent
    state ``Y`` (4, K) is returned alongside the endpoint. ``nodes`` (N+1, 4)
    receives the interval-boundary states.
    """
    N = U.shape[0]
    K = V.shape[1]
    x = x0.copy()
    Y = np.zeros((4, K))
    h = 1.0 / substeps  # scaled by the caller through U and V
    buf = np.empty(C.shape[0])
    k1 = np.empty(4); k2 = np.empty(4); k3 = np.empty(4); k4 = np.empty(4)
    m1 = np.empty((4, K)); m2 = np.empty((4, K)); m3 = np.empty((4, K)); m4 = np.empty((4, K))
    xs = np.empty(4)
    Ys = np.empty((4, K))
    for i in range(4):
        nodes[0, i] = x[i]
    for n in range(N):
        u1 = U[n, 0]
        u2 = U[n, 1]
        Vn = V[n]
        for _ in range(substeps):
            _stage(E, C, x, u1, u2, Y, Vn, with_tangent, k1, m1, buf)
            for i in range(4):
                xs[i] = x[i] + 0.5 * h * k1[i]
            if with_tangent:
                for i in range(4):
                    for k in range(K):
                        Ys[i, k] = Y[i, k] + 0.5 * h * m1[i, k]
            _stage(E, C, xs, u1, u2, Ys, Vn, with_tangent, k2, m2, buf)
            for i in range(4):
                xs[i] = x[i] + 0.5 * h * k2[i]
            if with_tangent:
                for i in range(4):
                    for k in range(K):
                        Ys[i, k] = Y[i, k] + 0.5 * h * m2[i, k]
            _stage(E, C, xs, u1, u2, Ys, Vn, with_tangent, k3, m3, buf)
            for i in range(4):
                xs[i] = x[i] + h * k3[i]
            if with_tangent:
                for i in range(4):
                    for k in range(K):
                        Ys[i, k] = Y[i, k] + h * m3[i, k]
            _stage(E, C, xs, u1, u2, Ys, Vn, with_tangent, k4, m4, buf)
            for i in range(4):
                x[i] += (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            if with_tangent:
                for i in range(4):
                    for k in range(K):
                        Y[i, k] += (h / 6.0) * (m1[i, k] + 2.0 * m2[i, k] + 2.0 * m3[i, k] + m4[i, k])
        for i in range(4):
            nodes[n + 1, i] = x[i]
    return x, Y

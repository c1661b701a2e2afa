"""Small numerical helpers: fixed-step RK4 and finite differences."""

import numpy as np


def rk4_step(f, t, y, h):
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4(f, y0, T, steps, t0=0.0, record=False, callback=None):
    """Integrate ``y' = f(t, y)`` on ``[t0, t0 + T]`` with ``steps`` RK4 steps.

    ``y0`` may be any array shape; ``f`` must preserve it. With ``record`` the
    full trajectory of shape ``(steps + 1,) + y0.shape`` is returned, otherwise
    only the final state. ``callback(k, t, y)`` is called after each step and
    may return True to stop early; the truncated trajectory is then returned.
    """
    y = np.array(y0, dtype=float)
    h = T / steps
    out = [y] if record else None
    t = t0
    for k in range(steps):
        y = rk4_step(f, t, y, h)
        t = t0 + (k + 1) * h
        if record:
            out.append(y)
        if callback is not None and callback(k + 1, t, y):
            break
    if record:
        return np.stack(out)
    return y


def central_gradient(fun, x, h):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2.0 * h)
    return g


def central_hessian(fun, x, h):
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.empty((n, n))
    f0 = fun(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        H[i, i] = (fun(x + ei) - 2.0 * f0 + fun(x - ei)) / h**2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h
            H[i, j] = H[j, i] = (
                fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)
            ) / (4.0 * h**2)
    return H

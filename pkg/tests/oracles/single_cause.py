"""Brute-force value iteration for one assignable cause.

The belief is the scalar ``p = pi_1``.  Values live on a uniform grid in
``p`` with ``np.interp`` between nodes; the expectation over the next
observation uses the trapezoid rule on a fine uniform ``y`` grid.  Nothing
here imports bayescontrol.
"""

import math

import numpy as np


def normal_pdf(y, mean, sd):
    return np.exp(-0.5 * ((y - mean) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))


def threshold(rate, c, T0, T1, r, d, h, mean1, sd, k=2000, n_y=1201, tol=1e-7,
              max_iter=100_000):
    """Return ``(threshold, values, p_grid)`` for the single-cause chart."""
    x = rate * h
    stay = math.exp(-x)
    frac = 1 - (1 - stay) / x    # expected out-of-control fraction of an interval from p=0
    p = np.linspace(0.0, 1.0, k + 1)
    y = np.linspace(min(0.0, mean1) - 12 * sd, max(0.0, mean1) + 12 * sd, n_y)
    f0, f1 = normal_pdf(y, 0.0, sd), normal_pdf(y, mean1, sd)

    prior1 = p + (1 - p) * (1 - stay)          # P(out of control at next sample)
    joint1 = prior1[:, None] * f1[None, :]
    pred = (1 - prior1)[:, None] * f0[None, :] + joint1
    post = joint1 / pred
    wy = np.full(n_y, y[1] - y[0])
    wy[0] = wy[-1] = wy[0] / 2
    weights = pred * wy[None, :]

    running = r * h - d - c * h * ((1 - p) * frac + p)
    stop = -((1 - p) * T0 + p * T1)
    v = stop.copy()
    for _ in range(max_iter):
        cont = running + np.sum(weights * np.interp(post, p, v), axis=1)
        new = np.maximum(stop, cont)
        done = np.max(np.abs(new - v)) < tol
        v = new
        if done:
            break
    cont = running + np.sum(weights * np.interp(post, p, v), axis=1)
    stops = stop >= cont
    return float(p[np.argmax(stops)]) if stops.any() else math.nan, v, p


SPEC = dict(rate=0.05, c=20.0, T0=30.0, T1=40.0, r=5.0, d=0.5, h=1.0, mean1=1.5, sd=1.0)

if __name__ == "__main__":
    b, v, p = threshold(**SPEC)
    print("threshold", b, "V(0)", v[0])

"""Independent reference values for the model layer.

Run directly to print the constants frozen into test_model.py.  Nothing here
imports bayescontrol: transition and sojourn matrices come from the matrix
exponential of the CTMC generator and numerical integration, and the
stopping criteria are written out as plain loops.
"""

import math

import numpy as np
from scipy.integrate import quad, quad_vec
from scipy.linalg import expm

SQ2 = math.sqrt(2.0)


def generator(rates):
    n = len(rates)
    g = np.zeros((n + 1, n + 1))
    g[0, 1:] = rates
    g[0, 0] = -sum(rates)
    return g


def transition(rates, h):
    return expm(generator(rates) * h)


def sojourn(rates, h):
    g = generator(rates)
    return quad_vec(lambda s: expm(g * s), 0.0, h, epsabs=1e-14, epsrel=1e-13)[0] / h


def normal_pdf(y, m, var):
    return math.exp(-0.5 * (y - m) ** 2 / var) / math.sqrt(2 * math.pi * var)


def fig1():
    rates = [0.01, 0.02]
    means = [0.0, -SQ2, 2 * SQ2]
    return dict(rates=rates, c=[0.0, 10.0, 20.0], T=[50.0, 60.0, 100.0], r=5.0, d=0.0, h=1.0,
                means=means, var=2.0)


def r0(rates, c, T, r, d, h):
    """R0 from the occupancy integrals, not from the closed form."""
    lam = sum(rates)
    P = transition(rates, h)
    Q = sojourn(rates, h)
    # one-cycle renewal: cost until absorption divided by the probability of leaving
    cost0 = Q[0] @ np.array(c) * h - r * h + d
    tla = sum(ri * ti for ri, ti in zip(rates, T[1:])) / lam
    return cost0 / (1 - P[0, 0]) + tla


def criteria(m, belief):
    P = transition(m["rates"], m["h"])
    Q = sojourn(m["rates"], m["h"])
    T = np.array(m["T"])
    U = T.copy()
    U[0] = r0(m["rates"], m["c"], m["T"], m["r"], m["d"], m["h"])
    b = np.array(belief)
    qc = Q @ np.array(m["c"]) * m["h"]
    stop = b @ (qc + P @ U - T) + m["d"]
    cont = b @ (qc + P @ T - T) + m["d"]
    return stop, cont, (P @ T)[0]


def posterior(m, belief, y):
    P = transition(m["rates"], m["h"])
    f = [normal_pdf(y, mu, m["var"]) for mu in m["means"]]
    prior = np.array(belief) @ P
    num = [prior[j] * f[j] for j in range(len(f))]
    s = sum(num)
    return [v / s for v in num], s


if __name__ == "__main__":
    np.set_printoptions(precision=17)
    P = transition([0.01, 0.02], 1.0)
    Q = sojourn([0.01, 0.02], 1.0)
    print("P0", repr(P[0]))
    print("Q0", repr(Q[0]))
    print("gamma", 1 - Q[0, 0])
    P3 = transition([0.01, 0.02, 0.03], 1.0)
    print("P0 N=3", repr(P3[0]), "gamma", 1 - sojourn([0.01, 0.02, 0.03], 1.0)[0, 0])
    m = fig1()
    for b in ([1, 0, 0], [0, 0, 1], [0.6, 0.2, 0.2]):
        print("criteria", b, criteria(m, b))
    print("post e0 y=0", posterior(m, [1, 0, 0], 0.0))
    print("post mix y=1.3", posterior(m, [0.5, 0.3, 0.2], 1.3))
    for d, h in ((0.0, 20.2), (0.0, 25.0), (1.0, 3.1), (1.0, 16.5), (0.0, 1.0)):
        print("R0 fig3", d, h, r0([0.01, 0.02], [0, 1, 2], [5, 6, 10], 0.5, d, h))
    print("R0 fig1", r0(m["rates"], m["c"], m["T"], m["r"], m["d"], m["h"]))
    tot = quad(lambda y: posterior(m, [0.3, 0.3, 0.4], y)[1], -np.inf, np.inf, epsabs=1e-13)[0]
    print("mixture mass", tot)

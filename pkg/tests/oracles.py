"""Independent reference implementations used only by the tests.

None of these share code with the package: scalar losses go through mpmath
at 256 bits, Local GD is a plain numpy loop, margins come from an angle sweep.
"""

import math

import mpmath
import numpy as np
from scipy.optimize import minimize_scalar

mpmath.mp.prec = 256


def mp_loss(w, P):
    """Mean of log(1 + exp(-<w, p>)) over the rows of P, at 256 bits."""
    tot = mpmath.mpf(0)
    for p in P:
        b = mpmath.fsum(mpmath.mpf(float(a)) * mpmath.mpf(float(c)) for a, c in zip(w, p))
        tot += mpmath.log1p(mpmath.exp(-b))
    return tot / len(P)


def mp_grad(w, P):
    d = len(w)
    acc = [mpmath.mpf(0)] * d
    for p in P:
        b = mpmath.fsum(mpmath.mpf(float(a)) * mpmath.mpf(float(c)) for a, c in zip(w, p))
        s = 1 / (1 + mpmath.exp(b))
        for j in range(d):
            acc[j] -= s * mpmath.mpf(float(p[j]))
    return [a / len(P) for a in acc]


def mp_potential(w, P):
    tot = mpmath.mpf(0)
    for p in P:
        b = mpmath.fsum(mpmath.mpf(float(a)) * mpmath.mpf(float(c)) for a, c in zip(w, p))
        tot += 1 / (1 + mpmath.exp(b))
    return tot / len(P)


def hessian_matrix(w, P):
    """Explicit (1/N) sum s'(b) p p^T with s'(b) from the exp of the negative magnitude."""
    H = np.zeros((P.shape[1], P.shape[1]))
    for p in P:
        e = math.exp(-abs(float(p @ w)))
        H += e / (1 + e) ** 2 * np.outer(p, p)
    return H / P.shape[0]


def eig2_max(H):
    """Largest eigenvalue of a symmetric 2x2 matrix in closed form."""
    a, b, c = H[0, 0], H[0, 1], H[1, 1]
    return 0.5 * (a + c) + math.hypot(0.5 * (a - c), b)


def angle_sweep_margin(P, grid=1_000_000):
    """max over unit u of min <u, p> for 2D points: grid search, then bounded refinement."""
    P = np.asarray(P, dtype=np.float64)
    th = np.linspace(0.0, 2 * np.pi, grid, endpoint=False)
    best = np.full(grid, np.inf)
    for p in P:
        np.minimum(best, p[0] * np.cos(th) + p[1] * np.sin(th), out=best)
    k = int(np.argmax(best))
    t = th[k]
    step = 2 * np.pi / grid

    def f(t):
        return min(p[0] * math.cos(t) + p[1] * math.sin(t) for p in P)

    # zoom in around the best angle; the objective is a min of cosines, so it
    # has a kink at the optimum and a derivative-free local search is safest
    for _ in range(12):
        ts = np.linspace(t - 2 * step, t + 2 * step, 401)
        vals = np.min(P[:, :1] * np.cos(ts) + P[:, 1:] * np.sin(ts), axis=0)
        t = float(ts[int(np.argmax(vals))])
        step /= 100
    res = minimize_scalar(lambda a: -f(a), bounds=(t - step, t + step), method="bounded",
                          options={"xatol": 1e-16})
    if -res.fun > f(t):
        t = float(res.x)
    return f(t), np.array([math.cos(t), math.sin(t)])


def plain_local_gd(w0, X, eta, K, R):
    """Straight-line Local GD with no telemetry: X has shape (M, n, d)."""
    w = np.array(w0, dtype=np.float64)
    for _ in range(R):
        ends = []
        for Xm in X:
            v = w.copy()
            for _ in range(K):
                b = Xm @ v
                s = 0.5 * (1.0 - np.tanh(0.5 * b))  # 1 / (1 + e^b)
                v = v + eta * (s @ Xm) / Xm.shape[0]
            ends.append(v)
        w = np.mean(ends, axis=0)
    return w


def scalar_margin_recursion(b0, eta, gamma_sq, K):
    """b_{k+1} = b_k + eta gamma^2 / (1 + e^{b_k}) for a single point of squared norm gamma^2."""
    out = [mpmath.mpf(b0)]
    for _ in range(K - 1):
        b = out[-1]
        out.append(b + mpmath.mpf(eta) * mpmath.mpf(gamma_sq) / (1 + mpmath.exp(b)))
    return out


def random_separable_2d(rng, n):
    """n points inside an open half-plane: angles within 0.4 pi of a random axis."""
    axis = rng.uniform(0, 2 * np.pi)
    ang = axis + rng.uniform(-0.4 * np.pi, 0.4 * np.pi, size=n)
    rad = rng.uniform(0.2, 1.0, size=n)
    return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)

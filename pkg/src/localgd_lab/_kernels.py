"""Compiled numerical kernels.

Everything that touches the per-point loop lives here so that every public
entry point (objective, Local GD, plain GD) shares one arithmetic path.
Reductions run in a fixed order (client-major, point-minor) with Neumaier
compensation; no fastmath, no parallel loops.

Point clouds are always 3-D arrays ``X[m, i, :]`` of shape (M, n, d).
"""

import math

import numpy as np
from numba import njit

# ---------------------------------------------------------------------------
# scalar pieces


@njit(cache=True)
def softplus(z):
    # log(1 + e^z)
    if z > 0.0:
        return z + math.log1p(math.exp(-z))
    return math.log1p(math.exp(z))


@njit(cache=True)
def logistic_loss(b):
    # l(b) = log(1 + e^{-b})
    if b >= 0.0:
        return math.log1p(math.exp(-b))
    return -b + math.log1p(math.exp(b))


@njit(cache=True)
def loss_slope(b):
    # |l'(b)| = 1 / (1 + e^b)
    if b >= 0.0:
        e = math.exp(-b)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(b))


@njit(cache=True)
def loss_curvature(b):
    # l''(b) = e^b / (1 + e^b)^2, symmetric in b
    e = math.exp(-abs(b))
    return e / ((1.0 + e) * (1.0 + e))


@njit(cache=True)
def dot(u, v):
    s = 0.0
    for j in range(u.shape[0]):
        s += u[j] * v[j]
    return s


@njit(cache=True)
def norm(u):
    return math.sqrt(dot(u, u))


@njit(cache=True)
def _two_sum_into(s, c, x):
    # Neumaier step; returns updated (sum, compensation)
    t = s + x
    if abs(s) >= abs(x):
        c += (s - t) + x
    else:
        c += (x - t) + s
    return t, c


@njit(cache=True)
def _vec_acc(s, c, x, scale):
    # s, c <- Neumaier(s + scale * x), coordinatewise
    for j in range(s.shape[0]):
        t = s[j] + scale * x[j]
        if abs(s[j]) >= abs(scale * x[j]):
            c[j] += (s[j] - t) + scale * x[j]
        else:
            c[j] += (scale * x[j] - t) + s[j]
        s[j] = t


# ---------------------------------------------------------------------------
# objective over one client block Xm of shape (n, d)


@njit(cache=True)
def client_loss(w, Xm):
    s = 0.0
    c = 0.0
    for i in range(Xm.shape[0]):
        s, c = _two_sum_into(s, c, logistic_loss(dot(w, Xm[i])))
    return (s + c) / Xm.shape[0]


@njit(cache=True)
def client_potential(w, Xm):
    s = 0.0
    c = 0.0
    for i in range(Xm.shape[0]):
        s, c = _two_sum_into(s, c, loss_slope(dot(w, Xm[i])))
    return (s + c) / Xm.shape[0]


@njit(cache=True)
def client_grad_into(w, Xm, out):
    d = w.shape[0]
    s = np.zeros(d)
    c = np.zeros(d)
    for i in range(Xm.shape[0]):
        _vec_acc(s, c, Xm[i], loss_slope(dot(w, Xm[i])))
    n = Xm.shape[0]
    for j in range(d):
        out[j] = -(s[j] + c[j]) / n


@njit(cache=True)
def client_hvp_into(w, Xm, v, out):
    d = w.shape[0]
    s = np.zeros(d)
    c = np.zeros(d)
    for i in range(Xm.shape[0]):
        _vec_acc(s, c, Xm[i], loss_curvature(dot(w, Xm[i])) * dot(Xm[i], v))
    n = Xm.shape[0]
    for j in range(d):
        out[j] = (s[j] + c[j]) / n


# ---------------------------------------------------------------------------
# objective over a full (M, n, d) cloud: mean over clients of client means


@njit(cache=True)
def total_loss(w, X):
    s = 0.0
    c = 0.0
    for m in range(X.shape[0]):
        s, c = _two_sum_into(s, c, client_loss(w, X[m]))
    return (s + c) / X.shape[0]


@njit(cache=True)
def total_potential(w, X):
    s = 0.0
    c = 0.0
    for m in range(X.shape[0]):
        s, c = _two_sum_into(s, c, client_potential(w, X[m]))
    return (s + c) / X.shape[0]


@njit(cache=True)
def total_grad_into(w, X, out):
    d = w.shape[0]
    s = np.zeros(d)
    c = np.zeros(d)
    g = np.empty(d)
    for m in range(X.shape[0]):
        client_grad_into(w, X[m], g)
        _vec_acc(s, c, g, 1.0)
    M = X.shape[0]
    for j in range(d):
        out[j] = (s[j] + c[j]) / M


@njit(cache=True)
def total_hvp_into(w, X, v, out):
    d = w.shape[0]
    s = np.zeros(d)
    c = np.zeros(d)
    h = np.empty(d)
    for m in range(X.shape[0]):
        client_hvp_into(w, X[m], v, h)
        _vec_acc(s, c, h, 1.0)
    M = X.shape[0]
    for j in range(d):
        out[j] = (s[j] + c[j]) / M


@njit(cache=True)
def power_iteration(w, X, v0, tol, max_iter):
    """Top eigenvalue of the (PSD) Hessian by power iteration.

    Stops when the eigen-residual ||Hv - lam v|| <= tol * lam. Returns
    (lam, converged, iterations).
    """
    d = w.shape[0]
    v = v0 / norm(v0)
    hv = np.empty(d)
    lam = 0.0
    for it in range(1, max_iter + 1):
        total_hvp_into(w, X, v, hv)
        lam = dot(v, hv)
        if lam <= 0.0:
            return 0.0, True, it
        res = 0.0
        for j in range(d):
            res += (hv[j] - lam * v[j]) ** 2
        if math.sqrt(res) <= tol * lam:
            return lam, True, it
        nv = norm(hv)
        for j in range(d):
            v[j] = hv[j] / nv
    return lam, False, max_iter


@njit(cache=True)
def gradient_descent(w0, X, eta, steps):
    w = w0.copy()
    g = np.empty(w.shape[0])
    for _ in range(steps):
        total_grad_into(w, X, g)
        w = w - eta * g
    return w


# ---------------------------------------------------------------------------
# Local GD


@njit(cache=True)
def local_steps(w, Xm, eta, K, margins):
    """K gradient steps on one client from w.

    Fills margins[i, k] = <w_k, x_i> for k = 0..K-1 and returns
    (endpoint, failing_k) with failing_k = -1 when every iterate is finite.
    """
    d = w.shape[0]
    wl = w.copy()
    g = np.empty(d)
    for k in range(K):
        for i in range(Xm.shape[0]):
            margins[i, k] = dot(wl, Xm[i])
        client_grad_into(wl, Xm, g)
        wl = wl - eta * g
        for j in range(d):
            if not math.isfinite(wl[j]):
                return wl, k
    return wl, -1


@njit(cache=True)
def round_into(w, X, eta, K, r, out_scalars, out_vecs, out_points, full):
    """One Local GD round from w, writing telemetry for round r.

    out_scalars[r, :] = loss, grad_norm, param_norm, movement, bias_norm,
        beta_min, beta_max, beta_mean, potential, local_loss_rise,
        local_move_max
    out_vecs[r, :, :] (full only) = w_r, grad F(w_r), b_r, update
    out_points[r, :, :, :] (full only) = margins b_{r,i}^m, beta_{r,i}^m

    Returns (w_next, status) with status -1 on success, otherwise the
    failing local step index k.
    """
    M = X.shape[0]
    n = X.shape[1]
    d = X.shape[2]

    grad0 = np.empty(d)
    total_grad_into(w, X, grad0)
    F0 = total_loss(w, X)

    acc_s = np.zeros(d)
    acc_c = np.zeros(d)
    bias_s = np.zeros(d)
    bias_c = np.zeros(d)
    g = np.empty(d)
    g0 = np.empty(d)
    margins = np.empty((n, K))
    beta = np.empty((M, n))
    b0 = np.empty((M, n))

    rise = -np.inf
    move_max = 0.0
    endpoint = w.copy()
    status = -1

    for m in range(M):
        Xm = X[m]
        wl = w.copy()
        client_grad_into(wl, Xm, g0)
        f_prev = client_loss(wl, Xm)
        for k in range(K):
            for i in range(n):
                margins[i, k] = dot(wl, Xm[i])
            if k == 0:
                for j in range(d):
                    g[j] = g0[j]
            else:
                client_grad_into(wl, Xm, g)
            _vec_acc(acc_s, acc_c, g, 1.0)
            for j in range(d):
                bias_s_j = g[j] - g0[j]
                t = bias_s[j] + bias_s_j
                if abs(bias_s[j]) >= abs(bias_s_j):
                    bias_c[j] += (bias_s[j] - t) + bias_s_j
                else:
                    bias_c[j] += (bias_s_j - t) + bias_s[j]
                bias_s[j] = t
            wl = wl - eta * g
            for j in range(d):
                if not math.isfinite(wl[j]):
                    status = k
            if status >= 0:
                return w, status
            f_new = client_loss(wl, Xm)
            if f_new - f_prev > rise:
                rise = f_new - f_prev
            f_prev = f_new
            mv = 0.0
            for j in range(d):
                mv += (wl[j] - w[j]) ** 2
            mv = math.sqrt(mv)
            if mv > move_max:
                move_max = mv
        for i in range(n):
            b0[m, i] = margins[i, 0]
            sp0 = softplus(margins[i, 0])
            s = 0.0
            c = 0.0
            for k in range(K):
                s, c = _two_sum_into(s, c, math.exp(sp0 - softplus(margins[i, k])))
            beta[m, i] = (s + c) / K
        if m == 0:
            endpoint = wl

    update = np.empty(d)
    bias = np.empty(d)
    for j in range(d):
        update[j] = -(eta * ((acc_s[j] + acc_c[j]) / M))
        bias[j] = (bias_s[j] + bias_c[j]) / (M * K)
    if M == 1:
        # the average over a single client is its endpoint
        w_next = endpoint
    else:
        w_next = w + update

    bmin = np.inf
    bmax = -np.inf
    bs = 0.0
    bc = 0.0
    for m in range(M):
        for i in range(n):
            v = beta[m, i]
            if v < bmin:
                bmin = v
            if v > bmax:
                bmax = v
            bs, bc = _two_sum_into(bs, bc, v)

    out_scalars[r, 0] = F0
    out_scalars[r, 1] = norm(grad0)
    out_scalars[r, 2] = norm(w)
    out_scalars[r, 3] = norm(update)
    out_scalars[r, 4] = norm(bias)
    out_scalars[r, 5] = bmin
    out_scalars[r, 6] = bmax
    out_scalars[r, 7] = (bs + bc) / (M * n)
    out_scalars[r, 8] = total_potential(w, X)
    out_scalars[r, 9] = rise
    out_scalars[r, 10] = move_max
    if full:
        for j in range(d):
            out_vecs[r, 0, j] = w[j]
            out_vecs[r, 1, j] = grad0[j]
            out_vecs[r, 2, j] = bias[j]
            out_vecs[r, 3, j] = update[j]
        for m in range(M):
            for i in range(n):
                out_points[r, 0, m, i] = b0[m, i]
                out_points[r, 1, m, i] = beta[m, i]
    return w_next, status


@njit(cache=True)
def run_rounds(w0, X, eta, K, R, cap, out_scalars, out_vecs, out_points, full):
    """Run up to R rounds. Returns (w_last, rounds_done, diverged_round).

    diverged_round is -1 when all R rounds completed. A round r diverges
    when F(w_r) is non-finite or above cap, or a local iterate overflows.
    """
    w = w0.copy()
    for r in range(R):
        F = total_loss(w, X)
        if not (F <= cap):
            return w, r, r
        for j in range(w.shape[0]):
            if not math.isfinite(w[j]):
                return w, r, r
        w_next, status = round_into(w, X, eta, K, r, out_scalars, out_vecs,
                                    out_points, full)
        if status >= 0:
            return w, r, r
        w = w_next
    F = total_loss(w, X)
    finite = math.isfinite(F) and F <= cap
    for j in range(w.shape[0]):
        if not math.isfinite(w[j]):
            finite = False
    if not finite:
        return w, R, R
    return w, R, -1


# ---------------------------------------------------------------------------
# hard-margin dual coordinate ascent


@njit(cache=True)
def margin_dual_ascent(P, tol, max_steps, blowup):
    """Hildreth-style coordinate ascent on the bias-free hard-margin dual.

    Primal: min 1/2 ||u||^2  s.t. <u, p_i> >= 1.
    Dual:   max sum(a) - 1/2 ||sum a_i p_i||^2, a >= 0.

    Returns (u, alpha, rel_gap, min_margin, dual, steps, status) where status
    is 0 converged, 1 step cap reached, 2 dual blew up.
    """
    N = P.shape[0]
    d = P.shape[1]
    alpha = np.zeros(N)
    u = np.zeros(d)
    sq = np.empty(N)
    for i in range(N):
        sq[i] = dot(P[i], P[i])
    steps = 0
    rel_gap = np.inf
    mmin = -np.inf
    dual = 0.0
    while True:
        for i in range(N):
            gi = 1.0 - dot(u, P[i])
            new = alpha[i] + gi / sq[i]
            if new < 0.0:
                new = 0.0
            delta = new - alpha[i]
            if delta != 0.0:
                for j in range(d):
                    u[j] += delta * P[i, j]
                alpha[i] = new
            steps += 1
        # certificate: scale u onto the feasible set
        mmin = np.inf
        for i in range(N):
            v = dot(u, P[i])
            if v < mmin:
                mmin = v
        s = 0.0
        c = 0.0
        for i in range(N):
            s, c = _two_sum_into(s, c, alpha[i])
        uu = dot(u, u)
        dual = (s + c) - 0.5 * uu
        if dual > blowup:
            return u, alpha, rel_gap, mmin, dual, steps, 2
        if mmin > 0.0 and uu > 0.0:
            primal = 0.5 * uu / (mmin * mmin)
            rel_gap = (primal - dual) / primal
            if rel_gap < 0.0:
                rel_gap = 0.0
            if rel_gap <= tol:
                return u, alpha, rel_gap, mmin, dual, steps, 0
        if steps >= max_steps:
            return u, alpha, rel_gap, mmin, dual, steps, 1


@njit(cache=True)
def softplus_array(Z):
    flat = Z.ravel()
    out = np.empty(flat.shape[0])
    for j in range(flat.shape[0]):
        out[j] = softplus(flat[j])
    return out.reshape(Z.shape)

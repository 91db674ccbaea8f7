"""Closed-form guarantees for Local GD and a per-round checker.

Bounds are evaluated with the certificate's lower margin gamma * (1 - tol),
so a solver error can only loosen them. One-sided inequalities are checked
with no slack; algebraic identities (bias form and beta decomposition of the
update) with a small relative tolerance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kern
from .dataset import Dataset
from .localgd import Trajectory, TelemetryMissingError, transition_threshold
from .margin import MarginCertificate

__all__ = [
    "BoundParams",
    "TheoryReport",
    "CorollaryReport",
    "UndefinedBoundError",
    "thm1_bound",
    "psi_tau",
    "thm2_bound",
    "lemmaA1_bound",
    "corollary_regime",
    "linear_log_root",
    "linear_log_gap",
    "linear_log_root_safe",
    "lemmaB8_beta_bound",
    "check_trajectory",
    "write_report_csv",
    "BIAS_IDENTITY_RTOL",
    "DECOMPOSITION_RTOL",
]

BIAS_IDENTITY_RTOL = 1e-10
DECOMPOSITION_RTOL = 1e-9


class UndefinedBoundError(ValueError):
    pass


@dataclass(frozen=True)
class BoundParams:
    eta: float
    K: int
    M: int
    n: int
    R: int
    gamma: float
    w0_norm: float = 0.0

    def __post_init__(self):
        for name in ("eta", "K", "M", "n", "R", "gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.w0_norm >= 0:
            raise ValueError("w0_norm must be nonnegative")

    @classmethod
    def from_run(cls, traj: Trajectory, cert: MarginCertificate, data: Dataset) -> "BoundParams":
        c = traj.config
        w0 = c.initial(data.d)
        return cls(c.eta, c.K, data.M, data.n, c.R, cert.gamma_lower, float(np.linalg.norm(w0)))


def thm1_bound(r, p: BoundParams):
    """Bound on the average loss over rounds 0..r-1:

    26 (||w0||^2 + 1 + log^2(K + eta K gamma^2 r) + eta^2 K^2) / (eta gamma^4 r).
    """
    r_arr = np.asarray(r, dtype=np.float64)
    if np.any(r_arr < 1):
        raise UndefinedBoundError("average-loss bound needs r >= 1")
    eta, K, g = p.eta, p.K, p.gamma
    num = p.w0_norm ** 2 + 1.0 + np.log(K + eta * K * g * g * r_arr) ** 2 + (eta * K) ** 2
    out = 26.0 * num / (eta * g ** 4 * r_arr)
    return float(out) if out.ndim == 0 else out


def psi_tau(p: BoundParams) -> tuple[float, float]:
    eta, K, M, n, g = p.eta, p.K, p.M, p.n, p.gamma
    psi = min(g / (140.0 * eta * K * M), 1.0 / (2.0 * M * n))
    top = (4.0 * g * p.w0_norm + 2.0 * math.sqrt(2.0) + 2.0 * eta
           + math.log1p(math.sqrt(K) / (math.sqrt(eta) * g * psi)))
    return psi, top / (eta * g * g * psi)


def thm2_bound(r, tau: float, p: BoundParams):
    """Last-iterate bound 16 / (eta gamma^2 K (r - tau)), defined for r > tau."""
    r_arr = np.asarray(r, dtype=np.float64)
    if np.any(r_arr <= tau):
        raise UndefinedBoundError(f"last-iterate bound is only defined for r > tau = {tau:.6g}")
    out = 16.0 / (p.eta * p.gamma ** 2 * p.K * (r_arr - tau))
    return float(out) if out.ndim == 0 else out


def lemmaA1_bound(r, p: BoundParams):
    """||w_r|| <= ||w0|| + (sqrt 2 + eta + log(1 + eta gamma^2 K r^2)) / gamma."""
    r_arr = np.asarray(r, dtype=np.float64)
    if np.any(r_arr < 0):
        raise UndefinedBoundError("r must be nonnegative")
    g = p.gamma
    out = p.w0_norm + (math.sqrt(2.0) + p.eta + np.log1p(p.eta * g * g * p.K * r_arr ** 2)) / g
    return float(out) if out.ndim == 0 else out


def linear_log_root(A: float, B: float, C: float) -> float:
    """The candidate x0 = 2A + B log(1 + B sqrt C) for x >= A + B log(1 + C x^2).

    x0 does not always satisfy the inequality (A = B = C = 1 is a
    counterexample); :func:`linear_log_gap` reports the slack and
    :func:`linear_log_root_safe` gives a threshold that always works.
    """
    if min(A, B, C) < 0:
        raise ValueError("A, B, C must be nonnegative")
    return 2.0 * A + B * math.log1p(B * math.sqrt(C))


def linear_log_gap(x: float, A: float, B: float, C: float) -> float:
    """x - (A + B log(1 + C x^2)); nonnegative iff x satisfies the inequality."""
    return x - (A + B * math.log1p(C * x * x))


def linear_log_root_safe(A: float, B: float, C: float) -> float:
    """2A + 4B log(1 + 4B sqrt C), sufficient for x >= A + B log(1 + C x^2).

    From 1 + C x^2 <= (1 + sqrt(C) x)^2 and the tangent of log(1 + sqrt(C) x)
    at x = 4B, every x past this value satisfies the inequality.
    """
    if min(A, B, C) < 0:
        raise ValueError("A, B, C must be nonnegative")
    x = 2.0 * A + 4.0 * B * math.log1p(4.0 * B * math.sqrt(C))
    if linear_log_gap(x, A, B, C) < 0:
        raise ArithmeticError(f"linear-log threshold fails at x={x!r}")
    return x


def lemmaB8_beta_bound(eta: float, K: int, gamma_m: float) -> float:
    """Upper bound on beta from w_r = 0 with one point per client:
    2/K + 4/(eta gamma_m^2 K) log(1 + eta gamma_m^2 K / 3)."""
    if min(eta, K, gamma_m) <= 0:
        raise ValueError("eta, K, gamma_m must be positive")
    a = eta * gamma_m ** 2 * K
    return 2.0 / K + 4.0 / a * math.log1p(a / 3.0)


@dataclass(frozen=True)
class CorollaryReport:
    regime: bool  # eta >= 1 and w0 = 0
    target_eta_k: float  # gamma^3 R / M
    eta_k: float
    tau: float
    asymptotic: bool  # R >= 2 tau
    bound: float | None  # 32 / (eta gamma^2 K R), only when asymptotic
    final_loss: float | None = None
    holds: bool | None = None


def corollary_regime(p: BoundParams, R: int | None = None, final_loss: float | None = None) -> CorollaryReport:
    R = p.R if R is None else R
    _, tau = psi_tau(p)
    asymptotic = R >= 2.0 * tau
    bound = 32.0 / (p.eta * p.gamma ** 2 * p.K * R) if asymptotic else None
    holds = None
    if bound is not None and final_loss is not None:
        holds = final_loss <= bound
    return CorollaryReport(p.eta >= 1 and p.w0_norm == 0, p.gamma ** 3 * R / p.M, p.eta * p.K,
                           tau, asymptotic, bound, final_loss, holds)


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TheoryReport:
    """Per-round bound values and pass flags.

    Arrays are indexed by round. ``thm1_bound`` is NaN at r = 0 and
    ``thm2_bound`` is NaN wherever r <= tau; the matching ``*_ok`` entries are
    True there. ``lemma4x_applicable`` marks rounds whose loss meets the
    lemma's hypothesis (False when the needed telemetry was not recorded).
    """

    params: BoundParams
    psi: float
    tau: float
    thm1_bound: np.ndarray
    thm1_ok: np.ndarray
    thm2_bound: np.ndarray
    thm2_ok: np.ndarray
    lemmaA1_bound: np.ndarray
    lemmaA1_ok: np.ndarray
    lemma43_applicable: np.ndarray
    lemma43_ok: np.ndarray
    lemma44_applicable: np.ndarray
    lemma44_ok: np.ndarray
    lemma45_applicable: np.ndarray
    lemma45_ok: np.ndarray
    monotone_ok: np.ndarray
    transition_round: int | None
    transition_ok: bool | None  # None when ceil(tau) is past the last round
    thm2_testable: bool
    diverged: int | None
    beta_violations: int | None = None
    bias_identity_violations: int | None = None
    decomposition_violations: int | None = None
    max_bias_residual: float | None = None
    max_decomposition_residual: float | None = None
    alignment: np.ndarray | None = None  # <w_r/||w_r||, w*>, telemetry only
    notes: tuple[str, ...] = field(default=())

    @property
    def summary(self) -> dict[str, int]:
        out = {
            "thm1": int(np.count_nonzero(~self.thm1_ok)),
            "thm2": int(np.count_nonzero(~self.thm2_ok)),
            "lemmaA1": int(np.count_nonzero(~self.lemmaA1_ok)),
            "lemma43": int(np.count_nonzero(self.lemma43_applicable & ~self.lemma43_ok)),
            "lemma44": int(np.count_nonzero(self.lemma44_applicable & ~self.lemma44_ok)),
            "lemma45": int(np.count_nonzero(self.lemma45_applicable & ~self.lemma45_ok)),
            "monotone": int(np.count_nonzero(~self.monotone_ok)),
            "lemma46": int(self.transition_ok is False),
        }
        for key in ("beta", "bias_identity", "decomposition"):
            v = getattr(self, f"{key}_violations")
            if v is not None:
                out[key] = v
        return out

    @property
    def violations(self) -> int:
        return sum(self.summary.values())

    @property
    def ok(self) -> bool:
        return self.violations == 0


def _rel_residual(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """||a - b|| / ||a|| row-wise (0 where both vanish)."""
    num = np.linalg.norm(a - b, axis=-1)
    den = np.linalg.norm(a, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, num / den, np.where(num == 0, 0.0, np.inf))
    return out


def _softplus(z):
    # same arithmetic as the kernel that produced beta, so the zero-slack
    # comparison against 1 + e^b is not decided by a last-bit difference
    return kern.softplus_array(np.ascontiguousarray(z, dtype=np.float64))


def check_trajectory(traj: Trajectory, cert: MarginCertificate | None, data: Dataset | None,
                     params: BoundParams | None = None) -> TheoryReport:
    """Evaluate every bound at every applicable recorded round.

    ``data`` is needed for the per-point checks (beta bounds, the beta
    decomposition of the update) and is optional for summary-level
    trajectories. Pass ``params`` to override what is derived from the run.
    """
    if params is None:
        if cert is None or data is None:
            raise ValueError("need params, or both a certificate and the dataset")
        params = BoundParams.from_run(traj, cert, data)
    p = params
    psi, tau = psi_tau(p)
    n_rec = len(traj)
    r = np.arange(n_rec, dtype=np.float64)
    loss = traj.loss
    notes = []
    if traj.diverged is not None:
        notes.append(f"diverged at round {traj.diverged}; bounds not applicable from there on")

    # average-loss bound at r >= 1 uses rounds s < r
    thm1 = np.full(n_rec, np.nan)
    thm1_ok = np.ones(n_rec, dtype=bool)
    if n_rec > 1:
        rr = r[1:]
        avg = np.cumsum(loss)[:-1] / rr
        thm1[1:] = thm1_bound(rr, p)
        thm1_ok[1:] = avg <= thm1[1:]

    thm2 = np.full(n_rec, np.nan)
    thm2_ok = np.ones(n_rec, dtype=bool)
    after = r > tau
    thm2_testable = bool(after.any())
    if thm2_testable:
        thm2[after] = thm2_bound(r[after], tau, p)
        thm2_ok[after] = loss[after] <= thm2[after]
    else:
        notes.append(f"last-iterate bound not testable at this scale (tau = {tau:.4g})")

    a1 = lemmaA1_bound(r, p)
    a1_ok = traj.param_norm <= a1

    eta, K, M = p.eta, p.K, p.M
    rise = traj.local_loss_rise
    move = traj.local_move_max
    has_local = np.isfinite(rise) & np.isfinite(move)
    l43_app = (loss <= 1.0 / (4.0 * eta * M)) & has_local
    l43_ok = ~l43_app | (rise <= 0.0)
    l44_app = (loss <= 1.0 / (eta * K * M)) & has_local
    l44_ok = ~l44_app | (move <= 1.0)
    threshold = transition_threshold(p.gamma, eta, K, M)
    l45_app = (loss <= threshold) & np.isfinite(traj.bias_norm)
    l45_ok = ~l45_app | (traj.bias_norm <= traj.grad_norm / 5.0)

    below = np.flatnonzero(loss <= threshold)
    transition = int(below[0]) if below.size else None
    monotone_ok = np.ones(n_rec, dtype=bool)
    if transition is not None and n_rec > 1:
        nxt = np.append(loss[1:], traj.final_loss if traj.diverged is None else np.nan)
        seg = slice(transition, n_rec)
        # the last recorded round compares against the final iterate
        cmp = nxt[seg] <= loss[seg]
        cmp[np.isnan(nxt[seg])] = True
        monotone_ok[seg] = cmp

    ceil_tau = math.ceil(tau)
    transition_ok = None
    if ceil_tau <= n_rec - 1:
        transition_ok = transition is not None and transition <= ceil_tau

    extras = {}
    if traj.vectors is not None and traj.point_data is not None:
        extras = _identity_checks(traj, data)
    if cert is not None and traj.vectors is not None:
        W = traj.weights
        wn = np.linalg.norm(W, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            extras["alignment"] = np.where(wn > 0, (W @ cert.w_star) / wn, np.nan)

    return TheoryReport(p, psi, tau, thm1, thm1_ok, thm2, thm2_ok, a1, a1_ok, l43_app, l43_ok,
                        l44_app, l44_ok, l45_app, l45_ok, monotone_ok, transition, transition_ok,
                        thm2_testable, traj.diverged, notes=tuple(notes), **extras)


def _identity_checks(traj: Trajectory, data: Dataset | None) -> dict:
    c = traj.config
    eta, K = c.eta, c.K
    out = {}
    b0 = traj.margins
    beta = traj.betas
    # beta in [1/K, 1 + e^{b}], the upper end written as exp(softplus(b))
    lower_ok = beta >= 1.0 / K
    upper_ok = beta <= np.exp(_softplus(b0))
    out["beta_violations"] = int(np.count_nonzero(~(lower_ok & upper_ok)))

    upd = traj.updates
    res = _rel_residual(upd, -eta * K * (traj.global_grads + traj.biases))
    out["max_bias_residual"] = float(res.max()) if res.size else 0.0
    out["bias_identity_violations"] = int(np.count_nonzero(~(res <= BIAS_IDENTITY_RTOL)))

    if data is not None:
        X = data.points  # (M, n, d)
        slope = np.exp(-_softplus(b0))  # |l'(b)| = 1/(1+e^b)
        coef = beta * slope  # (R, M, n)
        recon = (eta * K / (data.M * data.n)) * np.einsum("rmi,mid->rd", coef, X)
        res = _rel_residual(upd, recon)
        out["max_decomposition_residual"] = float(res.max()) if res.size else 0.0
        out["decomposition_violations"] = int(np.count_nonzero(~(res <= DECOMPOSITION_RTOL)))
    return out


REPORT_COLUMNS = ("r", "thm1_bound", "thm1_ok", "thm2_bound", "thm2_ok", "lemmaA1_bound",
                  "lemmaA1_ok", "lemma43_applicable", "lemma43_ok", "lemma44_applicable",
                  "lemma44_ok", "lemma45_applicable", "lemma45_ok")


def write_report_csv(report: TheoryReport, path) -> None:
    """One row per round; bounds outside their domain are left blank."""

    def num(v):
        return "" if not np.isfinite(v) else format(float(v), ".17g")

    with open(path, "w", newline="") as f:
        out = csv.writer(f, lineterminator="\n")
        out.writerow(REPORT_COLUMNS)
        for r in range(report.thm1_bound.shape[0]):
            out.writerow([
                r,
                num(report.thm1_bound[r]), int(report.thm1_ok[r]),
                num(report.thm2_bound[r]), int(report.thm2_ok[r]),
                num(report.lemmaA1_bound[r]), int(report.lemmaA1_ok[r]),
                int(report.lemma43_applicable[r]), int(report.lemma43_ok[r]),
                int(report.lemma44_applicable[r]), int(report.lemma44_ok[r]),
                int(report.lemma45_applicable[r]), int(report.lemma45_ok[r]),
            ])

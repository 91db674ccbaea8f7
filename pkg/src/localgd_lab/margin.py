"""Maximum-margin direction and margin of a canonical point cloud.

Solves min 1/2 ||u||^2 s.t. <u, x> >= 1 by exact coordinate ascent on the
dual and reports gamma = 1/||u||, w* = u/||u|| with u rescaled onto the
feasible set, so the reported gamma is itself an attained margin (a lower
bound on the true one). The dual value gives the matching upper bound.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kern
from .dataset import Dataset

__all__ = [
    "MarginCertificate",
    "CertificateReport",
    "NotSeparableError",
    "NoCertificateError",
    "solve_max_margin",
    "verify_certificate",
    "local_margins",
    "write_certificate_csv",
    "read_certificate_csv",
    "DEFAULT_TOL",
]

DEFAULT_TOL = 1e-8
MAX_STEPS = 10_000_000
DUAL_BLOWUP = 1e24
SEPARABILITY_FLOOR = 1e-12


class NotSeparableError(ValueError):
    pass


class NoCertificateError(RuntimeError):
    pass


@dataclass(frozen=True)
class MarginCertificate:
    gamma: float
    w_star: np.ndarray
    support: tuple[int, ...]
    duality_gap: float
    tol: float = DEFAULT_TOL
    steps: int = field(default=0, compare=False)

    @property
    def gamma_lower(self) -> float:
        """The value bounds are evaluated with: gamma * (1 - tol)."""
        return self.gamma * (1.0 - self.tol)

    @property
    def gamma_upper(self) -> float:
        """Dual upper bound on the true margin, gamma / sqrt(1 - gap)."""
        return self.gamma / math.sqrt(1.0 - self.duality_gap)


def solve_max_margin(data: Dataset | np.ndarray, tol: float = DEFAULT_TOL,
                     max_steps: int = MAX_STEPS) -> MarginCertificate:
    """Certified max margin of all points in ``data`` (a Dataset or an (N, d) array).

    Support indices refer to the client-major flattened order.
    """
    P = data.flat() if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    P = np.ascontiguousarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ValueError("need a nonempty (N, d) point array")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if np.any(np.einsum("ij,ij->i", P, P) == 0.0):
        raise NotSeparableError("a zero point has margin 0 under every direction")

    u, _, gap, mmin, dual, steps, status = kern.margin_dual_ascent(P, tol, max_steps, DUAL_BLOWUP)
    unorm = math.sqrt(kern.dot(u, u))
    if status == 2:
        raise NotSeparableError(f"dual objective exceeded {DUAL_BLOWUP:g}")
    if unorm == 0.0 or mmin / unorm <= SEPARABILITY_FLOOR:
        raise NotSeparableError("no direction separates the points")
    if status == 1:
        raise NoCertificateError(f"relative duality gap {gap:.3g} > {tol:g} after {steps} steps")

    w_star = u / unorm
    margins = P @ w_star
    gamma = float(margins.min())
    support = tuple(int(i) for i in np.flatnonzero(margins <= gamma * (1.0 + tol)))
    return MarginCertificate(gamma, w_star, support, float(gap), tol, int(steps))


@dataclass(frozen=True)
class CertificateReport:
    ok: bool
    unit_error: float
    min_margin: float
    worst_index: int
    slack: float  # min_margin - gamma * (1 - tol)
    gap_ok: bool
    failures: tuple[str, ...]


def verify_certificate(cert: MarginCertificate, data: Dataset | np.ndarray) -> CertificateReport:
    P = data.flat() if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    if P.shape[1] != cert.w_star.shape[0]:
        raise ValueError("certificate and data dimensions differ")
    margins = P @ cert.w_star
    worst = int(np.argmin(margins))
    min_margin = float(margins[worst])
    unit_error = abs(float(np.linalg.norm(cert.w_star)) - 1.0)
    slack = min_margin - cert.gamma * (1.0 - cert.tol)
    failures = []
    if unit_error > 1e-10:
        failures.append(f"||w*|| off by {unit_error:.3g}")
    if slack < 0:
        failures.append(f"point {worst} has margin {min_margin:.17g} below gamma*(1-tol)")
    gap_ok = 0.0 <= cert.duality_gap <= cert.tol
    if not gap_ok:
        failures.append(f"duality gap {cert.duality_gap:.3g} exceeds tol {cert.tol:g}")
    if not cert.gamma > 0:
        failures.append("gamma is not positive")
    return CertificateReport(not failures, unit_error, min_margin, worst, slack, gap_ok, tuple(failures))


def local_margins(data: Dataset, tol: float = DEFAULT_TOL) -> list[float]:
    return [solve_max_margin(data.points[m], tol).gamma for m in range(data.M)]


def write_certificate_csv(cert: MarginCertificate, path) -> None:
    with open(path, "w", newline="") as f:
        out = csv.writer(f, lineterminator="\n")
        out.writerow(["gamma", "duality_gap"] + [f"w{j}" for j in range(cert.w_star.shape[0])])
        out.writerow([format(v, ".17g") for v in (cert.gamma, cert.duality_gap, *cert.w_star)])


def read_certificate_csv(path, tol: float = DEFAULT_TOL) -> MarginCertificate:
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r]
    if len(rows) != 2 or rows[0][:2] != ["gamma", "duality_gap"]:
        raise ValueError(f"{path}: not a certificate CSV")
    vals = [float(v) for v in rows[1]]
    return MarginCertificate(vals[0], np.array(vals[2:]), (), vals[1], tol)

"""Local GD (K local gradient steps per client, then averaging) with telemetry.

Within a round client m starts from w_r and runs K steps of GD on F_m. The
server then moves to the client average. The applied update is computed as
-(eta/M) sum_m sum_k grad F_m(w_{r,k}^m), which equals the endpoint average
in exact arithmetic; with one client the endpoint itself is used. Both
choices make K = 1 and M = 1 reduce to plain GD bit-for-bit.

Per round we record the loss, the beta coefficients

    beta_{r,i}^m = (1/K) sum_{k<K} |l'(b_{r,i,k}^m)| / |l'(b_{r,i}^m)|,

the update bias b_r = (1/MK) sum_{m,k} (grad F_m(w_{r,k}^m) - grad F_m(w_r)),
and the local-step quantities the stability checks need.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kern
from .dataset import Dataset

__all__ = [
    "RunConfig",
    "RoundRecord",
    "Trajectory",
    "DivergenceError",
    "TelemetryMissingError",
    "local_update",
    "round",
    "run",
    "beta_table",
    "gradient_descent",
    "transition_threshold",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "TRAJECTORY_COLUMNS",
]

_SCALARS = ("loss", "grad_norm", "param_norm", "movement", "bias_norm", "beta_min",
            "beta_max", "beta_mean", "potential", "local_loss_rise", "local_move_max")

TRAJECTORY_COLUMNS = ("r", "loss", "grad_norm", "param_norm", "movement", "bias_norm",
                      "beta_min", "beta_max", "beta_mean", "potential", "stable",
                      "normalized_rate")


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, message: str = ""):
        super().__init__(message or f"non-finite iterate at local step {step}")
        self.step = step


class TelemetryMissingError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    eta: float
    K: int
    R: int
    w0: np.ndarray | None = None  # None means the zero vector
    divergence_cap: float = 1e6
    record_level: str = "summary"
    max_full_rounds: int = 10_000

    def __post_init__(self):
        if not (math.isfinite(self.eta) and self.eta > 0):
            raise ValueError("eta must be positive and finite")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError("K must be a positive integer")
        if int(self.R) != self.R or self.R < 1:
            raise ValueError("R must be a positive integer")
        if not self.divergence_cap > math.log(2):
            raise ValueError("divergence_cap must exceed log 2")
        if self.record_level not in ("summary", "full"):
            raise ValueError("record_level must be 'summary' or 'full'")
        if self.record_level == "full" and self.R > self.max_full_rounds:
            raise ValueError(f"full recording is limited to {self.max_full_rounds} rounds; "
                             "raise max_full_rounds to override")
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "R", int(self.R))
        if self.w0 is not None:
            w0 = np.array(self.w0, dtype=np.float64)
            if w0.ndim != 1 or not np.all(np.isfinite(w0)):
                raise ValueError("w0 must be a finite vector")
            w0.setflags(write=False)
            object.__setattr__(self, "w0", w0)

    def initial(self, d: int) -> np.ndarray:
        if self.w0 is None:
            return np.zeros(d)
        if self.w0.shape != (d,):
            raise ValueError(f"w0 has dimension {self.w0.shape[0]}, data has {d}")
        return self.w0.copy()

    @property
    def full(self) -> bool:
        return self.record_level == "full"


@dataclass(frozen=True)
class RoundRecord:
    r: int
    loss: float
    grad_norm: float
    param_norm: float
    movement: float
    bias_norm: float
    beta_min: float
    beta_max: float
    beta_mean: float
    potential: float
    stable: bool
    normalized_rate: float


def transition_threshold(gamma: float, eta: float, K: int, M: int) -> float:
    """Loss level gamma / (70 eta K M) below which the update bias is provably small."""
    return gamma / (70.0 * eta * K * M)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Columnar record of a run. Arrays are read-only.

    ``scalars`` has one row per completed round and the columns in
    ``_SCALARS``. At full record level ``vectors[r]`` stacks
    (w_r, grad F(w_r), b_r, w_{r+1} - w_r) and ``point_data[r]`` stacks
    (b_{r,i}^m, beta_{r,i}^m).
    """

    config: RunConfig
    gamma: float
    M: int
    n: int
    scalars: np.ndarray
    final_w: np.ndarray
    final_loss: float
    diverged: int | None = None
    transition_round: int | None = None
    vectors: np.ndarray | None = None
    point_data: np.ndarray | None = None
    _records: list = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("scalars", "final_w", "vectors", "point_data"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self):
        return self.scalars.shape[0]

    def __getattr__(self, name):
        if name in _SCALARS:
            return self.scalars[:, _SCALARS.index(name)]
        raise AttributeError(name)

    @property
    def rounds(self) -> np.ndarray:
        return np.arange(len(self))

    @property
    def stable(self) -> np.ndarray:
        if self.transition_round is None:
            return np.zeros(len(self), dtype=bool)
        return self.rounds >= self.transition_round

    @property
    def normalized_rate(self) -> np.ndarray:
        c = self.config
        return c.eta * self.gamma ** 2 * c.K * self.rounds * self.loss

    @property
    def final_normalized_rate(self) -> float:
        """eta gamma^2 K r F(w_r) at r = number of completed rounds."""
        c = self.config
        return c.eta * self.gamma ** 2 * c.K * len(self) * self.final_loss

    @property
    def records(self) -> list[RoundRecord]:
        if self._records is None:
            object.__setattr__(self, "_records", [self.record(r) for r in range(len(self))])
        return self._records

    def record(self, r: int) -> RoundRecord:
        row = self.scalars[r]
        return RoundRecord(r, *(float(row[j]) for j in range(9)), bool(self.stable[r]),
                           float(self.normalized_rate[r]))

    def require_full(self):
        if self.vectors is None or self.point_data is None:
            raise TelemetryMissingError("run was recorded at summary level")

    @property
    def weights(self) -> np.ndarray:
        self.require_full()
        return self.vectors[:, 0]

    @property
    def global_grads(self) -> np.ndarray:
        self.require_full()
        return self.vectors[:, 1]

    @property
    def biases(self) -> np.ndarray:
        self.require_full()
        return self.vectors[:, 2]

    @property
    def updates(self) -> np.ndarray:
        self.require_full()
        return self.vectors[:, 3]

    @property
    def margins(self) -> np.ndarray:
        self.require_full()
        return self.point_data[:, 0]

    @property
    def betas(self) -> np.ndarray:
        self.require_full()
        return self.point_data[:, 1]


# ---------------------------------------------------------------------------


def local_update(w, data: Dataset, m: int, eta: float, K: int):
    """K gradient steps on F_m from w.

    Returns ``(endpoint, margins)`` where ``margins[i, k] = <w_{r,k}^m, x_i^m>``
    for k = 0..K-1 (the endpoint's margins are not stored).
    """
    if not 0 <= m < data.M:
        raise IndexError(f"client {m} out of range")
    if eta < 0 or K < 1:
        raise ValueError("need eta >= 0 and K >= 1")
    w = np.ascontiguousarray(w, dtype=np.float64)
    margins = np.empty((data.n, K))
    endpoint, failed = kern.local_steps(w, data.points[m], float(eta), int(K), margins)
    if failed >= 0:
        raise DivergenceError(int(failed))
    return endpoint, margins


def _buffers(R, data, K, full):
    scal = np.full((R, len(_SCALARS)), np.nan)
    if full:
        vecs = np.full((R, 4, data.d), np.nan)
        pts = np.full((R, 2, data.M, data.n), np.nan)
    else:
        vecs = np.empty((1, 4, data.d))
        pts = np.empty((1, 2, data.M, data.n))
    return scal, vecs, pts


def round(w, data: Dataset, config: RunConfig):
    """One round from w. Returns ``(w_next, RoundRecord)`` with r = 0."""
    w = np.ascontiguousarray(w, dtype=np.float64)
    if w.shape != (data.d,):
        raise ValueError("weights and data dimensions differ")
    scal, vecs, pts = _buffers(1, data, config.K, False)
    w_next, status = kern.round_into(w, data.points, float(config.eta), config.K, 0,
                                     scal, vecs, pts, False)
    if status >= 0:
        raise DivergenceError(int(status))
    row = scal[0]
    rec = RoundRecord(0, *(float(v) for v in row[:9]), False, 0.0)
    return w_next, rec


def run(config: RunConfig, data: Dataset, gamma: float) -> Trajectory:
    """Run R rounds of Local GD; divergence truncates the trajectory instead of raising."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    w0 = config.initial(data.d)
    scal, vecs, pts = _buffers(config.R, data, config.K, config.full)
    w_last, done, div = kern.run_rounds(w0, data.points, float(config.eta), config.K,
                                        config.R, float(config.divergence_cap), scal, vecs,
                                        pts, config.full)
    done = int(done)
    diverged = None if div < 0 else int(div)
    scal = scal[:done].copy()
    if config.full:
        vecs = vecs[:done].copy()
        pts = pts[:done].copy()
    else:
        vecs = pts = None
    final_loss = kern.total_loss(w_last, data.points)

    threshold = transition_threshold(gamma, config.eta, config.K, data.M)
    below = np.flatnonzero(scal[:, 0] <= threshold)
    transition = int(below[0]) if below.size else None
    return Trajectory(config, float(gamma), data.M, data.n, scal, np.array(w_last),
                      float(final_loss), diverged, transition, vecs, pts)


def beta_table(traj: Trajectory) -> np.ndarray:
    """All beta_{r,i}^m as an (R, M, n) array; needs a full-level trajectory."""
    traj.require_full()
    return traj.betas


def gradient_descent(w0, data: Dataset, eta: float, steps: int) -> np.ndarray:
    """Plain GD on the global objective: w <- w - eta * grad F(w)."""
    w0 = np.ascontiguousarray(w0, dtype=np.float64)
    return kern.gradient_descent(w0, data.points, float(eta), int(steps))


# ---------------------------------------------------------------------------
# CSV


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_trajectory_csv(traj: Trajectory, path) -> None:
    stable = traj.stable
    rate = traj.normalized_rate
    with open(path, "w", newline="") as f:
        out = csv.writer(f, lineterminator="\n")
        out.writerow(TRAJECTORY_COLUMNS)
        for r in range(len(traj)):
            row = traj.scalars[r]
            out.writerow([r, *(_fmt(row[j]) for j in range(9)), int(stable[r]), _fmt(rate[r])])


def read_trajectory_csv(path) -> dict[str, np.ndarray]:
    """Load a trajectory CSV into column arrays keyed by header name."""
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r]
    if not rows or tuple(rows[0]) != TRAJECTORY_COLUMNS:
        raise ValueError(f"{path}: header does not match the trajectory schema")
    try:
        body = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed value ({exc})") from None
    if body.size == 0:
        body = body.reshape(0, len(TRAJECTORY_COLUMNS))
    if body.shape[1] != len(TRAJECTORY_COLUMNS):
        raise ValueError(f"{path}: ragged rows")
    return {name: body[:, j] for j, name in enumerate(TRAJECTORY_COLUMNS)}

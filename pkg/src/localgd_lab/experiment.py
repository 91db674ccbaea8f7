"""Grid experiments over (eta, K) driven by an INI spec file.

Spec grammar (``#`` or ``;`` start comments; lists are comma or space
separated; numbers may be written ``2^k``; relative paths resolve against
the spec file's directory)::

    [dataset]
    kind = synthetic | margin_split | csv | idx
    # synthetic:     delta = 0.1, g = 10
    # margin_split:  splits = homogeneous, mixed, heterogeneous ; base_margin = 0.2
    # csv:           path = points.csv  (canonical dataset CSV)
    # idx:           images = ..., labels = ..., subset = 1000, clients = 5,
    #                s = 50, seed = <global seed>, offset = 127

    [sweep]
    eta = 2^-2, 1, 4
    K = 1, 4, 16

    [run]
    rounds = 2048
    w0 = zero | <file of comma separated floats>
    divergence_cap = 1e6
    record_level = summary | full
    max_full_rounds = 10000

    [output]
    dir = out
    plots = yes

    [checks]
    theory = yes
    asymptotic = no

Every run writes, under the output directory, ``<ds>_eta<η>_K<K>.csv`` per
cell (plus ``..._theory.csv`` when checks are on), ``<ds>_certificate.csv``,
``<ds>_dataset.csv``, ``manifest.csv`` and ``summary.csv``, and optionally
SVG comparisons at fixed K and at fixed eta.
"""

from __future__ import annotations

import configparser
import csv
import itertools
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import localgd, theory
from .dataset import (SPLIT_KINDS, Dataset, SplitSpec, gen_margin_splits, gen_synthetic,
                      mnist_protocol, read_dataset_csv, write_dataset_csv)
from .margin import MarginCertificate, solve_max_margin, write_certificate_csv
from .plot import render_svg

__all__ = [
    "SpecError",
    "DatasetSpec",
    "ExperimentSpec",
    "ExperimentResult",
    "parse_spec",
    "load_spec",
    "build_datasets",
    "run_experiment",
    "asymptotic_rate_study",
    "MANIFEST_COLUMNS",
    "SUMMARY_COLUMNS",
    "GAMMA_MATCH_TOL",
]

MANIFEST_COLUMNS = ("dataset", "eta", "K", "status", "diverged_round", "final_loss", "violations")
SUMMARY_COLUMNS = ("dataset", "eta", "K", "rounds", "final_loss", "final_normalized_rate",
                   "transition_round", "tau", "violations")
GAMMA_MATCH_TOL = 1e-8
DEFAULT_ROUNDS = 2048


class SpecError(ValueError):
    """The experiment spec does not parse or validate."""


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    params: dict = field(default_factory=dict)
    splits: tuple[str, ...] = ()


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: DatasetSpec
    etas: tuple[float, ...]
    Ks: tuple[int, ...]
    rounds: int = DEFAULT_ROUNDS
    w0: np.ndarray | None = None
    divergence_cap: float = 1e6
    record_level: str = "summary"
    max_full_rounds: int = 10_000
    out_dir: Path = Path("out")
    plots: bool = True
    theory: bool = True
    asymptotic: bool = False
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if not self.etas or not self.Ks:
            raise SpecError("sweep lists must be nonempty")
        if any(not (math.isfinite(e) and e > 0) for e in self.etas):
            raise SpecError("eta values must be positive")
        if any(int(k) != k or k < 1 for k in self.Ks):
            raise SpecError("K values must be integers >= 1")
        if self.rounds < 1:
            raise SpecError("rounds must be >= 1")
        if self.record_level not in ("summary", "full"):
            raise SpecError("record_level must be summary or full")
        if self.record_level == "full" and self.rounds > self.max_full_rounds:
            raise SpecError(f"full recording is limited to max_full_rounds = {self.max_full_rounds}")
        if not self.divergence_cap > math.log(2):
            raise SpecError("divergence_cap must exceed log 2")
        if self.jobs < 1:
            raise SpecError("jobs must be >= 1")

    def cells(self):
        return list(itertools.product(sorted(set(self.etas)), sorted(set(self.Ks))))


@dataclass
class ExperimentResult:
    manifest: list[dict]
    files: list[Path]
    violating: list[tuple[str, float, int]]
    asymptotic: list[dict] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 1 if self.violating else 0


# ---------------------------------------------------------------------------
# parsing


def _number(tok: str) -> float:
    tok = tok.strip()
    try:
        if "^" in tok:
            base, exp = tok.split("^", 1)
            return float(base) ** float(exp)
        return float(tok)
    except ValueError:
        raise SpecError(f"not a number: {tok!r}") from None


def _list(raw: str) -> list[str]:
    return [t for t in raw.replace(",", " ").split() if t]


def _bool(sec, key, default):
    try:
        return sec.getboolean(key, fallback=default)
    except ValueError:
        raise SpecError(f"[{sec.name}] {key} must be yes/no") from None


def _int(sec, key, default):
    raw = sec.get(key)
    if raw is None:
        return default
    v = _number(raw)
    if v != int(v):
        raise SpecError(f"[{sec.name}] {key} must be an integer")
    return int(v)


def _read_w0(path: Path) -> np.ndarray:
    try:
        text = path.read_text()
    except OSError as exc:
        raise SpecError(f"cannot read w0 file {path}: {exc}") from None
    vals = [_number(t) for t in _list(text)]
    if not vals:
        raise SpecError(f"w0 file {path} is empty")
    return np.array(vals)


def parse_spec(text: str, base_dir=".", seed: int = 0, out_dir=None,
               record_level: str | None = None, jobs: int = 1) -> ExperimentSpec:
    """Parse spec text. Keyword arguments are command-line overrides."""
    base_dir = Path(base_dir)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise SpecError(f"unparseable spec: {exc}") from None
    for name in ("dataset", "sweep"):
        if not cp.has_section(name):
            raise SpecError(f"missing [{name}] section")
    known = {"dataset", "sweep", "run", "output", "checks"}
    extra = set(cp.sections()) - known
    if extra:
        raise SpecError(f"unknown sections: {sorted(extra)}")
    for name in known - set(cp.sections()):
        cp.add_section(name)

    ds = cp["dataset"]
    kind = ds.get("kind", "").strip()
    params = {k: v for k, v in ds.items() if k not in ("kind", "splits")}
    splits: tuple[str, ...] = ()
    if kind == "synthetic":
        params = {"delta": _number(params.get("delta", "0.1")), "g": _number(params.get("g", "10"))}
    elif kind == "margin_split":
        splits = tuple(_list(ds.get("splits", ",".join(SPLIT_KINDS))))
        bad = [s for s in splits if s not in SPLIT_KINDS]
        if bad or not splits:
            raise SpecError(f"unknown split kinds {bad}; choose from {SPLIT_KINDS}")
        params = {"base_margin": _number(params.get("base_margin", "0.2"))}
    elif kind == "csv":
        if "path" not in params:
            raise SpecError("csv dataset needs path")
        params = {"path": base_dir / params["path"]}
    elif kind == "idx":
        if "images" not in params or "labels" not in params:
            raise SpecError("idx dataset needs images and labels")
        params = {
            "images": base_dir / params["images"],
            "labels": base_dir / params["labels"],
            "subset": _int(ds, "subset", 1000),
            "M": _int(ds, "clients", 5),
            "s": _number(params.get("s", "50")),
            "seed": _int(ds, "seed", seed),
            "offset": _number(params.get("offset", "127")),
        }
    else:
        raise SpecError(f"dataset kind must be synthetic, margin_split, csv or idx (got {kind!r})")

    sw = cp["sweep"]
    etas = tuple(_number(t) for t in _list(sw.get("eta", "")))
    Ks_raw = [_number(t) for t in _list(sw.get("k", ""))]
    if any(k != int(k) for k in Ks_raw):
        raise SpecError("K values must be integers")
    Ks = tuple(int(k) for k in Ks_raw)

    run = cp["run"]
    w0_raw = run.get("w0", "zero").strip()
    w0 = None if w0_raw == "zero" else _read_w0(base_dir / w0_raw)
    out = cp["output"]
    chk = cp["checks"]
    level = record_level or run.get("record_level", "summary").strip()
    try:
        return ExperimentSpec(
            dataset=DatasetSpec(kind, params, splits),
            etas=etas,
            Ks=Ks,
            rounds=_int(run, "rounds", DEFAULT_ROUNDS),
            w0=w0,
            divergence_cap=_number(run.get("divergence_cap", "1e6")),
            record_level=level,
            max_full_rounds=_int(run, "max_full_rounds", 10_000),
            out_dir=Path(out_dir) if out_dir is not None else base_dir / out.get("dir", "out"),
            plots=_bool(out, "plots", True),
            theory=_bool(chk, "theory", True),
            asymptotic=_bool(chk, "asymptotic", False),
            seed=seed,
            jobs=jobs,
        )
    except SpecError:
        raise
    except (TypeError, ValueError) as exc:
        raise SpecError(str(exc)) from None


def load_spec(path, **overrides) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SpecError(f"cannot read spec {path}: {exc}") from None
    return parse_spec(text, base_dir=path.parent, **overrides)


# ---------------------------------------------------------------------------
# datasets


def build_datasets(ds: DatasetSpec) -> list[tuple[str, Dataset]]:
    """(name, Dataset) pairs; margin_split yields one entry per kind."""
    p = ds.params
    if ds.kind == "synthetic":
        return [("synthetic", gen_synthetic(p["delta"], p["g"]))]
    if ds.kind == "margin_split":
        return [(k, gen_margin_splits(SplitSpec(k, p["base_margin"]))) for k in ds.splits]
    if ds.kind == "csv":
        return [(Path(p["path"]).stem, read_dataset_csv(p["path"]))]
    if ds.kind == "idx":
        data = mnist_protocol(p["images"], p["labels"], p["subset"], p["M"], p["s"], p["seed"],
                              p["offset"])
        return [("idx", data)]
    raise SpecError(f"unknown dataset kind {ds.kind!r}")


# ---------------------------------------------------------------------------
# cells


def _fmt(v) -> str:
    return format(float(v), ".17g")


def cell_name(dataset: str, eta: float, K: int) -> str:
    return f"{dataset}_eta{eta:g}_K{K}"


def _write_atomic(path: Path, writer) -> Path:
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)
    return path


def _run_cell(job):
    name, data, cert, eta, K, spec = job
    config = localgd.RunConfig(eta, K, spec.rounds, spec.w0, spec.divergence_cap,
                               spec.record_level, spec.max_full_rounds)
    traj = localgd.run(config, data, cert.gamma)
    stem = spec.out_dir / cell_name(name, eta, K)
    files = [_write_atomic(stem.with_suffix(".csv"),
                           lambda p: localgd.write_trajectory_csv(traj, p))]
    violations, summary, tau = 0, {}, float("nan")
    if spec.theory:
        report = theory.check_trajectory(traj, cert, data)
        violations, summary, tau = report.violations, report.summary, report.tau
        theory_path = stem.with_name(stem.name + "_theory.csv")
        files.append(_write_atomic(theory_path, lambda p: theory.write_report_csv(report, p)))
    if violations:
        status = "violation"
    elif traj.diverged is not None:
        status = "diverged"
    else:
        status = "ok"
    return {
        "dataset": name, "eta": eta, "K": K, "status": status,
        "diverged_round": traj.diverged, "final_loss": traj.final_loss,
        "violations": violations, "violation_detail": {k: v for k, v in summary.items() if v},
        "rounds": len(traj), "final_normalized_rate": traj.final_normalized_rate,
        "transition_round": traj.transition_round, "tau": tau, "files": files,
    }


def _opt(v) -> str:
    return "" if v is None else str(v)


def _write_table(path: Path, header, rows) -> Path:
    def w(p):
        with open(p, "w", newline="") as f:
            out = csv.writer(f, lineterminator="\n")
            out.writerow(header)
            out.writerows(rows)
    return _write_atomic(path, w)


def _grid_plots(spec: ExperimentSpec, name: str) -> list[Path]:
    files = []
    etas, Ks = sorted(set(spec.etas)), sorted(set(spec.Ks))

    def load(eta, K):
        cols = localgd.read_trajectory_csv(spec.out_dir / f"{cell_name(name, eta, K)}.csv")
        return cols["r"], cols["loss"]

    for K in Ks:
        series = [(f"eta={eta:g}", *load(eta, K)) for eta in etas]
        text = render_svg(series, f"{name}, K={K}")
        path = spec.out_dir / f"{name}_K{K}.svg"
        files.append(_write_atomic(path, lambda p: p.write_text(text)))
    for eta in etas:
        series = [(f"K={K}", *load(eta, K)) for K in Ks]
        text = render_svg(series, f"{name}, eta={eta:g}")
        path = spec.out_dir / f"{name}_eta{eta:g}.svg"
        files.append(_write_atomic(path, lambda p: p.write_text(text)))
    return files


def _check_same_gamma(certs: dict[str, MarginCertificate]):
    gammas = {k: c.gamma for k, c in certs.items()}
    lo, hi = min(gammas.values()), max(gammas.values())
    if hi - lo > GAMMA_MATCH_TOL:
        raise SpecError(f"split kinds do not share one global margin: {gammas}")


def _asymptotic_tables(spec: ExperimentSpec, names: list[str], rows: list[dict]) -> tuple[list[Path], list[dict]]:
    files, summary = [], []
    by_cell = {(r["dataset"], r["eta"], r["K"]): r for r in rows}
    for eta, K in spec.cells():
        cols = {}
        for name in names:
            traj = localgd.read_trajectory_csv(spec.out_dir / f"{cell_name(name, eta, K)}.csv")
            row = by_cell[(name, eta, K)]
            cols[name] = np.append(traj["normalized_rate"], row["final_normalized_rate"])
        length = max(len(c) for c in cols.values())
        table = []
        for r in range(length):
            table.append([r] + [_fmt(cols[nm][r]) if r < len(cols[nm]) else "" for nm in names])
        files.append(_write_table(spec.out_dir / f"asymptotic_eta{eta:g}_K{K}.csv",
                                  ["r", *names], table))
        finals = {nm: by_cell[(nm, eta, K)]["final_normalized_rate"] for nm in names}
        vals = list(finals.values())
        spread = max(abs(a - b) / max(abs(a), abs(b)) for a in vals for b in vals) if vals else 0.0
        for nm in names:
            summary.append({"eta": eta, "K": K, "kind": nm,
                            "final_round": by_cell[(nm, eta, K)]["rounds"],
                            "final_rate": finals[nm], "max_pairwise_rel_diff": spread})
    files.append(_write_table(
        spec.out_dir / "asymptotic_summary.csv",
        ["eta", "K", "kind", "final_round", "final_rate", "max_pairwise_rel_diff"],
        [[_fmt(s["eta"]), s["K"], s["kind"], s["final_round"], _fmt(s["final_rate"]),
          _fmt(s["max_pairwise_rel_diff"])] for s in summary]))
    return files, summary


def run_experiment(spec: ExperimentSpec, datasets=None) -> ExperimentResult:
    """Run every (dataset, eta, K) cell and write all outputs.

    ``datasets`` may supply prebuilt (name, Dataset) pairs; otherwise they
    are built from ``spec.dataset``. Dataset and margin errors propagate.
    """
    if datasets is None:
        datasets = build_datasets(spec.dataset)
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    certs = {}
    for name, data in datasets:
        cert = solve_max_margin(data)
        certs[name] = cert
        files.append(_write_atomic(spec.out_dir / f"{name}_certificate.csv",
                                   lambda p: write_certificate_csv(cert, p)))
        files.append(_write_atomic(spec.out_dir / f"{name}_dataset.csv",
                                   lambda p: write_dataset_csv(data, p)))
    if spec.asymptotic and len(certs) > 1:
        _check_same_gamma(certs)

    jobs = [(name, data, certs[name], eta, K, spec)
            for name, data in datasets for eta, K in spec.cells()]
    if spec.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    # manifest order: dataset order, then (eta, K)
    for row in rows:
        files.extend(row.pop("files"))

    files.append(_write_table(spec.out_dir / "manifest.csv", MANIFEST_COLUMNS, [
        [r["dataset"], _fmt(r["eta"]), r["K"], r["status"], _opt(r["diverged_round"]),
         _fmt(r["final_loss"]), r["violations"]] for r in rows]))
    files.append(_write_table(spec.out_dir / "summary.csv", SUMMARY_COLUMNS, [
        [r["dataset"], _fmt(r["eta"]), r["K"], r["rounds"], _fmt(r["final_loss"]),
         _fmt(r["final_normalized_rate"]), _opt(r["transition_round"]),
         "" if not math.isfinite(r["tau"]) else _fmt(r["tau"]), r["violations"]] for r in rows]))

    if spec.plots:
        for name, _ in datasets:
            files.extend(_grid_plots(spec, name))
    study = []
    if spec.asymptotic:
        extra, study = _asymptotic_tables(spec, [n for n, _ in datasets], rows)
        files.extend(extra)

    violating = [(r["dataset"], r["eta"], r["K"]) for r in rows if r["status"] == "violation"]
    return ExperimentResult(rows, files, violating, study)


def asymptotic_rate_study(spec: ExperimentSpec) -> ExperimentResult:
    """Normalized-rate comparison across margin-split kinds sharing one global dataset."""
    if spec.dataset.kind != "margin_split" or len(spec.dataset.splits) < 1:
        raise SpecError("the asymptotic study needs a margin_split dataset")
    return run_experiment(replace(spec, asymptotic=True))

"""Command-line entry point.

    localgd-lab run <spec.ini>
    localgd-lab margins <dataset.csv | synthetic | homogeneous | mixed | heterogeneous>
    localgd-lab plot <trajectory.csv>... -o <out.svg>
    localgd-lab check <trajectory.csv> <certificate.csv> --eta E --K K --clients M --points n

Exit codes: 0 success, 1 bound violation, 2 bad spec or arguments,
3 dataset error (unreadable, malformed, or not separable).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import localgd, theory
from .dataset import (SPLIT_KINDS, DatasetError, SplitSpec, gen_margin_splits, gen_synthetic,
                      read_dataset_csv)
from .experiment import SpecError, load_spec, run_experiment
from .margin import (NoCertificateError, NotSeparableError, local_margins, read_certificate_csv,
                     solve_max_margin, write_certificate_csv)
from .plot import emit_plot

EXIT_OK, EXIT_VIOLATION, EXIT_SPEC, EXIT_DATA = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_SPEC, f"{self.prog}: error: {message}\n")


def _common(defaults: bool) -> argparse.ArgumentParser:
    # flags are accepted before or after the subcommand; only the top level
    # carries defaults so a subcommand cannot reset an earlier value
    c = argparse.ArgumentParser(add_help=False)
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    c.add_argument("--seed", type=int, default=d(0), help="seed for shuffles and subsets")
    c.add_argument("--out-dir", type=Path, default=d(None), help="override the output directory")
    c.add_argument("--record-level", choices=("summary", "full"), default=d(None))
    c.add_argument("--jobs", type=int, default=d(1), help="grid cells run in parallel")
    return c


def build_parser() -> argparse.ArgumentParser:
    common = _common(False)
    p = _Parser(prog="localgd-lab", description="Local GD simulator and bound checker",
                parents=[_common(True)])
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    r = sub.add_parser("run", parents=[common], help="run an experiment spec")
    r.add_argument("spec", type=Path)

    m = sub.add_parser("margins", parents=[common], help="max-margin certificate of a dataset")
    m.add_argument("dataset")
    m.add_argument("-o", "--output", type=Path, default=None, help="write the certificate CSV")

    pl = sub.add_parser("plot", parents=[common], help="SVG loss curves from trajectory CSVs")
    pl.add_argument("csv", nargs="*", type=Path)
    pl.add_argument("-o", "--output", type=Path, required=True)
    pl.add_argument("--title", default="")

    c = sub.add_parser("check", parents=[common], help="check bounds on a trajectory CSV")
    c.add_argument("trajectory", type=Path)
    c.add_argument("certificate", type=Path)
    c.add_argument("--eta", type=float, required=True)
    c.add_argument("--K", type=int, required=True)
    c.add_argument("--clients", type=int, required=True, help="M")
    c.add_argument("--points", type=int, required=True, help="points per client n")
    c.add_argument("--w0-norm", type=float, default=0.0)
    c.add_argument("-o", "--output", type=Path, default=None, help="write the report CSV")
    return p


def _load_dataset(arg: str):
    if arg == "synthetic":
        return gen_synthetic()
    if arg in SPLIT_KINDS:
        return gen_margin_splits(SplitSpec(arg))
    return read_dataset_csv(arg)


def _cmd_run(args) -> int:
    spec = load_spec(args.spec, seed=args.seed, out_dir=args.out_dir,
                     record_level=args.record_level, jobs=args.jobs)
    result = run_experiment(spec)
    for row in result.manifest:
        print(f"{row['dataset']:>14}  eta={row['eta']:<8g} K={row['K']:<4d} {row['status']:<9} "
              f"final_loss={row['final_loss']:.6g}")
    if result.violating:
        print("bound violations in:", file=sys.stderr)
        for row in result.manifest:
            if row["status"] == "violation":
                print(f"  {row['dataset']} eta={row['eta']:g} K={row['K']}: "
                      f"{row['violation_detail']}", file=sys.stderr)
    for s in result.asymptotic:
        print(f"normalized rate eta={s['eta']:g} K={s['K']} {s['kind']}: {s['final_rate']:.6f}")
    print(f"outputs in {spec.out_dir}")
    return result.exit_code


def _cmd_margins(args) -> int:
    data = _load_dataset(args.dataset)
    cert = solve_max_margin(data)
    print(f"gamma         {cert.gamma:.17g}")
    print(f"gamma_upper   {cert.gamma_upper:.17g}")
    print(f"duality_gap   {cert.duality_gap:.3g}")
    print(f"support       {list(cert.support)}")
    print("w_star        " + " ".join(f"{v:.12g}" for v in cert.w_star))
    if data.M > 1:
        try:
            print("local gammas  " + " ".join(f"{g:.12g}" for g in local_margins(data)))
        except NotSeparableError:
            print("local gammas  (some client is not separable on its own)")
    out = args.output
    if out is None and args.out_dir is not None:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        out = args.out_dir / "certificate.csv"
    if out is not None:
        write_certificate_csv(cert, out)
    return EXIT_OK


def _cmd_plot(args) -> int:
    if not args.csv:
        print("plot: no trajectory CSVs given", file=sys.stderr)
        return EXIT_SPEC
    emit_plot(args.csv, args.output, args.title)
    return EXIT_OK


def _trajectory_from_csv(path, config: localgd.RunConfig, gamma: float, M: int, n: int, d: int):
    cols = localgd.read_trajectory_csv(path)
    rows = cols["r"].shape[0]
    if rows == 0:
        raise ValueError(f"{path}: no rounds")
    if not np.array_equal(cols["r"], np.arange(rows)):
        raise ValueError(f"{path}: rounds must run 0..{rows - 1}")
    scal = np.full((rows, len(localgd._SCALARS)), np.nan)
    for j, name in enumerate(localgd._SCALARS):
        if name in cols:
            scal[:, j] = cols[name]
    return localgd.Trajectory(config, gamma, M, n, scal, np.full(d, np.nan), float("nan"))


def _cmd_check(args) -> int:
    cert = read_certificate_csv(args.certificate)
    cols_rounds = localgd.read_trajectory_csv(args.trajectory)["r"].shape[0]
    config = localgd.RunConfig(args.eta, args.K, max(cols_rounds, 1))
    traj = _trajectory_from_csv(args.trajectory, config, cert.gamma, args.clients, args.points,
                                cert.w_star.shape[0])
    params = theory.BoundParams(args.eta, args.K, args.clients, args.points, len(traj),
                                cert.gamma_lower, args.w0_norm)
    report = theory.check_trajectory(traj, cert, None, params)
    print(f"psi = {report.psi:.6g}, tau = {report.tau:.6g}")
    for key, count in report.summary.items():
        print(f"{key:<14} {'ok' if count == 0 else f'{count} violations'}")
    for note in report.notes:
        print(f"note: {note}")
    if args.output is not None:
        theory.write_report_csv(report, args.output)
    return EXIT_OK if report.ok else EXIT_VIOLATION


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": _cmd_run, "margins": _cmd_margins, "plot": _cmd_plot, "check": _cmd_check}
    try:
        return handler[args.cmd](args)
    except SpecError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except (DatasetError, NotSeparableError, NoCertificateError, OSError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # malformed trajectory or certificate CSVs, bad numeric flags
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC


if __name__ == "__main__":
    sys.exit(main())

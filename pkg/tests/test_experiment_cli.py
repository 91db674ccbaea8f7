import csv
import math
import re
import subprocess
import sys

import numpy as np
import pytest

from localgd_lab import cli, experiment, localgd
from localgd_lab.dataset import Dataset, gen_synthetic
from localgd_lab.experiment import (
    MANIFEST_COLUMNS,
    SpecError,
    asymptotic_rate_study,
    cell_name,
    load_spec,
    parse_spec,
    run_experiment,
)
from localgd_lab.localgd import RunConfig, Trajectory, run, write_trajectory_csv
from localgd_lab.margin import solve_max_margin, write_certificate_csv
from localgd_lab.plot import LOSS_FLOOR, emit_plot, render_svg

SMALL = """
[dataset]
kind = synthetic

[sweep]
eta = 1, 4
K = 2^0 2^2   # powers are allowed

[run]
rounds = 12

[output]
dir = out
"""


def _spec(tmp_path, text=SMALL, name="spec.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# --- parsing ----------------------------------------------------------------


def test_parse_small_spec(tmp_path):
    spec = parse_spec(SMALL, base_dir=tmp_path)
    assert spec.etas == (1.0, 4.0) and spec.Ks == (1, 4)
    assert spec.rounds == 12 and spec.w0 is None and spec.record_level == "summary"
    assert spec.out_dir == tmp_path / "out"
    assert spec.cells() == [(1.0, 1), (1.0, 4), (4.0, 1), (4.0, 4)]
    assert spec.dataset.params == {"delta": 0.1, "g": 10.0}


def test_defaults_and_overrides(tmp_path):
    text = "[dataset]\nkind = margin_split\n[sweep]\neta = 2^-2\nK = 1\n"
    spec = parse_spec(text, base_dir=tmp_path, seed=5, out_dir=tmp_path / "x",
                      record_level="full", jobs=3)
    assert spec.rounds == 2048
    assert spec.etas == (0.25,)
    assert spec.dataset.splits == ("homogeneous", "mixed", "heterogeneous")
    assert spec.out_dir == tmp_path / "x" and spec.seed == 5 and spec.jobs == 3
    assert spec.record_level == "full"


def test_w0_file(tmp_path):
    (tmp_path / "w0.txt").write_text("0.5 -0.25\n")
    spec = parse_spec(SMALL.replace("rounds = 12", "rounds = 12\nw0 = w0.txt"), base_dir=tmp_path)
    np.testing.assert_array_equal(spec.w0, [0.5, -0.25])


@pytest.mark.parametrize("text", [
    "not an ini file",
    "[sweep]\neta = 1\nK = 1\n",
    "[dataset]\nkind = synthetic\n",
    "[dataset]\nkind = moons\n[sweep]\neta = 1\nK = 1\n",
    "[dataset]\nkind = synthetic\n[sweep]\neta = \nK = 1\n",
    "[dataset]\nkind = synthetic\n[sweep]\neta = -1\nK = 1\n",
    "[dataset]\nkind = synthetic\n[sweep]\neta = 1\nK = 0\n",
    "[dataset]\nkind = synthetic\n[sweep]\neta = 1\nK = 1.5\n",
    "[dataset]\nkind = synthetic\n[sweep]\neta = abc\nK = 1\n",
    "[dataset]\nkind = synthetic\n[sweep]\neta = 1\nK = 1\n[run]\nrounds = 0\n",
    "[dataset]\nkind = synthetic\n[sweep]\neta = 1\nK = 1\n[run]\nrounds = 20000\n"
    "record_level = full\n",
    "[dataset]\nkind = synthetic\n[sweep]\neta = 1\nK = 1\n[bogus]\n",
    "[dataset]\nkind = margin_split\nsplits = mixed, striped\n[sweep]\neta = 1\nK = 1\n",
    "[dataset]\nkind = csv\n[sweep]\neta = 1\nK = 1\n",
    "[dataset]\nkind = synthetic\n[sweep]\neta = 1\nK = 1\n[checks]\ntheory = maybe\n",
    "[dataset]\nkind = synthetic\n[sweep]\neta = 1\nK = 1\n[run]\nw0 = missing.txt\n",
])
def test_bad_specs(tmp_path, text):
    with pytest.raises(SpecError):
        parse_spec(text, base_dir=tmp_path)


def test_missing_spec_file(tmp_path):
    with pytest.raises(SpecError):
        load_spec(tmp_path / "nope.ini")


# --- run_experiment ---------------------------------------------------------


def test_trivial_run_shape(tmp_path):
    text = "[dataset]\nkind = synthetic\n[sweep]\neta = 1\nK = 1\n[run]\nrounds = 10\n"
    res = run_experiment(parse_spec(text, base_dir=tmp_path))
    assert res.exit_code == 0
    rows = _rows(tmp_path / "out" / "synthetic_eta1_K1.csv")
    assert len(rows) == 10
    assert float(rows[0]["r"]) == 0
    assert float(rows[0]["loss"]) == pytest.approx(math.log(2), rel=1e-16)


def test_outputs_and_manifest(tmp_path):
    res = run_experiment(load_spec(_spec(tmp_path)))
    out = tmp_path / "out"
    names = {p.name for p in out.iterdir()}
    for eta, K in [(1, 1), (1, 4), (4, 1), (4, 4)]:
        stem = cell_name("synthetic", eta, K)
        assert f"{stem}.csv" in names and f"{stem}_theory.csv" in names
    assert {"manifest.csv", "summary.csv", "synthetic_certificate.csv",
            "synthetic_dataset.csv"} <= names
    # one SVG per fixed-K and per fixed-eta comparison
    assert {"synthetic_K1.svg", "synthetic_K4.svg", "synthetic_eta1.svg",
            "synthetic_eta4.svg"} <= names
    assert not any(n.endswith(".tmp") for n in names)
    manifest = _rows(out / "manifest.csv")
    assert tuple(manifest[0].keys()) == MANIFEST_COLUMNS
    cells = [(float(r["eta"]), int(r["K"])) for r in manifest]
    assert cells == [(1.0, 1), (1.0, 4), (4.0, 1), (4.0, 4)]
    assert all(r["status"] in ("ok", "diverged", "violation") for r in manifest)
    assert all(r["status"] == "ok" for r in manifest)
    assert set(res.files) >= {out / "manifest.csv", out / "summary.csv"}
    summary = _rows(out / "summary.csv")
    assert [float(r["final_loss"]) for r in summary] == [float(r["final_loss"]) for r in manifest]


def test_svg_curves_follow_grid(tmp_path):
    run_experiment(load_spec(_spec(tmp_path)))
    svg = (tmp_path / "out" / "synthetic_K4.svg").read_text()
    assert svg.count("<polyline") == 2 and "eta=1" in svg and "eta=4" in svg


def test_determinism_byte_identical(tmp_path):
    a = run_experiment(load_spec(_spec(tmp_path), out_dir=tmp_path / "a"))
    b = run_experiment(load_spec(_spec(tmp_path), out_dir=tmp_path / "b"))
    for fa in a.files:
        fb = tmp_path / "b" / fa.name
        assert fa.read_bytes() == fb.read_bytes(), fa.name
    assert len(a.files) == len(b.files)


def test_jobs_give_same_outputs(tmp_path):
    a = run_experiment(load_spec(_spec(tmp_path), out_dir=tmp_path / "a"))
    run_experiment(load_spec(_spec(tmp_path), out_dir=tmp_path / "b", jobs=2))
    for fa in a.files:
        assert fa.read_bytes() == (tmp_path / "b" / fa.name).read_bytes(), fa.name


def test_theory_disabled(tmp_path):
    text = SMALL + "\n[checks]\ntheory = no\n"
    run_experiment(load_spec(_spec(tmp_path, text)))
    assert not list((tmp_path / "out").glob("*_theory.csv"))


def test_diverged_cell_in_manifest(tmp_path):
    text = ("[dataset]\nkind = synthetic\n[sweep]\neta = 2^10\nK = 64\n"
            "[run]\nrounds = 50\ndivergence_cap = 5\n")
    res = run_experiment(parse_spec(text, base_dir=tmp_path))
    row = _rows(tmp_path / "out" / "manifest.csv")[0]
    assert row["status"] == "diverged" and int(row["diverged_round"]) < 50
    assert res.exit_code == 0


def test_planted_violation_sets_exit_code(tmp_path, monkeypatch):
    real = localgd.run

    def tampered(config, data, gamma):
        traj = real(config, data, gamma)
        scal = traj.scalars.copy()
        scal[3, 2] = 1e9
        return Trajectory(traj.config, traj.gamma, traj.M, traj.n, scal, traj.final_w,
                          traj.final_loss)

    monkeypatch.setattr(localgd, "run", tampered)
    res = run_experiment(load_spec(_spec(tmp_path)))
    assert res.exit_code == 1 and len(res.violating) == 4
    assert all(r["status"] == "violation" for r in _rows(tmp_path / "out" / "manifest.csv"))


def test_asymptotic_study_columns(tmp_path):
    text = ("[dataset]\nkind = margin_split\n[sweep]\neta = 1\nK = 4\n"
            "[run]\nrounds = 30\n[output]\nplots = no\n")
    res = asymptotic_rate_study(parse_spec(text, base_dir=tmp_path))
    table = _rows(tmp_path / "out" / "asymptotic_eta1_K4.csv")
    assert list(table[0].keys()) == ["r", "homogeneous", "mixed", "heterogeneous"]
    assert len(table) == 31 and float(table[0]["mixed"]) == 0.0
    assert len(res.asymptotic) == 3
    assert {s["kind"] for s in res.asymptotic} == {"homogeneous", "mixed", "heterogeneous"}
    with pytest.raises(SpecError):
        asymptotic_rate_study(parse_spec(SMALL, base_dir=tmp_path))


def test_asymptotic_gamma_mismatch(tmp_path):
    text = "[dataset]\nkind = synthetic\n[sweep]\neta = 1\nK = 1\n[run]\nrounds = 3\n"
    spec = parse_spec(text + "[checks]\nasymptotic = yes\n", base_dir=tmp_path)
    a = Dataset(np.array([[[1.0, 0.0]]]))
    b = Dataset(np.array([[[0.5, 0.0]]]))
    with pytest.raises(SpecError):
        run_experiment(spec, datasets=[("a", a), ("b", b)])


# --- plots ------------------------------------------------------------------


def test_plot_three_rows(tmp_path):
    traj = run(RunConfig(1.0, 1, 3), gen_synthetic(), 0.018)
    write_trajectory_csv(traj, tmp_path / "t.csv")
    emit_plot([tmp_path / "t.csv"], tmp_path / "t.svg")
    svg = (tmp_path / "t.svg").read_text()
    lines = re.findall(r'<polyline[^>]*points="([^"]*)"', svg)
    assert len(lines) == 1 and len(lines[0].split()) == 3
    assert ">t<" in svg and "round" in svg and "loss" in svg


def test_plot_empty_input(tmp_path):
    with pytest.raises(ValueError):
        emit_plot([], tmp_path / "e.svg")
    assert not (tmp_path / "e.svg").exists()
    with pytest.raises(ValueError):
        render_svg([])


def test_plot_clamps_zero_loss():
    svg = render_svg([("z", np.array([0.0, 1.0]), np.array([1.0, 0.0]))])
    assert "1e-16" in svg
    assert LOSS_FLOOR == 1e-16


def test_plot_malformed_csv(tmp_path):
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        emit_plot([tmp_path / "bad.csv"], tmp_path / "bad.svg")
    assert not (tmp_path / "bad.svg").exists()


# --- CLI --------------------------------------------------------------------


def test_cli_run_ok(tmp_path, capsys):
    assert cli.main(["run", str(_spec(tmp_path))]) == 0
    assert "outputs in" in capsys.readouterr().out


def test_cli_flags_before_or_after_subcommand(tmp_path):
    p = _spec(tmp_path)
    assert cli.main(["--out-dir", str(tmp_path / "o1"), "run", str(p)]) == 0
    assert cli.main(["run", str(p), "--out-dir", str(tmp_path / "o2"), "--jobs", "2"]) == 0
    assert (tmp_path / "o1" / "manifest.csv").read_bytes() == \
        (tmp_path / "o2" / "manifest.csv").read_bytes()


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["run", str(_spec(tmp_path, "[dataset]\nkind = what\n"))]) == 2
    assert cli.main(["run", str(tmp_path / "missing.ini")]) == 2
    csv_spec = "[dataset]\nkind = csv\npath = nothere.csv\n[sweep]\neta = 1\nK = 1\n"
    assert cli.main(["run", str(_spec(tmp_path, csv_spec))]) == 3
    (tmp_path / "ns.csv").write_text("client,index,x0,x1\n0,0,1,0\n0,1,-1,0\n")
    ns_spec = "[dataset]\nkind = csv\npath = ns.csv\n[sweep]\neta = 1\nK = 1\n"
    assert cli.main(["run", str(_spec(tmp_path, ns_spec))]) == 3
    assert cli.main(["margins", str(tmp_path / "ns.csv")]) == 3
    assert cli.main(["plot", "-o", str(tmp_path / "x.svg")]) == 2
    with pytest.raises(SystemExit) as err:
        cli.main(["frobnicate"])
    assert err.value.code == 2


def test_cli_margins(tmp_path, capsys):
    assert cli.main(["margins", "synthetic", "-o", str(tmp_path / "c.csv")]) == 0
    out = capsys.readouterr().out
    g = float(re.search(r"^gamma\s+(\S+)", out, re.M).group(1))
    assert g == solve_max_margin(gen_synthetic()).gamma
    assert (tmp_path / "c.csv").exists()
    assert cli.main(["margins", "mixed"]) == 0
    assert "local gammas" in capsys.readouterr().out


def test_cli_check(tmp_path, capsys):
    syn = gen_synthetic()
    cert = solve_max_margin(syn)
    traj = run(RunConfig(1.0, 4, 100), syn, cert.gamma)
    write_trajectory_csv(traj, tmp_path / "t.csv")
    write_certificate_csv(cert, tmp_path / "c.csv")
    args = ["check", str(tmp_path / "t.csv"), str(tmp_path / "c.csv"), "--eta", "1", "--K", "4",
            "--clients", "2", "--points", "1"]
    assert cli.main(args + ["-o", str(tmp_path / "r.csv")]) == 0
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 101
    # plant an oversized parameter norm
    lines = (tmp_path / "t.csv").read_text().splitlines()
    cells = lines[5].split(",")
    cells[3] = "1e9"
    lines[5] = ",".join(cells)
    (tmp_path / "bad.csv").write_text("\n".join(lines) + "\n")
    args[1] = str(tmp_path / "bad.csv")
    assert cli.main(args) == 1
    assert "lemmaA1" in capsys.readouterr().out


def test_binary_exit_codes(tmp_path):
    # the module entry point, as a separate process
    def call(*a):
        return subprocess.run([sys.executable, "-m", "localgd_lab.cli", *a],
                              capture_output=True, text=True).returncode

    text = "[dataset]\nkind = synthetic\n[sweep]\neta = 1\nK = 1\n[run]\nrounds = 5\n"
    assert call("run", str(_spec(tmp_path, text))) == 0
    assert call("run", str(_spec(tmp_path, "garbage", "g.ini"))) == 2
    bad = "[dataset]\nkind = csv\npath = nothere.csv\n[sweep]\neta = 1\nK = 1\n"
    assert call("run", str(_spec(tmp_path, bad, "b.ini"))) == 3


def test_experiment_module_exports():
    assert experiment.GAMMA_MATCH_TOL == 1e-8

import json
import shutil
import subprocess
import sys
import time

import numpy as np
import pytest

from aggdiff.cli import EXIT_CHECKS, EXIT_CONFIG, EXIT_MASS, EXIT_OK, EXIT_SOLVER, main
from aggdiff.grid import GridSpec, read_snapshot, write_snapshot
from aggdiff.initial import bump
from aggdiff.series import DiagnosticsSeries


def write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return str(path)


def test_zero_config_completes(tmp_path):
    cfg = write_config(
        tmp_path / "c.json",
        grid={"d": 2, "n": 16, "L": 2.0},
        initial={"kind": "zero"},
        solver={"t_end": 0.05, "dt_policy": {"kind": "fixed", "dt": 0.01}, "snapshot_every": 1},
        output_dir="out",
    )
    assert main(["run", cfg]) == EXIT_OK
    out = tmp_path / "out"
    series = DiagnosticsSeries.from_csv((out / "series.csv").read_text())
    assert np.all(series["mass"] == 0) and np.all(series["linf"] == 0)
    meta = json.loads((out / "meta.json").read_text())
    assert meta["status"] == "completed" and meta["u0_mass"] == 0
    assert sorted(meta["snapshots"]) == sorted(p.name for p in out.glob("snap_*.agd"))
    f, t = read_snapshot(out / "snap_5.agd")
    assert t == pytest.approx(0.05) and np.all(f.values == 0)


def test_barenblatt_error_recorded(tmp_path):
    cfg = write_config(
        tmp_path / "b.json",
        grid={"d": 1, "n": 256, "L": 2.0},
        physics={"m": 2.0, "s": 0.25, "drift_enabled": False, "parabolic_epsilon": 0.0},
        initial={"kind": "barenblatt", "params": {"C": 0.1, "t0": 1.0}},
        solver={"t_end": 1.0, "dt_policy": {"kind": "fixed", "dt": 0.005}, "snapshot_every": 50},
        diagnostics={"barenblatt_tol": 1e-3},
        output_dir=str(tmp_path / "bo"),
    )
    assert main(["run", cfg]) == EXIT_OK
    bar = json.loads((tmp_path / "bo" / "meta.json").read_text())["barenblatt"]
    assert bar["pass"] and bar["l1_error"] <= 1e-3 and bar["profile_time"] == pytest.approx(2.0)


def test_subcritical_run_conserves_mass(tmp_path):
    cfg = write_config(
        tmp_path / "s.json",
        grid={"d": 3, "n": 32, "L": 4.0},
        physics={"m": 2.0, "s": 1.0, "parabolic_epsilon": 0.0},
        initial={"kind": "gaussian", "params": {"mass": 1.0, "sigma": 0.5}},
        solver={"t_end": 0.2, "snapshot_every": 5},
        diagnostics={"p_list": [1, 2], "write_snapshots": False},
        output_dir=str(tmp_path / "so"),
    )
    assert main(["run", cfg]) == EXIT_OK
    series = DiagnosticsSeries.from_csv((tmp_path / "so" / "series.csv").read_text())
    assert {"mass", "linf", "L1", "L2"} <= set(series.columns)
    assert np.abs(series["mass"] - series["mass"][0]).max() <= 1e-11 * series["mass"][0]
    meta = json.loads((tmp_path / "so" / "meta.json").read_text())
    assert meta["tags"] == [] and meta["snapshots"] == []


def test_runs_are_deterministic(tmp_path):
    outs = []
    for k in range(2):
        cfg = write_config(
            tmp_path / f"d{k}.json",
            grid={"d": 2, "n": 32, "L": 2.0},
            physics={"m": 1.5, "s": 0.75, "parabolic_epsilon": 0.0},
            initial={"kind": "gaussian", "params": {"mass": 1.0, "sigma": 0.3}},
            solver={"t_end": 0.05},
            output_dir=str(tmp_path / f"o{k}"),
        )
        assert main(["run", cfg]) == EXIT_OK
        outs.append(tmp_path / f"o{k}")
    assert (outs[0] / "series.csv").read_bytes() == (outs[1] / "series.csv").read_bytes()
    for snap in outs[0].glob("snap_*.agd"):
        assert snap.read_bytes() == (outs[1] / snap.name).read_bytes()


def test_supercritical_run_is_tagged(tmp_path):
    cfg = write_config(
        tmp_path / "x.json",
        grid={"d": 3, "n": 32, "L": 4.0},
        physics={"m": 1.2, "s": 1.0, "parabolic_epsilon": 0.0},
        initial={"kind": "bump", "params": {"mass": 1.0, "radius": 1.5, "power": 2}},
        solver={"t_end": 0.02},
        output_dir=str(tmp_path / "xo"),
    )
    assert main(["run", cfg]) == EXIT_OK
    meta = json.loads((tmp_path / "xo" / "meta.json").read_text())
    assert meta["tags"] == ["Supercritical"] and meta["regime"]["regime"] == "supercritical"


def test_solver_error_exit_and_record(tmp_path):
    cfg = write_config(
        tmp_path / "e.json",
        grid={"d": 2, "n": 16, "L": 1.0},
        physics={"m": 2.0, "s": 0.5, "drift_enabled": False, "parabolic_epsilon": 0.5},
        initial={"kind": "gaussian", "params": {"sigma": 0.3}},
        solver={"t_end": 1.0, "dt_policy": {"kind": "fixed", "dt": 0.01}},
        output_dir=str(tmp_path / "eo"),
    )
    assert main(["run", cfg]) == EXIT_SOLVER
    meta = json.loads((tmp_path / "eo" / "meta.json").read_text())
    assert meta["status"] == "solver_error"
    assert meta["error"]["type"] == "BoundaryMassError" and meta["error"]["step"] >= 1


@pytest.mark.parametrize(
    "sections",
    [
        {"grid": {"d": 3, "n": 12, "L": 1.0}},
        {"physics": {"m": 0.5}},
        {"initial": {"kind": "nonsense"}},
        {"solver": {"bogus": 1}},
        {"unknown_section": {}},
        {"initial": {"kind": "gaussian", "params": {"mass": -1.0}}},
    ],
)
def test_config_errors_exit_2(tmp_path, sections):
    assert main(["run", write_config(tmp_path / "bad.json", **sections)]) == EXIT_CONFIG


def test_unreadable_config_exit_2(tmp_path):
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["run", str(tmp_path / "broken.json")]) == EXIT_CONFIG
    assert main(["run", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["no-such-command"]) == EXIT_CONFIG


def test_file_initial_data(tmp_path):
    g = GridSpec(2, 16, 2.0)
    write_snapshot(tmp_path / "u0.agd", bump(g, 1.0, 0.8, 2), 0.0)
    cfg = write_config(
        tmp_path / "f.json",
        grid={"d": 2, "n": 16, "L": 2.0},
        physics={"s": 0.5, "parabolic_epsilon": 0.0},
        initial={"kind": "file", "params": {"path": "u0.agd"}},
        solver={"t_end": 0.01},
        output_dir="fo",
    )
    assert main(["run", cfg]) == EXIT_OK
    bad = write_config(tmp_path / "g.json", grid={"d": 2, "n": 32, "L": 2.0}, physics={"s": 0.5},
                       initial={"kind": "file", "params": {"path": "u0.agd"}})
    assert main(["run", bad]) == EXIT_CONFIG


def pair_configs(tmp_path, mass_b=1.0, dt_a=0.01, dt_b=0.01, center_b=(0.0,)):
    common = dict(grid={"d": 1, "n": 128, "L": 3.0}, physics={"m": 2.0, "s": 0.4}, output_dir=str(tmp_path / "cmp"))
    a = write_config(tmp_path / "a.json", initial={"kind": "bump", "params": {"mass": 1.0, "radius": 0.8}},
                     solver={"t_end": 0.2, "dt_policy": {"kind": "fixed", "dt": dt_a}, "snapshot_every": 2}, **common)
    b = write_config(tmp_path / "b.json",
                     initial={"kind": "bump", "params": {"mass": mass_b, "radius": 0.8, "center": list(center_b)}},
                     solver={"t_end": 0.2, "dt_policy": {"kind": "fixed", "dt": dt_b}, "snapshot_every": 2}, **common)
    return a, b


def read_eta(tmp_path):
    lines = (tmp_path / "cmp" / "eta.csv").read_text().splitlines()
    assert lines[0] == "t,eta,metric"
    return np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])


def test_compare_identical_is_zero(tmp_path):
    a, _ = pair_configs(tmp_path)
    assert main(["compare", a, a]) == EXIT_OK
    eta = read_eta(tmp_path)
    assert len(eta) == 11 and np.all(eta[:, 1] == 0)
    meta = json.loads((tmp_path / "cmp" / "meta.json").read_text())
    assert meta["eta_final"] == 0 and meta["gronwall"] is None


def test_compare_perturbed_pair_fits_gronwall(tmp_path):
    a, b = pair_configs(tmp_path, center_b=(0.1,))
    assert main(["compare", a, b]) == EXIT_OK
    eta = read_eta(tmp_path)
    assert np.all(eta[:, 1] > 0)
    fit = json.loads((tmp_path / "cmp" / "gronwall.json").read_text())
    assert np.isfinite(fit["C"]) and fit["n_points"] == len(eta)


def test_compare_dt_refinement_converges(tmp_path):
    finals = []
    for dt in (0.02, 0.01, 0.005):
        a, b = pair_configs(tmp_path, dt_a=dt, dt_b=dt / 2)
        assert main(["compare", a, b]) == EXIT_OK
        finals.append(read_eta(tmp_path)[-1, 1])
    # first order in time: the squared distance falls by about 4 per halving
    assert finals[0] / finals[1] > 2 and finals[1] / finals[2] > 2


def test_compare_mass_mismatch_exit_4(tmp_path):
    a, b = pair_configs(tmp_path, mass_b=2.0)
    assert main(["compare", a, b]) == EXIT_MASS


def test_compare_physics_mismatch_exit_2(tmp_path):
    a, _ = pair_configs(tmp_path)
    b = write_config(tmp_path / "p.json", grid={"d": 1, "n": 128, "L": 3.0}, physics={"m": 3.0, "s": 0.4})
    assert main(["compare", a, b]) == EXIT_CONFIG


def test_pair_run_in_run(tmp_path):
    cfg = write_config(
        tmp_path / "pr.json",
        grid={"d": 1, "n": 128, "L": 3.0},
        physics={"m": 2.0, "s": 0.4},
        initial={"kind": "bump", "params": {"radius": 0.8}},
        solver={"t_end": 0.1, "dt_policy": {"kind": "fixed", "dt": 0.01}, "snapshot_every": 2},
        diagnostics={"pair_run": {"kind": "bump", "params": {"radius": 0.8, "center": [0.1]}}},
        output_dir=str(tmp_path / "po"),
    )
    assert main(["run", cfg]) == EXIT_OK
    meta = json.loads((tmp_path / "po" / "meta.json").read_text())
    assert meta["pair"]["eta_final"] > 0 and (tmp_path / "po" / "eta.csv").exists()


@pytest.mark.parametrize(
    "args,code,needle",
    [
        (["3", "2", "1"], EXIT_OK, "S_half_m_ge2"),
        (["3", "1.2", "1"], EXIT_OK, "finite time blow-up possible"),
        (["3", "2.5", "0.3"], EXIT_OK, "Unsupported"),
        (["3", "4/3", "1"], EXIT_OK, "critical"),
        (["3", "0.5", "1"], EXIT_CONFIG, None),
        (["3", "x", "1"], EXIT_CONFIG, None),
    ],
)
def test_regime_command(capsys, args, code, needle):
    assert main(["regime", *args]) == code
    if needle:
        assert needle in capsys.readouterr().out


def test_regime_subcritical_label(capsys):
    main(["regime", "3", "2", "1"])
    out = capsys.readouterr().out
    assert "subcritical" in out and "4/3" in out


def test_verify_fast_passes_quickly(capsys):
    t0 = time.perf_counter()
    assert main(["verify", "--fast"]) == EXIT_OK
    assert time.perf_counter() - t0 < 30
    assert "FAIL" not in capsys.readouterr().out


def test_verify_detects_wrong_kernel_scale(capsys, monkeypatch):
    monkeypatch.setenv("AGGDIFF_INJECT_FAULT", "kernel-scale")
    assert main(["verify", "--fast"]) == EXIT_CHECKS
    out = capsys.readouterr().out
    newton = [ln for ln in out.splitlines() if "Newtonian" in ln]
    assert newton and "FAIL" in newton[0]


def test_holder_command(tmp_path):
    cfg = write_config(
        tmp_path / "h.json",
        grid={"d": 3, "n": 32, "L": 2.0},
        physics={"m": 2.0, "s": 1.0, "parabolic_epsilon": 0.0},
        initial={"kind": "bump", "params": {"radius": 1.0, "power": 2}},
        solver={"t_end": 0.03, "dt_policy": {"kind": "fixed", "dt": 0.01}, "snapshot_every": 1},
        diagnostics={"oscillation": {"a": 0.7, "b": 0.9, "r0": 0.8, "t0": 0.0}},
        output_dir=str(tmp_path / "ho"),
    )
    assert main(["run", cfg]) == EXIT_OK
    assert main(["holder", str(tmp_path / "ho"), "--K", "1"]) == EXIT_OK
    rep = json.loads((tmp_path / "ho" / "holder.json").read_text())
    assert rep["k"] == [0, 1] and rep["a"] == 0.7
    assert main(["holder", str(tmp_path / "ho"), "--K", "6"]) == EXIT_CHECKS
    assert main(["holder", str(tmp_path / "nowhere")]) == EXIT_CONFIG


@pytest.mark.skipif(shutil.which("aggdiff") is None, reason="console script not installed")
def test_console_script():
    proc = subprocess.run(["aggdiff", "regime", "3", "2", "1"], capture_output=True, text=True)
    assert proc.returncode == 0 and "subcritical" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "aggdiff", "regime", "3", "x", "1"], capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG

import json
import subprocess
import sys

import numpy as np
import pytest
from scipy import stats

from feedloop import cli, experiments
from feedloop.metrics import METRIC_COLUMNS

TINY = {"n_users": 30, "steps": 10, "t_activate": 4}


@pytest.fixture
def files(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY, indent=1))
    seeds = tmp_path / "seeds.json"
    seeds.write_text("[1, 2]")
    return tmp_path, cfg, seeds


def read(path):
    return path.read_bytes()


def test_run_writes_csv_manifest_and_checkpoint(files):
    tmp, cfg, _ = files
    out = tmp / "r"
    assert cli.main(["run", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
    lines = (out / "trajectory.csv").read_text().splitlines()
    assert len(lines) == TINY["steps"] + 1
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["config"]["n_users"] == 30
    assert manifest["schema_version"] == 1 and manifest["code_version"] == experiments.code_fingerprint()
    model = json.loads((out / "model" / "model_manifest.json").read_text())
    assert model["heads"] == 8 and model["step_trained"] == 9


def test_run_rerun_from_manifest_is_byte_identical(files):
    tmp, cfg, _ = files
    a, b = tmp / "a", tmp / "b"
    assert cli.main(["run", "--config", str(cfg), "--seed", "5", "--out", str(a)]) == 0
    assert cli.main(["run", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
    for name in ("trajectory.csv", "manifest.json", "model/weights.bin"):
        assert read(a / name) == read(b / name)


def test_steps_override(files):
    tmp, cfg, _ = files
    out = tmp / "r"
    assert cli.main(["run", "--config", str(cfg), "--seed", "1", "--steps-override", "4", "--out", str(out)]) == 0
    assert len((out / "trajectory.csv").read_text().splitlines()) == 5


def test_bad_config_exits_2_naming_field(files, capsys):
    tmp, _, _ = files
    bad = tmp / "bad.json"
    bad.write_text('{\n  "n_users": 30,\n  "alpha_enthusiast": 1.5\n}\n')
    assert cli.main(["run", "--config", str(bad), "--seed", "1", "--out", str(tmp / "x")]) == 2
    err = capsys.readouterr().err
    assert "alpha_enthusiast" in err and f"{bad}:3:" in err


def test_malformed_json_reports_line(files, capsys):
    tmp, _, _ = files
    bad = tmp / "bad.json"
    bad.write_text('{\n  "n_users": 30,\n  "steps": \n}\n')
    assert cli.main(["run", "--config", str(bad), "--seed", "1", "--out", str(tmp / "x")]) == 2
    assert f"{bad}:4:" in capsys.readouterr().err


def test_unknown_key_exits_2(files, capsys):
    tmp, _, _ = files
    bad = tmp / "bad.json"
    bad.write_text('{"n_users": 30, "behavior": {"warp": 1}}')
    assert cli.main(["run", "--config", str(bad), "--seed", "1", "--out", str(tmp / "x")]) == 2
    assert "behavior.warp" in capsys.readouterr().err


def test_runtime_failure_exits_1(files, monkeypatch):
    tmp, cfg, _ = files

    def boom(*a, **k):
        raise RuntimeError("simulated failure")

    monkeypatch.setattr(cli.sim, "run", boom)
    assert cli.main(["run", "--config", str(cfg), "--seed", "1", "--out", str(tmp / "x")]) == 1


def test_sweep_rows_and_jobs_invariance(files):
    tmp, _, seeds = files
    grid = tmp / "grid.json"
    grid.write_text(json.dumps({"base": TINY, "configs": [{"alpha_enthusiast": 0.2}, {"alpha_enthusiast": 0.8}]}))
    a, b = tmp / "s1", tmp / "s2"
    assert cli.main(["sweep", "--grid", str(grid), "--seeds", str(seeds), "--jobs", "1", "--out", str(a)]) == 0
    assert cli.main(["sweep", "--grid", str(a / "manifest.json"), "--seeds", str(a / "manifest.json"),
                     "--jobs", "2", "--out", str(b)]) == 0
    for name in ("runs_long.csv", "aggregate.csv", "manifest.json"):
        assert read(a / name) == read(b / name)
    rows = (a / "runs_long.csv").read_text().splitlines()[1:]
    header = (a / "runs_long.csv").read_text().splitlines()[0].split(",")
    ci, si = header.index("config_id"), header.index("seed")
    assert len({(r.split(",")[ci], r.split(",")[si]) for r in rows}) == 4


def test_factorial_grid_file_expands_to_18_cells(files):
    tmp, _, _ = files
    grid = tmp / "grid.json"
    grid.write_text(json.dumps({"base": TINY, "factorial": {
        "t_activate": [10, 25, 40], "alpha_enthusiast": [0.2, 0.5, 0.8], "r_explore": [0.1, 0.3]}}))
    configs, stats_seed = cli.load_grid(grid)
    assert len(configs) == 18 and stats_seed == 0
    assert [(c.t_activate, c.alpha_enthusiast, c.r_explore) for c in configs] == [
        (c.t_activate, c.alpha_enthusiast, c.r_explore) for c in experiments.factorial_grid()]


def test_partial_sweep_failure_exits_3(files, monkeypatch, capsys):
    tmp, cfg, seeds = files
    real = experiments.sim.run

    def flaky(config, seed, *a, **k):
        if seed == 2:
            raise RuntimeError("cell exploded")
        return real(config, seed, *a, **k)

    monkeypatch.setattr(experiments.sim, "run", flaky)
    grid = tmp / "grid.json"
    grid.write_text(json.dumps([TINY]))
    out = tmp / "s"
    assert cli.main(["sweep", "--grid", str(grid), "--seeds", str(seeds), "--out", str(out)]) == 3
    err = capsys.readouterr().err
    assert "config 0 seed 2" in err and "cell exploded" in err
    assert "config 0 seed 2" in (out / "failures.txt").read_text()


def test_counterfactual_outputs(files):
    tmp, cfg, seeds = files
    out = tmp / "cf"
    assert cli.main(["counterfactual", "--config", str(cfg), "--vary", "t_activate", "--values", "4,8",
                     "--seeds", str(seeds), "--out", str(out)]) == 0
    text = (out / "differences.csv").read_text().splitlines()
    header = text[0].split(",")
    for line in text[1:]:
        row = dict(zip(header, line.split(",")))
        if int(row["step"]) < 4:
            assert all(float(row[m]) == 0 or row[m] == "nan" for m in METRIC_COLUMNS)
    effects = (out / "effects.csv").read_text()
    assert "transitivity" in effects and "ci_lo" in effects
    again = tmp / "cf2"
    assert cli.main(["counterfactual", "--config", str(out / "manifest.json"), "--out", str(again)]) == 0
    for name in ("differences.csv", "effects.csv", "trajectories.csv", "manifest.json"):
        assert read(out / name) == read(again / name)


def test_counterfactual_identical_values_give_zero(files):
    tmp, cfg, _ = files
    out = tmp / "cf"
    assert cli.main(["counterfactual", "--config", str(cfg), "--vary", "r_explore", "--values", "0.2,0.2",
                     "--seed", "1", "--out", str(out)]) == 0
    for line in (out / "differences.csv").read_text().splitlines()[1:]:
        assert all(v in ("0.0", "nan") for v in line.split(",")[4:])


def test_counterfactual_unknown_field_exits_2(files):
    tmp, cfg, _ = files
    assert cli.main(["counterfactual", "--config", str(cfg), "--vary", "warp_speed", "--values", "1,2",
                     "--seed", "1", "--out", str(tmp / "x")]) == 2


def test_analyze_ks_matches_oracle(files, capsys):
    tmp, _, _ = files
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=25), rng.normal(0.4, size=20)
    fa, fb = tmp / "a.txt", tmp / "b.txt"
    fa.write_text("\n".join(repr(float(v)) for v in a))
    fb.write_text("value\n" + "\n".join(repr(float(v)) for v in b))
    assert cli.main(["analyze", "--mode", "ks", str(fa), str(fb), "--out", str(tmp / "k")]) == 0
    out = dict(line.split() for line in capsys.readouterr().out.splitlines())
    ref = stats.ks_2samp(a, b, method="exact")
    assert float(out["D"]) == pytest.approx(ref.statistic, abs=1e-12)
    assert float(out["p_exact"]) == pytest.approx(ref.pvalue, rel=1e-9)
    assert "p" in out


def test_analyze_scaling_needs_three_sizes(files):
    tmp, cfg, _ = files
    assert cli.main(["analyze", "--mode", "scaling", "--config", str(cfg), "--values", "30,40",
                     "--seed", "1", "--out", str(tmp / "x")]) == 2
    table = tmp / "pts.csv"
    table.write_text("n,clustering,path_length\n100,0.2,2.0\n200,0.18,2.2\n")
    assert cli.main(["analyze", "--mode", "scaling", str(table), "--out", str(tmp / "y")]) == 2


def test_analyze_scaling_from_table(files):
    tmp, _, _ = files
    table = tmp / "pts.csv"
    rows = [(n, 2 * n ** -0.1, 1.2 * np.log(n) + 0.8) for n in (100, 200, 500, 1000)]
    table.write_text("n,clustering,path_length\n" + "\n".join(",".join(repr(float(v)) for v in r) for r in rows))
    assert cli.main(["analyze", "--mode", "scaling", str(table), "--out", str(tmp / "s")]) == 0
    fields = {" ".join(line.split()[:2]): line.split()[2] for line in
              (tmp / "s" / "scaling.txt").read_text().splitlines()}
    assert float(fields["clustering alpha"]) == pytest.approx(0.1, abs=1e-10)
    assert float(fields["path_length r_squared"]) == pytest.approx(1.0, abs=1e-10)


def test_analyze_convergence_on_run_output(files):
    tmp, cfg, _ = files
    cli.main(["run", "--config", str(cfg), "--seed", "1", "--out", str(tmp / "r")])
    assert cli.main(["analyze", "--mode", "convergence", str(tmp / "r" / "trajectory.csv"),
                     "--out", str(tmp / "c")]) == 0
    assert (tmp / "c" / "convergence.csv").exists() and (tmp / "c" / "manifest.json").exists()


def test_analyze_stability_report_shape(files, monkeypatch):
    tmp, cfg, _ = files
    seeds = tmp / "s5.json"
    seeds.write_text("[0, 1, 2, 3, 4]")
    # small ensemble and converged-by-construction runs keep this fast
    real = cli.analysis.simulated_stability

    def quick(config, seeds, steps):
        rep = real(config, seeds, steps=steps, ensemble=10)
        return rep

    monkeypatch.setattr(cli.analysis, "simulated_stability", quick)
    monkeypatch.setattr(cli.analysis, "convergence_step", lambda tr, *a, **k: 2)
    cfg.write_text(json.dumps({"n_users": 40, "t_activate": 4}))
    out = tmp / "st"
    assert cli.main(["analyze", "--mode", "stability", "--config", str(cfg), "--seeds", str(seeds),
                     "--steps-override", "12", "--out", str(out)]) == 0
    text = (out / "stability.txt").read_text()
    assert text.count("eigenvalue ") == 3 and ("stable true" in text or "stable false" in text)
    assert cli.main(["analyze", "--mode", "stability", "--config", str(cfg), "--seed", "1",
                     "--out", str(out)]) == 2


def test_console_script_entry_point(files):
    tmp, cfg, _ = files
    proc = subprocess.run([sys.executable, "-m", "feedloop.cli", "run", "--config", str(cfg), "--seed", "1",
                           "--steps-override", "3", "--out", str(tmp / "p")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "feedloop.cli", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2


def test_seeds_inline_list_or_file(tmp_path):
    f = tmp_path / "seeds.txt"
    f.write_text("3 1\n4\n")
    assert cli.load_seeds(f) == [3, 1, 4]
    assert cli.load_seeds("5, 9,2") == [5, 9, 2]
    with pytest.raises(cli.InputError):
        cli.load_seeds(tmp_path / "missing.json")

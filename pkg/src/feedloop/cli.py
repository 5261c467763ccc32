"""Command-line interface: ``feedloop run | sweep | counterfactual | analyze``.

Exit codes: 0 success, 1 runtime failure, 2 input or config error, 3 partial
sweep failure. Every command writes ``manifest.json`` into its output
directory; feeding that manifest back through ``--config`` (or ``--grid`` and
``--seeds`` for sweeps) regenerates the outputs byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import re
import sys
import warnings
from pathlib import Path

import numpy as np

from feedloop import analysis, experiments, gat, sim
from feedloop.config import SCHEMA_VERSION, ConfigError, ExperimentConfig, load_json, to_dict
from feedloop.metrics import METRIC_COLUMNS

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT, EXIT_PARTIAL = 0, 1, 2, 3
DEFAULT_STATS_SEED = 0


class InputError(Exception):
    """Bad command-line input; reported with exit code 2."""


# ---------------------------------------------------------------------------
# input helpers


def _field_line(path: Path, field: str | None) -> int | None:
    """Line of the first occurrence of the field's last key in a JSON file."""
    if not field or not path.exists():
        return None
    key = '"' + field.split(".")[-1] + '"'
    for k, line in enumerate(path.read_text().splitlines(), start=1):
        if re.search(re.escape(key) + r"\s*:", line):
            return k
    return None


def _config_error(exc: ConfigError, path: Path | None) -> InputError:
    line = exc.line
    if line is None and path is not None:
        line = _field_line(path, exc.field)
    where = f"{path}:{line}: " if path is not None and line is not None else (f"{path}: " if path else "")
    field = f"field '{exc.field}': " if exc.field else ""
    msg = str(exc)
    if path is not None and msg.startswith(str(path)):
        return InputError(msg)
    return InputError(f"{where}{field}{msg}")


def _parse_config(data, path: Path | None) -> ExperimentConfig:
    try:
        return ExperimentConfig.from_dict(data)
    except ConfigError as exc:
        raise _config_error(exc, path) from exc


def read_json(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    try:
        return load_json(path)
    except ConfigError as exc:
        raise _config_error(exc, path) from exc


def load_run_input(path: str | Path) -> tuple[ExperimentConfig, int | None]:
    """Config (and the seed, if the file is a run manifest) from a JSON file."""
    path = Path(path)
    data = read_json(path)
    seed = None
    if isinstance(data, dict) and "schema_version" in data:
        if data["schema_version"] != SCHEMA_VERSION:
            raise InputError(f"{path}: field 'schema_version': unsupported version {data['schema_version']}")
        seed = data.get("seed")
        data = data.get("config", {})
    return _parse_config(data, path), seed


def load_grid(path: str | Path) -> tuple[list[ExperimentConfig], int]:
    """Configs of a grid file and its statistics seed.

    Accepted shapes: a list of configs; ``{"base": {...}, "configs": [...]}``
    where each entry overrides the base; ``{"base": {...}, "factorial": {field:
    [values]}}`` expanded in field order; or a sweep manifest.
    """
    path = Path(path)
    data = read_json(path)
    stats_seed = DEFAULT_STATS_SEED
    if isinstance(data, list):
        data = {"configs": data}
    if not isinstance(data, dict):
        raise InputError(f"{path}: grid must be a list or a mapping")
    stats_seed = data.get("stats_seed", stats_seed)
    base = data.get("base", {})
    if "configs" in data:
        entries = data["configs"]
        if not isinstance(entries, list) or not entries:
            raise InputError(f"{path}: field 'configs': must be a non-empty list")
        merged = []
        for e in entries:
            if not isinstance(e, dict):
                raise InputError(f"{path}: field 'configs': entries must be mappings")
            merged.append(_merge(base, e))
    elif "factorial" in data:
        fac = data["factorial"]
        if not isinstance(fac, dict) or not fac:
            raise InputError(f"{path}: field 'factorial': must map fields to value lists")
        merged = [dict(base)]
        for name, values in fac.items():
            if not isinstance(values, list) or not values:
                raise InputError(f"{path}: field '{name}': factorial values must be a non-empty list")
            merged = [_merge(m, _nested(name, v)) for m in merged for v in values]
    else:
        raise InputError(f"{path}: grid needs 'configs' or 'factorial'")
    return [_parse_config(m, path) for m in merged], int(stats_seed)


def _nested(name: str, value) -> dict:
    out: dict = {}
    node = out
    parts = name.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def _merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_seeds(path: str | Path) -> list[int]:
    """Seeds from a JSON list, a manifest with ``seeds`` or whitespace/comma separated
    integers. A value that is not a file but reads as such a list is used directly."""
    path = Path(path)
    if path.exists():
        text = path.read_text()
    elif re.fullmatch(r"\s*\d+(\s*,\s*\d+)*\s*", str(path)):
        text = str(path)
    else:
        raise InputError(f"{path}: no such file")
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = None
        tokens = [t for t in re.split(r"[\s,]+", text) if t]
        try:
            data = [int(t) for t in tokens]
        except ValueError as exc:
            raise InputError(f"{path}: seeds must be integers ({exc})") from exc
    if isinstance(data, dict):
        data = data.get("seeds")
    if isinstance(data, int):
        data = [data]
    if not isinstance(data, list) or not data or not all(isinstance(s, int) and not isinstance(s, bool)
                                                          for s in data):
        raise InputError(f"{path}: field 'seeds': must be a non-empty list of integers")
    return data


def parse_values(text: str) -> list:
    """Comma-separated values; each is read as JSON when possible, else as a string."""
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            out.append(json.loads(tok))
        except json.JSONDecodeError:
            out.append(tok)
    if not out:
        raise InputError("--values is empty")
    return out


def _seeds(args) -> list[int]:
    if args.seeds:
        return load_seeds(args.seeds)
    if args.seed is not None:
        return [args.seed]
    raise InputError("give --seeds or --seed")


def _with_steps(config: ExperimentConfig, steps: int | None) -> ExperimentConfig:
    if steps is None:
        return config
    if steps < 1:
        raise InputError("--steps-override must be >= 1")
    return experiments.replace_steps(config, steps)


# ---------------------------------------------------------------------------
# output helpers


def _out_dir(args) -> Path:
    if not args.out:
        raise InputError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, body: dict, outputs: list[str]) -> None:
    manifest = {"schema_version": SCHEMA_VERSION, "command": command,
                "code_version": experiments.code_fingerprint()}
    manifest.update(body)
    manifest["outputs"] = sorted(outputs)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return sim.format_value(v)


# ---------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    if not args.config:
        raise InputError("--config is required")
    config, manifest_seed = load_run_input(args.config)
    config = _with_steps(config, args.steps_override)
    seed = args.seed if args.seed is not None else manifest_seed
    if seed is None:
        raise InputError("--seed is required (or pass a run manifest)")
    out = _out_dir(args)
    holder = {}
    traj = sim.run(config, seed, state_hook=lambda st: holder.__setitem__("s", st))
    (out / "trajectory.csv").write_text(sim.trajectory_csv(traj))
    outputs = ["trajectory.csv"]
    model = holder["s"].recommender.model
    if model is not None:
        gat.save_checkpoint(model, out / "model")
        outputs += ["model/model_manifest.json", "model/weights.bin"]
    write_manifest(out, "run", {"config": to_dict(config), "seed": seed}, outputs)
    print(f"wrote {out / 'trajectory.csv'} ({len(traj)} steps)")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.grid:
        raise InputError("--grid is required")
    grid, stats_seed = load_grid(args.grid)
    grid = [_with_steps(c, args.steps_override) for c in grid]
    seeds = load_seeds(args.seeds) if args.seeds else ([args.seed] if args.seed is not None else None)
    if not seeds:
        raise InputError("--seeds is required")
    if args.jobs < 1:
        raise InputError("--jobs must be >= 1")
    out = _out_dir(args)
    result = experiments.run_sweep(grid, seeds, jobs=args.jobs)
    (out / "runs_long.csv").write_text(result.long_csv())
    (out / "aggregate.csv").write_text(result.aggregate_csv(stats_seed=stats_seed))
    outputs = ["runs_long.csv", "aggregate.csv"]
    failures = result.failures
    if failures:
        lines = [f"config {c} seed {s}: {err}" for c, s, err in failures]
        (out / "failures.txt").write_text("\n".join(lines) + "\n")
        outputs.append("failures.txt")
    # jobs is not recorded: outputs do not depend on it
    write_manifest(out, "sweep", {"configs": [to_dict(c) for c in grid], "seeds": seeds,
                                  "stats_seed": stats_seed}, outputs)
    if failures:
        print(f"{len(failures)} of {len(grid) * len(seeds)} cells failed:", file=sys.stderr)
        for line in lines:
            print("  " + line, file=sys.stderr)
        return EXIT_PARTIAL
    print(f"wrote {len(grid)} configs x {len(seeds)} seeds to {out}")
    return EXIT_OK


def cmd_counterfactual(args) -> int:
    if not args.config:
        raise InputError("--config is required")
    config, manifest_seed = load_run_input(args.config)
    stats_seed = DEFAULT_STATS_SEED
    data = read_json(args.config)
    vary, values, seeds = args.vary, None, None
    if isinstance(data, dict) and data.get("command") == "counterfactual":
        # rerun from a counterfactual manifest
        stats_seed = data.get("stats_seed", stats_seed)
        config = _parse_config(data.get("base_config", {}), Path(args.config))
        vary = vary or data.get("vary")
        values = data.get("values")
        seeds = data.get("seeds")
    if args.values is not None:
        values = parse_values(args.values)
    if not vary or values is None:
        raise InputError("--vary and --values are required")
    config = _with_steps(config, args.steps_override)
    if len(values) < 2:
        raise InputError("--values needs at least two values")
    try:
        for v in values:
            experiments.vary_config(config, vary, v)
    except ConfigError as exc:
        raise InputError(f"--vary {vary}: field '{exc.field}': {exc}") from exc
    if args.seeds:
        seeds = load_seeds(args.seeds)
    elif args.seed is not None:
        seeds = [args.seed]
    elif seeds is None and manifest_seed is not None:
        seeds = [manifest_seed]
    elif seeds is None:
        raise InputError("give --seeds or --seed")
    out = _out_dir(args)
    runs = []
    for seed in seeds:
        cf = experiments.matched_counterfactual(config, vary, values, seed)
        runs.append(cf)
    steps = config.steps
    diff_rows = []
    for cf in runs:
        d = cf.differences()
        for k, value in enumerate(values[1:]):
            for t in range(steps):
                diff_rows.append([cf.seed, json.dumps(values[0]), json.dumps(value), t + 1]
                                 + [_fmt(x) for x in d[k, t]])
    (out / "differences.csv").write_text(
        _csv_text(("seed", "value_base", "value", "step") + METRIC_COLUMNS, diff_rows))
    traj_rows = []
    for cf in runs:
        for value, r in zip(values, cf.runs):
            for t in range(steps):
                traj_rows.append([cf.seed, json.dumps(value), t + 1] + [_fmt(x) for x in r.trajectory[t]])
    (out / "trajectories.csv").write_text(
        _csv_text(("seed", "value", "step") + METRIC_COLUMNS, traj_rows))
    summary_rows = []
    for k, value in enumerate(values[1:], start=1):
        for m, name in enumerate(METRIC_COLUMNS):
            a = np.array([cf.runs[k].final(name) for cf in runs])
            b = np.array([cf.runs[0].final(name) for cf in runs])
            row = [json.dumps(values[0]), json.dumps(value), name, len(runs)]
            ok = np.isfinite(a) & np.isfinite(b)
            if ok.sum() >= 2 and b[ok].mean() != 0:
                eff = experiments.paired_effect(a[ok], b[ok], rng=np.random.default_rng([stats_seed, k, m]))
                row += [_fmt(v) for v in (eff.mean_b, eff.mean_a, eff.mean_diff, eff.ci_lo, eff.ci_hi,
                                          eff.relative_percent)]
                row.append(str(eff.excludes_zero).lower())
            else:
                row += ["nan"] * 6 + ["false"]
            summary_rows.append(row)
    (out / "effects.csv").write_text(_csv_text(
        ("value_base", "value", "metric", "n_seeds", "mean_base", "mean_value", "mean_diff",
         "ci_lo", "ci_hi", "relative_percent", "ci_excludes_zero"), summary_rows))
    write_manifest(out, "counterfactual",
                   {"base_config": to_dict(config), "vary": vary, "values": values,
                    "seeds": seeds, "stats_seed": stats_seed},
                   ["differences.csv", "trajectories.csv", "effects.csv"])
    for row in summary_rows:
        if row[2] in ("transitivity", "engagement_rate"):
            print(f"{row[2]} {row[0]} -> {row[1]}: diff {row[6]} CI [{row[7]}, {row[8]}] ({row[9]}%)")
    return EXIT_OK


def _read_trajectory(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != sim.CSV_HEADER:
        raise InputError(f"{path}: not a trajectory CSV")
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=float)


def _read_column(path: Path) -> np.ndarray:
    if not path.exists():
        raise InputError(f"{path}: no such file")
    vals = []
    for k, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            vals.append(float(line.split(",")[0]))
        except ValueError:
            if vals:
                raise InputError(f"{path}:{k}: not a number: {line!r}") from None
            # first non-numeric line is a header
    if not vals:
        raise InputError(f"{path}: no values")
    return np.array(vals)


def cmd_analyze(args) -> int:
    if not args.mode:
        raise InputError("--mode is required")
    out = _out_dir(args)
    mode = args.mode
    inputs = [Path(p) for p in args.inputs]
    if mode == "ks":
        if len(inputs) != 2:
            raise InputError("ks mode needs exactly two column files")
        a, b = _read_column(inputs[0]), _read_column(inputs[1])
        d, p = analysis.ks_distance(a, b)
        lines = [f"D {d!r}", f"p {p!r}"]
        if len(a) <= 30 and len(b) <= 30:
            lines.append(f"p_exact {analysis.ks_exact_p(a, b)!r}")
        text = "\n".join(lines) + "\n"
        (out / "ks.txt").write_text(text)
        print(text, end="")
        write_manifest(out, "analyze", {"mode": mode, "inputs": [str(p) for p in inputs]}, ["ks.txt"])
        return EXIT_OK

    if mode == "convergence":
        body: dict = {"mode": mode}
        if inputs:
            labels = [str(p) for p in inputs]
            trajs = []
            for p in inputs:
                if not p.exists():
                    raise InputError(f"{p}: no such file")
                trajs.append(_read_trajectory(p))
            body["inputs"] = labels
        else:
            if not args.config:
                raise InputError("convergence mode needs trajectory CSVs or --config with --seeds")
            config, _ = load_run_input(args.config)
            config = _with_steps(config, args.steps_override)
            seeds = _seeds(args)
            labels = [f"seed {s}" for s in seeds]
            trajs = [experiments.run_cell(config, s).trajectory for s in seeds]
            body.update({"config": to_dict(config), "seeds": seeds})
        rows = []
        steps = []
        for label, tr in zip(labels, trajs):
            if tr.shape[0] < 10:
                raise InputError(f"{label}: convergence needs at least 10 steps")
            t = analysis.convergence_step(tr)
            steps.append(t)
            rows.append((label, "none" if t is None else t))
        done = [t for t in steps if t is not None]
        median = float(np.median(done)) if done else float("nan")
        text = _csv_text(("run", "convergence_step"), rows)
        text += f"# converged {len(done)} of {len(steps)}; median {_fmt(median)}\n"
        (out / "convergence.csv").write_text(text)
        print(text, end="")
        write_manifest(out, "analyze", body, ["convergence.csv"])
        return EXIT_OK

    if mode == "stability":
        if not args.config:
            raise InputError("stability mode needs --config")
        config, _ = load_run_input(args.config)
        steps = args.steps_override if args.steps_override is not None else 200
        if steps < 10:
            raise InputError("--steps-override must be >= 10 for stability")
        seeds = _seeds(args)
        if len(seeds) < 5:
            raise InputError("stability mode needs at least 5 seeds")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            report = analysis.simulated_stability(config, seeds, steps=steps)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        text = report.to_text()
        (out / "stability.txt").write_text(text)
        print(text, end="")
        write_manifest(out, "analyze", {"mode": mode, "config": to_dict(config), "seeds": seeds,
                                        "steps": steps}, ["stability.txt"])
        return EXIT_OK

    if mode == "scaling":
        body = {"mode": mode}
        if inputs:
            if len(inputs) != 1 or not inputs[0].exists():
                raise InputError("scaling mode takes one CSV with columns n,clustering,path_length")
            with open(inputs[0], newline="") as fh:
                reader = csv.DictReader(fh)
                try:
                    pts = [(float(r["n"]), float(r["clustering"]), float(r["path_length"])) for r in reader]
                except (KeyError, ValueError) as exc:
                    raise InputError(f"{inputs[0]}: bad scaling table ({exc})") from exc
            body["inputs"] = [str(inputs[0])]
        else:
            if not args.config or args.values is None:
                raise InputError("scaling mode needs a points CSV or --config with --values sizes")
            config, _ = load_run_input(args.config)
            config = _with_steps(config, args.steps_override)
            sizes = parse_values(args.values)
            if not all(isinstance(n, int) and n >= 2 for n in sizes):
                raise InputError("--values must list integer network sizes")
            if len(set(sizes)) < 3:
                raise InputError("scaling needs at least three distinct sizes")
            seeds = _seeds(args)
            pts = []
            for n in sizes:
                for s in seeds:
                    r = experiments.run_cell(config.replace(n_users=n), s)
                    if not r.ok:
                        raise RuntimeError(f"n={n} seed {s}: {r.error}")
                    pts.append((float(n), r.final("local_clustering_mean"), r.final("avg_path_length")))
            body.update({"config": to_dict(config), "sizes": sizes, "seeds": seeds})
        if len({p[0] for p in pts}) < 3:
            raise InputError("scaling needs at least three distinct sizes")
        try:
            cfit = analysis.fit_power_law([(n, c) for n, c, _ in pts])
            lfit = analysis.fit_log_linear([(n, l) for n, _, l in pts])
        except ValueError as exc:
            raise InputError(str(exc)) from exc
        text = cfit.to_text("clustering") + lfit.to_text("path_length")
        (out / "scaling.txt").write_text(text)
        (out / "scaling_points.csv").write_text(
            _csv_text(("n", "clustering", "path_length"), [[_fmt(v) for v in p] for p in pts]))
        print(text, end="")
        write_manifest(out, "analyze", body, ["scaling.txt", "scaling_points.csv"])
        return EXIT_OK

    raise InputError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="feedloop", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="config JSON, or a manifest.json from an earlier run")
        sp.add_argument("--seed", type=int, help="seed for a single run")
        sp.add_argument("--seeds", help="JSON list, manifest, or comma/space separated integers")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--steps-override", type=int, dest="steps_override", help="replace the configured step count")

    run = sub.add_parser("run", help="one simulation run")
    common(run)
    sweep = sub.add_parser("sweep", help="grid x seeds sweep")
    common(sweep)
    sweep.add_argument("--grid", help="grid JSON or a sweep manifest.json")
    sweep.add_argument("--jobs", type=int, default=1, help="worker processes (output does not depend on it)")
    cf = sub.add_parser("counterfactual", help="matched-seed runs varying one field")
    common(cf)
    cf.add_argument("--vary", help="config field to vary")
    cf.add_argument("--values", help="comma separated values; the first is the baseline")
    an = sub.add_parser("analyze", help="convergence, stability, scaling or ks analysis")
    common(an)
    an.add_argument("--mode", choices=("convergence", "stability", "scaling", "ks"))
    an.add_argument("--values", help="population sizes for --mode scaling")
    an.add_argument("inputs", nargs="*", help="trajectory or sample files")
    return p


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "counterfactual": cmd_counterfactual,
            "analyze": cmd_analyze}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

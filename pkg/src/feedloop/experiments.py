"""Parameter sweeps, matched-seed counterfactuals and the statistics used to report them.

Runs are independent (config, seed) cells. Sweeps may execute them in worker
processes, but results are always folded in (config index, seed index) order,
so every output is identical for any ``jobs`` value.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from feedloop import sim
from feedloop.config import ConfigError, ExperimentConfig, to_dict
from feedloop.metrics import METRIC_COLUMNS

CONFIG_COLUMNS = ("n_users", "content_ratio", "alpha_enthusiast", "t_activate", "r_explore",
                  "policy", "frozen", "steps")


def code_fingerprint() -> str:
    """Hash of the package sources; part of every manifest and cache key."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


@dataclass
class RunResult:
    config: ExperimentConfig
    seed: int
    trajectory: np.ndarray | None = None  # (steps, len(METRIC_COLUMNS))
    # (step, validation AUC, weights updated) per GAT training event
    auc_history: list = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def metric(self, name: str) -> np.ndarray:
        return self.trajectory[:, METRIC_COLUMNS.index(name)]

    def final(self, name: str) -> float:
        return float(self.metric(name)[-1])

    def auc_at(self, step: int) -> float:
        """Validation AUC of the most recent training event at or before ``step``."""
        best = float("nan")
        for t, auc, _ in self.auc_history:
            if t <= step:
                best = auc
        return best


def _cache_path(cache_dir: str | Path, config: ExperimentConfig, seed: int) -> Path:
    key = json.dumps({"config": to_dict(config), "seed": seed, "code": code_fingerprint()},
                     sort_keys=True)
    return Path(cache_dir) / (hashlib.sha256(key.encode()).hexdigest()[:24] + ".json")


def run_cell(config: ExperimentConfig, seed: int, cache_dir: str | None = None) -> RunResult:
    """Run one (config, seed) cell; failures are captured, not raised."""
    path = _cache_path(cache_dir, config, seed) if cache_dir else None
    if path is not None and path.exists():
        data = json.loads(path.read_text())
        return RunResult(config, seed, np.asarray(data["trajectory"], dtype=float),
                         [tuple(x) for x in data["auc_history"]])
    holder = {}
    try:
        traj = sim.run(config, seed, state_hook=lambda s: holder.__setitem__("state", s))
    except Exception as exc:  # a failed cell is reported, the sweep continues
        msg = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        return RunResult(config, seed, error=msg)
    arr = np.array([snap.values()[1:] for snap in traj], dtype=float)
    history = [(int(t), float(a), bool(u)) for t, a, u in holder["state"].recommender.history]
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"trajectory": arr.tolist(), "auc_history": history}))
        tmp.replace(path)
    return RunResult(config, seed, arr, history)


def _run_cell_args(args):
    return run_cell(*args)


@dataclass
class SweepResult:
    configs: list[ExperimentConfig]
    seeds: list[int]
    # results[c][s] for config index c and seed index s
    results: list[list[RunResult]]

    @property
    def failures(self) -> list[tuple[int, int, str]]:
        return [(c, self.seeds[s], r.error) for c, row in enumerate(self.results)
                for s, r in enumerate(row) if not r.ok]

    def finals(self, config_index: int, metric: str) -> np.ndarray:
        return np.array([r.final(metric) for r in self.results[config_index] if r.ok])

    def long_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("config_id",) + CONFIG_COLUMNS + ("seed", "step", "metric", "value"))
        for c, row in enumerate(self.results):
            cfg = _config_row(self.configs[c])
            for r in row:
                if not r.ok:
                    continue
                for t in range(r.trajectory.shape[0]):
                    for m, name in enumerate(METRIC_COLUMNS):
                        w.writerow((c,) + cfg + (r.seed, t + 1, name, sim.format_value(r.trajectory[t, m])))
        return buf.getvalue()

    def aggregate_csv(self, stats_seed: int = 0, n_boot: int = 1000, level: float = 0.95) -> str:
        """Mean, std and bootstrap CI over seeds of each metric's final-step value."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("config_id",) + CONFIG_COLUMNS + ("metric", "n", "mean", "std", "ci_lo", "ci_hi"))
        for c in range(len(self.configs)):
            cfg = _config_row(self.configs[c])
            for m, name in enumerate(METRIC_COLUMNS):
                x = self.finals(c, name)
                x = x[np.isfinite(x)]
                rng = np.random.default_rng([stats_seed, c, m])
                mean = std = lo = hi = float("nan")
                if x.size:
                    mean = float(x.mean())
                if x.size >= 2:
                    std = float(x.std(ddof=1))
                    lo, hi = bootstrap_ci(x, n_boot, level, rng)
                w.writerow((c,) + cfg + (name, x.size) + tuple(sim.format_value(v) for v in (mean, std, lo, hi)))
        return buf.getvalue()


def _config_row(config: ExperimentConfig) -> tuple:
    return tuple(getattr(config, name) for name in CONFIG_COLUMNS)


def run_sweep(grid: list[ExperimentConfig], seeds: list[int], jobs: int = 1,
              cache_dir: str | None = None) -> SweepResult:
    """Run every (config, seed) cell; per-cell failures are recorded and the sweep continues."""
    if not grid or not seeds:
        raise ValueError("run_sweep needs a non-empty grid and seed list")
    for cfg in grid:
        cfg.validate()
    tasks = [(cfg, int(seed), cache_dir) for cfg in grid for seed in seeds]
    if jobs <= 1:
        flat = [run_cell(*t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            # map preserves submission order
            flat = list(pool.map(_run_cell_args, tasks))
    k = len(seeds)
    results = [flat[c * k:(c + 1) * k] for c in range(len(grid))]
    return SweepResult(list(grid), [int(s) for s in seeds], results)


def factorial_grid(base: ExperimentConfig | None = None) -> list[ExperimentConfig]:
    """The 18-cell factorial: t_activate {10, 25, 40} x alpha {0.2, 0.5, 0.8} x r_explore {0.1, 0.3}."""
    base = base or ExperimentConfig()
    return [base.replace(t_activate=t, alpha_enthusiast=a, r_explore=r)
            for t in (10, 25, 40) for a in (0.2, 0.5, 0.8) for r in (0.1, 0.3)]


# ---------------------------------------------------------------------------
# statistics


def bootstrap_ci(samples, n_boot: int = 1000, level: float = 0.95,
                 rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise ValueError("bootstrap_ci needs at least two samples")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    rng = np.random.default_rng(0) if rng is None else rng
    idx = rng.integers(0, x.size, size=(n_boot, x.size))
    means = x[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [tail, 1.0 - tail])
    # keep lo <= mean <= hi exact for constant samples
    m = float(x.mean())
    return float(min(lo, m)), float(max(hi, m))


@dataclass(frozen=True)
class TTest:
    t: float
    p_raw: float
    p_adjusted: float
    significant: bool


def welch_t_test(a, b) -> tuple[float, float]:
    """Two-tailed Welch t statistic and p-value."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        if diff == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    t = diff / math.sqrt(se2)
    dof = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    p = 2.0 * stats.t.sf(abs(t), dof)
    return float(t), float(min(1.0, p))


def bonferroni(p_values, family_size: int) -> np.ndarray:
    if family_size < 1:
        raise ValueError("family_size must be >= 1")
    return np.minimum(1.0, np.asarray(p_values, dtype=float) * family_size)


def t_test_bonferroni(groups, family_size: int, alpha: float = 0.05) -> list[TTest]:
    """Welch tests for each (A, B) pair with Bonferroni-adjusted p-values."""
    out = []
    for a, b in groups:
        t, p = welch_t_test(a, b)
        p_adj = float(bonferroni([p], family_size)[0])
        out.append(TTest(t, p, p_adj, p_adj < alpha))
    return out


def effect_size(mean_a: float, mean_b: float) -> float:
    """Relative change of A against baseline B, in percent."""
    if mean_b == 0:
        raise ZeroDivisionError("effect size undefined for a zero baseline")
    return 100.0 * (mean_a - mean_b) / abs(mean_b)


@dataclass(frozen=True)
class PairedEffect:
    mean_a: float
    mean_b: float
    mean_diff: float
    ci_lo: float
    ci_hi: float
    relative_percent: float

    @property
    def excludes_zero(self) -> bool:
        return self.ci_lo > 0 or self.ci_hi < 0


def paired_effect(a, b, n_boot: int = 1000, level: float = 0.95,
                  rng: np.random.Generator | None = None) -> PairedEffect:
    """Effect of A against B on matched samples: bootstrap CI of the mean of ``a - b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    d = a - b
    lo, hi = bootstrap_ci(d, n_boot, level, rng)
    return PairedEffect(float(a.mean()), float(b.mean()), float(d.mean()), lo, hi,
                        effect_size(float(a.mean()), float(b.mean())))


def correlation_matrix(columns: dict[str, np.ndarray]) -> tuple[np.ndarray, list[str]]:
    """Pearson correlations between named columns of per-run values.

    Returns ``(matrix, flagged)``; a zero-variance column gets NaN entries
    (except its unit diagonal) and is listed in ``flagged``.
    """
    names = list(columns)
    X = np.array([np.asarray(columns[k], dtype=float) for k in names])
    if X.ndim != 2 or X.shape[1] < 3:
        raise ValueError("correlation needs at least three observations per column")
    Xc = X - X.mean(axis=1, keepdims=True)
    norms = np.sqrt((Xc * Xc).sum(axis=1))
    flagged = [names[i] for i in np.flatnonzero(norms == 0)]
    with np.errstate(divide="ignore", invalid="ignore"):
        R = (Xc @ Xc.T) / np.outer(norms, norms)
    R = np.clip(R, -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    return R, flagged


def sweep_correlations(sweep: SweepResult, metrics: list[str], window: tuple[int, int]
                       ) -> tuple[np.ndarray, list[str]]:
    """Correlations of per-run metric means over steps ``window[0]..window[1]`` (inclusive)."""
    lo, hi = window
    cols = {m: [] for m in metrics}
    for row in sweep.results:
        for r in row:
            if not r.ok:
                continue
            seg = r.trajectory[lo - 1:hi]
            for m in metrics:
                cols[m].append(float(np.nanmean(seg[:, METRIC_COLUMNS.index(m)])))
    return correlation_matrix(cols)


# ---------------------------------------------------------------------------
# matched-seed counterfactuals


def vary_config(config: ExperimentConfig, name: str, value) -> ExperimentConfig:
    """Copy of ``config`` with one field changed; ``behavior.x`` / ``train.x`` reach nested fields."""
    data = to_dict(config)
    parts = name.split(".")
    node = data
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config field '{name}'", name)
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigError(f"unknown config field '{name}'", name)
    node[parts[-1]] = value
    return ExperimentConfig.from_dict(data)


@dataclass
class Counterfactual:
    vary: str
    values: list
    seed: int
    runs: list[RunResult]

    def differences(self) -> np.ndarray:
        """Per-step metric differences of every run against the first, shape (len(values)-1, steps, metrics)."""
        base = self.runs[0].trajectory
        return np.array([r.trajectory - base for r in self.runs[1:]])


def matched_counterfactual(base: ExperimentConfig, vary: str, values: list, seed: int,
                           cache_dir: str | None = None) -> Counterfactual:
    """Runs sharing ``seed`` and every parameter except ``vary``."""
    configs = [vary_config(base, vary, v) for v in values]
    runs = [run_cell(cfg, seed, cache_dir) for cfg in configs]
    for r in runs:
        if not r.ok:
            raise RuntimeError(f"counterfactual run failed: {r.error}")
    return Counterfactual(vary, list(values), seed, runs)


def config_summary(config: ExperimentConfig) -> dict:
    return {name: getattr(config, name) for name in CONFIG_COLUMNS}


def replace_steps(config: ExperimentConfig, steps: int | None) -> ExperimentConfig:
    return config if steps is None else dataclasses.replace(config, steps=steps)

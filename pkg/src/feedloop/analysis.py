"""Post-hoc analyses: convergence detection, fixed points and Jacobian stability,
finite-size scaling fits and two-sample KS distances."""

from __future__ import annotations

import cmath
import math
import warnings
from dataclasses import dataclass
from math import comb

import numpy as np
from scipy import stats

from feedloop import metrics, sim
from feedloop.metrics import METRIC_COLUMNS
from feedloop.rng import stream

DEFAULT_THRESHOLDS = {"density": 0.001, "satisfaction_mean": 0.005, "local_clustering_mean": 0.01}
MACRO = ("satisfaction_mean", "density", "local_clustering_mean")


# ---------------------------------------------------------------------------
# convergence and fixed points


def _columns(trajectory, names) -> np.ndarray:
    """(steps, len(names)) array from snapshots or a (steps, metrics) array."""
    if isinstance(trajectory, np.ndarray):
        return trajectory[:, [METRIC_COLUMNS.index(n) for n in names]]
    return np.array([[getattr(s, n) for n in names] for s in trajectory], dtype=float)


def convergence_step(trajectory, thresholds: dict | None = None, window: int = 20) -> int | None:
    """First step from which every step-to-step change of density, mean
    satisfaction and mean local clustering stays under its threshold for
    ``window`` consecutive steps.

    Steps are 1-based; the change at step ``t`` is ``x[t] - x[t-1]``, so the
    earliest possible answer is step 2. ``None`` if the run never settles.
    """
    thresholds = DEFAULT_THRESHOLDS if thresholds is None else thresholds
    names = list(thresholds)
    x = _columns(trajectory, names)
    if x.shape[0] < 10:
        raise ValueError("convergence needs a trajectory of at least 10 steps")
    limits = np.array([thresholds[n] for n in names])
    calm = (np.abs(np.diff(x, axis=0)) < limits).all(axis=1)  # calm[k] is the change at step k+2
    run = 0
    for k, ok in enumerate(calm):
        run = run + 1 if ok else 0
        if run >= window:
            return k - window + 3
    return None


def estimate_fixed_point(trajectories, last: int = 50, require_converged: bool = True
                         ) -> tuple[float, float, float]:
    """Mean of the last ``last`` steps' (s̄, ρ, C̄) over runs.

    Runs without a convergence step are excluded when ``require_converged``.
    """
    kept = []
    for traj in trajectories:
        if require_converged and convergence_step(traj) is None:
            continue
        tail = _columns(traj, MACRO)[-last:]
        kept.append([math.fsum(col) / len(col) for col in tail.T])
    if not kept:
        raise ValueError("no converged run to estimate a fixed point from")
    # compensated sums: constant runs give back their value exactly
    s, rho, c = (math.fsum(col) / len(col) for col in zip(*kept))
    return float(s), float(rho), float(c)


# ---------------------------------------------------------------------------
# Jacobian and eigenvalues


def cubic_roots(a: float, b: float, c: float, d: float) -> list[complex]:
    """Roots of ``a x^3 + b x^2 + c x + d`` by Cardano's formula, Newton-polished."""
    if a == 0:
        raise ValueError("leading coefficient must be non-zero")
    b, c, d = b / a, c / a, d / a
    # depressed cubic t^3 + p t + q with x = t - b/3
    p = c - b * b / 3.0
    q = 2.0 * b ** 3 / 27.0 - b * c / 3.0 + d
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    # a discriminant at round-off level is a repeated root
    if abs(disc) <= 1e-12 * max((q / 2.0) ** 2, abs(p / 3.0) ** 3):
        disc = 0.0
    if p == 0 and q == 0:
        ts = [0j, 0j, 0j]
    else:
        root = cmath.sqrt(disc)
        u3 = -q / 2.0 + root
        if abs(u3) < abs(-q / 2.0 - root):
            u3 = -q / 2.0 - root
        u = u3 ** (1.0 / 3.0)
        omega = complex(-0.5, math.sqrt(3.0) / 2.0)
        ts = []
        for k in range(3):
            uk = u * omega ** k
            ts.append(uk - p / (3.0 * uk) if uk != 0 else 0j)
    roots = []
    for t in ts:
        x = t - b / 3.0
        f = ((x + b) * x + c) * x + d
        for _ in range(3):
            df = (3.0 * x + 2.0 * b) * x + c
            if df == 0:
                break
            step = x - f / df
            f_step = ((step + b) * step + c) * step + d
            # near a repeated root df ~ 0; keep only steps that help
            if abs(f_step) >= abs(f):
                break
            x, f = step, f_step
        # real roots come out with round-off imaginary parts
        if abs(x.imag) < 1e-12 * max(1.0, abs(x)):
            x = complex(x.real, 0.0)
        roots.append(x)
    return roots


def eigenvalues_3x3(J: np.ndarray) -> list[complex]:
    """Eigenvalues of a 3x3 matrix from its characteristic polynomial.

    The polynomial is formed for ``J - (tr J / 3) I``, which is already a
    depressed cubic; this keeps clustered roots (e.g. near-identity
    matrices) accurate.
    """
    J = np.asarray(J, dtype=float)
    if J.shape != (3, 3):
        raise ValueError("expected a 3x3 matrix")
    shift = (J[0, 0] + J[1, 1] + J[2, 2]) / 3.0
    A = J - shift * np.eye(3)
    minors = (A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
              + A[0, 0] * A[2, 2] - A[0, 2] * A[2, 0]
              + A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
    det = float(np.linalg.det(A))
    # det(t I - A) = t^3 + minors t - det since tr(A) = 0
    return [t + shift for t in cubic_roots(1.0, 0.0, minors, -det)]


@dataclass
class StabilityReport:
    fixed_point: tuple[float, float, float]
    jacobian: np.ndarray
    eigenvalues: list[complex]
    spectral_radius: float
    stable: bool

    def to_text(self) -> str:
        lines = ["fixed_point " + " ".join(repr(float(v)) for v in self.fixed_point)]
        for row in self.jacobian:
            lines.append("jacobian " + " ".join(repr(float(v)) for v in row))
        for lam in self.eigenvalues:
            lines.append(f"eigenvalue {lam.real!r} {lam.imag!r}")
        lines.append(f"spectral_radius {self.spectral_radius!r}")
        lines.append(f"stable {str(self.stable).lower()}")
        return "\n".join(lines) + "\n"


def numerical_jacobian(phi, x0, rel_step: float = 1e-2, scale=None, lower=None, upper=None
                       ) -> np.ndarray:
    """Central-difference Jacobian of ``phi`` at ``x0``.

    ``phi(x)`` returns either the image ``y`` or ``(y, x_realized)`` when the
    map can only approximately reach the requested input; differences are
    then taken against the realized inputs (``J = dY dX^-1``). The step in
    coordinate ``j`` is ``rel_step * scale[j]`` (scale defaults to
    ``max(|x0|, 1e-3)``). Where ``x0 +- h`` leaves ``[lower, upper]`` a
    one-sided difference is used and a warning is issued.
    """
    x0 = np.asarray(x0, dtype=float)
    d = x0.size
    scale = np.maximum(np.abs(x0), 1e-3) if scale is None else np.asarray(scale, dtype=float)
    lower = np.full(d, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(d, np.inf) if upper is None else np.asarray(upper, dtype=float)

    def call(x):
        out = phi(x)
        if isinstance(out, tuple):
            y, xr = out
            return np.asarray(y, dtype=float), np.asarray(xr, dtype=float)
        return np.asarray(out, dtype=float), np.asarray(x, dtype=float)

    base = None
    dX = np.zeros((d, d))
    dY = None
    for j in range(d):
        h = rel_step * scale[j]
        xp = x0.copy()
        xm = x0.copy()
        xp[j] = x0[j] + h
        xm[j] = x0[j] - h
        plus_ok = xp[j] <= upper[j]
        minus_ok = xm[j] >= lower[j]
        if not (plus_ok and minus_ok):
            warnings.warn(f"coordinate {j}: perturbation leaves the feasible region; "
                          "using a one-sided difference", RuntimeWarning, stacklevel=2)
            if not (plus_ok or minus_ok):
                raise ValueError(f"coordinate {j}: no feasible perturbation of size {h}")
            if base is None:
                base = call(x0)
        yp, rp = call(xp) if plus_ok else base
        ym, rm = call(xm) if minus_ok else base
        if dY is None:
            dY = np.zeros((yp.size, d))
        dX[:, j] = rp - rm
        dY[:, j] = yp - ym
    return dY @ np.linalg.inv(dX)


def stability_report(fixed_point, jacobian: np.ndarray) -> StabilityReport:
    lams = eigenvalues_3x3(jacobian)
    radius = max(abs(l) for l in lams)
    return StabilityReport(tuple(float(v) for v in fixed_point), np.asarray(jacobian, dtype=float),
                           lams, float(radius), bool(radius < 1.0))


def macro_state(state) -> np.ndarray:
    """(mean satisfaction, density, mean local clustering) of a platform state."""
    und = metrics.undirected(state.adjacency())
    return np.array([float(state.agents.satisfaction.mean()), metrics.density(und),
                     float(metrics.local_clustering(und).mean())])


def _undirected_sets(state) -> list[set]:
    nb = [set() for _ in range(state.n)]
    for i, outs in enumerate(state.following):
        for j in outs:
            if i != j:
                nb[i].add(j)
                nb[j].add(i)
    return nb


def _add_pair(state, i, j, rng):
    if rng.random() < 0.5:
        i, j = j, i
    state.following[i].add(j)


def _remove_pair(state, i, j):
    state.following[i].discard(j)
    state.following[j].discard(i)


def shift_satisfaction(state, delta: float) -> None:
    """Move every active agent's satisfaction by ``delta`` (clipped to [0, 1])."""
    a = state.agents
    a.satisfaction = np.where(a.active, np.clip(a.satisfaction + delta, 0.0, 1.0), a.satisfaction)


def shift_density(state, delta: float, rng: np.random.Generator) -> None:
    """Add (delta > 0) or remove (delta < 0) random undirected ties."""
    n = state.n
    count = int(round(abs(delta) * n * (n - 1) / 2))
    nb = _undirected_sets(state)
    if delta > 0:
        added = 0
        while added < count:
            i, j = (int(v) for v in rng.integers(0, n, 2))
            if i == j or j in nb[i]:
                continue
            _add_pair(state, i, j, rng)
            nb[i].add(j)
            nb[j].add(i)
            added += 1
    else:
        pairs = sorted((i, j) for i in range(n) for j in nb[i] if i < j)
        for k in rng.permutation(len(pairs))[:count]:
            _remove_pair(state, *pairs[k])


def shift_clustering(state, delta: float, rng: np.random.Generator, max_moves: int = 10000) -> None:
    """Rewire ties at fixed density until mean local clustering moves by about ``delta``.

    Raising clustering swaps a random tie for one closing an open triad;
    lowering it swaps a tie inside a triangle for a random tie.
    """
    n = state.n
    target = macro_state(state)[2] + delta
    nb = _undirected_sets(state)
    for _ in range(max_moves):
        current = float(metrics.local_clustering(metrics.undirected(state.adjacency())).mean())
        if (delta >= 0 and current >= target) or (delta < 0 and current <= target):
            return
        pairs = sorted((i, j) for i in range(n) for j in nb[i] if i < j)
        if not pairs:
            return
        if delta > 0:
            hubs = [v for v in range(n) if len(nb[v]) >= 2]
            v = hubs[int(rng.integers(len(hubs)))]
            a, b = rng.choice(sorted(nb[v]), 2, replace=False)
            a, b = int(a), int(b)
            if b in nb[a]:
                continue
            i, j = pairs[int(rng.integers(len(pairs)))]
            if v in (i, j) and ({i, j} & {a, b}):
                continue
            _remove_pair(state, i, j)
            nb[i].discard(j)
            nb[j].discard(i)
            _add_pair(state, a, b, rng)
            nb[a].add(b)
            nb[b].add(a)
        else:
            closed = [(i, j) for i, j in pairs if nb[i] & nb[j]]
            if not closed:
                return
            i, j = closed[int(rng.integers(len(closed)))]
            while True:
                a, b = (int(v) for v in rng.integers(0, n, 2))
                if a != b and b not in nb[a]:
                    break
            _remove_pair(state, i, j)
            nb[i].discard(j)
            nb[j].discard(i)
            _add_pair(state, a, b, rng)
            nb[a].add(b)
            nb[b].add(a)


class MeanFieldMap:
    """One-step macro map estimated on an ensemble of simulated micro-states.

    The ensemble holds ``replicates`` copies of each reference state, each
    with its own step seed. ``phi(x)`` moves every member's macro-state by
    ``x - x0`` (``x0`` is the ensemble mean), advances it one step and
    returns the ensemble-mean next macro-state together with the realized
    ensemble-mean input. A member uses the same randomness for every
    perturbation, so differences are common-random-number estimates.
    """

    def __init__(self, reference_states, replicates: int = 1, base_seed: int = 0):
        self.members = []
        for r, st in enumerate(reference_states):
            for q in range(replicates):
                self.members.append((st, base_seed + 1000 * r + q))
        if not self.members:
            raise ValueError("mean-field map needs at least one reference state")
        self.x0 = np.mean([macro_state(st) for st, _ in self.members], axis=0)

    def __call__(self, x):
        delta = np.asarray(x, dtype=float) - self.x0
        ins = []
        outs = []
        for st, seed in self.members:
            s = sim.clone_state(st)
            s.seed = seed
            before = macro_state(s)
            g = stream(seed, "mean-field")
            if delta[0] != 0:
                shift_satisfaction(s, delta[0])
            if delta[1] != 0:
                shift_density(s, delta[1], g)
            if delta[2] != 0:
                shift_clustering(s, delta[2], g)
            realized = macro_state(s)
            sim.step(s, measure=False)
            ins.append(self.x0 + (realized - before))
            outs.append(macro_state(s))
        return np.mean(outs, axis=0), np.mean(ins, axis=0)


def simulator_stability(reference_states, fixed_point, replicates: int = 1, rel_step: float = 1e-2,
                        base_seed: int = 0) -> StabilityReport:
    """Jacobian of the simulator's mean-field map around its empirical fixed point."""
    phi = MeanFieldMap(reference_states, replicates, base_seed)
    # all three coordinates live in [0, 1], so each step is rel_step of that range
    J = numerical_jacobian(phi, phi.x0, rel_step=rel_step, scale=np.ones(3),
                           lower=[0.0, 0.0, 0.0], upper=[1.0, 1.0, 1.0])
    return stability_report(fixed_point, J)


def end_states(config, seeds, steps: int | None = None) -> tuple[list, list[np.ndarray]]:
    """Run each seed and return its final platform state and metric trajectory.

    A run that would hand the map a retraining step stops one step early.
    """
    from feedloop.recommender import retrain_due

    steps = config.steps if steps is None else steps
    if config.policy == "gat" and retrain_due(steps + 1, config.t_activate, config.train.retrain_period):
        steps -= 1
    states, trajs = [], []
    for seed in seeds:
        holder = {}
        traj = sim.run(config, int(seed), steps, state_hook=lambda st: holder.__setitem__("s", st))
        states.append(holder["s"])
        trajs.append(np.array([snap.values()[1:] for snap in traj], dtype=float))
    return states, trajs


def simulated_stability(config, seeds, steps: int = 200, ensemble: int = 200,
                        rel_step: float = 1e-2, runs=None) -> StabilityReport:
    """Fixed point from ``seeds`` runs of ``steps`` steps, then the Jacobian of
    the mean-field map over an ensemble of ``ensemble`` micro-states (the end
    states of converged runs, each replicated with its own step seed).

    ``runs`` may pass precomputed ``end_states(config, seeds, steps)`` output.
    """
    if len(seeds) < 5:
        raise ValueError("fixed-point estimation needs at least 5 seeds")
    states, trajs = end_states(config, seeds, steps) if runs is None else runs
    keep = [k for k, tr in enumerate(trajs) if convergence_step(tr) is not None]
    if not keep:
        raise ValueError("no converged run to estimate a fixed point from")
    fp = estimate_fixed_point([trajs[k] for k in keep], require_converged=False)
    refs = [states[k] for k in keep]
    replicates = max(1, math.ceil(ensemble / len(refs)))
    return simulator_stability(refs, fp, replicates, rel_step, base_seed=int(seeds[0]) * 7919 + 1)


# ---------------------------------------------------------------------------
# scaling fits


@dataclass
class ScalingFit:
    model: str  # "power_law": y = a n^-alpha; "log_linear": y = a ln n + b
    coefficients: dict
    std_errors: dict
    r_squared: float
    dof: int
    _resid_var: float
    _xtx_inv: np.ndarray
    _transform: str

    def to_text(self, label: str) -> str:
        lines = [f"{label} model {self.model}"]
        for k in self.coefficients:
            lines.append(f"{label} {k} {self.coefficients[k]!r} se {self.std_errors[k]!r}")
        lines.append(f"{label} r_squared {self.r_squared!r}")
        return "\n".join(lines) + "\n"

    def _design(self, n: float) -> np.ndarray:
        return np.array([1.0, math.log(n)])

    def predict(self, n: float, level: float = 0.95) -> tuple[float, float, float]:
        """Point prediction and prediction interval at ``n``."""
        if n <= 0:
            raise ValueError("n must be positive")
        x = self._design(n)
        if self.model == "power_law":
            beta = np.array([math.log(self.coefficients["a"]), -self.coefficients["alpha"]])
        else:
            beta = np.array([self.coefficients["b"], self.coefficients["a"]])
        yhat = float(x @ beta)
        if self.dof > 0:
            se = math.sqrt(self._resid_var * (1.0 + float(x @ self._xtx_inv @ x)))
            q = stats.t.ppf(0.5 + level / 2.0, self.dof)
        else:
            se, q = 0.0, 0.0
        lo, hi = yhat - q * se, yhat + q * se
        if self.model == "power_law":
            return math.exp(yhat), math.exp(lo), math.exp(hi)
        return yhat, lo, hi


def _ols(x: np.ndarray, y: np.ndarray):
    X = np.column_stack([np.ones_like(x), x])
    xtx_inv = np.linalg.inv(X.T @ X)
    beta = xtx_inv @ X.T @ y
    resid = y - X @ beta
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dof = len(y) - 2
    var = ss_res / dof if dof > 0 else 0.0
    se = np.sqrt(np.diag(xtx_inv) * var)
    return beta, se, min(1.0, max(0.0, r2)), dof, var, xtx_inv


def _check_points(points) -> tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be (n, value) pairs")
    n, y = pts[:, 0], pts[:, 1]
    if len(np.unique(n)) < 3:
        raise ValueError("scaling fits need at least three distinct n")
    if (n <= 0).any():
        raise ValueError("n must be positive")
    return n, y


def fit_power_law(points) -> ScalingFit:
    """Least squares of ``ln C = ln a - alpha ln n``."""
    n, y = _check_points(points)
    if (y <= 0).any():
        raise ValueError("power-law fit needs positive values")
    beta, se, r2, dof, var, xtx_inv = _ols(np.log(n), np.log(y))
    a = math.exp(beta[0])
    return ScalingFit("power_law", {"a": a, "alpha": -float(beta[1])},
                      {"a": a * float(se[0]), "alpha": float(se[1])}, r2, dof, var, xtx_inv, "log")


def fit_log_linear(points) -> ScalingFit:
    """Least squares of ``l = a ln n + b``."""
    n, y = _check_points(points)
    beta, se, r2, dof, var, xtx_inv = _ols(np.log(n), y)
    return ScalingFit("log_linear", {"a": float(beta[1]), "b": float(beta[0])},
                      {"a": float(se[1]), "b": float(se[0])}, r2, dof, var, xtx_inv, "identity")


# ---------------------------------------------------------------------------
# Kolmogorov-Smirnov


def ks_distance(a, b) -> tuple[float, float]:
    """Two-sample KS statistic by a merge over the sorted samples, with the
    asymptotic p-value."""
    x = np.sort(np.asarray(a, dtype=float))
    y = np.sort(np.asarray(b, dtype=float))
    n, m = x.size, y.size
    if n == 0 or m == 0:
        raise ValueError("both samples must be non-empty")
    # integer gap |i m - j n| keeps D exact (a ratio of integers)
    i = j = 0
    gap = 0
    while i < n and j < m:
        v = min(x[i], y[j])
        while i < n and x[i] == v:
            i += 1
        while j < m and y[j] == v:
            j += 1
        gap = max(gap, abs(i * m - j * n))
    d = gap / (n * m)
    en = math.sqrt(n * m / (n + m))
    p = float(stats.kstwobign.sf(en * d)) if d > 0 else 1.0
    return float(d), min(1.0, p)


def ks_exact_p(a, b) -> float:
    """Exact permutation p-value of the two-sample KS statistic (continuous
    data, no ties) by counting lattice paths; both samples must have at most
    30 values."""
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise ValueError("both samples must be non-empty")
    if n > 30 or m > 30:
        raise ValueError("exact KS p-value is limited to samples of size <= 30")
    d, _ = ks_distance(a, b)
    # paths from (0, 0) to (n, m) with |i/n - j/m| < d throughout, compared as
    # integers |i*m - j*n| < d*n*m
    bound = round(d * n * m)
    inside = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        for j in range(m + 1):
            if abs(i * m - j * n) >= bound:
                continue
            if i == 0 and j == 0:
                inside[i][j] = 1
            else:
                inside[i][j] = (inside[i - 1][j] if i else 0) + (inside[i][j - 1] if j else 0)
    return 1.0 - inside[n][m] / comb(n + m, n)

"""Monte Carlo simulation, cost estimation, and exponential-decay diagnostics.

Paths follow explicit Euler-Maruyama steps

    X+ = X + dt (A X + B u + f) + sum_i (C_i X + D_i u) sqrt(dt) z_i,

with z standard normal (Monte Carlo mode) or +-1 (lattice-consistent mode).
Reproducibility contract: increments come from counter-based Philox
substreams keyed (seed, path index), path evolution uses only elementwise and
einsum arithmetic whose result per path does not depend on how paths are
chunked, and reductions across paths happen once, in path-index order, on the
assembled arrays. Identical (config, seed) therefore produce bitwise
identical summaries at any worker count.

Running costs use left-endpoint quadrature with the discount factor
exp(-2 alpha t_j) applied at the left endpoints; infinite-horizon costs are
truncated at the grid end with the tail justified by the fitted exponential
decay of the closed loop rather than silently ignored.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import GridMismatch, NumericOverflow
from .model import CoefficientModel, MCSpec
from .riccati import FeedbackQuadratic, StationaryFeedback

OVERFLOW_LIMIT = 1e12


@dataclass
class PathBatch:
    """Simulated trajectories with their driving increments.

    X is (paths, steps+1, n); u is (paths, steps, k); dW is (paths, steps, d).
    """

    times: np.ndarray
    X: np.ndarray
    u: np.ndarray
    dW: np.ndarray
    seed: int
    increments: str

    @property
    def paths(self) -> int:
        return self.X.shape[0]

    def brownian_values(self) -> np.ndarray:
        """W at every grid time, (paths, steps+1, d), W_0 = 0."""
        W = np.zeros(self.X.shape[:2] + (self.dW.shape[2],))
        np.cumsum(self.dW, axis=1, out=W[:, 1:])
        return W

    def increment_sanity(self) -> float:
        """Max over steps of |per-step mean| / (5 sqrt(dt/paths)); <= 1 is sane."""
        dts = np.diff(self.times)
        means = np.abs(self.dW.mean(axis=0))  # (steps, d)
        bands = 5.0 * np.sqrt(dts / self.paths)
        return float(np.max(means / bands[:, None]))


@dataclass
class CostReport:
    estimate: float
    std_error: float
    horizon: str
    alpha: float | None = None
    predicted: float | None = None
    z_score: float | None = None
    per_path: np.ndarray | None = None


@dataclass
class DecayEstimate:
    """Fit of E|X_t|^2 ~ C exp(-a t): slope, constant, fit quality."""

    a_hat: float
    C_hat: float
    r_squared: float
    window: tuple
    certificate: bool


@dataclass
class StabilizabilityReport:
    start_times: list
    tail_costs: list
    std_errors: list
    max_bound: float
    divergent: bool


def _path_increments(seed: int, path_index: int, dts: np.ndarray, d: int, mode: str) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=[seed, path_index]))
    steps = len(dts)
    if mode == "normal":
        z = rng.standard_normal((steps, d))
    elif mode == "rademacher":
        z = rng.integers(0, 2, size=(steps, d)) * 2.0 - 1.0
    else:
        raise ValueError(f"unknown increment mode {mode!r}")
    return z * np.sqrt(dts)[:, None]


def _block_increments(seed, lo, hi, dts, d, mode) -> np.ndarray:
    return np.stack([_path_increments(seed, p, dts, d, mode) for p in range(lo, hi)])


def _normalize_policy(policy, k: int, steps: int):
    """Returns u(j, t, X) -> (p, k) for a batch X of shape (p, n)."""
    if policy is None or (isinstance(policy, str) and policy == "zero"):
        return lambda j, t, X: np.zeros((X.shape[0], k))
    if isinstance(policy, (int, float)) and policy == 0:
        return lambda j, t, X: np.zeros((X.shape[0], k))
    if isinstance(policy, StationaryFeedback):
        lam = policy.Lambda
        return lambda j, t, X: np.einsum("kn,pn->pk", lam, X)
    if isinstance(policy, FeedbackQuadratic):
        def fq(j, t, X):
            lam, _, _ = policy.at_time(t)
            return np.einsum("kn,pn->pk", lam, X)
        return fq
    if hasattr(policy, "at_time") and hasattr(policy, "quadratic"):  # FeedbackLaw
        def law(j, t, X):
            lam, aff = policy.at_time(t)
            return np.einsum("kn,pn->pk", lam, X) + aff
        return law
    if callable(policy):
        return lambda j, t, X: np.broadcast_to(
            np.asarray(policy(t, X), dtype=float), (X.shape[0], k)
        )
    arr = np.asarray(policy, dtype=float)
    if arr.ndim == 1:
        return lambda j, t, X: np.broadcast_to(arr, (X.shape[0], k))
    if arr.shape[0] != steps:
        raise GridMismatch(f"open-loop control has {arr.shape[0]} rows, grid has {steps} steps")
    return lambda j, t, X: np.broadcast_to(arr[j], (X.shape[0], k))


def _coeff(arr: np.ndarray, p: int) -> np.ndarray:
    if arr.shape[0] == p:
        return arr
    return np.broadcast_to(arr, (p,) + arr.shape[1:])


def _coeff_stack(arr: np.ndarray, p: int) -> np.ndarray:
    if arr.shape[1] == p:
        return arr
    return np.broadcast_to(arr, (arr.shape[0], p) + arr.shape[2:])


def simulate(
    model: CoefficientModel,
    policy,
    x: np.ndarray,
    grid: np.ndarray,
    mc: MCSpec,
    increments: str = "normal",
) -> PathBatch:
    """Euler-Maruyama paths under a policy.

    policy: None/"zero", an open-loop array ((steps, k) or constant (k,)), a
    batch-aware callable (t, X) -> u, a StationaryFeedback, a
    FeedbackQuadratic, or a FeedbackLaw. Feedback policies need
    node-independent (deterministic-coefficient) gains; factor-driven models
    accept only open-loop or zero policies here, their feedback being
    lattice-node data.
    """
    grid = np.asarray(grid, dtype=float)
    n, k, d = model.dims.n, model.dims.k, model.dims.d
    steps = len(grid) - 1
    dts = np.diff(grid)
    if np.any(dts <= 0):
        raise GridMismatch("time grid must be strictly increasing")
    feedback_like = isinstance(policy, (StationaryFeedback, FeedbackQuadratic)) or hasattr(
        policy, "quadratic"
    )
    if model.requires_lattice() and feedback_like:
        raise ValueError(
            "feedback policies are node-indexed for factor-driven models; "
            "simulate supports open-loop and zero policies there"
        )
    x = np.asarray(x, dtype=float).reshape(n)
    control = _normalize_policy(policy, k, steps)
    paths = mc.paths
    workers = max(1, int(mc.workers))

    X_all = np.empty((paths, steps + 1, n))
    u_all = np.empty((paths, steps, k))
    dW_all = np.empty((paths, steps, d))

    def run_block(lo: int, hi: int) -> None:
        p = hi - lo
        dW = _block_increments(mc.seed, lo, hi, dts, d, increments)
        X = np.broadcast_to(x, (p, n)).copy()
        W_run = np.zeros((p, d))
        X_all[lo:hi, 0] = X
        needs_W = model.requires_lattice()
        for j in range(steps):
            t = grid[j]
            at = model.at(t, W_run if needs_W else None)
            A, Bm = _coeff(at.A, p), _coeff(at.B, p)
            C, D = _coeff_stack(at.C, p), _coeff_stack(at.D, p)
            f = _coeff(at.f, p)
            u = control(j, t, X)
            u_all[lo:hi, j] = u
            drift = (
                np.einsum("pij,pj->pi", A, X)
                + np.einsum("pij,pj->pi", Bm, u)
                + f
            )
            diffusion = np.einsum("dpij,pj,pd->pi", C, X, dW[:, j]) + np.einsum(
                "dpij,pj,pd->pi", D, u, dW[:, j]
            )
            X = X + dts[j] * drift + diffusion
            if float(np.max(np.abs(X))) > OVERFLOW_LIMIT:
                raise NumericOverflow(
                    f"trajectory norm exceeded {OVERFLOW_LIMIT:.0e} at t={grid[j + 1]:.4g}"
                )
            X_all[lo:hi, j + 1] = X
            W_run = W_run + dW[:, j]
        dW_all[lo:hi] = dW

    bounds = np.linspace(0, paths, workers + 1).astype(int)
    blocks = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    if workers == 1 or len(blocks) <= 1:
        for lo, hi in blocks:
            run_block(lo, hi)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_block, lo, hi) for lo, hi in blocks]
            for fut in futures:
                fut.result()

    return PathBatch(times=grid, X=X_all, u=u_all, dW=dW_all, seed=mc.seed, increments=increments)


def evaluate_cost(
    batch: PathBatch,
    model: CoefficientModel,
    alpha: float | None = None,
    terminal: np.ndarray | None = None,
    predicted: float | None = None,
) -> CostReport:
    """Left-endpoint quadrature of the running cost, per path, then averaged.

    cost_p = sum_j dt_j e^{-2 alpha t_j} (X'S X + |u|^2)(t_j) [+ X_T'M X_T].
    A terminal weight M marks the finite-horizon functional; omit it for the
    (truncated) infinite-horizon one.
    """
    grid = batch.times
    steps = len(grid) - 1
    dts = np.diff(grid)
    p = batch.paths
    needs_W = model.requires_lattice()
    W = batch.brownian_values() if needs_W else None
    disc = np.exp(-2.0 * alpha * grid[:-1]) if alpha is not None else np.ones(steps)

    costs = np.zeros(p)
    for j in range(steps):
        at = model.at(grid[j], W[:, j] if needs_W else None)
        S = _coeff(at.S, p)
        X = batch.X[:, j]
        run = np.einsum("pi,pij,pj->p", X, S, X) + np.einsum(
            "pk,pk->p", batch.u[:, j], batch.u[:, j]
        )
        costs = costs + (dts[j] * disc[j]) * run
    horizon = "infinite"
    if terminal is not None:
        M = np.asarray(terminal, dtype=float)
        X_T = batch.X[:, -1]
        costs = costs + np.einsum("pi,ij,pj->p", X_T, M, X_T)
        horizon = "finite"
    if alpha is not None:
        horizon = "discounted"

    estimate = float(np.mean(costs))
    std_error = float(np.std(costs, ddof=1) / np.sqrt(p)) if p >= 2 else 0.0
    z = None
    if predicted is not None and std_error > 0:
        z = float((estimate - predicted) / std_error)
    return CostReport(
        estimate=estimate, std_error=std_error, horizon=horizon,
        alpha=alpha, predicted=predicted, z_score=z, per_path=costs,
    )


def closed_loop_decay(
    model: CoefficientModel,
    feedback,
    x: np.ndarray,
    grid: np.ndarray,
    mc: MCSpec,
    increments: str = "normal",
    fit_window: tuple | None = None,
) -> DecayEstimate:
    """Fit E|X_t|^2 ~ C_hat exp(-a_hat t) for the closed loop dX = H X dt +
    sum_i K_i X dW_i.

    feedback may be a StationaryFeedback, a FeedbackQuadratic with
    node-independent maps, or None for the zero control (H = A, K_i = C_i,
    the right diagnostic for dissipative models, whose uncontrolled loop
    already decays). The certificate requires a_hat > 0 with R^2 >= 0.9.
    """
    grid = np.asarray(grid, dtype=float)
    n, d = model.dims.n, model.dims.d
    steps = len(grid) - 1
    dts = np.diff(grid)
    x = np.asarray(x, dtype=float).reshape(n)
    if model.requires_lattice() and feedback is not None:
        raise ValueError(
            "factor-driven feedback is lattice-node data; pass feedback=None "
            "to diagnose the uncontrolled (dissipative) loop"
        )
    paths = mc.paths

    def maps_at(t, W_run, p):
        if feedback is None:
            at = model.at(t, W_run if model.requires_lattice() else None)
            return _coeff(at.A, p), _coeff_stack(at.C, p)
        if isinstance(feedback, StationaryFeedback):
            return (
                np.broadcast_to(feedback.H, (p, n, n)),
                np.broadcast_to(feedback.K, (d, p, n, n)),
            )
        _, H, K = feedback.at_time(t)
        return np.broadcast_to(H, (p, n, n)), np.broadcast_to(K, (d, p, n, n))

    dW = _block_increments(mc.seed, 0, paths, dts, d, increments)
    X = np.broadcast_to(x, (paths, n)).copy()
    W_run = np.zeros((paths, d))
    m2 = np.empty(steps + 1)
    m2[0] = float(np.mean(np.sum(X * X, axis=1)))
    for j in range(steps):
        H, K = maps_at(grid[j], W_run, paths)
        drift = np.einsum("pij,pj->pi", H, X)
        diffusion = np.einsum("dpij,pj,pd->pi", K, X, dW[:, j])
        X = X + dts[j] * drift + diffusion
        if float(np.max(np.abs(X))) > OVERFLOW_LIMIT:
            raise NumericOverflow(f"closed loop diverged at t={grid[j + 1]:.4g}")
        m2[j + 1] = float(np.mean(np.sum(X * X, axis=1)))
        W_run = W_run + dW[:, j]

    if fit_window is None:
        fit_window = (float(grid[0]), float(grid[-1]))
    mask = (grid >= fit_window[0]) & (grid <= fit_window[1]) & (m2 > 0)
    ts, ys = grid[mask], np.log(m2[mask])
    slope, intercept = np.polyfit(ts, ys, 1)
    resid = ys - (slope * ts + intercept)
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    a_hat = -float(slope)
    norm0 = float(x @ x)
    C_hat = float(np.exp(intercept) / norm0) if norm0 > 0 else float(np.exp(intercept))
    return DecayEstimate(
        a_hat=a_hat, C_hat=C_hat, r_squared=r2, window=fit_window,
        certificate=bool(a_hat > 0 and r2 >= 0.9),
    )


def stabilizability_evidence(
    model: CoefficientModel,
    u,
    x: np.ndarray,
    grid: np.ndarray,
    mc: MCSpec,
    start_fractions: tuple = (0.0, 0.25, 0.5, 0.75),
    increments: str = "normal",
) -> StabilizabilityReport:
    """Tail costs from several initial times: time-uniformity evidence.

    For each start time t_i the state restarts at x and the remaining-horizon
    running cost is estimated; a uniformly bounded family of tails is the
    numerical shadow of the square-root-of-S stabilizability constant being
    time-uniform. Divergence (overflow) is reported, not raised.
    """
    grid = np.asarray(grid, dtype=float)
    T = float(grid[-1])
    starts, tails, errs = [], [], []
    divergent = False
    for frac in start_fractions:
        idx = int(np.argmin(np.abs(grid - frac * T)))
        sub = grid[idx:]
        if len(sub) < 2:
            continue
        starts.append(float(grid[idx]))
        try:
            batch = simulate(model, u, x, sub, mc, increments=increments)
            report = evaluate_cost(batch, model)
            tails.append(report.estimate)
            errs.append(report.std_error)
        except NumericOverflow:
            divergent = True
            tails.append(float("inf"))
            errs.append(float("inf"))
    finite = [c for c in tails if np.isfinite(c)]
    max_bound = float(max(tails)) if tails else 0.0
    if divergent:
        max_bound = float("inf")
    return StabilizabilityReport(
        start_times=starts, tail_costs=tails, std_errors=errs,
        max_bound=max_bound, divergent=divergent or not finite,
    )

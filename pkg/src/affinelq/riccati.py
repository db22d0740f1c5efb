"""Backward stochastic Riccati equation solvers and feedback maps.

The quadratic value coefficient (P, Q) solves, backward from a PSD terminal
datum,

    -dP = G(A, B, C, D; S; P, Q) dt - sum_i Q_i dW_i,

with generator

    G = A'P + PA + S + sum_i (C_i'P C_i + C_i'Q_i + Q_i C_i) - M R^{-1} M',
    M = PB + sum_i (C_i'P D_i + Q_i D_i),      R = I + sum_i D_i'P D_i.

Three solver paths are provided.

* solve_finite_deterministic: adaptive Runge-Kutta integration of the matrix
  Riccati ODE (Q identically zero), with a dense-output interpolant.
* solve_finite_lattice: backward induction on the filtration lattice. The
  explicit scheme steps P = Phat + dt * G(Phat, Qhat) with Phat, Qhat the
  conditional expectation and martingale coefficients of the children. The
  implicit scheme solves the one-step control problem exactly using the exact
  lattice child moments; it reproduces G to first order in dt, preserves
  positive semidefiniteness by Schur-complement structure, is monotone in the
  horizon, and coincides with the dynamic-programming value recursion to
  roundoff (which is what makes the independent DP cross-check meaningful).
* solve_infinite: the increasing-horizon scheme P^N with zero terminal datum,
  monotonicity ledger, and Cauchy stopping on a common initial window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import (
    LostPositivity,
    MonotonicityViolated,
    NoConvergence,
    NotStabilizable,
    SingularInnerMatrix,
    StepSizeUnderflow,
)
from .lattice import FiltrationLattice
from .model import CONSTANT, CoefficientModel, ModelAt, dissipativity_margin

POSITIVITY_TOL = 1e-8


def _mT(X: np.ndarray) -> np.ndarray:
    return np.swapaxes(X, -1, -2)


def _sym(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + _mT(X))


def inner_matrix(D: np.ndarray, P: np.ndarray) -> np.ndarray:
    """R = I + sum_i D_i' P D_i, batched; shapes D (d,m,n,k), P (m,n,n)."""
    k = D.shape[-1]
    return np.eye(k) + np.einsum("dmji,mjl,dmlk->mik", D, P, D)


def cross_matrix(B, C, D, P, Q) -> np.ndarray:
    """M = PB + sum_i (C_i' P D_i + Q_i D_i), batched -> (m, n, k)."""
    return (
        P @ B
        + np.einsum("dmji,mjl,dmlk->mik", C, P, D)
        + np.einsum("dmij,dmjk->mik", Q, D)
    )


def _checked_solve(R: np.ndarray, rhs: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    lam_min = float(np.linalg.eigvalsh(R).min())
    if lam_min < tol:
        raise SingularInnerMatrix(
            f"inner matrix has minimum eigenvalue {lam_min:.3g}; inversion unsafe"
        )
    return np.linalg.solve(R, rhs)


def generator_G(A, B, C, D, S, P, Q) -> np.ndarray:
    """Riccati generator, batched over the leading node axis, symmetrized.

    Shapes: A, S, P (m,n,n); B (m,n,k); C, Q (d,m,n,n); D (d,m,n,k).
    """
    lin = _mT(A) @ P + P @ A + S
    noise = (
        np.einsum("dmji,mjl,dmlk->mik", C, P, C)
        + np.einsum("dmji,dmjk->mik", C, Q)
        + np.einsum("dmij,dmjk->mik", Q, C)
    )
    M = cross_matrix(B, C, D, P, Q)
    R = inner_matrix(D, P)
    G1 = M @ _checked_solve(R, _mT(M))
    return _sym(lin + noise - G1)


# -- solution containers ---------------------------------------------------------


@dataclass
class RiccatiSolution:
    """Adapted pair (P, Q) per (time, node).

    P is a list over time indices of (m, n, n) arrays; Q a list of
    (d, m, n, n) arrays (martingale coefficients over the step starting at
    that time; zero at the terminal index). Deterministic solves and collapsed
    lattice sweeps carry m = 1 per level. `dense` (ODE path only) interpolates
    P at arbitrary times.
    """

    times: np.ndarray
    P: list
    Q: list
    terminal: np.ndarray
    source: str  # "ode" | "lattice"
    scheme: str | None = None
    lattice: FiltrationLattice | None = None
    collapsed: bool = False
    dense: object | None = None

    @property
    def dims(self) -> tuple:
        n = self.P[0].shape[-1]
        d = self.Q[0].shape[0]
        return n, d

    @property
    def P0(self) -> np.ndarray:
        return self.P[0][0]

    def P_at(self, t: float) -> np.ndarray:
        if self.dense is not None:
            return self.dense(t)
        idx = int(np.argmin(np.abs(self.times - t)))
        return self.P[idx][0]

    def symmetry_defect(self) -> float:
        return max(float(np.max(np.abs(p - _mT(p)))) for p in self.P)

    def min_eigenvalue(self) -> float:
        return min(float(np.linalg.eigvalsh(p).min()) for p in self.P)

    def inner_matrix_floor(self, model: CoefficientModel) -> float:
        """min over (time, node) of lambda_min(I + sum D_i'P D_i)."""
        worst = np.inf
        for idx, t in enumerate(self.times):
            W = self._nodes_at(idx)
            at = model.at(t, W)
            R = inner_matrix(at.D, self.P[idx])
            worst = min(worst, float(np.linalg.eigvalsh(R).min()))
        return worst

    def _nodes_at(self, idx: int):
        if self.lattice is None or self.collapsed:
            return None
        return self.lattice.node_paths(idx)

    def to_rows(self):
        """CSV rows (t, node_id, vec(P) row-major, vec(Q_1), ..., vec(Q_d))."""
        for idx, t in enumerate(self.times):
            for node in range(self.P[idx].shape[0]):
                row = [float(t), node]
                row.extend(self.P[idx][node].ravel().tolist())
                row.extend(self.Q[idx][:, node].ravel().tolist())
                yield row


@dataclass
class FeedbackQuadratic:
    """Feedback maps Lambda = -R^{-1} M', H = A + B Lambda, K_i = C_i + D_i Lambda."""

    times: np.ndarray
    Lambda: list  # (m, k, n) per time
    H: list  # (m, n, n) per time
    K: list  # (d, m, n, n) per time
    lattice: FiltrationLattice | None = None
    collapsed: bool = False
    dense: object | None = None  # t -> (Lambda, H, K) for ODE-path solutions

    def at_time(self, t: float):
        if self.dense is not None:
            return self.dense(t)
        idx = int(np.argmin(np.abs(self.times - t)))
        return self.Lambda[idx][0], self.H[idx][0], self.K[idx][:, 0]


def feedback_quadratic(riccati: RiccatiSolution, model: CoefficientModel) -> FeedbackQuadratic:
    """Assemble the feedback maps from a Riccati solution, per (time, node)."""
    Lambdas, Hs, Ks = [], [], []
    for idx, t in enumerate(riccati.times):
        W = riccati._nodes_at(idx)
        at = model.at(t, W)
        P, Q = riccati.P[idx], riccati.Q[idx]
        lam = _gain(at, P, Q)
        Lambdas.append(lam)
        Hs.append(at.A + at.B @ lam)
        Ks.append(at.C + np.einsum("dmnj,mjk->dmnk", at.D, lam))

    dense = None
    if riccati.dense is not None:
        d = riccati.Q[0].shape[0]

        def dense_maps(t: float):
            at = model.at(t, None)
            P = riccati.dense(t)[None]
            Q = np.zeros((d,) + P.shape)
            lam = _gain(at, P, Q)
            H = at.A + at.B @ lam
            K = at.C + np.einsum("dmnj,mjk->dmnk", at.D, lam)
            return lam[0], H[0], K[:, 0]

        dense = dense_maps

    return FeedbackQuadratic(
        times=riccati.times, Lambda=Lambdas, H=Hs, K=Ks,
        lattice=riccati.lattice, collapsed=riccati.collapsed, dense=dense,
    )


def _gain(at: ModelAt, P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    M = cross_matrix(at.B, at.C, at.D, P, Q)
    R = inner_matrix(at.D, P)
    return -_checked_solve(R, _mT(M))


# -- deterministic ODE path ------------------------------------------------------


def solve_finite_deterministic(
    model: CoefficientModel,
    T: float,
    terminal: np.ndarray,
    grid: np.ndarray | None = None,
    rtol: float = 1e-10,
    atol: float = 1e-12,
) -> RiccatiSolution:
    """Integrate the matrix Riccati ODE backward with adaptive RK steps.

    Parameters
    ----------
    model : deterministic-coefficient model (constant or time_varying kind).
    T : horizon.
    terminal : PSD symmetric terminal datum, shape (n, n).
    grid : output sample times (defaults to 257 uniform points on [0, T]).

    Returns a RiccatiSolution with Q identically zero and a dense interpolant.
    """
    if model.requires_lattice():
        raise ValueError("factor-driven models need the lattice solver")
    n, d = model.dims.n, model.dims.d
    terminal = _sym(np.asarray(terminal, dtype=float).reshape(n, n))
    zero_Q = np.zeros((d, 1, n, n))

    def rhs(tau, y):
        P = _sym(y.reshape(n, n))[None]
        at = model.at(T - tau, None)
        return generator_G(at.A, at.B, at.C, at.D, at.S, P, zero_Q)[0].ravel()

    sol = solve_ivp(
        rhs, (0.0, T), terminal.ravel(), method="RK45",
        rtol=rtol, atol=atol, dense_output=True,
    )
    if not sol.success:
        raise StepSizeUnderflow(f"Riccati ODE integration failed: {sol.message}")

    def dense(t: float) -> np.ndarray:
        tau = min(max(T - t, 0.0), T)
        return _sym(sol.sol(tau).reshape(n, n))

    if grid is None:
        grid = np.linspace(0.0, T, 257)
    grid = np.asarray(grid, dtype=float)
    P_list = [dense(t)[None] for t in grid]
    Q_list = [np.zeros((d, 1, n, n)) for _ in grid]
    return RiccatiSolution(
        times=grid, P=P_list, Q=Q_list, terminal=terminal,
        source="ode", dense=dense, collapsed=True,
    )


# -- lattice path ----------------------------------------------------------------


@dataclass(frozen=True)
class ChildMoments:
    """Exact lattice moments of a child-level field against the increments."""

    Phat: np.ndarray  # E[P]                    (m, n, n)
    Qhat: np.ndarray  # E[P xi_i] / dt          (d, m, n, n)
    Pmix: np.ndarray  # E[sigma_i sigma_j P], off-diagonal pairs only (d, d, m, n, n)


def child_moments(lattice: FiltrationLattice, children: np.ndarray, collapsed: bool) -> ChildMoments:
    d = lattice.d
    if collapsed:
        Phat = children
        tail = children.shape[1:]
        Qhat = np.zeros((d,) + children.shape)
        Pmix = np.zeros((d, d) + children.shape)
        return ChildMoments(Phat, Qhat, Pmix)
    Phat = lattice.condexp_level(children)
    Qhat = np.stack([lattice.martingale_coefficient_level(children, i) for i in range(d)])
    Pmix = np.zeros((d, d) + Phat.shape)
    for i in range(d):
        for j in range(i + 1, d):
            mixed = lattice.mixed_sign_level(children, i, j)
            Pmix[i, j] = mixed
            Pmix[j, i] = mixed
    return ChildMoments(Phat, Qhat, Pmix)


@dataclass
class DiscreteCore:
    """One-step exact quantities shared by the implicit Riccati and dual steps."""

    Phat: np.ndarray
    Qhat: np.ndarray
    IA: np.ndarray  # I + dt * A
    M: np.ndarray  # discrete cross matrix, -> cross_matrix as dt -> 0
    R: np.ndarray  # discrete inner matrix, -> inner_matrix as dt -> 0
    Gxx: np.ndarray  # E[Phi' P Phi]


def discrete_core(at: ModelAt, dt: float, moments: ChildMoments) -> DiscreteCore:
    Phat, Qhat, Pmix = moments.Phat, moments.Qhat, moments.Pmix
    n = Phat.shape[-1]
    IA = np.eye(n) + dt * at.A

    QD = np.einsum("dmij,dmjk->mik", Qhat, at.D)
    CPD = np.einsum("dmji,mjl,dmlk->mik", at.C, Phat, at.D)
    CQB = np.einsum("dmji,dmjl,mlk->mik", at.C, Qhat, at.B)
    mixCD = np.einsum("amji,abmjl,bmlk->mik", at.C, Pmix, at.D)
    M = _mT(IA) @ (Phat @ at.B + QD) + CPD + dt * CQB + mixCD

    DPD = np.einsum("dmji,mjl,dmlk->mik", at.D, Phat, at.D)
    mixDD = np.einsum("amji,abmjl,bmlk->mik", at.D, Pmix, at.D)
    BPB = _mT(at.B) @ Phat @ at.B
    BQD = np.einsum("mji,dmjl,dmlk->mik", at.B, Qhat, at.D)
    k = at.B.shape[-1]
    R = np.eye(k) + DPD + mixDD + dt * (BPB + BQD + _mT(BQD))

    QC = np.einsum("dmij,dmjk->mik", Qhat, at.C)
    CPC = np.einsum("dmji,mjl,dmlk->mik", at.C, Phat, at.C)
    mixCC = np.einsum("amji,abmjl,bmlk->mik", at.C, Pmix, at.C)
    drift = _mT(IA) @ QC
    Gxx = _mT(IA) @ Phat @ IA + dt * (drift + _mT(drift) + CPC + mixCC)

    return DiscreteCore(Phat=Phat, Qhat=Qhat, IA=IA, M=M, R=R, Gxx=Gxx)


def _implicit_step(at: ModelAt, dt: float, core: DiscreteCore) -> np.ndarray:
    G1 = core.M @ _checked_solve(core.R, _mT(core.M))
    return _sym(dt * at.S + core.Gxx - dt * G1)


def _explicit_step(at: ModelAt, dt: float, moments: ChildMoments) -> np.ndarray:
    G = generator_G(at.A, at.B, at.C, at.D, at.S, moments.Phat, moments.Qhat)
    return _sym(moments.Phat + dt * G)


def _positivity_floor(P: np.ndarray, where: str) -> np.ndarray:
    lam = np.linalg.eigvalsh(P)
    lam_min = float(lam.min())
    if lam_min >= 0.0:
        return P
    if lam_min < -POSITIVITY_TOL:
        raise LostPositivity(
            f"P lost positivity ({lam_min:.3g}) at {where}; the time step is too coarse"
        )
    w, V = np.linalg.eigh(P)
    w = np.clip(w, 0.0, None)
    return _sym((V * w[..., None, :]) @ _mT(V))


def solve_finite_lattice(
    model: CoefficientModel,
    lattice: FiltrationLattice,
    terminal: np.ndarray,
    scheme: str = "implicit",
    collapse: bool | None = None,
) -> RiccatiSolution:
    """Backward induction of (P, Q) over the filtration lattice.

    Per node: Phat = condexp of the children, Qhat_i their martingale
    coefficients; then one explicit or implicit step (module docstring). The
    eigenvalue floor clips roundoff negatives in [-1e-8, 0) to zero and raises
    LostPositivity below that.

    collapse (default: automatic) runs one representative node per level, valid
    exactly when coefficients are deterministic; the full tree then carries the
    same value at every node of a level, bitwise.
    """
    if scheme not in ("explicit", "implicit"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if collapse is None:
        collapse = not model.requires_lattice()
    if collapse and model.requires_lattice():
        raise ValueError("factor-driven models cannot run collapsed")

    n, d = model.dims.n, model.dims.d
    L, dt = lattice.depth, lattice.step
    m_L = 1 if collapse else lattice.n_nodes(L)
    terminal = _sym(np.asarray(terminal, dtype=float))
    if terminal.shape == (n, n):
        P_T = np.broadcast_to(terminal, (m_L, n, n)).copy()
    elif terminal.shape == (m_L, n, n):
        P_T = terminal.copy()
    else:
        raise ValueError(f"terminal must be (n, n) or ({m_L}, n, n)")

    P_levels: list = [None] * (L + 1)
    Q_levels: list = [None] * (L + 1)
    P_levels[L] = P_T
    Q_levels[L] = np.zeros((d, m_L, n, n))

    for level in range(L - 1, -1, -1):
        children = P_levels[level + 1]
        moments = child_moments(lattice, children, collapse)
        W = None if collapse else lattice.node_paths(level)
        at = model.at(lattice.times[level], W)
        if scheme == "implicit":
            core = discrete_core(at, dt, moments)
            P_new = _implicit_step(at, dt, core)
        else:
            P_new = _explicit_step(at, dt, moments)
        P_levels[level] = _positivity_floor(P_new, where=f"level {level}")
        Q_levels[level] = moments.Qhat

    return RiccatiSolution(
        times=lattice.times, P=P_levels, Q=Q_levels,
        terminal=terminal, source="lattice", scheme=scheme,
        lattice=lattice, collapsed=collapse,
    )


# -- infinite horizon ------------------------------------------------------------


@dataclass
class StationaryFeedback:
    """Time-constant limit maps extracted from the minimal solution."""

    P_bar: np.ndarray
    Lambda: np.ndarray
    H: np.ndarray
    K: np.ndarray  # (d, n, n)


@dataclass
class InfiniteRiccati:
    """Minimal-solution approximation P_bar with its increasing-horizon ledger."""

    P_bar: np.ndarray
    N_used: float
    converged: bool
    schedule: list
    diffs: list
    monotonicity_log: list  # per consecutive pair: min eigenvalue of the increment
    window_times: np.ndarray | None
    window_iterates: list  # per N: P sampled on the common window (grid or lattice prefix)
    solution: RiccatiSolution
    margin: float
    stationary: StationaryFeedback | None = None


def _stationary_from(model: CoefficientModel, P_bar: np.ndarray) -> StationaryFeedback:
    at = model.at(0.0, None)
    P = P_bar[None]
    Q = np.zeros((model.dims.d,) + P.shape)
    lam = _gain(at, P, Q)
    H = at.A + at.B @ lam
    K = at.C + np.einsum("dmnj,mjk->dmnk", at.D, lam)
    return StationaryFeedback(P_bar=P_bar, Lambda=lam[0], H=H[0], K=K[:, 0])


def solve_infinite(
    model: CoefficientModel,
    tol: float = 1e-9,
    N_schedule: list | None = None,
    scheme: str = "implicit",
    assume_stabilizable: bool = False,
    lattice_step: float = 0.75,
    depth_schedule: list | None = None,
    max_nodes: int = 2**21,
    require_convergence: bool = True,
) -> InfiniteRiccati:
    """Increasing-horizon scheme for the minimal solution P_bar.

    Solves the zero-terminal problem on [0, N] for an increasing schedule of
    horizons, checks PSD-order monotonicity of consecutive iterates on the
    common initial window (floor -1e-8), and stops when the sup Frobenius gap
    on that window drops below tol. The N = 0 solution is identically zero, so
    the first iterate is compared against zero; a zero running cost therefore
    converges at the first horizon.

    Requires a stabilizability certificate: dissipativity margin > 0, or an
    explicit assume_stabilizable override.

    Deterministic models integrate the Riccati ODE per horizon; factor-driven
    models run implicit lattice sweeps at fixed step over a depth schedule.
    """
    if model.requires_lattice():
        if depth_schedule is None:
            # the gap between consecutive iterates decays like
            # exp(-rate * (N_prev - window_end)), so the first depth (the
            # comparison window) stays small and the spacing wide
            L_max = min(18, max(4, int(np.log2(max_nodes)) // model.dims.d))
            depth_schedule = sorted({max(2, L_max - 14), max(3, L_max - 4), L_max})
        probe = FiltrationLattice(
            depth=depth_schedule[-1], step=lattice_step, d=model.dims.d, max_nodes=max_nodes
        )
        margin = dissipativity_margin(model, lattice=probe)
    else:
        if N_schedule is None:
            N_schedule = [5.0, 10.0, 20.0, 40.0, 80.0, 160.0]
        margin = dissipativity_margin(model, grid=np.linspace(0.0, float(N_schedule[-1]), 33))
    if margin <= 0.0 and not assume_stabilizable:
        raise NotStabilizable(
            f"dissipativity margin {margin:.3g} grants no certificate; "
            "pass assume_stabilizable to override"
        )

    if model.requires_lattice():
        return _solve_infinite_lattice(
            model, tol, depth_schedule, lattice_step, scheme, margin, max_nodes,
            require_convergence,
        )
    return _solve_infinite_ode(model, tol, N_schedule, margin, require_convergence)


def _solve_infinite_ode(model, tol, N_schedule, margin, require_convergence) -> InfiniteRiccati:
    n = model.dims.n
    zero = np.zeros((n, n))
    window_T = float(N_schedule[0])
    window = np.linspace(0.0, window_T, 65)

    prev = np.zeros((len(window), n, n))
    iterates, diffs, mono = [], [], []
    converged = False
    N_used = float(N_schedule[-1])
    last_sol = None
    for N in N_schedule:
        sol = solve_finite_deterministic(model, float(N), zero, grid=window)
        cur = np.stack([sol.dense(t) for t in window])
        inc = cur - prev
        mono.append(float(np.linalg.eigvalsh(_sym(inc)).min()))
        if mono[-1] < -POSITIVITY_TOL:
            raise MonotonicityViolated(
                f"P^N decreased by {mono[-1]:.3g} between horizons; refine the scheme"
            )
        diffs.append(float(np.linalg.norm(inc, axis=(1, 2)).max()))
        iterates.append(cur)
        prev = cur
        last_sol = sol
        if diffs[-1] < tol:
            converged = True
            N_used = float(N)
            break
    if not converged and require_convergence:
        raise NoConvergence(
            f"P^N schedule exhausted at N={N_schedule[-1]} with gap {diffs[-1]:.3g} > tol {tol:.3g}"
        )

    P_bar = last_sol.dense(0.0)
    return InfiniteRiccati(
        P_bar=P_bar, N_used=N_used, converged=converged,
        schedule=[float(N) for N in N_schedule[: len(diffs)]],
        diffs=diffs, monotonicity_log=mono,
        window_times=window, window_iterates=iterates,
        solution=last_sol, margin=margin,
        stationary=_stationary_from(model, P_bar),
    )


def _solve_infinite_lattice(
    model, tol, depth_schedule, lattice_step, scheme, margin, max_nodes, require_convergence
) -> InfiniteRiccati:
    n, d = model.dims.n, model.dims.d
    L0 = depth_schedule[0]
    zero = np.zeros((n, n))

    def prefix(sol: RiccatiSolution) -> list:
        return [sol.P[level] for level in range(L0 + 1)]

    prev = [np.zeros((2 ** (d * level), n, n)) for level in range(L0 + 1)]
    iterates, diffs, mono = [], [], []
    converged = False
    N_used = float(depth_schedule[-1] * lattice_step)
    last_sol = None
    for L in depth_schedule:
        lattice = FiltrationLattice(depth=L, step=lattice_step, d=d, max_nodes=max_nodes)
        sol = solve_finite_lattice(model, lattice, zero, scheme=scheme)
        cur = prefix(sol)
        worst_mono = np.inf
        worst_diff = 0.0
        for a, b in zip(prev, cur):
            inc = _sym(b - a)
            worst_mono = min(worst_mono, float(np.linalg.eigvalsh(inc).min()))
            worst_diff = max(worst_diff, float(np.linalg.norm(inc, axis=(1, 2)).max()))
        mono.append(worst_mono)
        if worst_mono < -POSITIVITY_TOL:
            raise MonotonicityViolated(
                f"P^N decreased by {worst_mono:.3g} between horizons; step too coarse"
            )
        diffs.append(worst_diff)
        iterates.append(cur)
        prev = cur
        last_sol = sol
        if worst_diff < tol:
            converged = True
            N_used = float(L * lattice_step)
            break
    if not converged and require_convergence:
        raise NoConvergence(
            f"lattice P^N schedule exhausted with gap {diffs[-1]:.3g} > tol {tol:.3g}"
        )

    return InfiniteRiccati(
        P_bar=last_sol.P[0][0], N_used=N_used, converged=converged,
        schedule=[float(L * lattice_step) for L in depth_schedule[: len(diffs)]],
        diffs=diffs, monotonicity_log=mono,
        window_times=None, window_iterates=iterates,
        solution=last_sol, margin=margin, stationary=None,
    )

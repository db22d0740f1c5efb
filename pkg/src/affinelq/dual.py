"""Affine costate BSDE: the dual pair (r, g) behind the affine feedback term.

With (P, Q) solved and the closed-loop maps H = A + B Lambda, K_i = C_i +
D_i Lambda assembled, the affine costate solves the linear BSDE

    -dr = (H' r + P f + sum_i K_i' g_i) dt - sum_i g_i dW_i,    r_T = xi,

by backward induction on the same lattice (explicit Euler or the exact
one-step discrete form matching the implicit Riccati scheme), or by adaptive
ODE integration when the coefficients are deterministic.

An independent representation propagates the closed-loop fundamental matrices
Psi (forward) and Phi = Psi^{-1} node-by-node and assembles

    r_t = Phi_t E^{F_t} [ integral_t^T Psi_s P_s f_s ds ],

with the conditional expectations taken exactly on the lattice; agreement of
the two routes is a cross-check with no shared arithmetic. The duality
identity of the costate,

    E^{F_t}<xi, X_T> - <r_t, x>
        = -E^{F_t} int_t^T <P f, X> ds + E^{F_t} int_t^T <eta, r> ds

for X evolved with drift H X + eta and diffusions K_i X from X_t = x, is
evaluated by exact lattice expectation in duality_residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .errors import (
    GridMismatch,
    IllConditionedFundamental,
    NoConvergence,
    StepSizeUnderflow,
    UnstableClosedLoop,
)
from .lattice import FiltrationLattice
from .model import DECAYING, CoefficientModel
from .riccati import (
    FeedbackQuadratic,
    InfiniteRiccati,
    RiccatiSolution,
    StationaryFeedback,
    _checked_solve,
    _mT,
    child_moments,
    discrete_core,
)

COND_LIMIT = 1e10


@dataclass
class DualSolution:
    """Adapted pair (r, g) per (time, node); r is (m, n), g is (d, m, n)."""

    times: np.ndarray
    r: list
    g: list
    terminal: np.ndarray
    source: str  # "ode" | "lattice" | "fundamental"
    scheme: str | None = None
    lattice: FiltrationLattice | None = None
    collapsed: bool = False
    dense: object | None = None
    P_levels: list | None = None  # Riccati P per level, for identity checks
    diagnostics: dict | None = None

    @property
    def r0(self) -> np.ndarray:
        return self.r[0][0]

    def r_at(self, t: float) -> np.ndarray:
        if self.dense is not None:
            return self.dense(t)
        idx = int(np.argmin(np.abs(self.times - t)))
        return self.r[idx][0]

    def max_r(self) -> float:
        return max(float(np.linalg.norm(r, axis=-1).max()) for r in self.r)

    def max_g(self) -> float:
        return max(float(np.linalg.norm(g, axis=-1).max()) for g in self.g)

    def to_rows(self):
        """CSV rows (t, node_id, r components, g_1 ..., g_d components)."""
        for idx, t in enumerate(self.times):
            for node in range(self.r[idx].shape[0]):
                row = [float(t), node]
                row.extend(self.r[idx][node].ravel().tolist())
                row.extend(self.g[idx][:, node].ravel().tolist())
                yield row


def feedback_sup_norms(feedback: FeedbackQuadratic) -> dict:
    """Empirical sup of the closed-loop maps over (time, node).

    The continuum theory only controls H, K in a square-integrable sense; on
    the lattice every node value is finite, so the sup is a reportable
    diagnostic rather than a hypothesis.
    """
    C_H = max(float(np.linalg.norm(H, axis=(-2, -1)).max()) for H in feedback.H)
    C_K = max(float(np.linalg.norm(K, axis=(-2, -1)).max()) for K in feedback.K)
    return {"C_H": C_H, "C_K": C_K}


def _check_same_grid(a_times, b_times, what: str) -> None:
    if len(a_times) != len(b_times) or not np.allclose(a_times, b_times):
        raise GridMismatch(f"{what} are on different grids")


def _bcast(arr: np.ndarray, m: int) -> np.ndarray:
    """Broadcast a possibly collapsed per-level array (1, ...) to m nodes."""
    if arr.shape[0] == m:
        return arr
    return np.broadcast_to(arr, (m,) + arr.shape[1:])


def _bcast_stack(arr: np.ndarray, m: int) -> np.ndarray:
    """Same for stacks shaped (d, m, ...)."""
    if arr.shape[1] == m:
        return arr
    return np.broadcast_to(arr, (arr.shape[0], m) + arr.shape[2:])


# -- direct backward induction ---------------------------------------------------


def solve_dual_finite(
    model: CoefficientModel,
    feedback: FeedbackQuadratic,
    riccati: RiccatiSolution,
    T: float | None = None,
    terminal: np.ndarray | None = None,
    scheme: str | None = None,
) -> DualSolution:
    """Backward induction for (r, g) on the Riccati solution's grid.

    Explicit scheme: r = rhat + dt (H' rhat + P f + sum K_i' ghat_i) with
    rhat, ghat the conditional expectation and martingale coefficients of the
    children. Implicit scheme: the exact one-step discrete update sharing its
    moment algebra with the implicit Riccati step. The scheme defaults to the
    one the Riccati solution was built with. Deterministic (ODE-sourced)
    solutions integrate the costate ODE with dense output instead.
    """
    _check_same_grid(feedback.times, riccati.times, "feedback and Riccati solution")
    n, d = model.dims.n, model.dims.d
    if T is None:
        T = float(riccati.times[-1])
    elif not np.isclose(T, riccati.times[-1]):
        raise GridMismatch(f"horizon {T} does not match solution grid end {riccati.times[-1]}")

    if riccati.source == "ode":
        return _solve_dual_ode(model, feedback, riccati, T, terminal)

    lattice = riccati.lattice
    if scheme is None:
        scheme = riccati.scheme or "explicit"
    dt = lattice.step
    L = lattice.depth
    m_L = riccati.P[L].shape[0]
    if terminal is None:
        r_T = np.zeros((m_L, n))
    else:
        r_T = np.broadcast_to(
            np.asarray(terminal, dtype=float).reshape(-1, n), (m_L, n)
        ).copy()

    r_levels: list = [None] * (L + 1)
    g_levels: list = [None] * (L + 1)
    r_levels[L] = r_T
    g_levels[L] = np.zeros((d, m_L, n))
    collapsed = riccati.collapsed

    for level in range(L - 1, -1, -1):
        r_children = r_levels[level + 1]
        if collapsed:
            rhat = r_children
            ghat = np.zeros((d,) + r_children.shape)
        else:
            rhat = lattice.condexp_level(r_children)
            ghat = np.stack(
                [lattice.martingale_coefficient_level(r_children, i) for i in range(d)]
            )
        W = None if collapsed else lattice.node_paths(level)
        at = model.at(lattice.times[level], W)
        if scheme == "implicit":
            moments = child_moments(lattice, riccati.P[level + 1], collapsed)
            core = discrete_core(at, dt, moments)
            Pf = np.einsum("mij,mj->mi", core.Phat, at.f)
            Qf = np.einsum("dmij,mj->dmi", core.Qhat, at.f)
            v = np.einsum("mji,mj->mi", at.B, rhat + dt * Pf) + np.einsum(
                "dmji,dmj->mi", at.D, ghat + dt * Qf
            )
            Rinv_v = _checked_solve(core.R, v[..., None])[..., 0]
            r_new = (
                np.einsum("mji,mj->mi", core.IA, rhat + dt * Pf)
                + dt * np.einsum("dmji,dmj->mi", at.C, ghat + dt * Qf)
                - dt * np.einsum("mik,mk->mi", core.M, Rinv_v)
            )
        else:
            H = feedback.H[level]
            K = feedback.K[level]
            P = riccati.P[level]
            drift = (
                np.einsum("mji,mj->mi", H, rhat)
                + np.einsum("mij,mj->mi", P, at.f)
                + np.einsum("dmji,dmj->mi", K, ghat)
            )
            r_new = rhat + dt * drift
        r_levels[level] = r_new
        g_levels[level] = ghat

    return DualSolution(
        times=lattice.times, r=r_levels, g=g_levels,
        terminal=r_T, source="lattice", scheme=scheme,
        lattice=lattice, collapsed=collapsed, P_levels=riccati.P,
    )


def _solve_dual_ode(model, feedback, riccati, T, terminal) -> DualSolution:
    n, d = model.dims.n, model.dims.d
    if terminal is None:
        terminal = np.zeros(n)
    terminal = np.asarray(terminal, dtype=float).reshape(n)

    def rhs(tau, y):
        t = T - tau
        _, H, _ = feedback.at_time(t)
        P = riccati.dense(t)
        f = model.at(t, None).f[0]
        return H.T @ y + P @ f

    sol = solve_ivp(
        rhs, (0.0, T), terminal, method="RK45",
        rtol=1e-10, atol=1e-12, dense_output=True,
    )
    if not sol.success:
        raise StepSizeUnderflow(f"costate ODE integration failed: {sol.message}")

    def dense(t: float) -> np.ndarray:
        tau = min(max(T - t, 0.0), T)
        return sol.sol(tau)

    grid = riccati.times
    r_list = [dense(t)[None] for t in grid]
    g_list = [np.zeros((d, 1, n)) for _ in grid]
    return DualSolution(
        times=grid, r=r_list, g=g_list, terminal=terminal[None],
        source="ode", dense=dense, collapsed=True, P_levels=riccati.P,
    )


# -- fundamental-matrix representation --------------------------------------------


def solve_dual_fundamental(
    model: CoefficientModel,
    feedback: FeedbackQuadratic,
    riccati: RiccatiSolution,
    T: float | None = None,
) -> DualSolution:
    """Assemble r from the closed-loop fundamental matrices.

    Psi is propagated forward node-by-node, Psi_child = Psi (I + dt H' +
    sum_i xi_i K_i'), from Psi_0 = I; Phi is the exact per-node inverse, so
    the product identity holds to roundoff, and the drift of a first-order
    Euler propagation of Phi itself is reported as a diagnostic. Then

        r = Phi * (backward-accumulated E^{F_t} of dt * Psi P f),

    with exact lattice conditional expectations, and g is recovered from the
    martingale coefficients of the assembled r. Runs on the full tree (Psi is
    random whenever some K_i is nonzero); collapsed Riccati data broadcasts.
    """
    _check_same_grid(feedback.times, riccati.times, "feedback and Riccati solution")
    lattice = riccati.lattice
    if lattice is None:
        raise GridMismatch("fundamental representation needs a lattice solution")
    if T is not None and not np.isclose(T, riccati.times[-1]):
        raise GridMismatch(f"horizon {T} does not match solution grid end {riccati.times[-1]}")
    n, d = model.dims.n, model.dims.d
    L, dt = lattice.depth, lattice.step
    sqdt = np.sqrt(dt)
    signs = lattice.child_signs  # (2**d, d)

    Psi: list = [None] * (L + 1)
    Phi_euler: list = [None] * (L + 1)
    Psi[0] = np.eye(n)[None]
    Phi_euler[0] = np.eye(n)[None]
    for level in range(L):
        m = lattice.n_nodes(level)
        H = _bcast(feedback.H[level], m)
        K = _bcast_stack(feedback.K[level], m)
        Psi_here = _bcast(Psi[level], m)
        Phi_here = _bcast(Phi_euler[level], m)

        noise = np.einsum("bd,dmij->bmji", signs, K)  # sum_i sign_i K_i', (B,m,n,n)
        step_fwd = np.eye(n) + dt * _mT(H)[None] + sqdt * noise
        Psi_next = np.einsum("mij,bmjk->mbik", Psi_here, step_fwd)
        Psi[level + 1] = Psi_next.reshape(-1, n, n)

        KK = np.einsum("dmij,dmjk->mik", K, K)  # sum_i K_i K_i
        drift_bwd = -_mT(H) + _mT(KK)  # sum_i (K_i')^2 = (sum K_i K_i)'
        step_bwd = np.eye(n) + dt * drift_bwd[None] - sqdt * noise
        Phi_next = np.einsum("bmij,mjk->mbik", step_bwd, Phi_here)
        Phi_euler[level + 1] = Phi_next.reshape(-1, n, n)

    Phi: list = [None] * (L + 1)
    cond_max = 1.0
    for level in range(L + 1):
        cond_max = max(cond_max, float(np.max(np.linalg.cond(Psi[level]))))
        if cond_max > COND_LIMIT:
            raise IllConditionedFundamental(
                f"fundamental matrix condition number {cond_max:.3g} exceeds {COND_LIMIT:.0e}"
            )
        Phi[level] = np.linalg.inv(Psi[level])

    euler_gap = max(
        float(
            np.max(
                np.linalg.norm(
                    Phi[level] - _bcast(Phi_euler[level], Phi[level].shape[0]),
                    axis=(-2, -1),
                )
            )
        )
        for level in range(L + 1)
    )
    product_defect = max(
        float(np.max(np.abs(Phi[level] @ Psi[level] - np.eye(n))))
        for level in range(L + 1)
    )

    # tail = E^{F_t} int_t^T Psi P f ds, accumulated backward level by level
    tail: list = [None] * (L + 1)
    tail[L] = np.zeros((lattice.n_nodes(L), n))
    for level in range(L - 1, -1, -1):
        m = lattice.n_nodes(level)
        at = model.at(lattice.times[level], lattice.node_paths(level))
        P = _bcast(riccati.P[level], m)
        f = _bcast(at.f, m)
        Pf = np.einsum("mij,mj->mi", P, f)
        integrand = dt * np.einsum("mij,mj->mi", Psi[level], Pf)
        tail[level] = integrand + lattice.condexp_level(tail[level + 1])

    r_levels = [np.einsum("mij,mj->mi", Phi[level], tail[level]) for level in range(L + 1)]
    g_levels: list = [None] * (L + 1)
    g_levels[L] = np.zeros((d, lattice.n_nodes(L), n))
    for level in range(L):
        g_levels[level] = np.stack(
            [lattice.martingale_coefficient_level(r_levels[level + 1], i) for i in range(d)]
        )

    return DualSolution(
        times=lattice.times, r=r_levels, g=g_levels,
        terminal=np.zeros((lattice.n_nodes(L), n)), source="fundamental",
        scheme=None, lattice=lattice, collapsed=False, P_levels=riccati.P,
        diagnostics={
            "cond_max": cond_max,
            "euler_inverse_gap": euler_gap,
            "product_defect": product_defect,
        },
    )


# -- infinite horizon --------------------------------------------------------------


@dataclass
class DualInfinite:
    """Increasing-horizon costate approximation with its bound ledger."""

    r_bar0: np.ndarray
    N_used: float
    converged: bool
    schedule: list
    diffs: list
    bound_log: list  # max |r^N| per horizon, horizon-uniform bound monitor
    tail_times: np.ndarray
    tail_sq: np.ndarray  # E|r_bar_T|^2 at increasing T
    window_times: np.ndarray | None
    r_window: np.ndarray | None
    dense: object | None
    solution: DualSolution | None


def solve_dual_infinite(
    model: CoefficientModel,
    feedback_inf: StationaryFeedback | FeedbackQuadratic,
    riccati_inf: InfiniteRiccati,
    tol: float = 1e-9,
    N_schedule: list | None = None,
    decay_certificate: float | None = None,
) -> DualInfinite:
    """Zero-terminal costate r^N for increasing horizons N.

    Requires square-integrable (decaying or vanishing) forcing and a
    closed-loop decay certificate: either an explicit positive rate (e.g.
    from a fitted decay estimate) or the positive dissipativity margin
    recorded by the infinite-horizon Riccati solve. Monitors the
    horizon-uniform bound max|r^N|, stops when consecutive iterates are
    within tol on the common window, and reports the tail trend E|r_bar_T|^2
    over the solved window.

    The default horizon schedule starts past the closed-loop transient so the
    bound ledger is flat at the 1e-8 scale rather than still climbing.
    """
    rate = decay_certificate if decay_certificate is not None else riccati_inf.margin
    if rate <= 0.0:
        raise UnstableClosedLoop(
            f"no closed-loop decay certificate (rate {rate:.3g} <= 0); "
            "provide decay_certificate from a fitted decay estimate"
        )
    if model.forcing.tag != DECAYING and _forcing_nonzero(model):
        raise UnstableClosedLoop(
            "infinite-horizon costate needs square-integrable forcing; "
            "tag the forcing as decaying or use the discounted transform"
        )

    if isinstance(feedback_inf, StationaryFeedback):
        return _solve_dual_infinite_ode(model, feedback_inf, tol, N_schedule)
    return _solve_dual_infinite_lattice(model, feedback_inf, riccati_inf, tol, N_schedule)


def _forcing_nonzero(model: CoefficientModel) -> bool:
    probe = np.linspace(0.0, 20.0, 41)
    return any(np.any(model.at(t, None).f != 0.0) for t in probe)


def _solve_dual_infinite_ode(model, stationary, tol, N_schedule) -> DualInfinite:
    n = model.dims.n
    H = stationary.H
    P = stationary.P_bar
    if N_schedule is None:
        N_schedule = [8.0, 10.0, 12.0, 16.0, 24.0, 40.0]
    window = np.linspace(0.0, float(N_schedule[0]), 129)

    def solve_one(N: float):
        def rhs(tau, y):
            t = N - tau
            return H.T @ y + P @ model.at(t, None).f[0]

        sol = solve_ivp(rhs, (0.0, N), np.zeros(n), method="RK45",
                        rtol=1e-11, atol=1e-13, dense_output=True)
        if not sol.success:
            raise StepSizeUnderflow(f"costate ODE failed at N={N}: {sol.message}")
        return lambda t, s=sol, NN=N: s.sol(min(max(NN - t, 0.0), NN))

    prev = np.zeros((len(window), n))
    diffs, bounds, used = [], [], []
    converged = False
    dense_last = None
    N_used = float(N_schedule[-1])
    for N in N_schedule:
        dense = solve_one(float(N))
        cur = np.stack([dense(t) for t in window])
        full_grid = np.linspace(0.0, float(N), max(129, int(8 * N) + 1))
        bounds.append(float(max(np.linalg.norm(dense(t)) for t in full_grid)))
        diffs.append(float(np.linalg.norm(cur - prev, axis=1).max()))
        used.append(float(N))
        prev = cur
        dense_last = dense
        N_used = float(N)
        if diffs[-1] < tol:
            converged = True
            break
    if not converged:
        raise NoConvergence(
            f"costate horizon schedule exhausted with gap {diffs[-1]:.3g} > tol {tol:.3g}"
        )

    tail_times = np.linspace(0.25 * N_used, 0.96 * N_used, 8)
    tail_sq = np.array([float(np.dot(dense_last(t), dense_last(t))) for t in tail_times])
    r_window = np.stack([dense_last(t) for t in window])
    return DualInfinite(
        r_bar0=dense_last(0.0), N_used=N_used, converged=converged,
        schedule=used, diffs=diffs, bound_log=bounds,
        tail_times=tail_times, tail_sq=tail_sq,
        window_times=window, r_window=r_window,
        dense=dense_last, solution=None,
    )


def _solve_dual_infinite_lattice(model, feedback, riccati_inf, tol, N_schedule) -> DualInfinite:
    """r^N on lattice prefixes of the deepest increasing-horizon solve."""
    sol = riccati_inf.solution
    lattice = sol.lattice
    dt = lattice.step
    L_max = lattice.depth
    if N_schedule is None:
        depths = sorted({max(2, L_max - 6), max(3, L_max - 3), L_max})
    else:
        depths = [int(round(N / dt)) for N in N_schedule]
        if any(Lj > L_max for Lj in depths):
            raise GridMismatch("requested costate horizon exceeds the solved lattice depth")
    L0 = depths[0]

    runs = []
    for Lj in depths:
        sub = FiltrationLattice(depth=Lj, step=dt, d=lattice.d, max_nodes=lattice.max_nodes)
        sub_riccati = RiccatiSolution(
            times=sub.times, P=sol.P[: Lj + 1], Q=sol.Q[: Lj + 1],
            terminal=sol.P[Lj], source="lattice", scheme=sol.scheme,
            lattice=sub, collapsed=sol.collapsed,
        )
        sub_feedback = FeedbackQuadratic(
            times=sub.times, Lambda=feedback.Lambda[: Lj + 1],
            H=feedback.H[: Lj + 1], K=feedback.K[: Lj + 1],
            lattice=sub, collapsed=feedback.collapsed,
        )
        runs.append(solve_dual_finite(model, sub_feedback, sub_riccati))

    diffs, bounds, used = [], [], []
    prev = [np.zeros_like(runs[0].r[level]) for level in range(L0 + 1)]
    converged = False
    N_used = float(depths[-1] * dt)
    last = runs[0]
    for Lj, run in zip(depths, runs):
        cur = [run.r[level] for level in range(L0 + 1)]
        diffs.append(max(float(np.linalg.norm(b - a, axis=-1).max()) for a, b in zip(prev, cur)))
        bounds.append(run.max_r())
        used.append(float(Lj * dt))
        prev = cur
        last = run
        N_used = float(Lj * dt)
        if diffs[-1] < tol:
            converged = True
            break
    if not converged:
        raise NoConvergence(
            f"lattice costate schedule exhausted with gap {diffs[-1]:.3g} > tol {tol:.3g}"
        )

    L_last = len(last.r) - 1
    tail_levels = np.unique(np.linspace(L_last // 4, L_last - 1, 6).astype(int))
    tail_times = last.times[tail_levels]
    tail_sq = np.array(
        [
            float(last.lattice.level_expectation(np.sum(last.r[level] ** 2, axis=-1)))
            for level in tail_levels
        ]
    )
    return DualInfinite(
        r_bar0=last.r0, N_used=N_used, converged=converged,
        schedule=used, diffs=diffs, bound_log=bounds,
        tail_times=tail_times, tail_sq=tail_sq,
        window_times=None, r_window=None, dense=None, solution=last,
    )


# -- duality identity ---------------------------------------------------------------


def duality_residual(
    dual: DualSolution,
    model: CoefficientModel,
    feedback: FeedbackQuadratic,
    eta=None,
    x: np.ndarray | None = None,
    t: float = 0.0,
    T: float | None = None,
    xi: np.ndarray | None = None,
) -> float:
    """Residual of the costate duality identity, exact lattice expectations.

    X is evolved from X_t = x with drift H X + eta and diffusions K_i X on
    the dual solution's lattice; both sides of the identity are reduced by
    conditional expectation back to the level of t, and the max absolute gap
    over that level's nodes is returned. eta may be None (zero), a constant
    (n,) vector, a callable t -> (n,), or a list of per-level (m, n) arrays.
    """
    lattice = dual.lattice
    if lattice is None:
        raise GridMismatch("duality check needs a lattice dual solution")
    if dual.P_levels is None:
        raise GridMismatch("dual solution lacks the Riccati P needed for the duality check")
    _check_same_grid(feedback.times, dual.times, "feedback and dual solution")
    n = model.dims.n
    L, dt = lattice.depth, lattice.step
    if T is not None and not np.isclose(T, lattice.times[-1]):
        raise GridMismatch("T must equal the lattice horizon")
    level0 = int(np.argmin(np.abs(lattice.times - t)))
    if not np.isclose(lattice.times[level0], t):
        raise GridMismatch(f"t={t} is not a lattice time")
    x = np.zeros(n) if x is None else np.asarray(x, dtype=float).reshape(n)
    # the pairing <xi, X_T> only closes the telescoping when xi is the dual
    # solution's own terminal datum
    terminal = _bcast(
        np.atleast_2d(np.asarray(dual.terminal, dtype=float)), lattice.n_nodes(L)
    )
    if xi is not None:
        xi = np.asarray(xi, dtype=float).reshape(n)
        if not np.allclose(terminal, xi[None, :]):
            raise GridMismatch("xi must equal the dual solution's terminal datum")

    eta_levels = _normalize_eta(eta, lattice, n)
    sqdt = np.sqrt(dt)
    signs = lattice.child_signs

    # forward state from level0, full tree
    X: list = [None] * (L + 1)
    X[level0] = np.broadcast_to(x, (lattice.n_nodes(level0), n)).copy()
    for level in range(level0, L):
        m = lattice.n_nodes(level)
        H = _bcast(feedback.H[level], m)
        K = _bcast_stack(feedback.K[level], m)
        drift = np.einsum("mij,mj->mi", H, X[level]) + eta_levels[level]
        noise = np.einsum("bd,dmij,mj->bmi", signs, K, X[level])
        child = X[level][None] + dt * drift[None] + sqdt * noise
        X[level + 1] = np.transpose(child, (1, 0, 2)).reshape(-1, n)

    def r_full(level):
        return _bcast(dual.r[level], lattice.n_nodes(level))

    # E^{F_t}<xi, X_T> and the two integrals, pulled back to level0. The
    # eta integrand pairs with the conditional expectation of the next
    # level's r: that is the step for which the discrete product rule
    # telescopes exactly (explicit costate scheme).
    acc = np.einsum("mi,mi->m", X[L], terminal)
    int_pf = np.zeros(lattice.n_nodes(L))
    int_eta = np.zeros(lattice.n_nodes(L))
    for level in range(L - 1, level0 - 1, -1):
        m = lattice.n_nodes(level)
        at = model.at(lattice.times[level], lattice.node_paths(level))
        P = _bcast(dual.P_levels[level], m)
        f = _bcast(at.f, m)
        Pf = np.einsum("mij,mj->mi", P, f)
        rhat = lattice.condexp_level(r_full(level + 1))
        term_pf = dt * np.einsum("mi,mi->m", Pf, X[level])
        term_eta = dt * np.einsum("mi,mi->m", eta_levels[level], rhat)
        acc = lattice.condexp_level(acc)
        int_pf = term_pf + lattice.condexp_level(int_pf)
        int_eta = term_eta + lattice.condexp_level(int_eta)

    lhs = acc - r_full(level0) @ x
    rhs = -int_pf + int_eta
    return float(np.max(np.abs(lhs - rhs)))


def _normalize_eta(eta, lattice: FiltrationLattice, n: int) -> list:
    levels = []
    for level in range(lattice.depth + 1):
        m = lattice.n_nodes(level)
        if eta is None:
            levels.append(np.zeros((m, n)))
        elif callable(eta):
            val = np.asarray(eta(lattice.times[level]), dtype=float)
            levels.append(np.broadcast_to(val, (m, n)))
        elif isinstance(eta, (list, tuple)):
            levels.append(np.broadcast_to(np.asarray(eta[level], dtype=float), (m, n)))
        else:
            arr = np.asarray(eta, dtype=float).reshape(-1)
            if arr.shape != (n,):
                raise GridMismatch(f"eta must be an (n,) vector, got shape {arr.shape}")
            levels.append(np.broadcast_to(arr, (m, n)))
    return levels

"""Feedback assembly, the Bellman DP oracle, and optimality verification.

The optimal control is affine in the state,

    u(t, node, x) = Lambda(t, node) x + u_aff(t, node),
    u_aff = -(I + sum_i D_i'P D_i)^{-1} (B'r + sum_i D_i'g_i),

the sign fixed by substituting y = P X + r and z_i = P(C_i X + D_i u) +
Q_i X + g_i into the Hamiltonian first-order condition (the numeric arbiter
is the DP oracle below). On implicit-scheme lattice solutions the law also
carries the one-step discrete gain and affine part, which make the
completion-of-squares identity exact at the lattice level instead of O(dt).

bellman_dp_oracle is an independently coded value recursion: it never touches
the Riccati moment algebra, propagating instead the per-child transition
matrices Phi_b = I + dt A + sqrt(dt) sum_i s_i C_i and Gamma_b = dt B +
sqrt(dt) sum_i s_i D_i and minimizing the one-step quadratic in closed form.
Agreement with the implicit-scheme solvers to roundoff is the core
correctness check of the whole toolkit.

Verification identities (all exact lattice expectations, no Monte Carlo):
the Hamiltonian coupling y = P X + r, the predicted-cost formula with its
term breakdown, and the completion-of-squares fundamental relation

    J(u) = J(optimal) + sum_l dt E[(u - u_opt)' R (u - u_opt)].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import GridMismatch, NonConvexStep, StepSizeUnderflow
from .lattice import FiltrationLattice
from .model import CoefficientModel
from .riccati import (
    FeedbackQuadratic,
    RiccatiSolution,
    _checked_solve,
    _mT,
    _sym,
    child_moments,
    discrete_core,
    feedback_quadratic,
    inner_matrix,
)


def _bcast(arr: np.ndarray, m: int) -> np.ndarray:
    if arr.shape[0] == m:
        return arr
    return np.broadcast_to(arr, (m,) + arr.shape[1:])


def _bcast_stack(arr: np.ndarray, m: int) -> np.ndarray:
    if arr.shape[1] == m:
        return arr
    return np.broadcast_to(arr, (arr.shape[0], m) + arr.shape[2:])


# -- feedback law ------------------------------------------------------------------


@dataclass
class FeedbackLaw:
    """Affine feedback u = Lambda x + u_aff per (time, node).

    gain_disc / affine_disc / R_disc (implicit lattice solutions only) hold
    the one-step discrete counterparts on levels 0..L-1; control_level
    prefers them, making the law exactly optimal for the lattice dynamics.
    """

    quadratic: FeedbackQuadratic
    affine: list  # (m, k) per time
    times: np.ndarray
    lattice: FiltrationLattice | None = None
    collapsed: bool = False
    gain_disc: list | None = None
    affine_disc: list | None = None
    R_disc: list | None = None
    dense_affine: object | None = None

    def control_level(self, level: int, X: np.ndarray) -> np.ndarray:
        """Control at every node of a level; X is (m, n), result (m, k)."""
        m = X.shape[0]
        if self.gain_disc is not None and level < len(self.gain_disc):
            lam = _bcast(self.gain_disc[level], m)
            aff = _bcast(self.affine_disc[level], m)
        else:
            lam = _bcast(self.quadratic.Lambda[level], m)
            aff = _bcast(self.affine[level], m)
        return np.einsum("mkn,mn->mk", lam, X) + aff

    def penalty_matrix(self, level: int, m: int) -> np.ndarray:
        if self.R_disc is not None and level < len(self.R_disc):
            return _bcast(self.R_disc[level], m)
        return None

    def at_time(self, t: float):
        """(Lambda, u_aff) at a time, node-independent data only."""
        lam, _, _ = self.quadratic.at_time(t)
        if self.dense_affine is not None:
            return lam, self.dense_affine(t)
        idx = int(np.argmin(np.abs(self.times - t)))
        return lam, self.affine[idx][0]


def assemble_feedback(
    riccati: RiccatiSolution, dual, model: CoefficientModel
) -> FeedbackLaw:
    """Join the quadratic gain with the affine part from the costate."""
    if len(riccati.times) != len(dual.times) or not np.allclose(riccati.times, dual.times):
        raise GridMismatch("Riccati and dual solutions are on different grids")

    quadratic = feedback_quadratic(riccati, model)
    affine = []
    for idx, t in enumerate(riccati.times):
        P, r, g = riccati.P[idx], dual.r[idx], dual.g[idx]
        m = max(P.shape[0], r.shape[0])
        P, r = _bcast(P, m), _bcast(r, m)
        g = _bcast_stack(g, m)
        W = None if m == 1 else riccati.lattice.node_paths(idx)
        at = model.at(t, W)
        R = inner_matrix(at.D, P)
        v = np.einsum("mji,mj->mi", at.B, r) + np.einsum("dmji,dmj->mi", at.D, g)
        affine.append(-_checked_solve(R, v[..., None])[..., 0])

    gain_disc = affine_disc = R_disc = None
    if riccati.source == "lattice" and riccati.scheme == "implicit":
        gain_disc, affine_disc, R_disc = [], [], []
        lattice = riccati.lattice
        dt = lattice.step
        collapsed = riccati.collapsed
        for level in range(lattice.depth):
            moments = child_moments(lattice, riccati.P[level + 1], collapsed)
            W = None if collapsed else lattice.node_paths(level)
            at = model.at(lattice.times[level], W)
            core = discrete_core(at, dt, moments)
            r_children = dual.r[level + 1]
            if collapsed:
                rhat, ghat = r_children, np.zeros((model.dims.d,) + r_children.shape)
            else:
                rhat = lattice.condexp_level(r_children)
                ghat = np.stack(
                    [
                        lattice.martingale_coefficient_level(r_children, i)
                        for i in range(model.dims.d)
                    ]
                )
            Pf = np.einsum("mij,mj->mi", core.Phat, at.f)
            Qf = np.einsum("dmij,mj->dmi", core.Qhat, at.f)
            v = np.einsum("mji,mj->mi", at.B, rhat + dt * Pf) + np.einsum(
                "dmji,dmj->mi", at.D, ghat + dt * Qf
            )
            gain_disc.append(-_checked_solve(core.R, _mT(core.M)))
            affine_disc.append(-_checked_solve(core.R, v[..., None])[..., 0])
            R_disc.append(core.R)

    dense_affine = None
    if riccati.source == "ode" and dual.dense is not None:

        def dense_affine_fn(t: float) -> np.ndarray:
            at = model.at(t, None)
            P = riccati.dense(t)[None]
            R = inner_matrix(at.D, P)
            v = at.B[0].T @ dual.dense(t)
            return -np.linalg.solve(R[0], v)

        dense_affine = dense_affine_fn

    return FeedbackLaw(
        quadratic=quadratic, affine=affine, times=riccati.times,
        lattice=riccati.lattice, collapsed=riccati.collapsed,
        gain_disc=gain_disc, affine_disc=affine_disc, R_disc=R_disc,
        dense_affine=dense_affine,
    )


# -- Bellman dynamic-programming oracle --------------------------------------------


@dataclass
class DPValue:
    """Quadratic value coefficients V(t, node, x) = x'P x + 2 r'x + c."""

    times: np.ndarray
    P: list
    r: list
    c: list
    lattice: FiltrationLattice
    collapsed: bool

    def value(self, x: np.ndarray, level: int = 0, node: int = 0) -> float:
        x = np.asarray(x, dtype=float)
        P, r, c = self.P[level][node], self.r[level][node], self.c[level][node]
        return float(x @ P @ x + 2.0 * r @ x + c)


def bellman_dp_oracle(
    model: CoefficientModel,
    lattice: FiltrationLattice,
    T: float | None = None,
    terminal: np.ndarray | None = None,
    collapse: bool | None = None,
) -> DPValue:
    """Exact backward dynamic programming with a quadratic value ansatz.

    At each node the one-step problem min_u E[V(child, Phi x + Gamma u +
    dt f)] + dt (x'Sx + |u|^2) is solved in closed form, with Phi, Gamma the
    per-child transition matrices. Coded independently of the Riccati moment
    algebra on purpose: agreement with those solvers is evidence, not
    tautology.
    """
    if T is not None and not np.isclose(T, lattice.times[-1]):
        raise GridMismatch(f"T={T} does not match lattice horizon {lattice.times[-1]}")
    if collapse is None:
        collapse = not model.requires_lattice()
    if collapse and model.requires_lattice():
        raise ValueError("factor-driven models cannot run collapsed")
    n, k, d = model.dims.n, model.dims.k, model.dims.d
    L, dt = lattice.depth, lattice.step
    sqdt = np.sqrt(dt)
    signs = lattice.child_signs
    B_count = signs.shape[0]

    m_L = 1 if collapse else lattice.n_nodes(L)
    if terminal is None:
        terminal = np.zeros((n, n))
    terminal = np.asarray(terminal, dtype=float)
    P_terminal = (
        np.broadcast_to(terminal, (m_L, n, n)).copy()
        if terminal.shape == (n, n)
        else terminal.copy()
    )

    P_levels: list = [None] * (L + 1)
    r_levels: list = [None] * (L + 1)
    c_levels: list = [None] * (L + 1)
    P_levels[L] = P_terminal
    r_levels[L] = np.zeros((m_L, n))
    c_levels[L] = np.zeros(m_L)

    for level in range(L - 1, -1, -1):
        m = 1 if collapse else lattice.n_nodes(level)
        if collapse:
            Pn = np.broadcast_to(P_levels[level + 1], (1, B_count, n, n))
            rn = np.broadcast_to(r_levels[level + 1], (1, B_count, n))
            cn = np.broadcast_to(c_levels[level + 1], (1, B_count))
        else:
            Pn = P_levels[level + 1].reshape(m, B_count, n, n)
            rn = r_levels[level + 1].reshape(m, B_count, n)
            cn = c_levels[level + 1].reshape(m, B_count)
        W = None if collapse else lattice.node_paths(level)
        at = model.at(lattice.times[level], W)

        Phi = np.eye(n) + dt * at.A[:, None] + sqdt * np.einsum("bd,dmij->mbij", signs, at.C)
        Gamma = dt * at.B[:, None] + sqdt * np.einsum("bd,dmij->mbij", signs, at.D)
        delta = dt * at.f  # (m, n)

        GPP = np.einsum("mbji,mbjl,mblk->mik", Phi, Pn, Phi) / B_count
        GPG = np.einsum("mbji,mbjl,mblk->mik", Phi, Pn, Gamma) / B_count
        GGG = np.einsum("mbji,mbjl,mblk->mik", Gamma, Pn, Gamma) / B_count
        R_step = dt * np.eye(k) + GGG
        lam_min = float(np.linalg.eigvalsh(R_step).min())
        if lam_min <= 1e-14:
            raise NonConvexStep(
                f"one-step Hessian not positive definite (lambda_min {lam_min:.3g}); "
                "the time step is too coarse"
            )

        phi_p_delta = np.einsum("mbji,mbjl,ml->mi", Phi, Pn, delta) / B_count
        phi_r = np.einsum("mbji,mbj->mi", Phi, rn) / B_count
        gamma_p_delta = np.einsum("mbji,mbjl,ml->mi", Gamma, Pn, delta) / B_count
        gamma_r = np.einsum("mbji,mbj->mi", Gamma, rn) / B_count
        delta_p_delta = np.einsum("mj,mbjl,ml->m", delta, Pn, delta) / B_count
        r_delta = np.einsum("mbj,mj->m", rn, delta) / B_count
        c_mean = cn.mean(axis=1)

        w = gamma_p_delta + gamma_r
        u0 = -np.linalg.solve(R_step, w[..., None])[..., 0]
        P_new = _sym(dt * at.S + GPP - GPG @ np.linalg.solve(R_step, _mT(GPG)))
        r_new = phi_p_delta + phi_r + np.einsum("mik,mk->mi", GPG, u0)
        c_new = c_mean + delta_p_delta + 2.0 * r_delta + np.einsum("mk,mk->m", w, u0)

        P_levels[level] = P_new
        r_levels[level] = r_new
        c_levels[level] = c_new

    return DPValue(
        times=lattice.times, P=P_levels, r=r_levels, c=c_levels,
        lattice=lattice, collapsed=collapse,
    )


# -- trajectory evolution on the lattice --------------------------------------------


def _normalize_control(u, lattice: FiltrationLattice, k: int):
    """Accepts None (zero), a FeedbackLaw, a constant (k,) vector, a list of
    per-level (m, k) arrays, or a callable (t, X, level) -> (m, k)."""
    if u is None:
        return lambda level, X: np.zeros((X.shape[0], k))
    if isinstance(u, FeedbackLaw):
        return lambda level, X: u.control_level(level, X)
    if callable(u):
        return lambda level, X: np.broadcast_to(
            np.asarray(u(lattice.times[level], X, level), dtype=float), (X.shape[0], k)
        )
    if isinstance(u, (list, tuple)):
        return lambda level, X: np.broadcast_to(
            np.asarray(u[level], dtype=float), (X.shape[0], k)
        )
    arr = np.asarray(u, dtype=float).reshape(-1)
    if arr.shape != (k,):
        raise GridMismatch(f"constant control must have shape ({k},), got {arr.shape}")
    return lambda level, X: np.broadcast_to(arr, (X.shape[0], k))


def evolve_controlled(
    model: CoefficientModel, lattice: FiltrationLattice, u, x: np.ndarray
):
    """Full-tree state evolution under a control; returns (X levels, u levels).

    One lattice step is X_child = X + dt (A X + B u + f) + sqrt(dt) sum_i
    s_i (C_i X + D_i u), identical to the transition the DP oracle uses.
    """
    n, k = model.dims.n, model.dims.k
    L, dt = lattice.depth, lattice.step
    sqdt = np.sqrt(dt)
    signs = lattice.child_signs
    control = _normalize_control(u, lattice, k)

    X_levels: list = [None] * (L + 1)
    u_levels: list = [None] * L
    X_levels[0] = np.asarray(x, dtype=float).reshape(1, n).copy()
    for level in range(L):
        X = X_levels[level]
        m = X.shape[0]
        at = model.at(lattice.times[level], lattice.node_paths(level))
        A, Bm = _bcast(at.A, m), _bcast(at.B, m)
        C, D = _bcast_stack(at.C, m), _bcast_stack(at.D, m)
        f = _bcast(at.f, m)
        uu = control(level, X)
        u_levels[level] = uu
        drift = (
            np.einsum("mij,mj->mi", A, X) + np.einsum("mij,mj->mi", Bm, uu) + f
        )
        noise = np.einsum("bd,dmij,mj->bmi", signs, C, X) + np.einsum(
            "bd,dmij,mj->bmi", signs, D, uu
        )
        child = X[None] + dt * drift[None] + sqdt * noise
        X_levels[level + 1] = np.transpose(child, (1, 0, 2)).reshape(-1, n)
    return X_levels, u_levels


def lattice_control_cost(
    riccati: RiccatiSolution, model: CoefficientModel, u, x: np.ndarray
) -> float:
    """Exact lattice expectation of the cost of a control.

    J = sum_l dt E[X'S X + |u|^2] + E[X_T' P_T X_T], with the terminal weight
    taken from the Riccati solution's terminal datum.
    """
    lattice = riccati.lattice
    if lattice is None:
        raise GridMismatch("exact cost evaluation needs a lattice solution")
    L, dt = lattice.depth, lattice.step
    X_levels, u_levels = evolve_controlled(model, lattice, u, x)
    total = 0.0
    for level in range(L):
        m = X_levels[level].shape[0]
        at = model.at(lattice.times[level], lattice.node_paths(level))
        S = _bcast(at.S, m)
        run = np.einsum("mi,mij,mj->m", X_levels[level], S, X_levels[level]) + np.sum(
            u_levels[level] ** 2, axis=-1
        )
        total += dt * float(lattice.level_expectation(run))
    X_T = X_levels[L]
    P_T = _bcast(riccati.P[L], X_T.shape[0])
    total += float(lattice.level_expectation(np.einsum("mi,mij,mj->m", X_T, P_T, X_T)))
    return total


# -- verification identities ---------------------------------------------------------


def hamiltonian_residual(
    model: CoefficientModel,
    riccati: RiccatiSolution,
    dual,
    feedback: FeedbackLaw,
    x: np.ndarray,
) -> float:
    """Max deviation from the costate coupling y = P X + r on the lattice.

    The closed-loop state runs forward under the assembled feedback; the
    costate y runs backward with explicit steps of
    -dy = (A'y + sum_i C_i'z_i + S X) dt - sum_i z_i dW_i from y_T = P_T X_T.
    First-order in dt by construction; halves with the step.
    """
    lattice = riccati.lattice
    if lattice is None:
        raise GridMismatch("Hamiltonian check needs a lattice solution")
    if len(feedback.times) != len(riccati.times) or not np.allclose(
        feedback.times, riccati.times
    ):
        raise GridMismatch("feedback and Riccati solution are on different grids")
    n = model.dims.n
    L, dt = lattice.depth, lattice.step

    X_levels, _ = evolve_controlled(model, lattice, feedback, x)
    y: list = [None] * (L + 1)
    P_T = _bcast(riccati.P[L], X_levels[L].shape[0])
    y[L] = np.einsum("mij,mj->mi", P_T, X_levels[L])
    for level in range(L - 1, -1, -1):
        m = X_levels[level].shape[0]
        yhat = lattice.condexp_level(y[level + 1])
        zhat = np.stack(
            [
                lattice.martingale_coefficient_level(y[level + 1], i)
                for i in range(model.dims.d)
            ]
        )
        at = model.at(lattice.times[level], lattice.node_paths(level))
        A, C, S = _bcast(at.A, m), _bcast_stack(at.C, m), _bcast(at.S, m)
        y[level] = yhat + dt * (
            np.einsum("mji,mj->mi", A, yhat)
            + np.einsum("dmji,dmj->mi", C, zhat)
            + np.einsum("mij,mj->mi", S, X_levels[level])
        )

    worst = 0.0
    for level in range(L + 1):
        m = X_levels[level].shape[0]
        P = _bcast(riccati.P[level], m)
        r = _bcast(dual.r[level], m)
        target = np.einsum("mij,mj->mi", P, X_levels[level]) + r
        worst = max(worst, float(np.max(np.abs(y[level] - target))))
    return worst


@dataclass
class CostPrediction:
    """Closed-form optimal cost with its named term breakdown.

    value = quadratic + linear + forcing + correction + terminal. The
    terminal weight is already carried through the backward recursion, so the
    terminal key is kept at 0.0 for reporting symmetry.
    """

    value: float
    terms: dict = field(default_factory=dict)


def predicted_cost(
    riccati: RiccatiSolution,
    dual,
    x: np.ndarray,
    model: CoefficientModel,
    horizon: float | None = None,
) -> CostPrediction:
    """Optimal cost <P_0 x, x> + 2 <r_0, x> + 2 E int <r, f> - E int <R^{-1}v, v>.

    On implicit lattice solutions the two integral terms are accumulated by
    the exact one-step recursion (so the value matches the DP oracle constant
    to roundoff, including the dt^2 f'P f quadrature weight inside the
    forcing term); otherwise by left-endpoint quadrature (lattice explicit)
    or adaptive ODE accumulation (deterministic solutions).
    """
    if horizon is not None and not np.isclose(horizon, riccati.times[-1]):
        raise GridMismatch(f"horizon {horizon} does not match solution grid")
    x = np.asarray(x, dtype=float).reshape(model.dims.n)
    quad = float(x @ riccati.P[0][0] @ x)
    lin = float(2.0 * dual.r[0][0] @ x)

    if riccati.source == "ode":
        forcing, correction = _integral_terms_ode(riccati, dual, model)
    elif riccati.scheme == "implicit":
        forcing, correction = _integral_terms_implicit(riccati, dual, model)
    else:
        forcing, correction = _integral_terms_quadrature(riccati, dual, model)

    terms = {
        "quadratic": quad,
        "linear": lin,
        "forcing": forcing,
        "correction": correction,
        "terminal": 0.0,
    }
    return CostPrediction(value=float(sum(terms.values())), terms=terms)


def _integral_terms_implicit(riccati, dual, model):
    lattice = riccati.lattice
    dt = lattice.step
    collapsed = riccati.collapsed
    forcing_acc = None
    corr_acc = None
    for level in range(lattice.depth - 1, -1, -1):
        moments = child_moments(lattice, riccati.P[level + 1], collapsed)
        W = None if collapsed else lattice.node_paths(level)
        at = model.at(lattice.times[level], W)
        core = discrete_core(at, dt, moments)
        r_children = dual.r[level + 1]
        if collapsed:
            rhat, ghat = r_children, np.zeros((model.dims.d,) + r_children.shape)
        else:
            rhat = lattice.condexp_level(r_children)
            ghat = np.stack(
                [
                    lattice.martingale_coefficient_level(r_children, i)
                    for i in range(model.dims.d)
                ]
            )
        Pf = np.einsum("mij,mj->mi", core.Phat, at.f)
        Qf = np.einsum("dmij,mj->dmi", core.Qhat, at.f)
        v = np.einsum("mji,mj->mi", at.B, rhat + dt * Pf) + np.einsum(
            "dmji,dmj->mi", at.D, ghat + dt * Qf
        )
        Rinv_v = _checked_solve(core.R, v[..., None])[..., 0]
        step_force = 2.0 * dt * np.einsum("mi,mi->m", rhat, at.f) + dt * dt * np.einsum(
            "mi,mi->m", at.f, Pf
        )
        step_corr = -dt * np.einsum("mi,mi->m", v, Rinv_v)

        if forcing_acc is None:
            forcing_acc = step_force
            corr_acc = step_corr
        else:
            if collapsed:
                forcing_acc = step_force + forcing_acc
                corr_acc = step_corr + corr_acc
            else:
                forcing_acc = step_force + lattice.condexp_level(forcing_acc)
                corr_acc = step_corr + lattice.condexp_level(corr_acc)
    return float(forcing_acc[0]), float(corr_acc[0])


def _integral_terms_quadrature(riccati, dual, model):
    lattice = riccati.lattice
    dt = lattice.step
    forcing = 0.0
    correction = 0.0
    for level in range(lattice.depth):
        P, r, g = riccati.P[level], dual.r[level], dual.g[level]
        m = max(P.shape[0], r.shape[0])
        P, r, g = _bcast(P, m), _bcast(r, m), _bcast_stack(g, m)
        W = None if m == 1 else lattice.node_paths(level)
        at = model.at(lattice.times[level], W)
        f = _bcast(at.f, m)
        R = inner_matrix(_bcast_stack(at.D, m), P)
        v = np.einsum("mji,mj->mi", _bcast(at.B, m), r) + np.einsum(
            "dmji,dmj->mi", _bcast_stack(at.D, m), g
        )
        Rinv_v = _checked_solve(R, v[..., None])[..., 0]
        forcing += 2.0 * dt * float(np.mean(np.einsum("mi,mi->m", r, f)))
        correction -= dt * float(np.mean(np.einsum("mi,mi->m", v, Rinv_v)))
    return forcing, correction


def _integral_terms_ode(riccati, dual, model):
    T = float(riccati.times[-1])
    k = model.dims.k

    def rhs(t, y):
        at = model.at(t, None)
        r = dual.dense(t)
        P = riccati.dense(t)[None]
        R = inner_matrix(at.D, P)[0]
        v = at.B[0].T @ r
        return [2.0 * r @ at.f[0], -v @ np.linalg.solve(R, v)]

    sol = solve_ivp(rhs, (0.0, T), [0.0, 0.0], method="RK45", rtol=1e-10, atol=1e-12)
    if not sol.success:
        raise StepSizeUnderflow(f"cost accumulation failed: {sol.message}")
    return float(sol.y[0, -1]), float(sol.y[1, -1])


def fundamental_relation_residual(
    riccati: RiccatiSolution,
    dual,
    model: CoefficientModel,
    u,
    x: np.ndarray,
    horizon: float | None = None,
) -> float:
    """Gap in the completion-of-squares identity for an arbitrary control.

    Evaluates J(u) (exact lattice expectation), the predicted optimal cost,
    and the quadratic penalty sum_l dt E[(u - u_opt)'R(u - u_opt)] along the
    trajectory of u, and returns |J(u) - predicted - penalty|. With the
    implicit discrete law the identity is exact to roundoff; otherwise the
    gap is first-order in the step.
    """
    lattice = riccati.lattice
    if lattice is None:
        raise GridMismatch("fundamental relation check needs a lattice solution")
    if horizon is not None and not np.isclose(horizon, riccati.times[-1]):
        raise GridMismatch(f"horizon {horizon} does not match solution grid")
    law = assemble_feedback(riccati, dual, model)
    L, dt = lattice.depth, lattice.step

    X_levels, u_levels = evolve_controlled(model, lattice, u, x)
    J_direct = 0.0
    penalty = 0.0
    for level in range(L):
        m = X_levels[level].shape[0]
        at = model.at(lattice.times[level], lattice.node_paths(level))
        S = _bcast(at.S, m)
        run = np.einsum("mi,mij,mj->m", X_levels[level], S, X_levels[level]) + np.sum(
            u_levels[level] ** 2, axis=-1
        )
        J_direct += dt * float(lattice.level_expectation(run))

        u_opt = law.control_level(level, X_levels[level])
        gap = u_levels[level] - u_opt
        R = law.penalty_matrix(level, m)
        if R is None:
            R = inner_matrix(_bcast_stack(at.D, m), _bcast(riccati.P[level], m))
        penalty += dt * float(
            lattice.level_expectation(np.einsum("mi,mij,mj->m", gap, R, gap))
        )
    X_T = X_levels[L]
    P_T = _bcast(riccati.P[L], X_T.shape[0])
    J_direct += float(lattice.level_expectation(np.einsum("mi,mij,mj->m", X_T, P_T, X_T)))

    predicted = predicted_cost(riccati, dual, x, model).value
    return abs(J_direct - predicted - penalty)

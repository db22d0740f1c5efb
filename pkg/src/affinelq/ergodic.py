"""Vanishing-discount analysis: the discount transform and the ergodic limit.

A discounted problem with rate alpha > 0 is equivalent to an undiscounted
infinite-horizon problem for the transformed state X^alpha_t = e^{-alpha t}
X_t under the transformed coefficients A^alpha = A - alpha I and f^alpha_t =
e^{-alpha t} f_t (B, C, D, S unchanged). The transform buys integrable
forcing even when f itself persists, which is exactly what makes the
vanishing-discount construction work: per alpha the discounted value is

    J_alpha(x) = <P_alpha_0 x, x> + 2 <r_alpha_0, x>
                 + 2 E int <r_alpha, f_alpha> - E int <R^{-1} v, v>,

and the ergodic quantity alpha J_alpha(x) tends, as alpha -> 0, to the
difference of the two alpha-scaled integral terms; the x-dependent terms die.
At desk scale the limit inferior/superior pair is replaced by polynomial
extrapolation over a finite alpha grid with an explicit error bar; the module
reports trends, it does not assert convergence the theory does not claim.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from . import dual as dual_mod
from . import riccati as riccati_mod
from .errors import GridMismatch, InsufficientGrid, NonPositiveAlpha, StepSizeUnderflow
from .model import CoefficientModel
from .simulate import evaluate_cost, simulate


def discount_transform(model: CoefficientModel, alpha: float) -> CoefficientModel:
    """Transformed coefficient model: A - alpha I drift shift, e^{-alpha t} f.

    Pure and invertible (alpha known); the drift bound grows by alpha and the
    forcing becomes square-integrable by construction.
    """
    if alpha <= 0.0:
        raise NonPositiveAlpha(f"discount rate must be positive, got {alpha}")
    return model.with_shifted_A(-alpha).with_damped_forcing(alpha)


def scaling_identity_check(
    model: CoefficientModel,
    u,
    x: np.ndarray,
    alpha: float,
    grid: np.ndarray,
    mc,
) -> float:
    """|discounted cost of (X, u) - plain cost of the transformed pair|.

    Both sides run on the same Brownian increments (same seed); with the
    discount applied at left endpoints the two discrete quantities differ
    only by the first-order drift-commutation defect of the Euler scheme, so
    the residual shrinks linearly in the step. Open-loop and zero controls
    only: the identity transforms the control along the original path.
    """
    if alpha <= 0.0:
        raise NonPositiveAlpha(f"discount rate must be positive, got {alpha}")
    grid = np.asarray(grid, dtype=float)
    steps = len(grid) - 1
    k = model.dims.k
    if u is None or (isinstance(u, str) and u == "zero"):
        u_arr = np.zeros((steps, k))
    else:
        if callable(u) or hasattr(u, "Lambda") or hasattr(u, "quadratic"):
            raise GridMismatch(
                "the scaling identity transforms the control along the original "
                "path; pass an open-loop array or the zero control"
            )
        u_arr = np.asarray(u, dtype=float)
        if u_arr.ndim == 1:
            u_arr = np.broadcast_to(u_arr, (steps, k)).copy()
        if u_arr.shape != (steps, k):
            raise GridMismatch(
                f"open-loop control must be ({steps}, {k}), got {u_arr.shape}"
            )

    direct = evaluate_cost(simulate(model, u_arr, x, grid, mc), model, alpha=alpha)
    transformed_model = discount_transform(model, alpha)
    u_alpha = np.exp(-alpha * grid[:-1])[:, None] * u_arr
    plain = evaluate_cost(
        simulate(transformed_model, u_alpha, x, grid, mc), transformed_model
    )
    return float(abs(direct.estimate - plain.estimate))


# -- the alpha-family ---------------------------------------------------------------


@dataclass
class DiscountedProblem:
    """One row of the vanishing-discount family."""

    alpha: float
    model: CoefficientModel
    P0: np.ndarray
    r0: np.ndarray
    term1: float  # 2 alpha E int <r^alpha, f^alpha>
    term2: float  # alpha E int <R^{-1} v, v>
    J_bar: float  # at the report's first initial state
    N_used: float


@dataclass
class ErgodicRow:
    alpha: float
    term1: float
    term2: float
    quad: float  # <P^alpha_0 x, x> at x_a
    lin: float  # 2 <r^alpha_0, x> at x_a
    J_bar: float
    alpha_J_bar: float
    quad_b: float
    lin_b: float
    J_bar_b: float
    alpha_J_bar_b: float


@dataclass
class ErgodicReport:
    rows: list
    gaps_P: list
    gaps_r: list
    window_times: np.ndarray | None
    x0_pair: tuple
    problems: list = field(default_factory=list)


@dataclass
class ErgodicLimit:
    limit: float
    last_raw: float
    error_bar: float
    degree: int
    x_estimates: tuple
    x_gap: float
    x_independent: bool


def solve_discounted_family(
    model: CoefficientModel,
    alpha_grid,
    tolerances: dict | None = None,
    x0_pair=None,
    window_T: float = 4.0,
) -> ErgodicReport:
    """Solve the discounted problem per alpha and assemble the ergodic terms.

    Per alpha: the transformed model's minimal Riccati solution, the
    infinite-horizon costate, the two alpha-scaled integral terms (adaptive
    accumulator quadrature on the deterministic route, exact lattice sums on
    the factor-driven route), and the discounted values at the two probe
    states. Also records the gaps |P^alpha - P_bar| and sup over a fixed
    window of |r^alpha - r_ref|, whose decay along the grid is the numeric
    shadow of the alpha -> 0 convergence lemmas.

    Certification only improves under the transform (the drift margin grows
    by alpha), so each transformed solve inherits the base certificate.
    """
    tolerances = tolerances or {}
    tol = float(tolerances.get("family_tol", 1e-9))
    alphas = [float(a) for a in alpha_grid]
    if any(a <= 0 for a in alphas):
        raise NonPositiveAlpha("every discount rate in the grid must be positive")
    n = model.dims.n
    if x0_pair is None:
        x0_pair = (np.ones(n), 2.0 * np.ones(n))
    x_a = np.asarray(x0_pair[0], dtype=float).reshape(n)
    x_b = np.asarray(x0_pair[1], dtype=float).reshape(n)

    base_inf = riccati_mod.solve_infinite(model, tol=tol)
    window = np.linspace(0.0, window_T, 41)
    r_ref = _reference_costate(model, base_inf, window)

    rows, gaps_P, gaps_r, problems = [], [], [], []
    for alpha in alphas:
        m_alpha = discount_transform(model, alpha)
        ricc = riccati_mod.solve_infinite(m_alpha, tol=tol)
        try:
            if ricc.stationary is not None:
                row = _terms_deterministic(m_alpha, ricc, alpha, x_a, x_b)
            else:
                row = _terms_lattice(m_alpha, ricc, alpha, x_a, x_b)
        except Exception as exc:
            raise type(exc)(f"alpha={alpha}: {exc}") from exc
        rows.append(row["row"])
        problems.append(row["problem"])
        gaps_P.append(float(np.linalg.norm(row["problem"].P0 - base_inf.P_bar)))
        if r_ref is not None and row["r_window"] is not None:
            gaps_r.append(float(np.max(np.linalg.norm(row["r_window"] - r_ref, axis=1))))
        else:
            gaps_r.append(float("nan"))

    return ErgodicReport(
        rows=rows, gaps_P=gaps_P, gaps_r=gaps_r,
        window_times=window if r_ref is not None else None,
        x0_pair=(x_a, x_b), problems=problems,
    )


def _reference_costate(model, base_inf, window):
    """Base-problem costate on the comparison window, long-horizon backward solve."""
    if base_inf.stationary is None:
        return None
    H = base_inf.stationary.H
    P = base_inf.stationary.P_bar
    T_big = float(window[-1]) + 30.0

    def rhs(tau, y):
        t = T_big - tau
        return H.T @ y + P @ model.at(t, None).f[0]

    sol = solve_ivp(rhs, (0.0, T_big), np.zeros(model.dims.n),
                    method="RK45", rtol=1e-11, atol=1e-13, dense_output=True)
    if not sol.success:
        raise StepSizeUnderflow(f"reference costate solve failed: {sol.message}")
    return np.stack([sol.sol(T_big - t) for t in window])


def _terms_deterministic(m_alpha, ricc, alpha, x_a, x_b) -> dict:
    """Backward accumulator solve for r^alpha and the two integral terms."""
    n = m_alpha.dims.n
    H = ricc.stationary.H
    P = ricc.stationary.P_bar
    T_cut = max(16.0, 8.0 / alpha)

    def rhs(tau, y):
        t = T_cut - tau
        at = m_alpha.at(t, None)
        r = y[:n]
        f = at.f[0]
        R = riccati_mod.inner_matrix(at.D, P[None])[0]
        v = at.B[0].T @ r
        return np.concatenate([
            H.T @ r + P @ f,
            [2.0 * float(r @ f)],
            [float(v @ np.linalg.solve(R, v))],
        ])

    sol = solve_ivp(rhs, (0.0, T_cut), np.zeros(n + 2),
                    method="RK45", rtol=1e-11, atol=1e-13, dense_output=True)
    if not sol.success:
        raise StepSizeUnderflow(f"discounted accumulator solve failed: {sol.message}")
    y_end = sol.y[:, -1]
    r0 = y_end[:n]
    I1, I2 = float(y_end[n]), float(y_end[n + 1])

    window = np.linspace(0.0, 4.0, 41)
    r_window = np.stack([sol.sol(T_cut - t)[:n] for t in window])

    return _assemble_row(alpha, ricc.P_bar, r0, I1, I2, x_a, x_b, m_alpha, T_cut, r_window)


def _terms_lattice(m_alpha, ricc, alpha, x_a, x_b) -> dict:
    """Exact lattice sums for the integral terms on the factor-driven route."""
    feedback = riccati_mod.feedback_quadratic(ricc.solution, m_alpha)
    dinf = dual_mod.solve_dual_infinite(m_alpha, feedback, ricc)
    run = dinf.solution
    lattice = run.lattice
    dt = lattice.step
    I1 = 0.0
    I2 = 0.0
    for level in range(len(run.r) - 1):
        m = lattice.n_nodes(level)
        at = m_alpha.at(lattice.times[level], lattice.node_paths(level))
        P = run.P_levels[level]
        P = np.broadcast_to(P, (m,) + P.shape[1:])
        r = np.broadcast_to(run.r[level], (m, m_alpha.dims.n))
        g = np.broadcast_to(run.g[level], (run.g[level].shape[0], m, m_alpha.dims.n))
        f = np.broadcast_to(at.f, (m, m_alpha.dims.n))
        R = riccati_mod.inner_matrix(at.D, P)
        v = np.einsum("mji,mj->mi", at.B, r) + np.einsum("dmji,dmj->mi", at.D, g)
        Rv = np.linalg.solve(R, v[..., None])[..., 0]
        I1 += 2.0 * dt * float(lattice.level_expectation(np.einsum("mi,mi->m", r, f)))
        I2 += dt * float(lattice.level_expectation(np.einsum("mi,mi->m", v, Rv)))
    return _assemble_row(
        alpha, ricc.P_bar, dinf.r_bar0, I1, I2, x_a, x_b, m_alpha, dinf.N_used, None
    )


def _assemble_row(alpha, P0, r0, I1, I2, x_a, x_b, m_alpha, N_used, r_window) -> dict:
    quad_a = float(x_a @ P0 @ x_a)
    lin_a = float(2.0 * r0 @ x_a)
    quad_b = float(x_b @ P0 @ x_b)
    lin_b = float(2.0 * r0 @ x_b)
    J_a = quad_a + lin_a + I1 - I2
    J_b = quad_b + lin_b + I1 - I2
    row = ErgodicRow(
        alpha=alpha, term1=alpha * I1, term2=alpha * I2,
        quad=quad_a, lin=lin_a, J_bar=J_a, alpha_J_bar=alpha * J_a,
        quad_b=quad_b, lin_b=lin_b, J_bar_b=J_b, alpha_J_bar_b=alpha * J_b,
    )
    problem = DiscountedProblem(
        alpha=alpha, model=m_alpha, P0=P0, r0=np.asarray(r0, dtype=float),
        term1=row.term1, term2=row.term2, J_bar=J_a, N_used=float(N_used),
    )
    return {"row": row, "problem": problem, "r_window": r_window}


def ergodic_limit(report: ErgodicReport) -> ErgodicLimit:
    """Extrapolate term1 - term2 to alpha = 0 with an explicit error bar.

    Polynomial fit of degree <= 2 in alpha; the error bar is the gap between
    the extrapolate and the smallest-alpha raw value. The same extrapolation
    applied to alpha J_bar at the two probe states gives the x-independence
    evidence: both must land within the error bar (plus a small absolute
    floor for the exactly-zero case) of each other.
    """
    rows = sorted(report.rows, key=lambda r: r.alpha)
    if len(rows) < 3:
        raise InsufficientGrid(
            f"ergodic extrapolation needs at least 3 discount rates, got {len(rows)}"
        )
    alphas = np.array([r.alpha for r in rows])
    w = np.array([r.term1 - r.term2 for r in rows])
    degree = min(2, len(rows) - 1)
    coeff = np.polyfit(alphas, w, degree)
    limit = float(np.polyval(coeff, 0.0))
    last_raw = float(w[0])
    error_bar = abs(limit - last_raw)

    est = []
    for attr in ("alpha_J_bar", "alpha_J_bar_b"):
        vals = np.array([getattr(r, attr) for r in rows])
        est.append(float(np.polyval(np.polyfit(alphas, vals, degree), 0.0)))
    x_gap = abs(est[0] - est[1])
    tol_x = error_bar + 1e-6 + 1e-3 * max(1.0, abs(est[0]), abs(est[1]))
    return ErgodicLimit(
        limit=limit, last_raw=last_raw, error_bar=error_bar, degree=degree,
        x_estimates=(est[0], est[1]), x_gap=x_gap,
        x_independent=bool(x_gap <= tol_x),
    )

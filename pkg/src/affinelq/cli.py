"""Command line driver: scenario ingestion, orchestration, reporting.

Subcommands: validate, riccati-finite, riccati-infinite, dual, synthesize,
simulate, verify, ergodic. Each reads one scenario JSON, writes a
sorted-key JSON summary plus CSV artifacts to the output directory, and
records a manifest (scenario hash, toolkit version, subcommand, seed,
wall-clock, output names). The summary payload never contains wall-clock
or absolute paths, so identical scenario hash + seed + subcommand yields a
bitwise-identical summary at any worker count.

Exit codes are frozen for scripting:
    0  success
    2  configuration or validation error (message names the offending key)
    3  solver failure or non-convergence
    4  verification tolerance breach
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import dual as dual_mod
from . import ergodic as ergodic_mod
from . import riccati as riccati_mod
from .simulate import evaluate_cost, simulate
from . import synthesis as synthesis_mod
from .errors import (
    AffineLQError,
    ConfigError,
    GridMismatch,
    SolverError,
    ValidationError,
)
from .lattice import FiltrationLattice
from .model import (
    CoefficientModel,
    Dimensions,
    DiscountedHorizon,
    FactorSpec,
    FiniteHorizon,
    ForcingSpec,
    InfiniteHorizon,
    LatticeSpec,
    MCSpec,
    ScenarioConfig,
    dissipativity_margin,
    validate,
)

_REQUIRED = object()


# -- scenario ingestion -----------------------------------------------------------


def _section(raw: dict, key: str, expected, default=_REQUIRED, where: str = ""):
    """Fetch raw[key] with a key-path diagnostic on absence or wrong type."""
    path = f"{where}.{key}" if where else key
    if key not in raw:
        if default is not _REQUIRED:
            return default
        raise ConfigError(f"missing required key {path!r}", key=path)
    value = raw[key]
    if expected is not None and not isinstance(value, expected):
        names = (
            expected.__name__
            if isinstance(expected, type)
            else "/".join(t.__name__ for t in expected)
        )
        raise ConfigError(f"{path!r} must be of type {names}", key=path)
    return value


def _build_model(raw_model: dict, dims: Dimensions) -> CoefficientModel:
    kind = _section(raw_model, "kind", str, "constant", "model")
    coeffs = {
        name: _section(raw_model, name, (list, int, float), _REQUIRED, "model")
        for name in ("A", "B", "C", "D", "S")
    }
    f_raw = _section(raw_model, "f", (list, int, float, dict), 0.0, "model")
    decay_rate = None
    if isinstance(f_raw, dict):
        f_value = _section(f_raw, "base", (list, int, float), _REQUIRED, "model.f")
        decay_rate = float(_section(f_raw, "rate", (int, float), _REQUIRED, "model.f"))
        if decay_rate <= 0.0:
            raise ConfigError("decaying forcing needs rate > 0", key="model.f.rate")
    else:
        f_value = f_raw

    forcing = ForcingSpec()
    forcing_raw = _section(raw_model, "forcing", dict, None, "model")
    if forcing_raw is not None:
        forcing = ForcingSpec(
            tag=_section(forcing_raw, "tag", str, "bounded", "model.forcing"),
            rate=float(_section(forcing_raw, "rate", (int, float), 0.0, "model.forcing")),
        )

    common = (dims, coeffs["A"], coeffs["B"], coeffs["C"], coeffs["D"], coeffs["S"], f_value)
    if kind == "constant":
        model = CoefficientModel.constant(*common, forcing=forcing)
    elif kind == "factor_driven":
        factor_raw = _section(raw_model, "factor", dict, _REQUIRED, "model")
        factor = FactorSpec(
            targets=frozenset(
                _section(factor_raw, "targets", list, _REQUIRED, "model.factor")
            ),
            amplitude=float(
                _section(factor_raw, "amplitude", (int, float), _REQUIRED, "model.factor")
            ),
            kappa=float(_section(factor_raw, "kappa", (int, float), 1.0, "model.factor")),
            weights=tuple(
                _section(factor_raw, "weights", list, [1.0] * dims.d, "model.factor")
            ),
        )
        model = CoefficientModel.factor_driven(*common, factor=factor, forcing=forcing)
    else:
        raise ConfigError(
            f"unknown model kind {kind!r} (expected 'constant' or 'factor_driven')",
            key="model.kind",
        )
    if decay_rate is not None:
        model = model.with_damped_forcing(decay_rate)
    return model


def _build_horizon(raw: dict):
    h = _section(raw, "horizon", dict)
    typ = _section(h, "type", str, _REQUIRED, "horizon")
    if typ == "finite":
        return FiniteHorizon(T=float(_section(h, "T", (int, float), _REQUIRED, "horizon")))
    if typ == "infinite":
        return InfiniteHorizon(
            tol=float(h.get("tol", 1e-9)), max_N=float(h.get("max_N", 160.0))
        )
    if typ == "discounted":
        grid = _section(h, "alpha_grid", list, _REQUIRED, "horizon")
        return DiscountedHorizon(alpha_grid=tuple(float(a) for a in grid))
    raise ConfigError(f"unknown horizon type {typ!r}", key="horizon.type")


def load_scenario(path: str) -> tuple:
    """Parse a scenario JSON into a ScenarioConfig; returns (config, raw dict)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}", key=str(path))
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}",
            key=str(path),
        )
    if not isinstance(raw, dict):
        raise ConfigError("top-level config must be a JSON object", key=str(path))

    dims_raw = _section(raw, "dims", dict)
    dims = Dimensions(
        n=int(_section(dims_raw, "n", int, _REQUIRED, "dims")),
        k=int(_section(dims_raw, "k", int, _REQUIRED, "dims")),
        d=int(_section(dims_raw, "d", int, _REQUIRED, "dims")),
    )
    model = _build_model(_section(raw, "model", dict), dims)
    x0 = np.asarray(_section(raw, "x0", list), dtype=float)
    horizon = _build_horizon(raw)

    lat_raw = _section(raw, "lattice", dict, {})
    lattice = LatticeSpec(
        depth=int(lat_raw.get("depth", 8)), max_nodes=int(lat_raw.get("max_nodes", 2**21))
    )
    mc_raw = _section(raw, "mc", dict, {})
    mc = MCSpec(
        paths=int(mc_raw.get("paths", 1000)),
        seed=int(mc_raw.get("seed", 0)),
        time_step=float(mc_raw.get("time_step", 0.01)),
        workers=int(mc_raw.get("workers", 1)),
    )
    tolerances = dict(_section(raw, "tolerances", dict, {}))
    cfg = ScenarioConfig(
        dims=dims, model=model, x0=x0, horizon=horizon,
        lattice=lattice, mc=mc, tolerances=tolerances,
    )
    return cfg, raw


def _terminal_from(raw: dict, n: int) -> np.ndarray:
    if "terminal" in raw:
        arr = np.asarray(raw["terminal"], dtype=float)
        if arr.shape != (n, n):
            raise ConfigError(f"terminal weight must be {n}x{n}", key="terminal")
        return arr
    return np.zeros((n, n))


# -- reporting plumbing -----------------------------------------------------------


def _jsonable(obj):
    """Recursively convert numpy scalars/arrays for strict JSON emission."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return _jsonable(obj.item())
    if isinstance(obj, float) and (math.isnan(obj) or math.isinf(obj)):
        return None
    return obj


def _dump_json(payload) -> str:
    return json.dumps(_jsonable(payload), sort_keys=True, indent=2)


def _write_csv(out: Path, name: str, header: list, rows) -> str:
    with open(out / name, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
    return name


def _mat_header(prefix: str, shape: tuple) -> list:
    idx = np.ndindex(*shape)
    return [prefix + "_" + "_".join(str(i) for i in t) for t in idx]


def _riccati_csv(out: Path, sol) -> str:
    n, d = sol.dims
    header = (
        ["t", "node"] + _mat_header("P", (n, n)) + _mat_header("Q", (d, n, n))
    )
    return _write_csv(out, "riccati.csv", header, sol.to_rows())


def _dual_csv(out: Path, sol) -> str:
    n = sol.r[0].shape[-1]
    d = sol.g[0].shape[0]
    header = ["t", "node"] + _mat_header("r", (n,)) + _mat_header("g", (d, n))
    return _write_csv(out, "dual.csv", header, sol.to_rows())


def _resolve_out_dir(args) -> Path:
    if getattr(args, "out_dir", None):
        return Path(args.out_dir)
    env = os.environ.get("AFFINELQ_OUT_DIR")
    if env:
        return Path(env)
    return Path("affinelq_out")


def _scenario_hash(raw: dict, args, cfg: ScenarioConfig) -> str:
    """Hash of everything that can change a report payload, workers excluded."""
    flag_keys = (
        "subcommand", "tol", "depth", "scheme", "route", "horizon",
        "check_duality", "policy", "alphas", "x0_pair",
    )
    doc = {
        "config": raw,
        "flags": {k: getattr(args, k) for k in flag_keys if hasattr(args, k)},
        "paths": cfg.mc.paths,
        "seed": cfg.mc.seed,
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


# -- shared solver plumbing ---------------------------------------------------------


def _lattice_for(cfg: ScenarioConfig, depth: int | None, T: float) -> FiltrationLattice:
    depth = depth or cfg.lattice.depth
    return FiltrationLattice(
        depth=depth, step=T / depth, d=cfg.dims.d, max_nodes=cfg.lattice.max_nodes
    )


def _finite_T(cfg: ScenarioConfig, subcommand: str) -> float:
    if not isinstance(cfg.horizon, FiniteHorizon):
        raise ConfigError(
            f"{subcommand} needs horizon.type == 'finite'", key="horizon.type"
        )
    return cfg.horizon.T


def _solve_riccati(cfg, raw, args, T):
    """Finite-horizon Riccati on the route the flags and model select."""
    model = cfg.model
    terminal = _terminal_from(raw, cfg.dims.n)
    route = getattr(args, "route", "auto")
    if model.requires_lattice() or route == "lattice":
        lattice = _lattice_for(cfg, getattr(args, "depth", None), T)
        scheme = getattr(args, "scheme", None) or "implicit"
        return riccati_mod.solve_finite_lattice(model, lattice, terminal, scheme=scheme)
    tol = getattr(args, "tol", None) or 1e-10
    return riccati_mod.solve_finite_deterministic(model, T, terminal, rtol=tol)


def _infinite_feedback(model, inf):
    if inf.stationary is not None:
        return inf.stationary
    return riccati_mod.feedback_quadratic(inf.solution, model)


# -- subcommand handlers ------------------------------------------------------------


def _cmd_validate(cfg, raw, args, out):
    model = validate(cfg)
    if model.requires_lattice():
        margin = dissipativity_margin(model, lattice=cfg.build_lattice())
    else:
        margin = dissipativity_margin(
            model, grid=np.linspace(0.0, cfg.horizon_T(), 33)
        )
    summary = {
        "subcommand": "validate",
        "status": "ok",
        "kind": model.kind,
        "dims": {"n": cfg.dims.n, "k": cfg.dims.k, "d": cfg.dims.d},
        "forcing_tag": model.forcing.tag,
        "dissipativity_margin": margin,
    }
    return summary, [], 0


def _cmd_riccati_finite(cfg, raw, args, out):
    validate(cfg)
    T = _finite_T(cfg, "riccati-finite")
    sol = _solve_riccati(cfg, raw, args, T)
    outputs = [_riccati_csv(out, sol)]
    summary = {
        "subcommand": "riccati-finite",
        "source": sol.source,
        "scheme": sol.scheme,
        "grid_points": len(sol.times),
        "P0": sol.P0,
        "symmetry_defect": sol.symmetry_defect(),
        "min_eigenvalue": sol.min_eigenvalue(),
        "inner_matrix_floor": sol.inner_matrix_floor(cfg.model),
    }
    return summary, outputs, 0


def _cmd_riccati_infinite(cfg, raw, args, out):
    validate(cfg)
    tol = getattr(args, "tol", None)
    if tol is None:
        tol = cfg.horizon.tol if isinstance(cfg.horizon, InfiniteHorizon) else 1e-9
    kwargs = {"tol": tol, "scheme": getattr(args, "scheme", None) or "implicit"}
    depth = getattr(args, "depth", None)
    if depth and cfg.model.requires_lattice():
        kwargs["depth_schedule"] = sorted({max(2, depth - 14), max(3, depth - 4), depth})
    inf = riccati_mod.solve_infinite(cfg.model, **kwargs)

    n = cfg.dims.n
    rows = []
    if inf.window_times is not None and inf.window_iterates and np.ndim(
        inf.window_iterates[0]
    ) == 3:
        for N, cur in zip(inf.schedule, inf.window_iterates):
            for t, P in zip(inf.window_times, cur):
                rows.append([N, float(t)] + P.ravel().tolist())
        header = ["N", "t"] + _mat_header("P", (n, n))
    else:
        for N, prefix in zip(inf.schedule, inf.window_iterates):
            for level, P_level in enumerate(prefix):
                for node in range(P_level.shape[0]):
                    rows.append([N, level, node] + P_level[node].ravel().tolist())
        header = ["N", "level", "node"] + _mat_header("P", (n, n))
    outputs = [_write_csv(out, "pn_iterates.csv", header, rows)]

    summary = {
        "subcommand": "riccati-infinite",
        "P_bar": inf.P_bar,
        "N_used": inf.N_used,
        "converged": inf.converged,
        "schedule": inf.schedule,
        "diffs": inf.diffs,
        "monotonicity_floor": min(inf.monotonicity_log),
        "dissipativity_margin": inf.margin,
    }
    if inf.stationary is not None:
        summary["gain"] = inf.stationary.Lambda
        summary["closed_loop_A"] = inf.stationary.H
    return summary, outputs, 0


def _cmd_dual(cfg, raw, args, out):
    validate(cfg)
    mode = args.horizon
    if mode is None:
        mode = "infinite" if isinstance(cfg.horizon, InfiniteHorizon) else "finite"

    if mode == "finite":
        T = _finite_T(cfg, "dual --horizon finite")
        ricc = _solve_riccati(cfg, raw, args, T)
        feedback = riccati_mod.feedback_quadratic(ricc, cfg.model)
        xi = None
        if "xi" in raw:
            xi = np.asarray(raw["xi"], dtype=float)
        sol = dual_mod.solve_dual_finite(cfg.model, feedback, ricc, terminal=xi)
        summary = {
            "subcommand": "dual",
            "mode": "finite",
            "source": sol.source,
            "scheme": sol.scheme,
            "r0": sol.r0,
            "max_r": sol.max_r(),
            "max_g": sol.max_g(),
        }
        summary.update(dual_mod.feedback_sup_norms(feedback))
        if args.check_duality:
            if sol.lattice is None:
                summary["duality_residual"] = None
                summary["duality_note"] = "skipped: duality check needs the lattice route"
            else:
                summary["duality_residual"] = dual_mod.duality_residual(
                    sol, cfg.model, feedback, x=cfg.x0
                )
        outputs = [_dual_csv(out, sol)]
        return summary, outputs, 0

    inf = riccati_mod.solve_infinite(cfg.model)
    dinf = dual_mod.solve_dual_infinite(
        cfg.model, _infinite_feedback(cfg.model, inf), inf
    )
    bound_drift = max(
        (b - a for a, b in zip(dinf.bound_log, dinf.bound_log[1:])), default=0.0
    )
    summary = {
        "subcommand": "dual",
        "mode": "infinite",
        "r_bar0": dinf.r_bar0,
        "N_used": dinf.N_used,
        "converged": dinf.converged,
        "bound_log": dinf.bound_log,
        "bound_max_increase": bound_drift,
        "tail_times": dinf.tail_times,
        "tail_mean_square": dinf.tail_sq,
        "tail_decreasing": bool(dinf.tail_sq[-1] <= dinf.tail_sq[0]),
    }
    outputs = []
    if dinf.solution is not None:
        outputs.append(_dual_csv(out, dinf.solution))
    return summary, outputs, 0


def _cmd_synthesize(cfg, raw, args, out):
    validate(cfg)
    T = _finite_T(cfg, "synthesize")
    ricc = _solve_riccati(cfg, raw, args, T)
    feedback = riccati_mod.feedback_quadratic(ricc, cfg.model)
    sol = dual_mod.solve_dual_finite(cfg.model, feedback, ricc)
    law = synthesis_mod.assemble_feedback(ricc, sol, cfg.model)

    n, k = cfg.dims.n, cfg.dims.k
    header = ["t", "node"] + _mat_header("Lambda", (k, n)) + _mat_header("aff", (k,))
    rows = []
    for idx, t in enumerate(law.times):
        lam = law.quadratic.Lambda[idx]
        aff = law.affine[idx]
        m = max(lam.shape[0], aff.shape[0])
        for node in range(m):
            lam_node = lam[node if lam.shape[0] == m else 0]
            aff_node = aff[node if aff.shape[0] == m else 0]
            rows.append([float(t), node] + lam_node.ravel().tolist() + aff_node.tolist())
    outputs = [_write_csv(out, "feedback.csv", header, rows)]

    prediction = synthesis_mod.predicted_cost(ricc, sol, cfg.x0, cfg.model)
    lam0, aff0 = law.at_time(0.0)
    summary = {
        "subcommand": "synthesize",
        "source": ricc.source,
        "scheme": ricc.scheme,
        "gain_at_0": lam0,
        "affine_at_0": aff0,
        "predicted_cost": prediction.value,
        "cost_terms": prediction.terms,
    }
    summary.update(dual_mod.feedback_sup_norms(feedback))
    if ricc.lattice is not None:
        summary["hamiltonian_residual"] = synthesis_mod.hamiltonian_residual(
            cfg.model, ricc, sol, law, cfg.x0
        )
    return summary, outputs, 0


def _policy_for(cfg, raw, args):
    """Resolve --policy into a simulate() policy plus an optional prediction."""
    name = args.policy
    if name == "zero":
        return None, None
    if name == "openloop":
        if "openloop_u" not in raw:
            raise ConfigError(
                "policy 'openloop' needs top-level key 'openloop_u'", key="openloop_u"
            )
        return np.asarray(raw["openloop_u"], dtype=float), None
    if isinstance(cfg.horizon, FiniteHorizon):
        T = cfg.horizon.T
        ricc = _solve_riccati(cfg, raw, args, T)
        feedback = riccati_mod.feedback_quadratic(ricc, cfg.model)
        sol = dual_mod.solve_dual_finite(cfg.model, feedback, ricc)
        law = synthesis_mod.assemble_feedback(ricc, sol, cfg.model)
        prediction = synthesis_mod.predicted_cost(ricc, sol, cfg.x0, cfg.model)
        return law, prediction.value
    inf = riccati_mod.solve_infinite(cfg.model)
    if inf.stationary is None:
        raise ConfigError(
            "feedback simulation needs deterministic coefficients", key="model.kind"
        )
    return inf.stationary, None


def _cmd_simulate(cfg, raw, args, out):
    validate(cfg)
    if isinstance(cfg.horizon, FiniteHorizon):
        T = cfg.horizon.T
    else:
        T = float(raw.get("sim_T", min(cfg.horizon_T(), 10.0)))
    steps = max(1, int(round(T / cfg.mc.time_step)))
    grid = np.linspace(0.0, T, steps + 1)

    policy, predicted = _policy_for(cfg, raw, args)
    batch = simulate(cfg.model, policy, cfg.x0, grid, cfg.mc)
    alpha = None
    if isinstance(cfg.horizon, DiscountedHorizon):
        alpha = cfg.horizon.alpha_grid[0]
    report = evaluate_cost(batch, cfg.model, alpha=alpha, predicted=predicted)

    n, k = cfg.dims.n, cfg.dims.k
    header = ["path", "t"] + _mat_header("X", (n,)) + _mat_header("u", (k,))
    rows = []
    for p in range(min(batch.paths, 20)):
        for j, t in enumerate(batch.times):
            u_cols = batch.u[p, j].tolist() if j < steps else [""] * k
            rows.append([p, float(t)] + batch.X[p, j].tolist() + u_cols)
    outputs = [_write_csv(out, "trajectories.csv", header, rows)]

    summary = {
        "subcommand": "simulate",
        "policy": args.policy,
        "paths": batch.paths,
        "seed": cfg.mc.seed,
        "steps": steps,
        "horizon_T": T,
        "alpha": alpha,
        "estimate": report.estimate,
        "std_error": report.std_error,
        "predicted": report.predicted,
        "z_score": report.z_score,
        "increment_sanity": batch.increment_sanity(),
    }
    return summary, outputs, 0


def _tree_gap(a_list, b_list) -> float:
    worst = 0.0
    for a, b in zip(a_list, b_list):
        m = max(a.shape[0], b.shape[0])
        aa = np.broadcast_to(a, (m,) + a.shape[1:])
        bb = np.broadcast_to(b, (m,) + b.shape[1:])
        worst = max(worst, float(np.max(np.abs(aa - bb))))
    return worst


def _cmd_verify(cfg, raw, args, out):
    """Residual suite; any tolerance breach exits 4."""
    model = validate(cfg)
    if isinstance(cfg.horizon, FiniteHorizon):
        T = cfg.horizon.T
    else:
        T = float(raw.get("sim_T", 4.0))
    depth = getattr(args, "depth", None) or cfg.lattice.depth
    lattice = _lattice_for(cfg, depth, T)
    dt = lattice.step
    terminal = _terminal_from(raw, cfg.dims.n)
    x0 = cfg.x0

    ricc = riccati_mod.solve_finite_lattice(model, lattice, terminal, scheme="implicit")
    feedback = riccati_mod.feedback_quadratic(ricc, model)
    sol = dual_mod.solve_dual_finite(model, feedback, ricc)
    # the duality telescoping is exact for the explicit costate scheme only
    sol_explicit = dual_mod.solve_dual_finite(model, feedback, ricc, scheme="explicit")
    law = synthesis_mod.assemble_feedback(ricc, sol, model)
    dp = synthesis_mod.bellman_dp_oracle(model, lattice, terminal=terminal)
    prediction = synthesis_mod.predicted_cost(ricc, sol, x0, model)

    tol = dict(cfg.tolerances)
    checks = {
        "dp_P": (_tree_gap(dp.P, ricc.P), tol.get("dp", 1e-10)),
        "dp_r": (_tree_gap(dp.r, sol.r), tol.get("dp", 1e-10)),
        "hamiltonian": (
            synthesis_mod.hamiltonian_residual(model, ricc, sol, law, x0),
            tol.get("hamiltonian", 5.0 * dt),
        ),
        "fundamental_relation": (
            synthesis_mod.fundamental_relation_residual(ricc, sol, model, None, x0),
            tol.get("fundamental_relation", 1e-8),
        ),
        "duality": (
            dual_mod.duality_residual(sol_explicit, model, feedback, x=x0),
            tol.get("duality", 1e-3),
        ),
        "predicted_vs_dp": (
            abs(prediction.value - dp.value(x0)),
            tol.get("predicted_vs_dp", 1e-8),
        ),
    }
    if not model.requires_lattice():
        ode = riccati_mod.solve_finite_deterministic(model, T, terminal)
        gap = max(
            float(np.max(np.abs(ricc.P[idx][0] - ode.dense(t))))
            for idx, t in enumerate(lattice.times)
        )
        scale = max(1.0, float(np.linalg.norm(ode.P0)))
        checks["riccati_ode_gap"] = (gap, tol.get("riccati_ode_gap", 5.0 * dt * scale))

    results = {}
    breaches = []
    for name, (value, bound) in checks.items():
        ok = bool(value <= bound)
        results[name] = {"value": value, "tolerance": bound, "pass": ok}
        if not ok:
            breaches.append(name)

    summary = {
        "subcommand": "verify",
        "depth": depth,
        "step": dt,
        "checks": results,
        "breaches": sorted(breaches),
        "status": "ok" if not breaches else "breach",
        "predicted_cost": prediction.value,
        "cost_terms": prediction.terms,
    }
    return summary, [], (0 if not breaches else 4)


def _parse_alphas(args, cfg) -> list:
    if args.alphas:
        try:
            alphas = [float(tok) for tok in args.alphas.split(",") if tok.strip()]
        except ValueError:
            raise ConfigError(f"cannot parse --alphas {args.alphas!r}", key="alphas")
        if not alphas:
            raise ConfigError("--alphas must name at least one rate", key="alphas")
        return sorted(alphas, reverse=True)
    if isinstance(cfg.horizon, DiscountedHorizon):
        return list(cfg.horizon.alpha_grid)
    return [0.4, 0.2, 0.1, 0.05]


def _parse_x0_pair(args, cfg) -> tuple:
    n = cfg.dims.n
    if args.x0_pair:
        parts = args.x0_pair.split(";")
        if len(parts) != 2:
            raise ConfigError(
                "--x0-pair wants two ';'-separated vectors, components ','-separated",
                key="x0_pair",
            )
        try:
            pair = tuple(
                np.array([float(tok) for tok in part.split(",")]) for part in parts
            )
        except ValueError:
            raise ConfigError(f"cannot parse --x0-pair {args.x0_pair!r}", key="x0_pair")
        for vec in pair:
            if vec.shape != (n,):
                raise ConfigError(f"each x0 in the pair must have {n} components", key="x0_pair")
        return pair
    return cfg.x0, cfg.x0 + np.ones(n)


def _cmd_ergodic(cfg, raw, args, out):
    validate(cfg)
    alphas = _parse_alphas(args, cfg)
    pair = _parse_x0_pair(args, cfg)
    report = ergodic_mod.solve_discounted_family(
        cfg.model, alphas, tolerances=cfg.tolerances, x0_pair=pair
    )
    limit = ergodic_mod.ergodic_limit(report)

    header = [
        "alpha", "term1", "term2", "quad_a", "lin_a", "J_bar_a", "alpha_J_bar_a",
        "quad_b", "lin_b", "J_bar_b", "alpha_J_bar_b", "gap_P", "gap_r",
    ]
    rows = []
    for row, gp, gr in zip(report.rows, report.gaps_P, report.gaps_r):
        rows.append([
            row.alpha, row.term1, row.term2, row.quad, row.lin, row.J_bar,
            row.alpha_J_bar, row.quad_b, row.lin_b, row.J_bar_b, row.alpha_J_bar_b,
            gp, "" if math.isnan(gr) else gr,
        ])
    outputs = [_write_csv(out, "ergodic.csv", header, rows)]

    eps = 1e-12
    gaps_P_sorted = [g for _, g in sorted(zip(alphas, report.gaps_P), reverse=True)]
    summary = {
        "subcommand": "ergodic",
        "alphas": alphas,
        "rows": [
            {
                "alpha": r.alpha, "term1": r.term1, "term2": r.term2,
                "J_bar": r.J_bar, "alpha_J_bar": r.alpha_J_bar,
                "J_bar_b": r.J_bar_b, "alpha_J_bar_b": r.alpha_J_bar_b,
            }
            for r in report.rows
        ],
        "limit": limit.limit,
        "last_raw": limit.last_raw,
        "error_bar": limit.error_bar,
        "fit_degree": limit.degree,
        "x_estimates": list(limit.x_estimates),
        "x_gap": limit.x_gap,
        "x_independent": limit.x_independent,
        "gaps_P": report.gaps_P,
        "gaps_r": report.gaps_r,
        "gaps_P_decreasing": bool(
            all(b <= a + eps for a, b in zip(gaps_P_sorted, gaps_P_sorted[1:]))
        ),
    }
    return summary, outputs, 0


_HANDLERS = {
    "validate": _cmd_validate,
    "riccati-finite": _cmd_riccati_finite,
    "riccati-infinite": _cmd_riccati_infinite,
    "dual": _cmd_dual,
    "synthesize": _cmd_synthesize,
    "simulate": _cmd_simulate,
    "verify": _cmd_verify,
    "ergodic": _cmd_ergodic,
}


# -- argument parsing ---------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="affinelq",
        description="Affine LQ stochastic control: Riccati/costate solvers, "
        "feedback synthesis, simulation, ergodic analysis.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name: str, help_: str):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help="path to the scenario JSON file")
        sp.add_argument("--out-dir", default=None, help="output directory "
                        "(default: $AFFINELQ_OUT_DIR, else ./affinelq_out)")
        sp.add_argument("--json", action="store_true",
                        help="stream the JSON summary to stdout")
        return sp

    def add_solver_flags(sp, scheme_default=None):
        sp.add_argument("--tol", type=float, default=None)
        sp.add_argument("--depth", type=int, default=None)
        sp.add_argument("--scheme", choices=["explicit", "implicit"],
                        default=scheme_default)
        sp.add_argument("--route", choices=["auto", "ode", "lattice"], default="auto")

    add("validate", "check a scenario config against every model invariant")
    add_solver_flags(add("riccati-finite", "solve the finite-horizon Riccati equation"))
    add_solver_flags(add("riccati-infinite", "increasing-horizon minimal solution"))

    sp = add("dual", "solve the affine costate equation")
    add_solver_flags(sp)
    sp.add_argument("--horizon", choices=["finite", "infinite"], default=None)
    sp.add_argument("--check-duality", action="store_true", dest="check_duality")

    add_solver_flags(add("synthesize", "assemble the optimal feedback law"))

    sp = add("simulate", "Monte Carlo closed- or open-loop trajectories")
    sp.add_argument("--policy", choices=["zero", "openloop", "feedback"], default="zero")
    sp.add_argument("--paths", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--workers", type=int, default=None)
    add_solver_flags(sp)

    sp = add("verify", "run the residual suite against its tolerances")
    sp.add_argument("--depth", type=int, default=None)

    sp = add("ergodic", "vanishing-discount family and extrapolated limit")
    sp.add_argument("--alphas", default=None,
                    help="comma-separated discount rates, e.g. 0.4,0.2,0.1,0.05")
    sp.add_argument("--x0-pair", default=None, dest="x0_pair",
                    help="two initial states, ';'-separated, components ','-separated")
    return parser


def run(argv=None) -> int:
    t0 = time.monotonic()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, raw = load_scenario(args.config)
        updates = {}
        if getattr(args, "paths", None):
            updates["paths"] = args.paths
        if getattr(args, "seed", None) is not None:
            updates["seed"] = args.seed
        if getattr(args, "workers", None):
            updates["workers"] = args.workers
        if updates:
            cfg.mc = replace(cfg.mc, **updates)

        out = _resolve_out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        summary, outputs, code = _HANDLERS[args.subcommand](cfg, raw, args, out)

        summary_text = _dump_json(summary)
        (out / "summary.json").write_text(summary_text + "\n")
        manifest = {
            "scenario_hash": _scenario_hash(raw, args, cfg),
            "version": __version__,
            "subcommand": args.subcommand,
            "seed": cfg.mc.seed,
            "wallclock_seconds": time.monotonic() - t0,
            "outputs": sorted(["summary.json"] + outputs),
        }
        (out / "manifest.json").write_text(_dump_json(manifest) + "\n")
        if args.json:
            print(summary_text)
        else:
            print(f"{args.subcommand}: {'ok' if code == 0 else 'breach'} "
                  f"(summary in {out / 'summary.json'})")
        return code
    except (ValidationError, GridMismatch, ValueError) as exc:
        key = getattr(exc, "key", None)
        suffix = f" (key: {key})" if key else ""
        print(f"error: {exc}{suffix}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except AffineLQError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

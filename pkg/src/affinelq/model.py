"""Problem-instance data: coefficient processes, scenario configuration, validation.

A problem instance is the tuple (A, B, C_i, D_i, S, f) of uniformly bounded
predictable processes driving the controlled state

    dX = (A X + B u + f) dt + sum_i (C_i X + D_i u) dW_i,

together with the quadratic cost weights (S on the state, identity on the
control, identity terminal weight). Coefficients are represented as providers:
callables (t, W) -> batched arrays, where W is an (m, d) array of Brownian
values (lattice nodes or Monte Carlo paths). Randomness may enter only through
W, which makes adaptedness structural.

Three kinds are supported. "constant" and "time_varying" ignore W entirely;
"factor_driven" modulates selected base matrices by the bounded factor
1 + amplitude * tanh(kappa * <weights, W_t>), which keeps every evaluation
inside the declared sup-norm bound by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import (
    BadDimensions,
    ConfigError,
    ForcingNotSquareIntegrable,
    NegativeS,
    NonSymmetricS,
    UnboundedCoefficient,
)
from .lattice import FiltrationLattice

CONSTANT = "constant"
TIME_VARYING = "time_varying"
FACTOR_DRIVEN = "factor_driven"

BOUNDED = "bounded"
DECAYING = "decaying"

_MATRIX_NAMES = ("A", "B", "C", "D", "S")
_ALL_NAMES = _MATRIX_NAMES + ("f",)


@dataclass(frozen=True)
class Dimensions:
    """State (n), control (k) and Brownian (d) dimensions."""

    n: int
    k: int
    d: int

    def __post_init__(self):
        for label, value in (("n", self.n), ("k", self.k), ("d", self.d)):
            if int(value) != value or value < 1:
                raise BadDimensions(f"dimension {label} must be a positive integer", key=f"dims.{label}")

    def coefficient_shape(self, name: str) -> tuple:
        n, k, d = self.n, self.k, self.d
        return {
            "A": (n, n),
            "B": (n, k),
            "C": (d, n, n),
            "D": (d, n, k),
            "S": (n, n),
            "f": (n,),
        }[name]


@dataclass(frozen=True)
class ModelAt:
    """Coefficient evaluations at one time, batched over nodes or paths.

    Shapes: A (m,n,n), B (m,n,k), C (d,m,n,n), D (d,m,n,k), S (m,n,n), f (m,n).
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    S: np.ndarray
    f: np.ndarray


@dataclass(frozen=True)
class ForcingSpec:
    """Integrability declaration for the forcing term f.

    tag is "bounded" (finite-horizon only) or "decaying" with rate beta > 0,
    meaning f is square integrable on [0, infinity). The tag is declared, not
    inferred: integrability cannot be certified from finitely many samples.
    """

    tag: str = BOUNDED
    rate: float = 0.0

    def __post_init__(self):
        if self.tag not in (BOUNDED, DECAYING):
            raise ConfigError(f"unknown forcing tag {self.tag!r}", key="model.forcing.tag")
        if self.tag == DECAYING and not self.rate > 0.0:
            raise ConfigError("decaying forcing needs rate > 0", key="model.forcing.rate")


@dataclass(frozen=True)
class FactorSpec:
    """Bounded closed-form factor modulation of selected coefficients."""

    targets: frozenset
    amplitude: float
    kappa: float = 1.0
    weights: tuple = (1.0,)

    def modulation(self, W: np.ndarray) -> np.ndarray:
        w = np.asarray(self.weights, dtype=float)
        return 1.0 + self.amplitude * np.tanh(self.kappa * (W @ w))


def _as_matrix(value, shape, key) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != shape:
        raise BadDimensions(f"{key} must have shape {shape}, got {arr.shape}", key=key)
    return arr


def _spectral_bound(name: str, arr: np.ndarray) -> float:
    if name == "f":
        return float(np.linalg.norm(arr))
    if name in ("C", "D"):
        return float(max(np.linalg.norm(a, 2) for a in arr))
    return float(np.linalg.norm(arr, 2))


@dataclass
class CoefficientModel:
    dims: Dimensions
    kind: str
    providers: dict
    bounds: dict
    forcing: ForcingSpec = ForcingSpec()
    factor: FactorSpec | None = None
    validated: bool = False

    # -- construction ---------------------------------------------------------

    @classmethod
    def constant(cls, dims: Dimensions, A, B, C, D, S, f, forcing: ForcingSpec = ForcingSpec()):
        base = cls._base_arrays(dims, A, B, C, D, S, f)
        providers = {
            name: _constant_provider(arr, stacked=name in ("C", "D"))
            for name, arr in base.items()
        }
        bounds = {name: _spectral_bound(name, arr) for name, arr in base.items()}
        return cls(dims=dims, kind=CONSTANT, providers=providers, bounds=bounds, forcing=forcing)

    @classmethod
    def time_varying(
        cls,
        dims: Dimensions,
        A, B, C, D, S, f,
        bounds: dict | None = None,
        forcing: ForcingSpec = ForcingSpec(),
    ):
        """Deterministic time-dependent coefficients.

        Each argument is either an array (held constant) or a callable
        t -> array of the right shape. Callable coefficients need an entry in
        bounds; array coefficients get theirs computed.
        """
        providers = {}
        out_bounds = dict(bounds or {})
        for name, value in zip(_ALL_NAMES, (A, B, C, D, S, f)):
            shape = dims.coefficient_shape(name)
            stacked = name in ("C", "D")
            if callable(value):
                providers[name] = _deterministic_provider(value, shape, name, stacked)
                if name not in out_bounds:
                    raise ConfigError(
                        f"time-varying coefficient {name} needs a declared bound",
                        key=f"model.bounds.{name}",
                    )
            else:
                arr = _as_matrix(value, shape, f"model.{name}")
                providers[name] = _constant_provider(arr, stacked)
                out_bounds.setdefault(name, _spectral_bound(name, arr))
        return cls(dims=dims, kind=TIME_VARYING, providers=providers, bounds=out_bounds, forcing=forcing)

    @classmethod
    def factor_driven(
        cls,
        dims: Dimensions,
        A, B, C, D, S, f,
        factor: FactorSpec,
        forcing: ForcingSpec = ForcingSpec(),
    ):
        if not abs(factor.amplitude) < 1.0:
            raise ConfigError("factor amplitude must satisfy |amplitude| < 1", key="model.factor.amplitude")
        if len(factor.weights) != dims.d:
            raise BadDimensions("factor weights must have length d", key="model.factor.weights")
        unknown = set(factor.targets) - set(_ALL_NAMES)
        if unknown:
            raise ConfigError(f"unknown factor targets {sorted(unknown)}", key="model.factor.targets")
        base = cls._base_arrays(dims, A, B, C, D, S, f)
        providers = {}
        bounds = {}
        for name, arr in base.items():
            stacked = name in ("C", "D")
            if name in factor.targets:
                providers[name] = _factor_provider(
                    arr, factor, vector=(name == "f"), stacked=stacked
                )
                bounds[name] = _spectral_bound(name, arr) * (1.0 + abs(factor.amplitude))
            else:
                providers[name] = _constant_provider(arr, stacked)
                bounds[name] = _spectral_bound(name, arr)
        return cls(
            dims=dims, kind=FACTOR_DRIVEN, providers=providers, bounds=bounds,
            forcing=forcing, factor=factor,
        )

    @staticmethod
    def _base_arrays(dims, A, B, C, D, S, f) -> dict:
        return {
            name: _as_matrix(value, dims.coefficient_shape(name), f"model.{name}")
            for name, value in zip(_ALL_NAMES, (A, B, C, D, S, f))
        }

    # -- evaluation -----------------------------------------------------------

    def at(self, t: float, W: np.ndarray | None = None) -> ModelAt:
        """Evaluate all coefficients at time t on a batch of Brownian values.

        W has shape (m, d); None means the single deterministic point W = 0.
        """
        if W is None:
            W = np.zeros((1, self.dims.d))
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return ModelAt(**{name: self.providers[name](t, W) for name in _ALL_NAMES})

    def requires_lattice(self) -> bool:
        return self.kind == FACTOR_DRIVEN

    # -- derived models ---------------------------------------------------------

    def with_damped_forcing(self, rate: float) -> "CoefficientModel":
        """Multiply f by exp(-rate * t); used by the discount transform."""
        f_provider = self.providers["f"]

        def damped(t, W):
            return np.exp(-rate * t) * f_provider(t, W)

        providers = dict(self.providers)
        providers["f"] = damped
        new_rate = self.forcing.rate + rate if self.forcing.tag == DECAYING else rate
        return replace(
            self,
            providers=providers,
            forcing=ForcingSpec(tag=DECAYING, rate=new_rate),
            validated=False,
        )

    def with_shifted_A(self, shift: float) -> "CoefficientModel":
        """Replace A by A + shift * I; used by the discount transform."""
        A_provider = self.providers["A"]
        eye = shift * np.eye(self.dims.n)

        def shifted(t, W):
            return A_provider(t, W) + eye

        providers = dict(self.providers)
        providers["A"] = shifted
        bounds = dict(self.bounds)
        bounds["A"] = bounds["A"] + abs(shift)
        return replace(self, providers=providers, bounds=bounds, validated=False)


def _constant_provider(arr: np.ndarray, stacked: bool = False) -> Callable:
    # stacked coefficients (C, D) batch as (d, m, ...); the rest as (m, ...)
    if stacked:
        def provide(t, W):
            m = W.shape[0]
            return np.broadcast_to(arr[:, None], (arr.shape[0], m) + arr.shape[1:])

        return provide

    def provide(t, W):
        return np.broadcast_to(arr, (W.shape[0],) + arr.shape)

    return provide


def _deterministic_provider(
    func: Callable, shape: tuple, name: str, stacked: bool = False
) -> Callable:
    def provide(t, W):
        arr = _as_matrix(func(t), shape, f"model.{name}(t={t})")
        m = W.shape[0]
        if stacked:
            return np.broadcast_to(arr[:, None], (arr.shape[0], m) + arr.shape[1:])
        return np.broadcast_to(arr, (m,) + arr.shape)

    return provide


def _factor_provider(
    arr: np.ndarray, factor: FactorSpec, vector: bool, stacked: bool = False
) -> Callable:
    def provide(t, W):
        mod = factor.modulation(W)
        if stacked:
            return arr[:, None] * mod.reshape((1, -1) + (1,) * (arr.ndim - 1))
        return arr[None] * mod.reshape((-1,) + (1,) * arr.ndim)

    return provide


# -- scenario configuration ----------------------------------------------------


@dataclass(frozen=True)
class FiniteHorizon:
    T: float

    def __post_init__(self):
        if not self.T > 0.0:
            raise ConfigError("finite horizon needs T > 0", key="horizon.T")


@dataclass(frozen=True)
class InfiniteHorizon:
    tol: float = 1e-9
    max_N: float = 160.0

    def __post_init__(self):
        if not (self.tol > 0.0 and self.max_N > 0.0):
            raise ConfigError("infinite horizon needs tol > 0 and max_N > 0", key="horizon")


@dataclass(frozen=True)
class DiscountedHorizon:
    alpha_grid: tuple

    def __post_init__(self):
        grid = tuple(float(a) for a in self.alpha_grid)
        if len(grid) < 1 or any(a <= 0.0 for a in grid):
            raise ConfigError("alpha_grid must be positive", key="horizon.alpha_grid")
        if any(b >= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("alpha_grid must be strictly decreasing", key="horizon.alpha_grid")
        object.__setattr__(self, "alpha_grid", grid)


@dataclass(frozen=True)
class LatticeSpec:
    depth: int
    max_nodes: int = 2**21

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("lattice depth must be >= 1", key="lattice.depth")


@dataclass(frozen=True)
class MCSpec:
    paths: int = 1000
    seed: int = 0
    time_step: float = 0.01
    workers: int = 1

    def __post_init__(self):
        if self.paths < 1:
            raise ConfigError("mc.paths must be >= 1", key="mc.paths")
        if not self.time_step > 0.0:
            raise ConfigError("mc.time_step must be positive", key="mc.time_step")
        if self.workers < 1:
            raise ConfigError("mc.workers must be >= 1", key="mc.workers")


@dataclass
class ScenarioConfig:
    dims: Dimensions
    model: CoefficientModel
    x0: np.ndarray
    horizon: object
    lattice: LatticeSpec
    mc: MCSpec
    tolerances: dict = field(default_factory=dict)

    def horizon_T(self) -> float:
        if isinstance(self.horizon, FiniteHorizon):
            return self.horizon.T
        if isinstance(self.horizon, InfiniteHorizon):
            return float(self.horizon.max_N)
        return float(max(1.0 / min(self.horizon.alpha_grid), 1.0))

    def build_lattice(self) -> FiltrationLattice:
        T = self.horizon.T if isinstance(self.horizon, FiniteHorizon) else self.horizon_T()
        return FiltrationLattice(
            depth=self.lattice.depth,
            step=T / self.lattice.depth,
            d=self.dims.d,
            max_nodes=self.lattice.max_nodes,
        )


# -- validation ----------------------------------------------------------------

SYMMETRY_TOL = 1e-12
PSD_TOL = -1e-10


def _sample_points(config: ScenarioConfig):
    """Times and node batches on which invariants are checked by sampling."""
    T = config.horizon_T()
    times = np.linspace(0.0, T, max(config.lattice.depth + 1, 9))
    if config.model.requires_lattice():
        lattice = config.build_lattice()
        for level, t in enumerate(lattice.times):
            yield t, lattice.node_paths(level)
    else:
        for t in times:
            yield t, None


def validate(config: ScenarioConfig) -> CoefficientModel:
    """Check every model invariant by sampling; returns the validated model.

    Checks performed per sampled (time, node batch): coefficient shapes, the
    declared sup-norm bounds, symmetry of S to 1e-12, and the eigenvalue floor
    of S (-1e-10, or the strict ergodic floor for discounted horizons). S is
    symmetrized as (S + S') / 2 before the eigenvalue check. Infinite-horizon
    runs additionally require the decaying forcing tag. Idempotent: validating
    a validated model changes nothing.
    """
    model = config.model
    if model.dims != config.dims:
        raise BadDimensions("config.dims disagrees with model.dims", key="dims")
    if np.asarray(config.x0, dtype=float).shape != (config.dims.n,):
        raise BadDimensions("x0 must be an n-vector", key="x0")
    if isinstance(config.horizon, InfiniteHorizon) and model.forcing.tag != DECAYING:
        is_zero = True
        for t, W in _sample_points(config):
            if np.any(model.at(t, W).f != 0.0):
                is_zero = False
                break
        if not is_zero:
            raise ForcingNotSquareIntegrable(
                "infinite-horizon run needs forcing tagged decaying (or f identically 0)",
                key="model.forcing.tag",
            )

    ergodic_floor = None
    if isinstance(config.horizon, DiscountedHorizon):
        ergodic_floor = float(config.tolerances.get("ergodic_s_floor", 1e-8))

    for t, W in _sample_points(config):
        at = model.at(t, W)
        for name in _ALL_NAMES:
            values = getattr(at, name)
            bound = model.bounds.get(name)
            if bound is None:
                raise UnboundedCoefficient(f"no declared bound for {name}", key=f"model.bounds.{name}")
            sup = _batched_sup_norm(name, values)
            if sup > bound * (1.0 + 1e-12) + 1e-300:
                raise UnboundedCoefficient(
                    f"coefficient {name} reaches norm {sup:.6g} over its declared bound {bound:.6g} at t={t}",
                    key=f"model.{name}",
                )
        asym = np.max(np.abs(at.S - np.swapaxes(at.S, -1, -2)))
        scale = max(1.0, float(np.max(np.abs(at.S))))
        if asym > SYMMETRY_TOL * scale:
            raise NonSymmetricS(f"S asymmetry {asym:.3g} at t={t}", key="model.S")
        s_sym = 0.5 * (at.S + np.swapaxes(at.S, -1, -2))
        lam = np.linalg.eigvalsh(s_sym)
        lam_min = float(lam.min())
        if ergodic_floor is not None:
            if lam_min < ergodic_floor:
                raise NegativeS(
                    f"ergodic run needs S >= {ergodic_floor:g} I; min eigenvalue {lam_min:.6g} at t={t}",
                    key="model.S",
                )
        elif lam_min < PSD_TOL:
            raise NegativeS(f"S has eigenvalue {lam_min:.6g} at t={t}", key="model.S")

    if not model.validated:
        model = _with_symmetrized_S(model)
        model.validated = True
    return model


def _batched_sup_norm(name: str, values: np.ndarray) -> float:
    if name == "f":
        return float(np.linalg.norm(values, axis=-1).max())
    if name in ("C", "D"):
        flat = values.reshape((-1,) + values.shape[-2:])
    else:
        flat = values
    return float(np.linalg.norm(flat, ord=2, axis=(-2, -1)).max())


def _with_symmetrized_S(model: CoefficientModel) -> CoefficientModel:
    s_provider = model.providers["S"]

    def symmetrized(t, W):
        s = s_provider(t, W)
        return 0.5 * (s + np.swapaxes(s, -1, -2))

    providers = dict(model.providers)
    providers["S"] = symmetrized
    return replace(model, providers=providers)


def dissipativity_margin(
    model: CoefficientModel,
    grid: Sequence[float] | None = None,
    lattice: FiltrationLattice | None = None,
) -> float:
    """Margin alpha* = -max over samples of lambda_max(sym(A) + 1/2 sum_i C_i' C_i).

    A strictly positive margin certifies that the zero control already damps
    the state (<A x, x> + 1/2 |C x|^2 <= -alpha* |x|^2 everywhere), which is
    the sufficient stabilizability condition the infinite-horizon solvers ask
    for. Pure evaluation, no errors. Factor-driven models are sampled on the
    lattice (required), deterministic models on the time grid.
    """
    if model.requires_lattice():
        if lattice is None:
            raise ValueError("factor-driven models need a lattice to sample the margin")
        points = [(t, lattice.node_paths(level)) for level, t in enumerate(lattice.times)]
    else:
        if grid is None:
            grid = [0.0]
        points = [(float(t), None) for t in grid]

    worst = -np.inf
    for t, W in points:
        at = model.at(t, W)
        sym_A = 0.5 * (at.A + np.swapaxes(at.A, -1, -2))
        gram = 0.5 * np.einsum("dmji,dmjk->mik", at.C, at.C)
        lam = np.linalg.eigvalsh(sym_A + gram)
        worst = max(worst, float(lam.max()))
    return -worst

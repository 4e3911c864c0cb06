"""Stepping of the full state (S, V, Y).

The weak scheme composes an exact Black-Scholes substep with a correlated
substep that moves S through an exponential of (t, Y, V), in an order
drawn fresh every step. The drift-implicit Euler scheme is the baseline.

Both schemes simulate the driftless price; a rate r enters only when
results are reported (S e^(rt)) and when payoffs are discounted.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Literal, Optional, Sequence

import numpy as np

from .config import ModelParams
from .errors import DegenerateModelError, DomainError, NumericalError
from .kernel import KernelApprox
from .randstream import normals
from .smallmat import LUSolver
from .volscheme import StepStats, VolPropagator, cir_step

logger = logging.getLogger(__name__)

SchemeName = Literal["weak", "euler"]
CONSTRAINT_TOL = 1e-12


@dataclass(frozen=True)
class MarketState:
    """A stack of n paths: S is (n,), V and Y are (n, N)."""

    S: np.ndarray
    V: np.ndarray
    Y: np.ndarray
    t: float = 0.0

    @classmethod
    def initial(cls, params: ModelParams, kernel: KernelApprox, paths: int) -> "MarketState":
        return cls(
            S=np.full(paths, params.S0),
            V=np.tile(kernel.v0split, (paths, 1)),
            Y=np.zeros((paths, kernel.size)),
            t=0.0,
        )

    @property
    def paths(self) -> int:
        return len(self.S)

    def total_variance(self, kernel: KernelApprox) -> np.ndarray:
        return self.V @ kernel.weights


@dataclass(frozen=True, eq=False)
class StockCoefficients:
    """log S picks up a h + b.(Y' - Y) + c.(V' - V) over a correlated substep."""

    a: float
    b: np.ndarray
    c: np.ndarray

    def residuals(self, params: ModelParams, kernel: KernelApprox) -> np.ndarray:
        x, w, v0 = kernel.nodes, kernel.weights, kernel.v0split
        csum = float(self.c.sum())
        drift = self.a + float(self.c @ (x * v0)) + params.theta * csum
        per_factor = self.b - self.c * x - params.lam * w * csum + 0.5 * params.nu**2 * w * csum**2
        vol = params.nu * csum - params.rho
        return np.concatenate(([drift], per_factor, [vol]))

    def verify(self, params: ModelParams, kernel: KernelApprox) -> None:
        res = self.residuals(params, kernel)
        scale = max(
            1.0,
            abs(self.a),
            float(np.abs(self.b).max(initial=0.0)),
            float(np.abs(self.c).max(initial=0.0)) * float(kernel.nodes.max(initial=1.0)),
        )
        worst = float(np.abs(res).max())
        if worst > CONSTRAINT_TOL * scale:
            raise NumericalError(
                f"stock coefficients violate the consistency equations (residual {worst:.3e})",
                source="pathscheme",
            )


def stock_coefficients(params: ModelParams, kernel: KernelApprox) -> StockCoefficients:
    """Closed-form coefficients loading the full correlation onto the slowest factor."""
    if params.nu == 0:
        raise DegenerateModelError(
            "correlated substep needs nu > 0 (coefficients scale with rho / nu)",
            source="pathscheme",
        )
    x, w = kernel.nodes, kernel.weights
    ratio = params.rho / params.nu
    c = np.zeros(kernel.size)
    c[0] = ratio
    a = -(x[0] * kernel.v0split[0] + params.theta) * ratio
    b = params.lam * w * ratio - 0.5 * w * params.rho**2
    b[0] += ratio * x[0]
    coeffs = StockCoefficients(a=float(a), b=b, c=c)
    coeffs.verify(params, kernel)
    return coeffs


def _clamped(v: np.ndarray, stats: Optional[StepStats]) -> np.ndarray:
    negative = v < 0
    if np.any(negative):
        count = int(np.count_nonzero(negative))
        if stats is not None:
            stats.clamp_events += count
        logger.debug("Clamped %d negative total variances", count)
        return np.maximum(v, 0.0)
    return v


def _bs_log_factor(v: np.ndarray, rho: float, h: float, g) -> np.ndarray:
    share = 1.0 - rho * rho
    return np.sqrt(v * share * h) * g - 0.5 * v * share * h


def bs_substep(
    state: MarketState,
    params: ModelParams,
    kernel: KernelApprox,
    h: float,
    g,
    stats: Optional[StepStats] = None,
) -> MarketState:
    """Exact lognormal move of S driven by the independent noise; V and Y frozen."""
    v = _clamped(state.total_variance(kernel), stats)
    return replace(state, S=state.S * np.exp(_bs_log_factor(v, params.rho, h, g)))


def _w_move(
    state: MarketState,
    prop: VolPropagator,
    coeffs: StockCoefficients,
    u,
    stats: Optional[StepStats],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h = prop.h
    V_new = cir_step(prop, state.V, u, stats)
    Y_new = state.Y + 0.5 * h * (state.V + V_new)
    log_factor = coeffs.a * h + (Y_new - state.Y) @ coeffs.b + (V_new - state.V) @ coeffs.c
    return V_new, Y_new, log_factor


def w_substep(
    state: MarketState,
    prop: VolPropagator,
    coeffs: StockCoefficients,
    h: float,
    u,
    stats: Optional[StepStats] = None,
) -> MarketState:
    if h == 0:
        return state
    if h != prop.h:
        prop = prop.with_step(h)
    V_new, Y_new, log_factor = _w_move(state, prop, coeffs, u, stats)
    return MarketState(S=state.S * np.exp(log_factor), V=V_new, Y=Y_new, t=state.t)


def full_step(
    state: MarketState,
    params: ModelParams,
    prop: VolPropagator,
    coeffs: StockCoefficients,
    u_order,
    u_tri,
    g,
    stats: Optional[StepStats] = None,
) -> MarketState:
    """One randomized-order step of length prop.h.

    u_order <= 1/2 runs the Black-Scholes substep first, so it sees the
    pre-step variance; otherwise it runs second on the updated factors.
    Both substeps only rescale S, which lets the two orders share one pass.
    """
    kernel = prop.kernel
    u_order = np.asarray(u_order, dtype=float)
    V_new, Y_new, log_w = _w_move(state, prop, coeffs, u_tri, stats)
    v_before = state.V @ kernel.weights
    v_after = V_new @ kernel.weights
    v = np.where(u_order <= 0.5, v_before, v_after)
    log_b = _bs_log_factor(_clamped(v, stats), params.rho, prop.h, g)
    return MarketState(
        S=state.S * np.exp(log_w + log_b),
        V=V_new,
        Y=Y_new,
        t=state.t + prop.h,
    )


class EulerPropagator:
    """Factorised (Id + h diag(x) + h lambda 1 w^T) plus the constant drift h (diag(x) v0 + theta)."""

    def __init__(self, params: ModelParams, kernel: KernelApprox, h: float) -> None:
        if h <= 0:
            raise DomainError(f"Euler step must be positive, got {h}", source="pathscheme")
        x, w = kernel.nodes, kernel.weights
        matrix = np.eye(kernel.size) + h * np.diag(x) + h * params.lam * np.outer(np.ones_like(w), w)
        self.params = params
        self.kernel = kernel
        self.h = float(h)
        self.solver = LUSolver(matrix)
        self.shift = h * (x * kernel.v0split + params.theta)


def euler_step(
    state: MarketState,
    params: ModelParams,
    kernel: KernelApprox,
    h: float,
    gW,
    gB,
    prop: Optional[EulerPropagator] = None,
    stats: Optional[StepStats] = None,
) -> MarketState:
    """Drift-implicit Euler step with positive-part truncation in the diffusion.

    The price uses the multiplicative Euler update, floored at zero; every
    path the floor absorbs is counted in stats.floor_events. Y takes the
    left-endpoint rule.
    """
    if prop is None or prop.h != h:
        prop = EulerPropagator(params, kernel, h)
    gW = np.asarray(gW, dtype=float)
    gB = np.asarray(gB, dtype=float)
    root = np.sqrt(np.maximum(state.V @ kernel.weights, 0.0))
    sqrt_h = math.sqrt(h)
    rhs = state.V + prop.shift + (params.nu * root * sqrt_h * gW)[:, None]
    V_new = prop.solver.solve(rhs.T).T
    dZ = params.rho * sqrt_h * gW + math.sqrt(1.0 - params.rho**2) * sqrt_h * gB
    S_new = state.S * (1.0 + root * dZ)
    floored = S_new < 0
    if np.any(floored):
        count = int(np.count_nonzero(floored))
        if stats is not None:
            stats.floor_events += count
        logger.debug("Floored %d negative Euler prices at zero", count)
        S_new = np.maximum(S_new, 0.0)
    return MarketState(S=S_new, V=V_new, Y=state.Y + h * state.V, t=state.t + h)


@dataclass
class PathBatch:
    """What a batch of simulated paths leaves behind for the payoffs."""

    times: np.ndarray
    S: np.ndarray
    V: Optional[np.ndarray] = None
    log_integral: Optional[np.ndarray] = None
    stats: StepStats = field(default_factory=StepStats)

    @property
    def paths(self) -> int:
        return self.S.shape[0]

    @classmethod
    def concat(cls, batches: Sequence["PathBatch"]) -> "PathBatch":
        if not batches:
            raise DomainError("nothing to concatenate", source="pathscheme")
        stats = StepStats()
        for b in batches:
            stats.merge(b.stats)
        first = batches[0]
        return cls(
            times=first.times,
            S=np.concatenate([b.S for b in batches], axis=0),
            V=None if first.V is None else np.concatenate([b.V for b in batches], axis=0),
            log_integral=None
            if first.log_integral is None
            else np.concatenate([b.log_integral for b in batches], axis=0),
            stats=stats,
        )


class Simulator:
    """Runs one scheme over a uniform grid of `steps` steps up to `horizon`.

    Uniform layout per step: (u_tri, u_gauss, u_order) for the weak scheme,
    (u_W, u_B) for Euler, step-major.
    """

    def __init__(
        self,
        params: ModelParams,
        kernel: KernelApprox,
        scheme: SchemeName = "weak",
        steps: int = 32,
        horizon: Optional[float] = None,
    ) -> None:
        if steps < 1:
            raise DomainError(f"need at least one step, got {steps}", source="pathscheme")
        if scheme not in ("weak", "euler"):
            raise DomainError(f"unknown scheme {scheme!r}", source="pathscheme")
        if not math.isclose(kernel.initial_variance, params.V0, rel_tol=1e-10, abs_tol=1e-300):
            raise DomainError(
                f"kernel split carries V0 = {kernel.initial_variance!r}, model has {params.V0!r}",
                source="pathscheme",
            )
        self.params = params
        self.kernel = kernel
        self.scheme = scheme
        self.steps = int(steps)
        self.horizon = float(params.T if horizon is None else horizon)
        self.h = self.horizon / self.steps
        if scheme == "weak":
            self.coeffs = stock_coefficients(params, kernel)
            self.prop = VolPropagator(kernel, params.lam, params.theta, params.nu, self.h)
        else:
            self.euler = EulerPropagator(params, kernel, self.h)

    @property
    def per_step(self) -> int:
        return 3 if self.scheme == "weak" else 2

    @property
    def dimension(self) -> int:
        return self.per_step * self.steps

    def _record_steps(self, record_steps: Optional[Iterable[int]]) -> np.ndarray:
        rec = np.array([self.steps] if record_steps is None else list(record_steps), dtype=int)
        if rec.size == 0 or rec.min() < 0 or rec.max() > self.steps or np.any(np.diff(rec) <= 0):
            raise DomainError(
                f"record steps must be increasing within [0, {self.steps}], got {rec.tolist()}",
                source="pathscheme",
            )
        return rec

    def step(self, state: MarketState, block: np.ndarray, stats: StepStats) -> MarketState:
        """Advance by one step using that step's uniforms, shape (n, per_step)."""
        if self.scheme == "weak":
            return full_step(
                state,
                self.params,
                self.prop,
                self.coeffs,
                u_order=block[:, 2],
                u_tri=block[:, 0],
                g=normals(block[:, 1]),
                stats=stats,
            )
        return euler_step(
            state,
            self.params,
            self.kernel,
            self.h,
            normals(block[:, 0]),
            normals(block[:, 1]),
            prop=self.euler,
            stats=stats,
        )

    def run(
        self,
        uniforms: np.ndarray,
        record_steps: Optional[Iterable[int]] = None,
        track_log_integral: bool = False,
        track_factors: bool = False,
    ) -> PathBatch:
        uniforms = np.atleast_2d(np.asarray(uniforms, dtype=float))
        if uniforms.shape[1] != self.dimension:
            raise DomainError(
                f"expected {self.dimension} uniforms per path, got {uniforms.shape[1]}",
                source="pathscheme",
            )
        rec = self._record_steps(record_steps)
        n = uniforms.shape[0]
        r = self.params.r
        times = rec * self.h
        S_out = np.empty((n, len(rec)))
        V_out = np.empty((n, len(rec), self.kernel.size)) if track_factors else None
        stats = StepStats()
        state = MarketState.initial(self.params, self.kernel, n)

        log_sum = np.zeros(n) if track_log_integral else None
        prev_log = np.log(state.S) if track_log_integral else None
        slot = 0
        for m in range(self.steps + 1):
            if m > 0:
                block = uniforms[:, (m - 1) * self.per_step : m * self.per_step]
                state = self.step(state, block, stats)
                if log_sum is not None:
                    with np.errstate(divide="ignore"):
                        cur_log = np.log(state.S) + r * m * self.h
                    log_sum += 0.5 * self.h * (prev_log + cur_log)
                    prev_log = cur_log
            if slot < len(rec) and rec[slot] == m:
                S_out[:, slot] = state.S * math.exp(r * m * self.h)
                if V_out is not None:
                    V_out[:, slot] = state.V
                slot += 1

        if stats.clamp_events:
            logger.warning("%d clamp events in %d paths", stats.clamp_events, n)
        if stats.floor_events:
            # log S is -inf on these paths from the floor on
            logger.warning("%d Euler prices floored at zero in %d paths", stats.floor_events, n)
        return PathBatch(
            times=times,
            S=S_out,
            V=V_out,
            log_integral=log_sum,
            stats=stats,
        )

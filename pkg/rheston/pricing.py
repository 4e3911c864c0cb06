"""Payoffs and estimators on simulated paths.

All estimators report an EstimateWithCI whose interval comes from the
spread of the per-replicate means (one replicate per random shift). With a
single replicate the path-level spread is used instead.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.optimize import brentq
from scipy.stats import norm, t as student_t

from .config import ModelParams
from .errors import ConfigError, DomainError, InversionError
from .kernel import KernelApprox
from .pathscheme import PathBatch, SchemeName, Simulator
from .randstream import RandomStream, StreamSpec
from .reference import black_scholes_price
from .volscheme import StepStats
from .worker import run_paths

logger = logging.getLogger(__name__)

Side = Literal["call", "put"]

CONFIDENCE = 0.95
REGRESSION_COND = 1e-10
IV_TOL = 1e-10
IV_MAX_SIGMA = 64.0
ROOT_RTOL = 4 * np.finfo(float).eps


@dataclass(frozen=True)
class EstimateWithCI:
    value: float
    half_width: float
    replicates: int
    std_error: float = 0.0

    def __post_init__(self) -> None:
        if not self.half_width >= 0:
            raise DomainError(f"negative half-width {self.half_width}", source="pricing")

    @property
    def low(self) -> float:
        return self.value - self.half_width

    @property
    def high(self) -> float:
        return self.value + self.half_width


def estimate_from_samples(samples, replicates: int) -> EstimateWithCI:
    """Mean with a 95% interval; samples are ordered replicate-major."""
    x = np.asarray(samples, dtype=float).reshape(-1)
    if x.size == 0:
        raise DomainError("no samples to average", source="pricing")
    if replicates >= 2:
        if x.size % replicates:
            raise DomainError(
                f"{x.size} samples do not split into {replicates} replicates", source="pricing"
            )
        means = x.reshape(replicates, -1).mean(axis=1)
        se = float(means.std(ddof=1)) / math.sqrt(replicates)
        quantile = float(student_t.ppf(0.5 + CONFIDENCE / 2, replicates - 1))
        return EstimateWithCI(float(means.mean()), quantile * se, replicates, se)
    se = float(x.std(ddof=1)) / math.sqrt(x.size) if x.size > 1 else 0.0
    quantile = float(norm.ppf(0.5 + CONFIDENCE / 2))
    return EstimateWithCI(float(x.mean()), quantile * se, 1, se)


@dataclass(frozen=True)
class SmileRequest:
    maturity: float
    log_moneyness: tuple[float, ...]
    side: Side
    scheme: SchemeName
    steps: int
    stream: StreamSpec

    def __post_init__(self) -> None:
        if self.maturity <= 0:
            raise ConfigError(f"maturity must be positive, got {self.maturity}", source="pricing")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}", source="pricing")
        if not np.all(np.isfinite(self.log_moneyness)):
            raise ConfigError("log-moneyness grid must be finite", source="pricing")
        if self.side not in ("call", "put"):
            raise ConfigError(f"side must be call or put, got {self.side!r}", source="pricing")


def vanilla_payoff(S, strikes, side: Side) -> np.ndarray:
    """Payoff matrix (paths, strikes)."""
    diff = np.subtract.outer(np.asarray(S, dtype=float), np.asarray(strikes, dtype=float))
    return np.maximum(diff if side == "call" else -diff, 0.0)


def _simulate(
    simulator: Simulator,
    spec: StreamSpec,
    threads: int,
    batch_size: int,
    stats: Optional[StepStats] = None,
    **kwargs,
) -> PathBatch:
    stream = RandomStream(spec.with_dimension(simulator.dimension))
    batch = run_paths(simulator, stream, batch_size=batch_size, threads=threads, **kwargs)
    if stats is not None:
        stats.merge(batch.stats)
    return batch


def price_european(
    req: SmileRequest,
    params: ModelParams,
    kernel: KernelApprox,
    threads: int = 1,
    batch_size: int = 2048,
    stats: Optional[StepStats] = None,
) -> list[EstimateWithCI]:
    """Discounted prices at K = S0 e^k for every k of the request, from one path batch."""
    sim = Simulator(params, kernel, req.scheme, req.steps, horizon=req.maturity)
    batch = _simulate(sim, req.stream, threads, batch_size, stats)
    strikes = params.S0 * np.exp(np.asarray(req.log_moneyness))
    payoff = vanilla_payoff(batch.S[:, -1], strikes, req.side) * math.exp(-params.r * req.maturity)
    return [estimate_from_samples(payoff[:, j], req.stream.shifts) for j in range(len(strikes))]


def implied_vol(
    price: float,
    forward: float,
    strike: float,
    maturity: float,
    side: Side = "call",
) -> float:
    """Black-Scholes volatility of an undiscounted price.

    Bracketing root search followed by Newton polishing on vega.
    """
    if forward <= 0 or strike <= 0 or maturity <= 0:
        raise DomainError("forward, strike and maturity must be positive", source="pricing")
    if side == "call":
        band = (max(forward - strike, 0.0), forward)
    else:
        band = (max(strike - forward, 0.0), strike)
    if not band[0] < price < band[1]:
        raise InversionError(
            f"price {price!r} outside the no-arbitrage band ({band[0]!r}, {band[1]!r})",
            source="pricing",
            band=band,
        )

    def gap(sigma: float) -> float:
        return black_scholes_price(forward, strike, maturity, sigma, side) - price

    hi = 1.0
    while gap(hi) < 0:
        hi *= 2.0
        if hi > IV_MAX_SIGMA:
            raise InversionError(
                f"no volatility below {IV_MAX_SIGMA} reproduces price {price!r}",
                source="pricing",
                band=band,
            )
    sigma = brentq(gap, 0.0, hi, xtol=1e-14, rtol=ROOT_RTOL, maxiter=200)

    sqrt_t = math.sqrt(maturity)
    for _ in range(3):
        total = sigma * sqrt_t
        if total <= 0:
            break
        d1 = (math.log(forward / strike) + 0.5 * total * total) / total
        vega = forward * norm.pdf(d1) * sqrt_t
        residual = gap(sigma)
        if abs(residual) <= IV_TOL * max(price, 1e-300) or vega <= 0:
            break
        candidate = sigma - residual / vega
        if candidate <= 0 or abs(gap(candidate)) >= abs(residual):
            break
        sigma = candidate
    return float(sigma)


def record_steps_for(maturities: Sequence[float], horizon: float, steps: int) -> list[int]:
    """Grid indices of the maturities; each must fall on a step boundary."""
    h = horizon / steps
    out: list[int] = []
    for T in maturities:
        ratio = T / h
        index = int(round(ratio))
        if index < 1 or index > steps or abs(ratio - index) > 1e-9 * max(1.0, ratio):
            raise ConfigError(
                f"maturity {T:g} is not on the {steps}-step grid of [0, {horizon:g}]",
                source="pricing",
            )
        out.append(index)
    return out


def price_surface(
    maturities: Sequence[float],
    log_moneyness: Sequence[Sequence[float]],
    params: ModelParams,
    kernel: KernelApprox,
    scheme: SchemeName,
    steps: int,
    stream: StreamSpec,
    side: Side = "call",
    threads: int = 1,
    batch_size: int = 2048,
    stats: Optional[StepStats] = None,
) -> list[list[EstimateWithCI]]:
    """One simulation to max(maturities) serves every row of the surface."""
    if len(maturities) != len(log_moneyness):
        raise ConfigError("one log-moneyness row per maturity is required", source="pricing")
    order = np.argsort(maturities, kind="stable")
    sorted_T = [float(maturities[i]) for i in order]
    if any(b <= a for a, b in zip(sorted_T[:-1], sorted_T[1:])):
        raise ConfigError("maturities must be distinct", source="pricing")
    horizon = sorted_T[-1]
    rec = record_steps_for(sorted_T, horizon, steps)
    sim = Simulator(params, kernel, scheme, steps, horizon=horizon)
    batch = _simulate(sim, stream, threads, batch_size, stats, record_steps=rec)

    rows: list[list[EstimateWithCI]] = [[] for _ in maturities]
    for slot, i in enumerate(order):
        T = float(maturities[i])
        strikes = params.S0 * np.exp(np.asarray(log_moneyness[i], dtype=float))
        payoff = vanilla_payoff(batch.S[:, slot], strikes, side) * math.exp(-params.r * T)
        rows[i] = [estimate_from_samples(payoff[:, j], stream.shifts) for j in range(len(strikes))]
    return rows


def price_geometric_asian(
    strikes: Sequence[float],
    params: ModelParams,
    kernel: KernelApprox,
    scheme: SchemeName,
    steps: int,
    stream: StreamSpec,
    threads: int = 1,
    batch_size: int = 2048,
    stats: Optional[StepStats] = None,
) -> list[EstimateWithCI]:
    """Calls on exp of the time-averaged log price, averaged by the trapezoidal rule."""
    sim = Simulator(params, kernel, scheme, steps)
    batch = _simulate(sim, stream, threads, batch_size, stats, track_log_integral=True)
    G = np.exp(batch.log_integral / params.T)
    payoff = vanilla_payoff(G, strikes, "call") * math.exp(-params.r * params.T)
    return [estimate_from_samples(payoff[:, j], stream.shifts) for j in range(len(strikes))]


# Longstaff-Schwartz


def _exponents(N: int, degree: int) -> list[tuple[int, ...]]:
    if N < 1 or degree < 1:
        raise DomainError(f"need N >= 1 and degree >= 1, got N={N}, d={degree}", source="pricing")
    weights = (1, 2) + (3,) * (N - 1)
    ranges = [range(degree // w + 1) for w in weights]
    out = [
        e
        for e in itertools.product(*ranges)
        if 0 < sum(e) and sum(w * d for w, d in zip(weights, e)) <= degree
    ]
    return sorted(out, key=lambda e: (sum(w * d for w, d in zip(weights, e)), e[::-1]))


def feature_count(N: int, degree: int) -> int:
    """Monomials of positive weighted degree at most `degree`, constant excluded."""
    return len(_exponents(N, degree))


@dataclass(frozen=True)
class FeatureBasis:
    """Monomials in s = (S-K)/K, v = w.V - V0 and v^i = w_i (V^i - v0^i) for i < N.

    s carries weight 1, v weight 2 and every v^i weight 3.
    """

    N: int
    degree: int

    @cached_property
    def exponents(self) -> list[tuple[int, ...]]:
        return _exponents(self.N, self.degree)

    def __len__(self) -> int:
        return len(self.exponents)

    def variables(self, S: np.ndarray, V: np.ndarray, strike: float, kernel: KernelApprox) -> np.ndarray:
        """Normalised state (n, N+1) for prices S (n,) and factors V (n, N)."""
        s = (S - strike) / strike
        v = V @ kernel.weights - kernel.initial_variance
        parts = [s[:, None], v[:, None]]
        if self.N > 1:
            parts.append((V[:, : self.N - 1] - kernel.v0split[: self.N - 1]) * kernel.weights[: self.N - 1])
        return np.concatenate(parts, axis=1)

    def evaluate(self, S: np.ndarray, V: np.ndarray, strike: float, kernel: KernelApprox) -> np.ndarray:
        """Design matrix with a leading intercept column."""
        z = self.variables(S, V, strike, kernel)
        cols = [np.ones(len(S))]
        for e in self.exponents:
            col = np.ones(len(S))
            for j, p in enumerate(e):
                if p:
                    col = col * z[:, j] ** p
            cols.append(col)
        return np.column_stack(cols)


@dataclass(frozen=True)
class BermudanResult:
    price: EstimateWithCI
    in_sample: EstimateWithCI
    european: EstimateWithCI
    exercise_times: tuple[float, ...] = field(default=())


def _regress(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    coef, *_ = scipy.linalg.lstsq(X, y, cond=REGRESSION_COND, lapack_driver="gelsy", check_finite=False)
    return coef


def price_bermudan_put(
    strike: float,
    exercise_count: int,
    params: ModelParams,
    kernel: KernelApprox,
    scheme: SchemeName,
    steps: int,
    degree: int,
    stream: StreamSpec,
    threads: int = 1,
    batch_size: int = 2048,
    stats: Optional[StepStats] = None,
) -> BermudanResult:
    """Longstaff-Schwartz put exercisable at T k / exercise_count, k = 1..exercise_count.

    In every replicate the first half of the points trains the exercise rule
    (in-the-money paths only) and the second half prices with it frozen.
    """
    if exercise_count < 1 or steps % exercise_count:
        raise ConfigError(
            f"steps M={steps} must be a multiple of the {exercise_count} exercise dates",
            source="pricing",
        )
    if stream.points_per_shift < 2 or stream.points_per_shift % 2:
        raise ConfigError("POINTS_PER_SHIFT must be even to split regression and pricing halves", source="pricing")

    stride = steps // exercise_count
    rec = [stride * k for k in range(1, exercise_count + 1)]
    sim = Simulator(params, kernel, scheme, steps)
    batch = _simulate(sim, stream, threads, batch_size, stats, record_steps=rec, track_factors=True)
    times = batch.times
    discount = np.exp(-params.r * times)
    payoff = np.maximum(strike - batch.S, 0.0) * discount

    offset = np.arange(batch.paths) % stream.points_per_shift
    train = offset < stream.points_per_shift // 2
    test = ~train
    basis = FeatureBasis(kernel.size, degree)

    # backward pass on the training half
    cash = payoff[train, -1].copy()
    rules: list[Optional[np.ndarray]] = [None] * exercise_count
    S_train, V_train = batch.S[train], batch.V[train]
    for k in range(exercise_count - 2, -1, -1):
        itm = payoff[train, k] > 0
        if np.count_nonzero(itm) == 0:
            continue
        X = basis.evaluate(S_train[itm, k], V_train[itm, k], strike, kernel)
        coef = _regress(X, cash[itm])
        rules[k] = coef
        exercise = np.zeros_like(itm)
        exercise[itm] = payoff[train, k][itm] >= X @ coef
        cash[exercise] = payoff[train, k][exercise]
    replicates = stream.shifts
    in_sample = estimate_from_samples(cash, replicates)

    # forward pass on the pricing half with the frozen rule
    S_test, V_test, pay_test = batch.S[test], batch.V[test], payoff[test]
    value = pay_test[:, -1].copy()
    alive = np.ones(len(value), dtype=bool)
    for k in range(exercise_count - 1):
        coef = rules[k]
        if coef is None:
            continue
        candidates = alive & (pay_test[:, k] > 0)
        if not np.any(candidates):
            continue
        X = basis.evaluate(S_test[candidates, k], V_test[candidates, k], strike, kernel)
        stop = np.zeros_like(alive)
        stop[candidates] = pay_test[candidates, k] >= X @ coef
        value[stop] = pay_test[stop, k]
        alive &= ~stop

    price = estimate_from_samples(value, replicates)
    european = estimate_from_samples(pay_test[:, -1], replicates)
    logger.info(
        "Bermudan put K=%g, %d dates, d=%d (%d features): %.6f +- %.6f (in-sample %.6f, European %.6f)",
        strike,
        exercise_count,
        degree,
        len(basis),
        price.value,
        price.half_width,
        in_sample.value,
        european.value,
    )
    return BermudanResult(price, in_sample, european, tuple(float(t) for t in times))

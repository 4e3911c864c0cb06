"""Experiment drivers behind the CLI subcommands.

Each driver turns a RunConfig into an ExperimentResult: a table of rows
with fixed columns plus the run statistics that go to the JSON sidecar.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.stats import norm

from .config import RunConfig
from .errors import ConfigError, InversionError, PresetLookupError
from .kernel import KernelApprox, l1_error, minimal_steps, preset_from_key
from .pricing import (
    EstimateWithCI,
    SmileRequest,
    feature_count,
    implied_vol,
    price_bermudan_put,
    price_european,
    price_geometric_asian,
    price_surface,
)
from .reference import HestonEquivalent, heston_reference_smile
from .volscheme import StepStats

logger = logging.getLogger(__name__)

NAN = float("nan")
NOT_APPLICABLE = "n/a"


@dataclass
class ExperimentResult:
    experiment: str
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)
    wall_times: dict[int, float] = field(default_factory=dict)
    stats: StepStats = field(default_factory=StepStats)
    notes: dict[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class RateEstimate:
    M_from: int
    M_to: int
    rate: float
    half_width: float


ErrorInput = Union[float, tuple[float, float], EstimateWithCI]


def _split_error(e: ErrorInput) -> tuple[float, float]:
    if isinstance(e, EstimateWithCI):
        return e.value, e.half_width
    if isinstance(e, tuple):
        return float(e[0]), float(e[1])
    return float(e), 0.0


def estimate_rate(errors: Mapping[int, ErrorInput]) -> list[RateEstimate]:
    """Local rates log2(e_M / e_2M) on a doubling grid.

    The interval follows from first-order propagation of the error
    intervals: d(log2 e) = de / (e ln 2).
    """
    if len(errors) < 2:
        raise ConfigError("rate estimation needs at least two step counts", source="experiments")
    grid = sorted(errors)
    out: list[RateEstimate] = []
    for m1, m2 in zip(grid[:-1], grid[1:]):
        if m2 != 2 * m1:
            raise ConfigError(
                f"step counts must double for rate estimation, got {m1} -> {m2}",
                source="experiments",
            )
        e1, c1 = _split_error(errors[m1])
        e2, c2 = _split_error(errors[m2])
        if e1 > 0 and e2 > 0:
            rate = math.log2(e1 / e2)
            hw = (c1 / e1 + c2 / e2) / math.log(2.0)
        else:
            rate, hw = NAN, NAN
        out.append(RateEstimate(m1, m2, rate, hw))
    return out


def iv_with_ci(
    est: EstimateWithCI,
    forward: float,
    strike: float,
    maturity: float,
    rate: float,
    side: str,
) -> tuple[float, float]:
    """Implied vol of a discounted estimate and its interval mapped through vega.

    Returns NaN where the estimate sits outside the no-arbitrage band.
    """
    growth = math.exp(rate * maturity)
    try:
        sigma = implied_vol(est.value * growth, forward, strike, maturity, side)  # type: ignore[arg-type]
    except InversionError as exc:
        logger.debug("No implied vol at K=%g, T=%g: %s", strike, maturity, exc)
        return NAN, NAN
    total = sigma * math.sqrt(maturity)
    d1 = (math.log(forward / strike) + 0.5 * total * total) / total
    vega = forward * norm.pdf(d1) * math.sqrt(maturity)
    return sigma, (est.half_width * growth / vega if vega > 0 else NAN)


def max_relative_error(
    values: Sequence[tuple[float, float]],
    reference: Sequence[tuple[float, float]],
) -> tuple[float, float]:
    """Largest |x - x_ref| / x_ref over a grid, with its interval half-width."""
    worst, worst_hw = -1.0, NAN
    for (x, hw), (ref, ref_hw) in zip(values, reference):
        if not (np.isfinite(x) and np.isfinite(ref)) or ref == 0:
            continue
        err = abs(x - ref) / abs(ref)
        if err > worst:
            worst = err
            worst_hw = (hw + (ref_hw if np.isfinite(ref_hw) else 0.0)) / abs(ref)
    if worst < 0:
        return NAN, NAN
    return worst, worst_hw


def _warn_coarse(cfg: RunConfig, kernel: KernelApprox, horizon: float) -> None:
    floor = minimal_steps(kernel, horizon)
    for M in cfg.steps:
        if M < floor:
            logger.warning(
                "M=%d is below %d steps, where T/M drops under 1/max(x); expect pre-asymptotic errors",
                M,
                floor,
            )


def _smile_vols(
    cfg: RunConfig,
    estimates: Sequence[EstimateWithCI],
    maturity: float,
    log_moneyness: Sequence[float],
) -> list[tuple[float, float]]:
    m = cfg.model
    forward = m.S0 * math.exp(m.r * maturity)
    return [
        iv_with_ci(est, forward, m.S0 * math.exp(k), maturity, m.r, cfg.side)
        for est, k in zip(estimates, log_moneyness)
    ]


def _surface_grid(cfg: RunConfig) -> tuple[list[float], list[list[float]]]:
    maturities = list(cfg.maturities) or [cfg.model.T]
    rows = [[k * math.sqrt(T) for k in cfg.log_moneyness] for T in maturities]
    return maturities, rows


def _timed(result: ExperimentResult, M: int, fn: Callable):
    start = time.perf_counter()
    out = fn()
    result.wall_times[M] = result.wall_times.get(M, 0.0) + time.perf_counter() - start
    return out


def run_smile(cfg: RunConfig) -> ExperimentResult:
    kernel = cfg.kernel()
    m = cfg.model
    _warn_coarse(cfg, kernel, m.T)
    result = ExperimentResult(
        "smile",
        ("scheme", "N", "M", "seed", "maturity", "log_moneyness", "strike", "price", "price_ci", "iv", "iv_ci"),
    )
    for M in cfg.steps:
        req = SmileRequest(m.T, cfg.log_moneyness, cfg.side, cfg.scheme, M, cfg.stream(1))  # type: ignore[arg-type]
        estimates = _timed(
            result,
            M,
            lambda: price_european(req, m, kernel, cfg.threads, cfg.batch_size, result.stats),
        )
        vols = _smile_vols(cfg, estimates, m.T, cfg.log_moneyness)
        for k, est, (iv, iv_hw) in zip(cfg.log_moneyness, estimates, vols):
            result.rows.append(
                (cfg.scheme, kernel.size, M, cfg.seed, m.T, k, m.S0 * math.exp(k), est.value, est.half_width, iv, iv_hw)
            )
    return result


def run_surface(cfg: RunConfig) -> ExperimentResult:
    kernel = cfg.kernel()
    m = cfg.model
    maturities, grid = _surface_grid(cfg)
    _warn_coarse(cfg, kernel, max(maturities))
    result = ExperimentResult(
        "surface",
        ("scheme", "N", "M", "seed", "maturity", "log_moneyness", "strike", "price", "price_ci", "iv", "iv_ci"),
    )
    for M in cfg.steps:
        surface = _timed(
            result,
            M,
            lambda: price_surface(
                maturities, grid, m, kernel, cfg.scheme, M, cfg.stream(1), cfg.side,  # type: ignore[arg-type]
                cfg.threads, cfg.batch_size, result.stats,
            ),
        )
        for T, ks, row in zip(maturities, grid, surface):
            for k, est, (iv, iv_hw) in zip(ks, row, _smile_vols(cfg, row, T, ks)):
                result.rows.append(
                    (cfg.scheme, kernel.size, M, cfg.seed, T, k, m.S0 * math.exp(k), est.value, est.half_width, iv, iv_hw)
                )
    return result


def run_asian(cfg: RunConfig) -> ExperimentResult:
    kernel = cfg.kernel()
    m = cfg.model
    _warn_coarse(cfg, kernel, m.T)
    strikes = [m.S0 * math.exp(k) for k in cfg.log_moneyness]
    result = ExperimentResult(
        "asian",
        ("scheme", "N", "M", "seed", "maturity", "log_moneyness", "strike", "price", "price_ci"),
    )
    for M in cfg.steps:
        estimates = _timed(
            result,
            M,
            lambda: price_geometric_asian(
                strikes, m, kernel, cfg.scheme, M, cfg.stream(1),  # type: ignore[arg-type]
                cfg.threads, cfg.batch_size, result.stats,
            ),
        )
        for k, K, est in zip(cfg.log_moneyness, strikes, estimates):
            result.rows.append((cfg.scheme, kernel.size, M, cfg.seed, m.T, k, K, est.value, est.half_width))
    return result


def run_bermudan(cfg: RunConfig) -> ExperimentResult:
    kernel = cfg.kernel()
    m = cfg.model
    _warn_coarse(cfg, kernel, m.T)
    result = ExperimentResult(
        "bermudan",
        (
            "scheme", "N", "M", "seed", "strike", "exercise_dates", "degree", "features",
            "price", "price_ci", "in_sample", "in_sample_ci", "european", "european_ci",
        ),
    )
    features = feature_count(kernel.size, cfg.degree)
    for M in cfg.steps:
        res = _timed(
            result,
            M,
            lambda: price_bermudan_put(
                cfg.strike, cfg.exercise_dates, m, kernel, cfg.scheme, M, cfg.degree,  # type: ignore[arg-type]
                cfg.stream(1), cfg.threads, cfg.batch_size, result.stats,
            ),
        )
        result.rows.append(
            (
                cfg.scheme, kernel.size, M, cfg.seed, cfg.strike, cfg.exercise_dates, cfg.degree, features,
                res.price.value, res.price.half_width, res.in_sample.value, res.in_sample.half_width,
                res.european.value, res.european.half_width,
            )
        )
    return result


def _product_values(cfg: RunConfig, kernel: KernelApprox, M: int, stats: StepStats) -> list[tuple[float, float]]:
    """Values compared across M: implied vols for smiles and surfaces, prices for Asians."""
    m = cfg.model
    if cfg.product == "smile":
        req = SmileRequest(m.T, cfg.log_moneyness, cfg.side, cfg.scheme, M, cfg.stream(1))  # type: ignore[arg-type]
        est = price_european(req, m, kernel, cfg.threads, cfg.batch_size, stats)
        return _smile_vols(cfg, est, m.T, cfg.log_moneyness)
    if cfg.product == "surface":
        maturities, grid = _surface_grid(cfg)
        surface = price_surface(
            maturities, grid, m, kernel, cfg.scheme, M, cfg.stream(1), cfg.side,  # type: ignore[arg-type]
            cfg.threads, cfg.batch_size, stats,
        )
        out: list[tuple[float, float]] = []
        for T, ks, row in zip(maturities, grid, surface):
            out.extend(_smile_vols(cfg, row, T, ks))
        return out
    strikes = [m.S0 * math.exp(k) for k in cfg.log_moneyness]
    est = price_geometric_asian(
        strikes, m, kernel, cfg.scheme, M, cfg.stream(1), cfg.threads, cfg.batch_size, stats  # type: ignore[arg-type]
    )
    return [(e.value, e.half_width) for e in est]


def _fourier_values(cfg: RunConfig, kernel: KernelApprox) -> list[tuple[float, float]]:
    if cfg.product == "asian":
        raise ConfigError("REFERENCE=fourier covers European smiles and surfaces only", source="experiments")
    h = HestonEquivalent.from_kernel(cfg.model, kernel)
    m = cfg.model
    if cfg.product == "smile":
        maturities, grid = [m.T], [list(cfg.log_moneyness)]
    else:
        maturities, grid = _surface_grid(cfg)
    out: list[tuple[float, float]] = []
    for T, ks in zip(maturities, grid):
        prices = heston_reference_smile(h, ks, T, m.r, cfg.side)  # type: ignore[arg-type]
        ests = [EstimateWithCI(float(p), 0.0, 1) for p in prices]
        out.extend(_smile_vols(cfg, ests, T, ks))
    return out


def run_convergence(cfg: RunConfig) -> ExperimentResult:
    kernel = cfg.kernel()
    horizon = max(cfg.maturities) if cfg.product == "surface" and cfg.maturities else cfg.model.T
    _warn_coarse(cfg, kernel, horizon)
    result = ExperimentResult(
        "convergence",
        ("product", "scheme", "N", "M", "seed", "reference", "max_rel_error", "error_ci", "rate", "rate_ci"),
    )
    if cfg.reference == "fourier":
        reference = _fourier_values(cfg, kernel)
    else:
        start = time.perf_counter()
        reference = _product_values(cfg, kernel, cfg.reference_steps, result.stats)
        result.notes["reference_seconds"] = time.perf_counter() - start
    result.notes["reference"] = cfg.reference if cfg.reference == "fourier" else f"self@M={cfg.reference_steps}"

    errors: dict[int, tuple[float, float]] = {}
    for M in cfg.steps:
        values = _timed(result, M, lambda: _product_values(cfg, kernel, M, result.stats))
        errors[M] = max_relative_error(values, reference)
        logger.info("M=%d: max relative error %.4e +- %.2e", M, *errors[M])

    rates = {r.M_to: r for r in estimate_rate(errors)} if len(errors) >= 2 else {}
    for M in cfg.steps:
        rate = rates.get(M)
        result.rows.append(
            (
                cfg.product, cfg.scheme, kernel.size, M, cfg.seed, result.notes["reference"],
                errors[M][0], errors[M][1],
                NAN if rate is None else rate.rate,
                NAN if rate is None else rate.half_width,
            )
        )
    return result


def _kernel_targets(cfg: RunConfig) -> list[tuple[str, KernelApprox, float]]:
    if not cfg.presets:
        label = cfg.preset if cfg.nodes is None and cfg.preset else "custom"
        return [(label, cfg.kernel(), cfg.model.H)]
    out = []
    for key in cfg.presets:
        try:
            k = preset_from_key(key, V0=cfg.model.V0)
        except PresetLookupError as exc:
            raise ConfigError(f"PRESETS: {exc}", source="experiments") from exc
        out.append((key, k, float(key.split("/")[0][1:])))
    return out


def run_kernel_error(cfg: RunConfig) -> ExperimentResult:
    """L1 kernel distances.

    Nothing is simulated, so scheme and M read n/a; the quadrature is
    deterministic and carries a zero interval.
    """
    result = ExperimentResult(
        "kernel-error",
        ("kernel", "scheme", "N", "M", "seed", "H", "horizon", "l1_error", "l1_error_ci"),
    )
    for label, k, H in _kernel_targets(cfg):
        for T in cfg.horizons:
            error = l1_error(k, H, T)
            result.rows.append((label, NOT_APPLICABLE, k.size, NOT_APPLICABLE, cfg.seed, H, T, error, 0.0))
    return result


RUNNERS: dict[str, Callable[[RunConfig], ExperimentResult]] = {
    "smile": run_smile,
    "surface": run_surface,
    "asian": run_asian,
    "bermudan": run_bermudan,
    "convergence": run_convergence,
    "kernel-error": run_kernel_error,
}


def run_experiment(cfg: RunConfig) -> ExperimentResult:
    runner: Optional[Callable[[RunConfig], ExperimentResult]] = RUNNERS.get(cfg.experiment)
    if runner is None:
        raise ConfigError(f"unknown experiment {cfg.experiment!r}", source="experiments")
    logger.info("Running %s (%s scheme, M=%s, seed=%d)", cfg.experiment, cfg.scheme, list(cfg.steps), cfg.seed)
    return runner(cfg)

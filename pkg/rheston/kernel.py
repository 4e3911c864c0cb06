"""Fractional kernel, its sum-of-exponentials surrogates and the shipped presets."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.special import gamma

from .errors import DomainError, NumericalError, PresetLookupError

logger = logging.getLogger(__name__)

# Published node/weight pairs, keyed by (H, horizon key, N).
PRESETS: dict[tuple[float, str, int], tuple[tuple[float, ...], tuple[float, ...]]] = {
    (0.1, "T1", 1): ((2.1649,), (2.6233,)),
    (0.1, "T1", 2): ((0.05, 8.7171), (0.76733, 3.2294)),
    (0.1, "T1", 3): ((0.033333, 2.2416, 46.831), (0.55543, 1.1110, 6.0858)),
    (0.1, "T1", 4): (
        (0.025, 0.70001, 9.5947, 175.39),
        (0.17062, 0.99789, 1.6726, 10.298),
    ),
    (-0.2, "T1", 2): ((0.49172, 60.452), (0.70202, 33.927)),
    (-0.2, "T1", 3): ((0.63781, 9.6554, 681.37), (0.66909, 3.3694, 184.50)),
    (0.1, "surface16", 2): ((0.20000, 34.868), (1.3360, 5.6228)),
    (0.1, "surface16", 3): ((0.083995, 5.6485, 118.01), (0.80386, 1.6079, 8.8078)),
    (0.1, "asian", 2): ((0.070711, 12.328), (0.88143, 3.7096)),
    (0.1, "asian", 3): ((0.041997, 2.8243, 59.003), (0.60921, 1.2185, 6.6750)),
}

GRADING_RATIO = 0.5
GRADING_FLOOR = 1e-12
SIGN_SCAN_POINTS = 4000
# brentq rejects rtol below 4 eps
ROOT_RTOL = 4 * np.finfo(float).eps


@dataclass(frozen=True, eq=False)
class KernelApprox:
    nodes: np.ndarray
    weights: np.ndarray
    v0split: np.ndarray

    def __post_init__(self) -> None:
        nodes = np.asarray(self.nodes, dtype=float).reshape(-1)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        v0split = np.asarray(self.v0split, dtype=float).reshape(-1)
        if not (len(nodes) == len(weights) == len(v0split) >= 1):
            raise DomainError(
                f"nodes, weights and v0split must share a length >= 1, got "
                f"{len(nodes)}, {len(weights)}, {len(v0split)}",
                source="kernel",
            )
        if nodes[0] < 0 or np.any(np.diff(nodes) <= 0):
            raise DomainError(
                f"nodes must be non-negative and strictly increasing: {nodes}",
                source="kernel",
            )
        if np.any(weights <= 0):
            raise DomainError(f"weights must be positive: {weights}", source="kernel")
        for name, arr in (("nodes", nodes), ("weights", weights), ("v0split", v0split)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_pairs(
        cls,
        nodes: Iterable[float],
        weights: Iterable[float],
        V0: float,
        v0split: Optional[Sequence[float]] = None,
    ) -> "KernelApprox":
        """Sort (node, weight) pairs by node and attach an initial split.

        Without an explicit split every factor starts at V0 / sum(w).
        """
        x = np.asarray(list(nodes), dtype=float)
        w = np.asarray(list(weights), dtype=float)
        if x.shape != w.shape:
            raise DomainError("nodes and weights differ in length", source="kernel")
        order = np.argsort(x, kind="stable")
        x, w = x[order], w[order]
        if v0split is None:
            v0 = np.full_like(w, V0 / w.sum())
        else:
            v0 = np.asarray(v0split, dtype=float)[order]
            if v0.shape != w.shape:
                raise DomainError("v0split differs in length from nodes", source="kernel")
            total = float(w @ v0)
            if not math.isclose(total, V0, rel_tol=1e-12, abs_tol=1e-300):
                raise DomainError(
                    f"dot(weights, v0split) = {total!r} does not match V0 = {V0!r}",
                    source="kernel",
                )
        return cls(nodes=x, weights=w, v0split=v0)

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def initial_variance(self) -> float:
        return float(self.weights @ self.v0split)

    def with_split(self, v0split: Sequence[float]) -> "KernelApprox":
        return KernelApprox.from_pairs(
            self.nodes, self.weights, self.initial_variance, v0split
        )


def _check_hurst(H: float) -> None:
    if not -0.5 < H <= 0.5:
        raise DomainError(f"Hurst parameter must lie in (-1/2, 1/2], got {H}", source="kernel")


def fractional_kernel(t, H: float):
    """K(t) = t^(H-1/2) / Gamma(H+1/2); t may be a scalar or an array."""
    _check_hurst(H)
    arr = np.asarray(t, dtype=float)
    if np.any(arr <= 0):
        raise DomainError("fractional kernel is only defined for t > 0", source="kernel")
    out = arr ** (H - 0.5) / gamma(H + 0.5)
    return float(out) if out.ndim == 0 else out


def approx_eval(k: KernelApprox, t):
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0):
        raise DomainError("K^N is evaluated on t >= 0 only", source="kernel")
    out = np.exp(-np.multiply.outer(arr, k.nodes)) @ k.weights
    return float(out) if np.ndim(out) == 0 else out


def _approx_integral(k: KernelApprox, a: float, b: float) -> float:
    # closed form of the integral of K^N over [a, b]
    total = 0.0
    for x, w in zip(k.nodes, k.weights):
        if x == 0.0:
            total += w * (b - a)
        else:
            total += w * (math.exp(-x * a) - math.exp(-x * b)) / x
    return total


def _panel_edges(T: float) -> np.ndarray:
    floor = GRADING_FLOOR * T
    edges = [T]
    while edges[-1] * GRADING_RATIO > floor:
        edges.append(edges[-1] * GRADING_RATIO)
    edges.append(floor)
    return np.array(sorted(edges))


def _sign_changes(f, lo: float, hi: float) -> list[float]:
    grid = np.geomspace(lo, hi, SIGN_SCAN_POINTS)
    values = np.array([f(t) for t in grid])
    roots: list[float] = []
    for i in np.nonzero(np.sign(values[:-1]) * np.sign(values[1:]) < 0)[0]:
        roots.append(brentq(f, grid[i], grid[i + 1], xtol=1e-15 * grid[i + 1], rtol=ROOT_RTOL))
    return roots


def l1_error(k: KernelApprox, H: float, T: float) -> float:
    """Integral of |K - K^N| over [0, T].

    The innermost panel [0, 1e-12 T] is integrated in closed form; above it
    panels are graded geometrically towards 0 and split at every sign change
    of K - K^N, so each quad call sees a smooth integrand of constant sign.
    """
    if T <= 0:
        raise DomainError(f"horizon must be positive, got {T}", source="kernel")
    _check_hurst(H)

    def diff(t: float) -> float:
        return t ** (H - 0.5) / gamma(H + 0.5) - _approx_integrand(k, t)

    floor = GRADING_FLOOR * T
    head = floor ** (H + 0.5) / gamma(H + 1.5) - _approx_integral(k, 0.0, floor)
    total = abs(head)

    breaks = np.union1d(_panel_edges(T), _sign_changes(diff, floor, T))
    for a, b in zip(breaks[:-1], breaks[1:]):
        if b <= a:
            continue
        value, err, info, *rest = quad(diff, a, b, epsabs=1e-15, epsrel=1e-10, limit=200, full_output=1)
        if rest:
            raise NumericalError(
                f"quadrature of |K - K^N| on [{a:.3e}, {b:.3e}] did not converge: "
                f"{rest[0]} (estimate {value:.6e}, error {err:.2e}, "
                f"{info['last']} subintervals)",
                source="kernel",
            )
        total += abs(value)
    return total


def _approx_integrand(k: KernelApprox, t: float) -> float:
    return float(np.dot(k.weights, np.exp(-k.nodes * t)))


def available_presets() -> list[str]:
    return [preset_key(H, key, N) for (H, key, N) in sorted(PRESETS)]


def preset_key(H: float, horizon_key: str, N: int) -> str:
    return f"H{H:g}/{horizon_key}/N{N}"


def preset(
    H: float,
    horizon_key: str,
    N: int,
    V0: float = 0.02,
    v0split: Optional[Sequence[float]] = None,
) -> KernelApprox:
    try:
        nodes, weights = PRESETS[(round(float(H), 10), horizon_key, int(N))]
    except KeyError:
        raise PresetLookupError(
            f"no preset for H={H:g}, horizon={horizon_key!r}, N={N}; "
            f"available: {', '.join(available_presets())}",
            source="kernel",
        ) from None
    logger.debug("Resolved preset %s", preset_key(H, horizon_key, N))
    return KernelApprox.from_pairs(nodes, weights, V0, v0split)


def preset_from_key(
    key: str, V0: float = 0.02, v0split: Optional[Sequence[float]] = None
) -> KernelApprox:
    """Resolve a key such as ``H0.1/T1/N2``."""
    parts = key.strip().split("/")
    if len(parts) != 3 or not parts[0].startswith("H") or not parts[2].startswith("N"):
        raise PresetLookupError(
            f"malformed preset key {key!r}; expected e.g. 'H0.1/T1/N2'", source="kernel"
        )
    try:
        H = float(parts[0][1:])
        N = int(parts[2][1:])
    except ValueError:
        raise PresetLookupError(f"malformed preset key {key!r}", source="kernel") from None
    return preset(H, parts[1], N, V0=V0, v0split=v0split)


def minimal_steps(k: KernelApprox, T: float) -> int:
    """Smallest step count with T/M < 1/max(x), where second order sets in."""
    largest = float(k.nodes[-1])
    if largest <= 0:
        return 1
    return int(math.floor(T * largest)) + 1

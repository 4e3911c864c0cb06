"""Closed-form and semi-analytic prices used as exact references."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.special import ndtr

from .config import ModelParams
from .errors import DomainError, NumericalError
from .kernel import KernelApprox

logger = logging.getLogger(__name__)

Side = Literal["call", "put"]

# below this vol-of-vol the variance path is treated as deterministic
SIGMA_FLOOR = 1e-8


def black_scholes_price(F: float, K: float, T: float, sigma: float, side: Side = "call") -> float:
    """Undiscounted Black-Scholes value on the forward F."""
    if side not in ("call", "put"):
        raise DomainError(f"side must be call or put, got {side!r}", source="reference")
    if K <= 0:
        return F - K if side == "call" else 0.0
    total = sigma * math.sqrt(max(T, 0.0))
    if total <= 0:
        return max(F - K, 0.0) if side == "call" else max(K - F, 0.0)
    d1 = (math.log(F / K) + 0.5 * total * total) / total
    d2 = d1 - total
    if side == "call":
        return float(F * ndtr(d1) - K * ndtr(d2))
    return float(K * ndtr(-d2) - F * ndtr(-d1))


@dataclass(frozen=True)
class HestonEquivalent:
    """Classical Heston parameters of a one-factor approximation."""

    kappa: float
    theta_bar: float
    sigma: float
    rho: float
    V0: float
    S0: float = 1.0

    @classmethod
    def from_kernel(cls, params: ModelParams, kernel: KernelApprox) -> "HestonEquivalent":
        if kernel.size != 1:
            raise DomainError(
                f"a Heston equivalent exists for one factor only, got N={kernel.size}",
                source="reference",
            )
        x1, w1 = float(kernel.nodes[0]), float(kernel.weights[0])
        kappa = x1 + w1 * params.lam
        if kappa <= 0:
            raise DomainError("mean reversion x1 + w1 lambda must be positive", source="reference")
        return cls(
            kappa=kappa,
            theta_bar=(x1 * params.V0 + w1 * params.theta) / kappa,
            sigma=w1 * params.nu,
            rho=params.rho,
            V0=params.V0,
            S0=params.S0,
        )

    def integrated_variance(self, T: float) -> float:
        """Expected integrated variance, exact when sigma = 0."""
        if self.kappa == 0:
            return self.V0 * T
        return self.theta_bar * T + (self.V0 - self.theta_bar) * (1.0 - math.exp(-self.kappa * T)) / self.kappa

    def char_func(self, u, T: float):
        """E[exp(i u log(S_T / F))], in the formulation without branch jumps."""
        u = np.asarray(u, dtype=complex)
        k, s, rho = self.kappa, self.sigma, self.rho
        beta = k - rho * s * 1j * u
        d = np.sqrt(beta * beta + s * s * (1j * u + u * u))
        g = (beta - d) / (beta + d)
        edt = np.exp(-d * T)
        C = k * self.theta_bar / (s * s) * ((beta - d) * T - 2.0 * np.log((1.0 - g * edt) / (1.0 - g)))
        D = (beta - d) / (s * s) * (1.0 - edt) / (1.0 - g * edt)
        return np.exp(C + D * self.V0)


def heston_call_fourier(h: HestonEquivalent, K: float, T: float, r: float = 0.0) -> float:
    """Discounted call price by a single damped Fourier integral on the forward."""
    if T <= 0:
        raise DomainError(f"maturity must be positive, got {T}", source="reference")
    F = h.S0 * math.exp(r * T)
    discount = math.exp(-r * T)
    if K <= 0:
        return discount * (F - K)
    if h.sigma < SIGMA_FLOOR:
        vol = math.sqrt(max(h.integrated_variance(T), 0.0) / T)
        return discount * black_scholes_price(F, K, T, vol, "call")

    k = math.log(K / F)

    def integrand(u: float) -> float:
        return float((np.exp(-1j * u * k) * h.char_func(u - 0.5j, T)).real / (u * u + 0.25))

    value, err, info, *rest = quad(integrand, 0.0, np.inf, epsabs=1e-12, epsrel=1e-10, limit=500, full_output=1)
    if rest:
        raise NumericalError(
            f"Heston Fourier integral did not converge at K={K}, T={T}: {rest[0]} "
            f"(estimate {value:.6e}, error {err:.2e})",
            source="reference",
        )
    return discount * (F - math.sqrt(F * K) / math.pi * value)


def heston_put_fourier(h: HestonEquivalent, K: float, T: float, r: float = 0.0) -> float:
    """Put from the call by parity, never from a second integral."""
    F = h.S0 * math.exp(r * T)
    return heston_call_fourier(h, K, T, r) - math.exp(-r * T) * (F - K)


def heston_reference_smile(
    h: HestonEquivalent,
    log_moneyness: Sequence[float],
    T: float,
    r: float = 0.0,
    side: Side = "call",
) -> np.ndarray:
    """Discounted prices at strikes K = S0 e^k."""
    price = heston_call_fourier if side == "call" else heston_put_fourier
    out = np.array([price(h, h.S0 * math.exp(k), T, r) for k in log_moneyness])
    logger.debug("Fourier reference for %d strikes at T=%g", len(out), T)
    return out

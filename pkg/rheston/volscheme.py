"""Second-order weak propagator for the factor variance V.

One step is the Strang composition D(h/2) . S(h) . D(h/2): D is the exact
flow of the linear drift, S replaces the common diffusion increment of all
factors by a three-point law matching the first moments of dY = nu wbar sqrt(Y) dW.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DomainError, NumericalError
from .kernel import KernelApprox
from .smallmat import DriftMatrix, mat_exp

logger = logging.getLogger(__name__)

ATOM_SHIFT = (6.0 + math.sqrt(3.0)) / 4.0
DEGENERATE_TOL = 1e-14
RENORMALIZE_TOL = 1e-9


@dataclass
class StepStats:
    """Per-run counters shared by the steppers of one batch."""

    clamp_events: int = 0
    floor_events: int = 0

    def merge(self, other: "StepStats") -> None:
        self.clamp_events += other.clamp_events
        self.floor_events += other.floor_events


@dataclass(frozen=True)
class TrinomialLaw:
    """Atoms x1 <= x2 <= x3 with probabilities p1..p3; arrays broadcast over paths."""

    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray

    def moment(self, k: int) -> np.ndarray:
        return self.p1 * self.x1**k + self.p2 * self.x2**k + self.p3 * self.x3**k


def target_moments(x, z) -> tuple:
    """First three moments of Y_h for dY = sqrt(Y) dW scaled so that z = nu^2 wbar^2 h."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    m1 = x
    m2 = x * x + x * z
    m3 = x**3 + 3.0 * x * x * z + 1.5 * x * z * z
    return m1, m2, m3


def trinomial_law(x, z) -> TrinomialLaw:
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any(x < 0) or np.any(z < 0):
        raise DomainError("trinomial law needs x >= 0 and z >= 0", source="volscheme")
    x, z = np.broadcast_arrays(x, z)
    degenerate = (z <= DEGENERATE_TOL * np.maximum(x, 1.0)) | (x <= DEGENERATE_TOL)
    # Substitute harmless values on degenerate entries, overwritten below.
    xs = np.where(degenerate, 1.0, x)
    zs = np.where(degenerate, 1.0, z)

    # atoms as offsets d from x; d1 * d3 = -3xz exactly
    root = np.sqrt((3.0 * xs + ATOM_SHIFT**2 * zs) * zs)
    d3 = ATOM_SHIFT * zs + root
    d2 = (ATOM_SHIFT - 0.75) * zs
    d1 = -3.0 * xs * zs / d3
    x3 = xs + d3
    x2 = xs + d2
    # (x + Az)^2 - (3x + A^2 z) z = x^2 + (2A - 3) x z, divided by x3 to avoid cancellation
    x1 = (xs * xs + (2.0 * ATOM_SHIFT - 3.0) * xs * zs) / x3

    # Lagrange weights against the central moments (1, 0, xz)
    c2 = xs * zs
    p1 = (c2 + d2 * d3) / ((d1 - d2) * (d1 - d3))
    p2 = (c2 + d1 * d3) / ((d2 - d1) * (d2 - d3))
    p3 = (c2 + d1 * d2) / ((d3 - d1) * (d3 - d2))

    total = p1 + p2 + p3
    gap = np.abs(total - 1.0)
    if np.any(gap > RENORMALIZE_TOL):
        worst = int(np.argmax(gap))
        raise NumericalError(
            f"trinomial probabilities sum to {total.flat[worst]!r} "
            f"at x={xs.flat[worst]!r}, z={zs.flat[worst]!r}",
            source="volscheme",
        )
    p1, p2, p3 = p1 / total, p2 / total, p3 / total

    one, zero = np.ones_like(x), np.zeros_like(x)
    return TrinomialLaw(
        x1=np.where(degenerate, x, x1),
        x2=np.where(degenerate, x, x2),
        x3=np.where(degenerate, x, x3),
        p1=np.where(degenerate, one, p1),
        p2=np.where(degenerate, zero, p2),
        p3=np.where(degenerate, zero, p3),
    )


def sample_trinomial(law: TrinomialLaw, u) -> np.ndarray:
    """Inverse-CDF draw: one uniform per path."""
    u = np.asarray(u, dtype=float)
    return np.where(u < law.p1, law.x1, np.where(u < law.p1 + law.p2, law.x2, law.x3))


def redistribute(weights: np.ndarray, v: np.ndarray, y_hat) -> np.ndarray:
    """Shift every factor by the common Q = (y_hat - w.v) / wbar so that w.result = y_hat."""
    v = np.asarray(v, dtype=float)
    q = (np.asarray(y_hat, dtype=float) - v @ weights) / weights.sum()
    return v + np.expand_dims(q, -1)


class VolPropagator:
    """Cached half-step drift maps plus the trinomial diffusion for a fixed step h."""

    def __init__(
        self,
        kernel: KernelApprox,
        lam: float,
        theta: float,
        nu: float,
        h: float,
    ) -> None:
        if h < 0:
            raise DomainError(f"step must be non-negative, got {h}", source="volscheme")
        self.kernel = kernel
        self.lam = float(lam)
        self.theta = float(theta)
        self.nu = float(nu)
        self.h = float(h)
        self.drift = DriftMatrix(kernel, lam, theta)
        self.wbar = float(kernel.weights.sum())
        self.z = self.nu**2 * self.wbar**2 * self.h
        self.half_exp, self.half_shift = self.drift.propagator(self.h / 2.0)
        self._spot_check()

    def _spot_check(self) -> None:
        full = mat_exp(self.drift.A, self.h)
        composed = self.half_exp @ self.half_exp
        scale = max(float(np.abs(full).max()), 1.0)
        if float(np.abs(composed - full).max()) > 1e-10 * scale:
            raise NumericalError(
                "cached half-step drift map is inconsistent with e^(Ah)", source="volscheme"
            )

    def with_step(self, h: float) -> "VolPropagator":
        return VolPropagator(self.kernel, self.lam, self.theta, self.nu, h)


def drift_step(p: VolPropagator, v, h: float) -> np.ndarray:
    """e^(Ah) v + h phi_1(Ah) b."""
    if h < 0:
        raise DomainError(f"step must be non-negative, got {h}", source="volscheme")
    if h == p.h / 2.0:
        return np.asarray(v, dtype=float) @ p.half_exp.T + p.half_shift
    return p.drift.propagate(v, h)


def stochastic_step(
    p: VolPropagator,
    v,
    h: float,
    u,
    stats: Optional[StepStats] = None,
) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    total = v @ p.kernel.weights
    negative = total < 0
    if np.any(negative):
        # V+ = max(V, 0) wherever the law needs a non-negative start
        count = int(np.count_nonzero(negative))
        if stats is not None:
            stats.clamp_events += count
        logger.debug("Clamped %d negative total variances", count)
        total_law = np.maximum(total, 0.0)
    else:
        total_law = total
    z = p.nu**2 * p.wbar**2 * h
    law = trinomial_law(total_law, z)
    y_hat = sample_trinomial(law, u)
    return redistribute(p.kernel.weights, v, y_hat)


def cir_step(p: VolPropagator, v, u, stats: Optional[StepStats] = None) -> np.ndarray:
    half = p.h / 2.0
    v = drift_step(p, v, half)
    v = stochastic_step(p, v, p.h, u, stats)
    return drift_step(p, v, half)

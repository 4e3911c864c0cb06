"""Dense N x N algebra for the factor drift A = -lambda 1 w^T - diag(x)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NumericalError, SolveError
from .kernel import KernelApprox


def _check_finite(A: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(A)):
        raise NumericalError(f"{name} has non-finite entries", source="smallmat")


def mat_exp(A, h: float) -> np.ndarray:
    """e^(A h) by Pade scaling-and-squaring."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if h < 0:
        raise NumericalError(f"step must be non-negative, got {h}", source="smallmat")
    _check_finite(A, "matrix")
    if h == 0:
        return np.eye(A.shape[0])
    out = scipy.linalg.expm(A * h)
    _check_finite(out, "e^(Ah)")
    return out


def phi1(A, h: float) -> np.ndarray:
    """h * phi_1(A h), read off the top-right block of exp([[Ah, hI], [0, 0]]).

    Defined for singular A; equals A^-1 (e^(Ah) - I) whenever A is invertible.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if h < 0:
        raise NumericalError(f"step must be non-negative, got {h}", source="smallmat")
    _check_finite(A, "matrix")
    n = A.shape[0]
    if h == 0:
        return np.zeros((n, n))
    block = np.zeros((2 * n, 2 * n))
    block[:n, :n] = A * h
    block[:n, n:] = np.eye(n) * h
    out = scipy.linalg.expm(block)[:n, n:]
    _check_finite(out, "phi_1")
    return out


@dataclass(frozen=True, eq=False)
class LUSolver:
    """Partial-pivot LU of a fixed matrix, reused across right-hand sides."""

    matrix: np.ndarray
    _lu: tuple = field(init=False, repr=False)

    def __post_init__(self) -> None:
        M = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if M.shape[0] != M.shape[1]:
            raise SolveError(f"matrix must be square, got {M.shape}", source="smallmat")
        _check_finite(M, "matrix")
        lu, piv = scipy.linalg.lu_factor(M, check_finite=False)
        pivots = np.abs(np.diag(lu))
        scale = max(float(np.abs(M).max()), np.finfo(float).tiny)
        if pivots.min() <= np.finfo(float).eps * scale * M.shape[0]:
            raise SolveError(
                f"matrix is singular to working precision (smallest pivot {pivots.min():.3e})",
                source="smallmat",
            )
        object.__setattr__(self, "matrix", M)
        object.__setattr__(self, "_lu", (lu, piv))

    def solve(self, rhs) -> np.ndarray:
        """Solve for a vector rhs (N,) or a stack of columns (N, k).

        Safe to call from several threads: LAPACK gets private copies of the
        factors and of the right-hand side.
        """
        lu, piv = self._lu
        b = np.array(rhs, dtype=float, order="F")
        return scipy.linalg.lu_solve((lu.copy(), piv.copy()), b, check_finite=False)


def solve(M, rhs) -> np.ndarray:
    return LUSolver(M).solve(rhs)


class DriftMatrix:
    """A and b of the linear factor drift dZ = (A Z + b) dt."""

    def __init__(self, kernel: KernelApprox, lam: float, theta: float) -> None:
        self.kernel = kernel
        self.lam = float(lam)
        self.theta = float(theta)
        x, w = kernel.nodes, kernel.weights
        self.A = -self.lam * np.outer(np.ones_like(w), w) - np.diag(x)
        self.b = self.theta + x * kernel.v0split
        self._cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}
        self._verify()

    @property
    def dimension(self) -> int:
        return self.kernel.size

    def _verify(self) -> None:
        x, w, v0 = self.kernel.nodes, self.kernel.weights, self.kernel.v0split
        n = len(x)
        for i in range(n):
            for j in range(n):
                expected = -self.lam * w[j] - (x[i] if i == j else 0.0)
                if self.A[i, j] != expected:
                    raise NumericalError(f"A[{i}][{j}] mismatch", source="smallmat")
        if not np.allclose(self.b, self.theta + x * v0, rtol=0, atol=0):
            raise NumericalError("b mismatch", source="smallmat")

    def propagator(self, h: float) -> tuple[np.ndarray, np.ndarray]:
        """(e^(Ah), h phi_1(Ah) b), cached per step size."""
        key = float(h)
        if key not in self._cache:
            E = mat_exp(self.A, key)
            c = phi1(self.A, key) @ self.b
            E.setflags(write=False)
            c.setflags(write=False)
            self._cache[key] = (E, c)
        return self._cache[key]

    def propagate(self, v: np.ndarray, h: float) -> np.ndarray:
        """Exact drift flow; v is (N,) or a path stack (n, N)."""
        E, c = self.propagator(h)
        return np.asarray(v, dtype=float) @ E.T + c

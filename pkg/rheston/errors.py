from __future__ import annotations

from typing import Optional


class RoughHestonError(Exception):
    """Base error; `source` names the module that raised it."""

    def __init__(self, message: str, source: Optional[str] = None) -> None:
        super().__init__(message)
        self.source = source


class ConfigError(RoughHestonError):
    pass


class DomainError(RoughHestonError, ValueError):
    pass


class DegenerateModelError(DomainError):
    pass


class NumericalError(RoughHestonError, ArithmeticError):
    pass


class SolveError(NumericalError):
    pass


class InversionError(NumericalError):
    def __init__(
        self,
        message: str,
        band: tuple[float, float] = (float("nan"), float("nan")),
        source: Optional[str] = None,
    ) -> None:
        super().__init__(message, source=source)
        self.band = band


class PresetLookupError(RoughHestonError, LookupError):
    pass


class SequenceExhaustedError(RoughHestonError):
    pass

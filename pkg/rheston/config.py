from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping, Optional

import numpy as np
from dotenv import dotenv_values

from .errors import ConfigError, PresetLookupError
from .kernel import KernelApprox, preset_from_key
from .randstream import StreamSpec

Experiment = Literal["smile", "surface", "asian", "bermudan", "convergence", "kernel-error"]
Scheme = Literal["weak", "euler"]

EXPERIMENTS: tuple[str, ...] = ("smile", "surface", "asian", "bermudan", "convergence", "kernel-error")
SCHEMES: tuple[str, ...] = ("weak", "euler")
ENV_PREFIX = "RHESTON_"


@dataclass(frozen=True)
class ModelParams:
    theta: float = 0.02
    lam: float = 0.3
    nu: float = 0.3
    rho: float = -0.7
    H: float = 0.1
    V0: float = 0.02
    S0: float = 1.0
    r: float = 0.0
    T: float = 1.0

    def __post_init__(self) -> None:
        if self.lam < 0 or self.theta < 0 or self.nu < 0:
            raise ConfigError("lambda, theta and nu must be non-negative", source="config")
        if not -1.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [-1, 1], got {self.rho}", source="config")
        if not -0.5 < self.H <= 0.5:
            raise ConfigError(f"H must lie in (-1/2, 1/2], got {self.H}", source="config")
        if self.V0 < 0 or self.S0 <= 0 or self.T <= 0:
            raise ConfigError("need V0 >= 0, S0 > 0 and T > 0", source="config")


@dataclass(frozen=True)
class RunConfig:
    experiment: Experiment
    model: ModelParams = field(default_factory=ModelParams)
    preset: Optional[str] = "H0.1/T1/N2"
    nodes: Optional[tuple[float, ...]] = None
    weights: Optional[tuple[float, ...]] = None
    v0split: Optional[tuple[float, ...]] = None
    scheme: Scheme = "weak"
    steps: tuple[int, ...] = (8, 16, 32)
    rng: str = "sobol"
    shifts: int = 8
    points_per_shift: int = 4096
    seed: int = 0
    threads: int = 1
    batch_size: int = 2048
    log_moneyness: tuple[float, ...] = tuple(np.linspace(-0.1, 0.05, 16))
    side: str = "call"
    maturities: tuple[float, ...] = ()
    strike: float = 105.0
    exercise_dates: int = 4
    degree: int = 6
    product: str = "smile"
    reference: str = "self"
    reference_steps: int = 2048
    horizons: tuple[float, ...] = (1.0,)
    presets: tuple[str, ...] = ()
    output_dir: str = "output"
    log_level: str = "INFO"
    source_path: Optional[str] = None

    def stream(self, dimension: int) -> StreamSpec:
        return StreamSpec(self.rng, dimension, self.shifts, self.points_per_shift, self.seed)  # type: ignore[arg-type]

    def kernel(self) -> KernelApprox:
        if self.nodes is not None or self.weights is not None:
            if self.nodes is None or self.weights is None:
                raise ConfigError("NODES and WEIGHTS must be given together", source="config")
            return KernelApprox.from_pairs(self.nodes, self.weights, self.model.V0, self.v0split)
        if not self.preset:
            raise ConfigError("either PRESET or NODES/WEIGHTS is required", source="config")
        try:
            return preset_from_key(self.preset, V0=self.model.V0, v0split=self.v0split)
        except PresetLookupError as exc:
            raise ConfigError(f"PRESET: {exc}", source="config") from exc


class _Reader:
    """Typed access to merged file/environment values with key-level diagnostics."""

    def __init__(self, values: Mapping[str, Optional[str]], path: Optional[str]) -> None:
        self.values = values
        self.path = path
        self._lines = _key_lines(path) if path else {}

    def where(self, key: str) -> str:
        if key in self._lines:
            return f"{self.path}:{self._lines[key]}: {key}"
        return key

    def raw(self, key: str) -> Optional[str]:
        value = self.values.get(key)
        if value is None or not value.strip():
            return None
        return value.strip()

    def _convert(self, key: str, conv, default):
        value = self.raw(key)
        if value is None:
            return default
        try:
            return conv(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{self.where(key)}: cannot parse {value!r} ({exc})", source="config") from None

    def str(self, key: str, default):
        return self._convert(key, str, default)

    def float(self, key: str, default):
        return self._convert(key, float, default)

    def int(self, key: str, default):
        return self._convert(key, int, default)

    def floats(self, key: str, default):
        return self._convert(key, _parse_floats, default)

    def ints(self, key: str, default):
        return self._convert(key, lambda v: tuple(int(x) for x in _parse_csv(v)), default)

    def strs(self, key: str, default):
        return self._convert(key, _parse_csv, default)

    def grid(self, key: str, default):
        return self._convert(key, _parse_grid, default)


def _key_lines(path: str) -> dict[str, int]:
    lines: dict[str, int] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError:
        return lines
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped and not stripped.startswith("#") and "=" in stripped:
            key = stripped.split("=", 1)[0].strip()
            if key.startswith("export "):
                key = key[len("export "):].strip()
            lines[key] = number
    return lines


def _parse_csv(value: Optional[str]) -> tuple[str, ...]:
    if not value:
        return tuple()
    return tuple(u.strip() for u in value.split(",") if u.strip())


def _parse_floats(value: Optional[str]) -> tuple[float, ...]:
    return tuple(float(x) for x in _parse_csv(value))


def _parse_grid(value: str) -> tuple[float, ...]:
    """Either a comma list or ``lo:hi:count`` for a linearly spaced grid."""
    if ":" in value:
        lo, hi, count = value.split(":")
        return tuple(float(x) for x in np.linspace(float(lo), float(hi), int(count)))
    return _parse_floats(value)


def load_config(
    path: Optional[str] = None,
    experiment: Optional[str] = None,
    overrides: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Read a flat KEY=value scenario file.

    Precedence: explicit overrides, then RHESTON_-prefixed environment
    variables, then the file, then the built-in defaults.
    """
    values: dict[str, Optional[str]] = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}", source="config")
        values.update(dotenv_values(path))
    for key, value in os.environ.items():
        if key.startswith(ENV_PREFIX):
            values[key[len(ENV_PREFIX):]] = value
    if overrides:
        values.update(overrides)
    r = _Reader(values, path)

    declared = r.str("EXPERIMENT", None)
    if experiment is not None and declared is not None and declared != experiment:
        raise ConfigError(
            f"{r.where('EXPERIMENT')}: file is for {declared!r}, not {experiment!r}", source="config"
        )
    kind = experiment or declared
    if kind is None:
        raise ConfigError("EXPERIMENT is required", source="config")
    if kind not in EXPERIMENTS:
        raise ConfigError(f"{r.where('EXPERIMENT')}: unknown experiment {kind!r}", source="config")

    defaults = ModelParams()
    model = ModelParams(
        theta=r.float("THETA", defaults.theta),
        lam=r.float("LAMBDA", defaults.lam),
        nu=r.float("NU", defaults.nu),
        rho=r.float("RHO", defaults.rho),
        H=r.float("HURST", defaults.H),
        V0=r.float("V0", defaults.V0),
        S0=r.float("S0", defaults.S0),
        r=r.float("RATE", defaults.r),
        T=r.float("MATURITY", defaults.T),
    )

    base = RunConfig(experiment=kind)  # type: ignore[arg-type]
    nodes = r.floats("NODES", None)
    cfg = RunConfig(
        experiment=kind,  # type: ignore[arg-type]
        model=model,
        preset=None if nodes is not None else r.str("PRESET", base.preset),
        nodes=nodes,
        weights=r.floats("WEIGHTS", None),
        v0split=r.floats("V0SPLIT", None),
        scheme=r.str("SCHEME", base.scheme),
        steps=r.ints("STEPS", base.steps),
        rng=r.str("RNG", base.rng),
        shifts=r.int("SHIFTS", base.shifts),
        points_per_shift=r.int("POINTS_PER_SHIFT", base.points_per_shift),
        seed=r.int("SEED", base.seed),
        threads=r.int("THREADS", base.threads),
        batch_size=r.int("BATCH_SIZE", base.batch_size),
        log_moneyness=r.grid("LOG_MONEYNESS", base.log_moneyness),
        side=r.str("SIDE", base.side),
        maturities=r.grid("MATURITIES", base.maturities),
        strike=r.float("STRIKE", base.strike),
        exercise_dates=r.int("EXERCISE_DATES", base.exercise_dates),
        degree=r.int("DEGREE", base.degree),
        product=r.str("PRODUCT", base.product),
        reference=r.str("REFERENCE", base.reference),
        reference_steps=r.int("REFERENCE_STEPS", base.reference_steps),
        horizons=r.floats("HORIZONS", base.horizons),
        presets=r.strs("PRESETS", base.presets),
        output_dir=r.str("OUTPUT_DIR", base.output_dir),
        log_level=r.str("LOG_LEVEL", base.log_level).upper(),
        source_path=path,
    )
    _validate(cfg, r)
    return cfg


def _validate(cfg: RunConfig, r: _Reader) -> None:
    if cfg.scheme not in SCHEMES:
        raise ConfigError(f"{r.where('SCHEME')}: unknown scheme {cfg.scheme!r}", source="config")
    if cfg.rng not in ("pseudo", "sobol"):
        raise ConfigError(f"{r.where('RNG')}: expected pseudo or sobol, got {cfg.rng!r}", source="config")
    if cfg.side not in ("call", "put"):
        raise ConfigError(f"{r.where('SIDE')}: expected call or put, got {cfg.side!r}", source="config")
    if not cfg.steps or any(m < 1 for m in cfg.steps):
        raise ConfigError(f"{r.where('STEPS')}: every step count must be >= 1", source="config")
    if list(cfg.steps) != sorted(cfg.steps):
        raise ConfigError(f"{r.where('STEPS')}: step counts must be sorted ascending", source="config")
    if cfg.threads < 1 or cfg.batch_size < 1:
        raise ConfigError("THREADS and BATCH_SIZE must be >= 1", source="config")
    if cfg.shifts < 1 or cfg.points_per_shift < 1:
        raise ConfigError("SHIFTS and POINTS_PER_SHIFT must be >= 1", source="config")
    if cfg.product not in ("smile", "surface", "asian"):
        raise ConfigError(f"{r.where('PRODUCT')}: unknown product {cfg.product!r}", source="config")
    if cfg.reference not in ("self", "fourier"):
        raise ConfigError(f"{r.where('REFERENCE')}: expected self or fourier", source="config")
    if not all(np.isfinite(cfg.log_moneyness)):
        raise ConfigError(f"{r.where('LOG_MONEYNESS')}: grid must be finite", source="config")
    if cfg.experiment != "kernel-error" or not cfg.presets:
        cfg.kernel()

"""Adaptation plans: which blocks get wider receptive fields, how, and when.

A plan is the JSON-serializable declaration consumed by the network and
the sampler: per-block widening factors realized by tap spreading or by
calibrated kernel enlargement, the block set reverted to original
weights inside the guidance base model, a global attention widening
factor, and the schedule parameters (tau, progressive, step count).
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from .errors import ConfigError
from .redilation import DilationSchedule

__all__ = [
    "VALID_BLOCKS",
    "AdaptationPlan",
    "DispersedSpec",
    "RedilatedSpec",
    "default_operator",
    "resolve_operators",
]

VALID_BLOCKS = ("DB0", "DB1", "DB2", "DB3", "MB", "UB0", "UB1", "UB2", "UB3")

_PLAN_KEYS = {
    "redilated", "dispersed", "noise_damped", "progressive",
    "tau", "steps", "guidance", "attention_d",
}


def _check_block(name: str) -> str:
    if name not in VALID_BLOCKS:
        raise ConfigError(f"unknown block name {name!r}; valid: {', '.join(VALID_BLOCKS)}")
    return name


def _check_factor(block: str, d: float) -> float:
    d = float(d)
    if not math.isfinite(d) or d < 1.0:
        raise ConfigError(f"widening factor for {block} must be finite and >= 1, got {d}")
    return d


@dataclass(frozen=True)
class RedilatedSpec:
    """One block whose kernels get their taps spread by factor d."""

    block: str
    d: float

    def __post_init__(self) -> None:
        _check_block(self.block)
        object.__setattr__(self, "d", _check_factor(self.block, self.d))


@dataclass(frozen=True)
class DispersedSpec:
    """One block whose kernels are enlarged by a calibrated operator.

    ``operator`` optionally names a stored operator file; when absent a
    default operator is solved on demand.
    """

    block: str
    d: float
    operator: Optional[str] = None

    def __post_init__(self) -> None:
        _check_block(self.block)
        object.__setattr__(self, "d", _check_factor(self.block, self.d))


@dataclass(frozen=True)
class AdaptationPlan:
    redilated: tuple = ()
    dispersed: tuple = ()
    noise_damped: tuple = ()
    progressive: bool = False
    tau: int = 0
    steps: int = 50
    guidance: float = 7.5
    attention_d: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "redilated", tuple(self.redilated))
        object.__setattr__(self, "dispersed", tuple(self.dispersed))
        object.__setattr__(self, "noise_damped", tuple(self.noise_damped))
        seen = set()
        for spec in (*self.redilated, *self.dispersed):
            if spec.block in seen:
                raise ConfigError(f"block {spec.block} adapted more than once")
            seen.add(spec.block)
        for name in self.noise_damped:
            _check_block(name)
        if not (isinstance(self.attention_d, int) and self.attention_d >= 1):
            raise ConfigError(f"attention_d must be an integer >= 1, got {self.attention_d!r}")
        if not math.isfinite(self.guidance):
            raise ConfigError(f"guidance must be finite, got {self.guidance}")
        try:
            self.schedule()
        except Exception as exc:
            raise ConfigError(f"invalid schedule parameters: {exc}") from exc

    def factors(self) -> dict:
        return {spec.block: spec.d for spec in (*self.redilated, *self.dispersed)}

    def schedule(self) -> DilationSchedule:
        return DilationSchedule(
            factors=self.factors(),
            tau=self.tau,
            progressive=self.progressive,
            total_steps=self.steps,
        )

    def is_noise_damped(self) -> bool:
        return bool(self.noise_damped)

    def base_plan(self) -> "AdaptationPlan":
        """The guidance base model: this plan with every adaptation inside
        the noise-damped block set reverted to original convolutions."""
        damped = set(self.noise_damped)
        return AdaptationPlan(
            redilated=tuple(s for s in self.redilated if s.block not in damped),
            dispersed=tuple(s for s in self.dispersed if s.block not in damped),
            noise_damped=(),
            progressive=self.progressive,
            tau=self.tau,
            steps=self.steps,
            guidance=self.guidance,
            attention_d=self.attention_d,
        )

    def to_dict(self) -> dict:
        dispersed = []
        for s in self.dispersed:
            entry = {"block": s.block, "d": s.d}
            if s.operator is not None:
                entry["operator"] = s.operator
            dispersed.append(entry)
        return {
            "redilated": [{"block": s.block, "d": s.d} for s in self.redilated],
            "dispersed": dispersed,
            "noise_damped": list(self.noise_damped),
            "progressive": self.progressive,
            "tau": self.tau,
            "steps": self.steps,
            "guidance": self.guidance,
            "attention_d": self.attention_d,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AdaptationPlan":
        if not isinstance(data, dict):
            raise ConfigError(f"plan must be a JSON object, got {type(data).__name__}")
        unknown = set(data) - _PLAN_KEYS
        if unknown:
            raise ConfigError(f"unknown plan keys: {', '.join(sorted(unknown))}")
        try:
            redilated = tuple(
                RedilatedSpec(e["block"], e["d"]) for e in data.get("redilated", [])
            )
            dispersed = tuple(
                DispersedSpec(e["block"], e["d"], e.get("operator"))
                for e in data.get("dispersed", [])
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed adaptation entry: {exc}") from exc
        return cls(
            redilated=redilated,
            dispersed=dispersed,
            noise_damped=tuple(data.get("noise_damped", [])),
            progressive=bool(data.get("progressive", False)),
            tau=int(data.get("tau", 0)),
            steps=int(data.get("steps", 50)),
            guidance=float(data.get("guidance", 7.5)),
            attention_d=data.get("attention_d", 1),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "AdaptationPlan":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"plan is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "AdaptationPlan":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@functools.lru_cache(maxsize=None)
def default_operator(dilation: int):
    """Stock enlargement operator for 3x3 kernels at an integer scale,
    solved once on the default white-noise calibration and cached."""
    from .dispersion import CalibrationSet, solve_dispersion

    enlarged = dilation * 2 + 1
    size = max(16, 2 * enlarged + 3)
    calib = CalibrationSet.white_noise(count=64, size=size, seed=0)
    return solve_dispersion(3, enlarged, dilation, 1.0, calib)


def resolve_operators(plan: AdaptationPlan, base_dir: Optional[Union[str, Path]] = None) -> dict:
    """Build the block -> enlargement-operator map a dispersed plan needs.

    Entries with an explicit operator path load it from disk (relative
    paths resolve against base_dir); the rest get a solved-on-demand
    default for 3x3 kernels at the entry's rounded-up factor, cached per
    dilation so repeated plans reuse the solve.
    """
    from .dispersion import DispersionOperator

    operators: dict = {}
    for spec in plan.dispersed:
        if spec.operator is not None:
            path = Path(spec.operator)
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            operators[spec.block] = DispersionOperator.load(path)
        else:
            operators[spec.block] = default_operator(math.ceil(spec.d))
    return operators

"""Re-dilated convolution for frozen weights.

A kernel trained at one feature-map resolution keeps its learned weights
but has its taps spread apart at inference time, widening the receptive
field by an integer factor without touching a single parameter.  The
fractional variant reaches non-integer widening factors by resampling
the feature map around an integer-dilated convolution.  A schedule
restricts the widening to the early, structure-forming sampling steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, NamedTuple, Optional

import numpy as np

from .errors import ParameterError
from .tensorcore import Kernel, PadSpec, conv2d, interp_to, scaled_dims

__all__ = [
    "DilationSchedule",
    "StretchInfo",
    "fractional_redilated_conv",
    "redilated_conv",
    "schedule_eval",
    "stretch_params",
]


def redilated_conv(
    h: np.ndarray,
    k: Kernel,
    d: int,
    pad: Optional[PadSpec] = None,
) -> np.ndarray:
    """Convolution with the taps of ``k`` spread by integer factor ``d``."""
    if not isinstance(d, (int, np.integer)):
        raise ParameterError(f"integer widening factor required, got {d!r}")
    if d < 1:
        raise ParameterError(f"widening factor must be >= 1, got {d}")
    return conv2d(h, k, pad=pad, dilation=int(d))


class StretchInfo(NamedTuple):
    """Realization of a possibly fractional widening factor."""

    dilation: int
    stretch: float


def _stretch_fraction(d: float) -> tuple[int, Fraction]:
    if d < 1.0:
        raise ParameterError(f"widening factor must be >= 1, got {d}")
    d_frac = Fraction(d)
    dilation = math.ceil(d_frac)
    return dilation, Fraction(dilation) / d_frac


def stretch_params(d: float) -> StretchInfo:
    """Split a widening factor into an integer dilation and the feature-map
    stretch that corrects it back down: ceil(d) paired with ceil(d)/d."""
    dilation, s = _stretch_fraction(d)
    return StretchInfo(dilation=dilation, stretch=float(s))


def fractional_redilated_conv(
    h: np.ndarray,
    k: Kernel,
    d: float,
    pad: Optional[PadSpec] = None,
    report: Optional[dict] = None,
) -> np.ndarray:
    """Re-dilated convolution at a fractional widening factor.

    The input is upsampled by s = ceil(d)/d, convolved at integer
    dilation ceil(d), and resampled back to the original grid, so the
    effective footprint on the original grid is d*(r-1)+1.  ``pad``
    applies to the convolution on the stretched grid.  At integer ``d``
    the stretch is exactly 1 and both resampling passes are skipped.

    When ``report`` is given it receives the realized ``dilation``,
    ``stretch``, and ``upscaled`` grid size.
    """
    dilation, s = _stretch_fraction(d)
    up_hw = scaled_dims(h.shape[-2:], s)
    if report is not None:
        report.update(dilation=dilation, stretch=float(s), upscaled=up_hw)
    if s == 1:
        return conv2d(h, k, pad=pad, dilation=dilation)
    up = interp_to(h, up_hw)
    out = conv2d(up, k, pad=pad, dilation=dilation)
    return interp_to(out, h.shape[-2:])


@dataclass(frozen=True)
class DilationSchedule:
    """Per-layer widening factors active on sampling steps [0, tau).

    Step 0 is the noisiest step.  From step ``tau`` onward every layer
    runs at factor 1.  With ``progressive`` the factor decays linearly
    from its full value at step 0 to 1 at step ``tau``.
    """

    factors: Mapping[str, float] = field(default_factory=dict)
    tau: int = 0
    progressive: bool = False
    total_steps: int = 50

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ParameterError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0 <= self.tau <= self.total_steps:
            raise ParameterError(
                f"tau must lie in [0, {self.total_steps}], got {self.tau}"
            )
        for name, factor in self.factors.items():
            if factor < 1.0:
                raise ParameterError(
                    f"widening factor for {name!r} must be >= 1, got {factor}"
                )


def schedule_eval(sched: DilationSchedule, step: int, layer: str) -> float:
    """Widening factor for ``layer`` at sampling step ``step``."""
    if not 0 <= step < sched.total_steps:
        raise ParameterError(
            f"step must lie in [0, {sched.total_steps}), got {step}"
        )
    if step >= sched.tau:
        return 1.0
    d = float(sched.factors.get(layer, 1.0))
    if not sched.progressive:
        return d
    return 1.0 + (d - 1.0) * (1.0 - step / sched.tau)

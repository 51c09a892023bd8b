"""Classifier-free guidance over paired noise estimates.

The noise-damped variant anchors the combination on a separate base
model's unconditional estimate while keeping the guidance direction
from the adapted model.  Because the adapted model's conditional and
unconditional estimates enter only as their difference, any noise error
the adaptation adds to both cancels; with an unadapted base model the
expression degenerates to standard guidance bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .tensorcore import check_tensor

__all__ = ["GuidanceConfig", "noise_damped_cfg", "standard_cfg"]

MODES = ("standard", "noise_damped")


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance scale and combination mode used by the sampling loop."""

    w: float = 7.5
    mode: str = "standard"

    def __post_init__(self) -> None:
        if not math.isfinite(self.w):
            raise ParameterError(f"guidance scale must be finite, got {self.w}")
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")


def _pair(a: np.ndarray, b: np.ndarray, names: str):
    a = check_tensor(a, names.split("/")[0])
    b = check_tensor(b, names.split("/")[1])
    if a.shape != b.shape:
        raise DimensionError(f"{names} shapes differ: {a.shape} vs {b.shape}")
    return a, b


def standard_cfg(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    """eps_uncond + w * (eps_cond - eps_uncond), elementwise float32."""
    eps_cond, eps_uncond = _pair(eps_cond, eps_uncond, "eps_cond/eps_uncond")
    return eps_uncond + np.float32(w) * (eps_cond - eps_uncond)


def noise_damped_cfg(
    eps_base_uncond: np.ndarray,
    eps_tilde_cond: np.ndarray,
    eps_tilde_uncond: np.ndarray,
    w: float,
) -> np.ndarray:
    """eps_base_uncond + w * (eps_tilde_cond - eps_tilde_uncond).

    The adapted model's estimates appear only as a difference, so an
    error field shared by both vanishes from the output.
    """
    eps_tilde_cond, eps_tilde_uncond = _pair(
        eps_tilde_cond, eps_tilde_uncond, "eps_tilde_cond/eps_tilde_uncond"
    )
    eps_base_uncond, _ = _pair(eps_base_uncond, eps_tilde_cond, "eps_base_uncond/eps_tilde_cond")
    return eps_base_uncond + np.float32(w) * (eps_tilde_cond - eps_tilde_uncond)

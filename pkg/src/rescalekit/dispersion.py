"""Kernel enlargement by a calibrated linear map.

Spreading kernel taps apart widens the receptive field but leaves a
periodic lattice of untouched input positions.  The alternative solved
here enlarges an r×r kernel to a dense r′×r′ one through a linear map R
fit against two consistency constraints over a set of calibration
features h:

* structure level: convolving an s-times upscaled feature with the
  enlarged kernel should match the upscaled output of the original
  convolution;
* pixel level (weight η): on the native grid the enlarged kernel should
  behave like the original one.

Each term is evaluated on its natural grid over interior pixels only
(margin r′, so padding never leaks in) and normalized by its element
count, making η dimensionless.  The objective is quadratic and separable
per canonical basis kernel, so one normal-equations solve per basis
column yields an R that is simultaneously optimal for every kernel.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import dten
from .errors import DimensionError, ParameterError, SingularSystemError
from .redilation import _stretch_fraction
from .tensorcore import Kernel, PadSpec, conv2d, interp_to, resize_matrix, scaled_dims

__all__ = [
    "CalibrationSet",
    "DispersionOperator",
    "disperse_kernel",
    "dispersed_conv",
    "evaluate_objective",
    "operator_residuals",
    "solve_dispersion",
    "solve_for_kernel",
]

_DAMPING = 1e-8
_RANK_RTOL = 1e-10


@dataclass(frozen=True)
class CalibrationSet:
    """Single-channel feature patches the enlargement map is fit on.

    All patches share one shape.  ``margin`` widens the interior-only
    loss region beyond the default of r′ pixels.
    """

    patches: tuple
    margin: int = 0

    def __init__(self, patches: Sequence[np.ndarray], margin: int = 0):
        pats = tuple(np.asarray(p, dtype=np.float32) for p in patches)
        if not pats:
            raise DimensionError("calibration set must contain patches")
        shape = pats[0].shape
        for p in pats:
            if p.ndim != 2 or p.shape != shape:
                raise DimensionError(
                    f"calibration patches must share one 2-D shape, got {p.shape} vs {shape}"
                )
        object.__setattr__(self, "patches", pats)
        object.__setattr__(self, "margin", int(margin))

    @classmethod
    def white_noise(cls, count: int = 64, size: int = 16, seed: int = 0) -> "CalibrationSet":
        """Zero-mean unit-variance noise patches; excites all frequencies
        so the calibration system is well conditioned."""
        rng = np.random.default_rng(seed)
        block = rng.standard_normal((count, size, size), dtype=np.float32)
        return cls(list(block))

    def stacked(self) -> np.ndarray:
        return np.stack(self.patches).astype(np.float64)


@dataclass(frozen=True)
class DispersionOperator:
    """Linear map enlarging r×r kernels to r′×r′, with fit diagnostics.

    ``R`` has shape (r′², r²) and acts on row-major flattened kernels.
    Residual fields are RMS values over the calibration set, taken
    jointly across the canonical basis kernels.
    """

    R: np.ndarray
    r: int
    rprime: int
    d: float
    eta: float
    structure_residual: float
    pixel_residual: float

    def __post_init__(self) -> None:
        if self.r % 2 == 0 or self.rprime % 2 == 0 or self.rprime < self.r:
            raise ParameterError(
                f"kernel sizes must be odd with r' >= r, got {self.r} -> {self.rprime}"
            )
        want = (self.rprime ** 2, self.r ** 2)
        if self.R.shape != want:
            raise DimensionError(f"R must have shape {want}, got {self.R.shape}")

    def save(self, path: Union[str, Path]) -> None:
        meta = {
            "r": self.r,
            "rprime": self.rprime,
            "d": self.d,
            "eta": self.eta,
            "structure_residual": self.structure_residual,
            "pixel_residual": self.pixel_residual,
        }
        dten.write_container(path, {"R": self.R}, meta=meta)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DispersionOperator":
        entries, meta = dten.read_container(path)
        return cls(
            R=entries["R"],
            r=int(meta["r"]),
            rprime=int(meta["rprime"]),
            d=meta["d"],
            eta=meta["eta"],
            structure_residual=meta["structure_residual"],
            pixel_residual=meta["pixel_residual"],
        )


def _offsets(size: int):
    c = (size - 1) // 2
    return [(dy, dx) for dy in range(-c, c + 1) for dx in range(-c, c + 1)]


def _crop_shift(batch: np.ndarray, dy: int, dx: int, m: int) -> np.ndarray:
    """Interior of conv(batch, one-hot-at-offset): a shifted crop.

    Valid because the margin exceeds every tap offset, so the window
    never leaves the array and padding never matters.
    """
    n, H, W = batch.shape
    return batch[:, m + dy:H - m + dy, m + dx:W - m + dx]


def _shift_full(batch: np.ndarray, dy: int, dx: int) -> np.ndarray:
    n, H, W = batch.shape
    out = np.zeros_like(batch)
    ys = slice(max(0, -dy), H - max(0, dy))
    xs = slice(max(0, -dx), W - max(0, dx))
    out[:, ys, xs] = batch[:, ys.start + dy:ys.stop + dy, xs.start + dx:xs.stop + dx]
    return out


class _Assembly:
    """Float64 design matrices of both calibration terms.

    A_s / A_p map a flattened enlarged kernel to interior structure /
    pixel responses; B_s / B_p do the same for the original kernel.
    """

    def __init__(self, calib: CalibrationSet, r: int, rprime: int, d) -> None:
        margin = max(calib.margin, rprime)
        X = calib.stacked()
        n, p, q = X.shape
        if p < 2 * margin + 1 or q < 2 * margin + 1:
            raise DimensionError(
                f"patches of {p}x{q} too small for interior margin {margin}"
                f" (need at least {2 * margin + 1})"
            )
        P, Q = scaled_dims((p, q), Fraction(d))
        Uy, Ux = resize_matrix(p, P), resize_matrix(q, Q)
        up = np.matmul(np.matmul(Uy, X), Ux.T)

        self.A_s = np.stack(
            [_crop_shift(up, dy, dx, margin).reshape(n, -1) for dy, dx in _offsets(rprime)],
            axis=-1,
        )
        self.A_p = np.stack(
            [_crop_shift(X, dy, dx, margin).reshape(n, -1) for dy, dx in _offsets(rprime)],
            axis=-1,
        )
        b_s = []
        for dy, dx in _offsets(r):
            coarse = _shift_full(X, dy, dx)
            fine = np.matmul(np.matmul(Uy, coarse), Ux.T)
            b_s.append(_crop_shift(fine, 0, 0, margin).reshape(n, -1))
        self.B_s = np.stack(b_s, axis=-1)
        self.B_p = np.stack(
            [_crop_shift(X, dy, dx, margin).reshape(n, -1) for dy, dx in _offsets(r)],
            axis=-1,
        )
        self.n1 = self.A_s.shape[0] * self.A_s.shape[1]
        self.n2 = self.A_p.shape[0] * self.A_p.shape[1]

    def residual_means(self, big: np.ndarray, small: np.ndarray):
        """Mean squared structure/pixel residuals for enlarged kernels
        (columns of ``big``, (r'², m)) against originals (columns of
        ``small``, (r², m))."""
        big = np.asarray(big, dtype=np.float64)
        small = np.asarray(small, dtype=np.float64)
        s = np.matmul(self.A_s, big) - np.matmul(self.B_s, small)
        p = np.matmul(self.A_p, big) - np.matmul(self.B_p, small)
        return float(np.mean(s * s)), float(np.mean(p * p))


def _normal_system(asm: "_Assembly", eta: float):
    """Normal matrix and basis right-hand sides, per-term mean-square
    normalized; shared by the basis solve and the per-kernel probe."""
    M = np.einsum("nij,nik->jk", asm.A_s, asm.A_s) / asm.n1
    V = np.einsum("nij,nik->jk", asm.A_s, asm.B_s) / asm.n1
    if eta > 0:
        M += eta * np.einsum("nij,nik->jk", asm.A_p, asm.A_p) / asm.n2
        V += eta * np.einsum("nij,nik->jk", asm.A_p, asm.B_p) / asm.n2
    return M, V


def solve_for_kernel(k: np.ndarray, rprime: int, d, eta: float, calib: CalibrationSet) -> np.ndarray:
    """Fit one enlarged kernel directly in float64.

    By linearity this equals applying the basis operator to ``k``; the
    float paths differ (float32 matrix action vs a fresh float64 solve),
    which makes the comparison a useful self-consistency probe.
    """
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise DimensionError(f"kernel must be square 2-D, got {k.shape}")
    asm = _Assembly(calib, k.shape[0], rprime, d)
    M, V = _normal_system(asm, eta)
    rhs = V @ k.reshape(-1)
    sol = np.linalg.solve(M + _DAMPING * np.eye(M.shape[0]), rhs)
    return sol.reshape(rprime, rprime)


def solve_dispersion(
    r: int,
    rprime: int,
    d,
    eta: float,
    calib: CalibrationSet,
) -> DispersionOperator:
    """Fit the enlargement map by normal equations per basis column.

    The normal matrix is shared across columns, so one factorization
    serves all r² right-hand sides.  Tikhonov damping of 1e-8 is added
    after an eigenvalue rank check; a deficient system raises with the
    basis column most aligned to the undetermined direction.
    """
    if r % 2 == 0 or rprime % 2 == 0 or rprime < r:
        raise ParameterError(f"kernel sizes must be odd with r' >= r, got {r} -> {rprime}")
    if eta < 0:
        raise ParameterError(f"pixel-calibration weight must be >= 0, got {eta}")
    d_frac = Fraction(d)
    if d_frac < 1:
        raise ParameterError(f"perception-field multiple must be >= 1, got {d}")
    if d_frac.denominator == 1 and rprime != d_frac.numerator * (r - 1) + 1:
        raise ParameterError(
            f"enlarged size must be d*(r-1)+1 = {d_frac.numerator * (r - 1) + 1}"
            f" for integer scale {d}, got {rprime}"
        )

    asm = _Assembly(calib, r, rprime, d)
    M, V = _normal_system(asm, eta)

    evals, evecs = np.linalg.eigh(M)
    if evals[-1] <= 0 or evals[0] < _RANK_RTOL * evals[-1]:
        column = int(np.argmax(np.abs(evecs[:, 0])))
        raise SingularSystemError(
            f"calibration system is rank deficient (eigenvalue ratio"
            f" {evals[0]:.3e} / {evals[-1]:.3e}); basis column {column}"
            f" is undetermined",
            column=column,
        )
    R64 = np.linalg.solve(M + _DAMPING * np.eye(M.shape[0]), V)
    s_ms, p_ms = asm.residual_means(R64, np.eye(r * r))
    return DispersionOperator(
        R=R64.astype(np.float32),
        r=r,
        rprime=rprime,
        d=float(d),
        eta=float(eta),
        structure_residual=float(np.sqrt(s_ms)),
        pixel_residual=float(np.sqrt(p_ms)),
    )


def evaluate_objective(kprime: np.ndarray, k: np.ndarray, d, eta: float, calib: CalibrationSet) -> float:
    """Calibration objective of one enlarged kernel against its original:
    mean squared structure residual plus eta times mean squared pixel
    residual, interior pixels only."""
    kprime = np.asarray(kprime, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if kprime.ndim != 2 or kprime.shape[0] != kprime.shape[1]:
        raise DimensionError(f"enlarged kernel must be square 2-D, got {kprime.shape}")
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise DimensionError(f"kernel must be square 2-D, got {k.shape}")
    asm = _Assembly(calib, k.shape[0], kprime.shape[0], d)
    s_ms, p_ms = asm.residual_means(kprime.reshape(-1, 1), k.reshape(-1, 1))
    return s_ms + eta * p_ms


def operator_residuals(op: DispersionOperator, calib: CalibrationSet):
    """Structure and pixel RMS of an operator over a feature set, taken
    jointly across the canonical basis kernels."""
    asm = _Assembly(calib, op.r, op.rprime, op.d)
    s_ms, p_ms = asm.residual_means(op.R, np.eye(op.r * op.r))
    return float(np.sqrt(s_ms)), float(np.sqrt(p_ms))


def disperse_kernel(op: DispersionOperator, k: Kernel) -> Kernel:
    """Enlarge every (out, in) slice of ``k`` by the matrix action of R."""
    o, i, rh, rw = k.weight.shape
    if (rh, rw) != (op.r, op.r):
        raise DimensionError(
            f"kernel spatial size {rh}x{rw} does not match operator input {op.r}x{op.r}"
        )
    flat = k.weight.reshape(o * i, rh * rw)
    big = flat @ op.R.T
    weight = big.reshape(o, i, op.rprime, op.rprime)
    bias = None if k.bias is None else k.bias.copy()
    return Kernel(weight, bias=bias)


def dispersed_conv(
    h: np.ndarray,
    k: Kernel,
    op: DispersionOperator,
    d,
    pad: Optional[PadSpec] = None,
) -> np.ndarray:
    """Convolution with the enlarged kernel at widening factor ``d``.

    Integer ``d`` is a plain same-padded convolution of the enlarged
    kernel.  Fractional ``d`` runs the stretch pipeline with the
    dilation step replaced by enlargement at scale ceil(d).
    """
    dilation, s = _stretch_fraction(d)
    if float(op.d) != float(dilation):
        raise ParameterError(
            f"operator was solved for scale {op.d}, but factor {d} needs ceil(d) = {dilation}"
        )
    kp = disperse_kernel(op, k)
    if s == 1:
        return conv2d(h, kp, pad=pad)
    up = interp_to(h, scaled_dims(h.shape[-2:], s))
    out = conv2d(up, kp, pad=pad)
    return interp_to(out, h.shape[-2:])

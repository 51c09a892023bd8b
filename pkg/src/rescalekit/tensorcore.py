"""Deterministic dense tensor primitives: convolution, kernel dilation,
bilinear resize, and impulse-response probing.

Layout convention is NCHW float32 throughout. Every reduction here has a
fixed accumulation order so repeated runs produce identical bits:

* ``conv2d`` gathers patches in (in-channel, kernel row, kernel column)
  order and reduces them through a single matmul whose worker pool is
  pinned to one thread (see ``runtime``).
* Dilation is realized by materializing the zero-stuffed kernel and
  running the exact same dense path, which makes ``conv2d(h, k, d)`` and
  ``conv2d(h, dilate_kernel(k, d), 1)`` identical bit for bit.
* ``interp`` applies separable resize matrices in float64 and casts the
  result back to float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionError, ParameterError, TruncationError

Scale = Union[int, float, Fraction]

_PAD_MODES = {"zero": "constant", "replicate": "edge"}


def check_tensor(h: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate the NCHW float32 contract and return a contiguous view."""
    if not isinstance(h, np.ndarray) or h.ndim != 4:
        raise DimensionError(f"{name} must be a rank-4 NCHW array")
    if h.dtype != np.float32:
        raise DimensionError(f"{name} must be float32, got {h.dtype}")
    return np.ascontiguousarray(h)


@dataclass(frozen=True)
class PadSpec:
    """Per-side spatial padding: (top, bottom, left, right)."""

    mode: str = "zero"
    amount: tuple[int, int, int, int] = (0, 0, 0, 0)

    def __post_init__(self):
        if self.mode not in _PAD_MODES:
            raise ParameterError(f"pad mode must be one of {sorted(_PAD_MODES)}")
        if len(self.amount) != 4 or any(a < 0 for a in self.amount):
            raise ParameterError("pad amounts must be four non-negative ints")

    @classmethod
    def same(cls, kernel_size: int, dilation: int = 1, mode: str = "zero") -> "PadSpec":
        """Padding that keeps spatial dims fixed for an odd kernel."""
        p = dilation * (kernel_size - 1) // 2
        return cls(mode, (p, p, p, p))

    def apply(self, h: np.ndarray) -> np.ndarray:
        t, b, l, r = self.amount
        if t == b == l == r == 0:
            return h
        return np.pad(h, ((0, 0), (0, 0), (t, b), (l, r)), mode=_PAD_MODES[self.mode])


@dataclass(frozen=True)
class Kernel:
    """Convolution weights (out, in, r, r) with an optional per-channel bias."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float32)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise DimensionError("kernel weight must be (out, in, r, r)")
        if w.shape[2] % 2 == 0:
            raise DimensionError(f"kernel size must be odd, got {w.shape[2]}")
        object.__setattr__(self, "weight", np.ascontiguousarray(w))
        if self.bias is not None:
            b = np.ascontiguousarray(np.asarray(self.bias, dtype=np.float32))
            if b.shape != (w.shape[0],):
                raise DimensionError("bias must have one entry per output channel")
            object.__setattr__(self, "bias", b)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def size(self) -> int:
        return self.weight.shape[2]


def dilate_kernel(k, d: int):
    """Zero-stuff a kernel to stride ``d``: entry (i, j) moves to (d*i, d*j).

    The result has spatial size d*(r-1)+1. Accepts a Kernel (bias kept) or
    any array whose last two axes are the kernel plane.
    """
    if not isinstance(d, (int, np.integer)) or d < 1:
        raise ParameterError(f"dilation must be a positive integer, got {d!r}")
    if isinstance(k, Kernel):
        return Kernel(dilate_kernel(k.weight, d), k.bias)
    w = np.asarray(k)
    if w.ndim < 2 or w.shape[-1] != w.shape[-2]:
        raise DimensionError("kernel array must end in two equal spatial axes")
    if d == 1:
        return w.copy()
    r = w.shape[-1]
    size = d * (r - 1) + 1
    out = np.zeros(w.shape[:-2] + (size, size), dtype=w.dtype)
    out[..., ::d, ::d] = w
    return out


def conv2d(
    h: np.ndarray,
    k: Kernel,
    pad: PadSpec | None = None,
    dilation: int = 1,
) -> np.ndarray:
    """2-D cross-correlation of an NCHW tensor with an odd square kernel.

    ``pad`` defaults to the zero 'same' padding of the effective (dilated)
    kernel. Dilation d > 1 runs the identical dense path on the
    zero-stuffed kernel, so pre-dilating by hand gives the same bits.
    The patch reduction order is fixed: in-channel major, then kernel row,
    then kernel column.
    """
    h = check_tensor(h, "conv input")
    if not isinstance(d := dilation, (int, np.integer)) or d < 1:
        raise ParameterError(f"dilation must be a positive integer, got {dilation!r}")
    weight, bias = k.weight, k.bias
    if weight.shape[1] != h.shape[1]:
        raise DimensionError(
            f"kernel expects {weight.shape[1]} input channels, tensor has {h.shape[1]}"
        )
    if d > 1:
        weight = dilate_kernel(weight, d)
    r = weight.shape[2]
    if pad is None:
        pad = PadSpec.same(r)
    n, cin, H, W = h.shape
    cout = weight.shape[0]

    padded = pad.apply(h)
    hp, wp = padded.shape[2], padded.shape[3]
    ho, wo = hp - (r - 1), wp - (r - 1)
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"padded input {hp}x{wp} too small for effective kernel size {r}"
        )
    sn, sc, sh, sw = padded.strides
    windows = as_strided(
        padded,
        shape=(n, cin, r, r, ho, wo),
        strides=(sn, sc, sh, sw, sh, sw),
    )
    # copy into (N*Ho*Wo, Cin*r*r) with in-channel-major patch ordering
    patches = np.ascontiguousarray(windows.transpose(0, 4, 5, 1, 2, 3))
    patches = patches.reshape(n * ho * wo, cin * r * r)
    out = patches @ weight.reshape(cout, cin * r * r).T
    if bias is not None:
        out += bias
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out)


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic bilinear resize matrix with half-pixel centers."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def interp_to(h: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to explicit spatial dims (align-corners false).

    Arithmetic runs in float64 and is cast back to float32; a no-op
    target returns a bit-identical copy.
    """
    h = check_tensor(h, "interp input")
    out_h, out_w = int(out_hw[0]), int(out_hw[1])
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"target dims must be positive, got {out_hw}")
    n, c, H, W = h.shape
    if (out_h, out_w) == (H, W):
        return h.copy()
    x = h.reshape(n * c, H, W).astype(np.float64)
    if out_h != H:
        x = np.matmul(resize_matrix(H, out_h), x)
    if out_w != W:
        x = np.matmul(x, resize_matrix(W, out_w).T)
    return x.reshape(n, c, out_h, out_w).astype(np.float32)


def scaled_dims(hw: tuple[int, int], s: Scale) -> tuple[int, int]:
    """Output dims for scale s: round(dim * s), halves up, on the exact
    rational value of s."""
    frac = Fraction(s)
    if frac <= 0:
        raise ParameterError(f"scale must be positive, got {s!r}")
    return (_round_half_up(frac * hw[0]), _round_half_up(frac * hw[1]))


def interp(h: np.ndarray, s: Scale) -> np.ndarray:
    """Bilinear resize by a positive scale factor.

    s == 1 is a bit-identical copy; constants stay constant and interior
    linear ramps are preserved to float precision.
    """
    h = check_tensor(h, "interp input")
    return interp_to(h, scaled_dims((h.shape[2], h.shape[3]), s))


def impulse_response(
    fn: Callable[[np.ndarray], np.ndarray],
    extent: int,
    channels: int = 1,
    border_guard: int = 2,
) -> np.ndarray:
    """Response of a conv-like map to a centered unit impulse.

    The probe is a zeros tensor of shape (1, channels, extent, extent)
    with a single 1 in channel 0. Raises TruncationError when support
    comes within ``border_guard`` pixels of the probe border: strided
    footprints can skip the outermost ring entirely, so touching the
    guard band means the true footprint may exceed the extent.
    """
    if extent < 1:
        raise ParameterError(f"extent must be positive, got {extent}")
    probe = np.zeros((1, channels, extent, extent), dtype=np.float32)
    probe[0, 0, extent // 2, extent // 2] = 1.0
    resp = check_tensor(fn(probe), "impulse response")
    mask = _support_mask(resp)
    if mask.any():
        g = min(border_guard, (extent - 1) // 2)
        interior = np.zeros_like(mask)
        interior[g : extent - g, g : extent - g] = True
        if (mask & ~interior).any():
            raise TruncationError(
                f"impulse response comes within {g} px of the "
                f"{extent}x{extent} probe border"
            )
    return resp


def _support_mask(resp: np.ndarray, rel_tol: float = 1e-6) -> np.ndarray:
    mag = np.max(np.abs(resp), axis=(0, 1))
    peak = float(mag.max())
    if peak == 0.0:
        return np.zeros_like(mag, dtype=bool)
    return mag > rel_tol * peak


def footprint_width(resp: np.ndarray, rel_tol: float = 1e-6) -> tuple[int, int]:
    """Height and width of the support box, ignoring entries below
    rel_tol times the peak magnitude."""
    mask = _support_mask(resp, rel_tol)
    if not mask.any():
        return (0, 0)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1))


def footprint_count(resp: np.ndarray, rel_tol: float = 1e-6) -> int:
    """Number of support positions above the relative threshold."""
    return int(_support_mask(resp, rel_tol).sum())

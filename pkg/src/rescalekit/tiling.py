"""Tiled application of a GroupNorm+conv decoder with stat syncing.

Running such a stack tile-by-tile normally lets every tile normalize
with its own statistics, which shifts tones between tiles on inputs
whose statistics vary spatially.  The fix is two-pass: pass 1 walks the
stack layer by layer, accumulating each GroupNorm's (count, sum, sumsq)
over the tiles' exclusive ownership regions and merging in canonical
row-major order, so the merged statistics equal the full-image ones up
to float summation order.  Pass 2 renders every tile against the merged
statistics and blends overlaps with linear ramps.

Ramps are receptive-field aware: a pixel closer than rho (the stack's
conv radius) to an interior tile edge is contaminated by the tile
boundary, so its blend weight is forced to zero and the ramp lives on
the remaining overlap band.  Weights of the tiles sharing an overlap
sum to 1 exactly in rational arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import dten
from .errors import ConfigError, DimensionError
from .normalization import GroupNormStats, group_norm
from .runtime import map_in_order
from .tensorcore import Kernel, check_tensor, conv2d

__all__ = [
    "DecoderLayer",
    "TileLayout",
    "TileRect",
    "TiledResult",
    "TinyDecoder",
    "synchronized_stats",
    "tiled_apply",
]


def _silu(x: np.ndarray) -> np.ndarray:
    return x * (1.0 / (1.0 + np.exp(-x)))


@dataclass(frozen=True)
class DecoderLayer:
    gn_weight: np.ndarray
    gn_bias: np.ndarray
    kernel: Kernel


class TinyDecoder:
    """Decoder stand-in: a stack of GroupNorm -> SiLU -> 3x3 conv layers."""

    def __init__(self, layers, groups: int):
        self.layers = tuple(layers)
        self.groups = int(groups)
        if not self.layers:
            raise ConfigError("decoder needs at least one layer")
        for i, layer in enumerate(self.layers):
            cin = layer.kernel.weight.shape[1]
            if cin % self.groups:
                raise ConfigError(
                    f"layer {i} input channels {cin} not divisible into {self.groups} groups"
                )

    @classmethod
    def seeded(
        cls,
        seed: int = 0,
        in_channels: int = 4,
        hidden: int = 16,
        out_channels: int = 3,
        groups: int = 4,
    ) -> "TinyDecoder":
        rng = np.random.default_rng(seed)
        widths = [in_channels, hidden, hidden, out_channels]
        layers = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            gn_w = (1.0 + 0.05 * rng.standard_normal(cin)).astype(np.float32)
            gn_b = (0.05 * rng.standard_normal(cin)).astype(np.float32)
            weight = rng.standard_normal((cout, cin, 3, 3)) / np.sqrt(9.0 * cin)
            kernel = Kernel(weight.astype(np.float32), np.zeros(cout, dtype=np.float32))
            layers.append(DecoderLayer(gn_weight=gn_w, gn_bias=gn_b, kernel=kernel))
        return cls(layers, groups)

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @property
    def receptive_radius(self) -> int:
        # one pixel of contamination per 3x3 conv
        return len(self.layers)

    def save(self, path) -> None:
        entries = {}
        for i, layer in enumerate(self.layers):
            entries[f"layers.{i}.gn.weight"] = layer.gn_weight
            entries[f"layers.{i}.gn.bias"] = layer.gn_bias
            entries[f"layers.{i}.conv.weight"] = layer.kernel.weight
            entries[f"layers.{i}.conv.bias"] = layer.kernel.bias
        dten.write_container(
            path, entries, meta={"groups": self.groups, "layer_count": len(self.layers)}
        )

    @classmethod
    def load(cls, path) -> "TinyDecoder":
        entries, meta = dten.read_container(path)
        if "groups" not in meta or "layer_count" not in meta:
            raise ConfigError(f"{path}: decoder container lacks groups/layer_count metadata")
        layers = []
        try:
            for i in range(int(meta["layer_count"])):
                layers.append(
                    DecoderLayer(
                        gn_weight=entries[f"layers.{i}.gn.weight"],
                        gn_bias=entries[f"layers.{i}.gn.bias"],
                        kernel=Kernel(
                            entries[f"layers.{i}.conv.weight"],
                            entries[f"layers.{i}.conv.bias"],
                        ),
                    )
                )
        except KeyError as exc:
            raise ConfigError(f"{path}: decoder container is missing entry {exc}") from exc
        return cls(layers, int(meta["groups"]))

    def prefix(self, x: np.ndarray, count: int, stats: Optional[list] = None) -> np.ndarray:
        """Run the first `count` layers; stats[i] (when given) replaces
        layer i's self-computed GroupNorm statistics."""
        h = check_tensor(x, "decoder input")
        for i in range(count):
            layer = self.layers[i]
            external = stats[i] if stats is not None else None
            h = group_norm(h, self.groups, layer.gn_weight, layer.gn_bias, stats=external)
            h = conv2d(_silu(h), layer.kernel)
        return h

    def forward(self, x: np.ndarray, stats: Optional[list] = None) -> np.ndarray:
        return self.prefix(x, len(self.layers), stats)


def _ramp(j: int, v: int, rho: int) -> float:
    """Blend weight of the later tile at overlap position j of v.

    Zero inside the rho-contaminated rim, linear across the clean band;
    degenerates to a hard midpoint split when the overlap is too thin.
    """
    denom = v - 2 * rho
    if denom <= 0:
        return 0.0 if (j + 0.5) < v / 2.0 else 1.0
    return min(1.0, max(0.0, (j + 0.5 - rho) / denom))


@dataclass(frozen=True)
class TileRect:
    y0: int
    y1: int
    x0: int
    x1: int
    own_y0: int
    own_y1: int
    own_x0: int
    own_x1: int
    wy: np.ndarray
    wx: np.ndarray


@dataclass(frozen=True)
class TileLayout:
    image_hw: tuple
    tile_hw: tuple
    overlap: int
    starts_y: tuple
    starts_x: tuple

    @classmethod
    def grid(cls, image_hw, tile, overlap: int) -> "TileLayout":
        tile_hw = (tile, tile) if isinstance(tile, (int, np.integer)) else tuple(tile)
        image_hw = tuple(int(v) for v in image_hw)
        if len(image_hw) != 2 or any(v < 1 for v in image_hw):
            raise ConfigError(f"image dims must be two positive ints, got {image_hw}")
        if len(tile_hw) != 2 or any(t < 1 for t in tile_hw):
            raise ConfigError(f"tile dims must be positive, got {tile_hw}")
        if overlap < 0:
            raise ConfigError(f"overlap must be >= 0, got {overlap}")
        starts_y = cls._axis_starts(image_hw[0], tile_hw[0], overlap)
        starts_x = cls._axis_starts(image_hw[1], tile_hw[1], overlap)
        return cls(
            image_hw=image_hw,
            tile_hw=tuple(int(t) for t in tile_hw),
            overlap=int(overlap),
            starts_y=starts_y,
            starts_x=starts_x,
        )

    @staticmethod
    def _axis_starts(extent: int, tile: int, overlap: int) -> tuple:
        if extent <= tile:
            return (0,)
        if tile < 2 * overlap:
            raise ConfigError(
                f"tile {tile} must be at least twice the overlap {overlap} "
                "so that only adjacent tiles overlap"
            )
        step = tile - overlap
        if step < 1:
            raise ConfigError(f"tile {tile} must exceed overlap {overlap}")
        starts = list(range(0, extent - tile + 1, step))
        if starts[-1] != extent - tile:
            starts.append(extent - tile)
        # the adjusted last start may crowd its neighbors; drop middles
        # until no pixel belongs to more than two tiles per axis
        while len(starts) >= 3 and starts[-1] - starts[-3] < tile:
            del starts[-2]
        return tuple(starts)

    @property
    def grid_shape(self) -> tuple:
        return (len(self.starts_y), len(self.starts_x))

    @staticmethod
    def _axis_tiles(starts: tuple, tile: int, extent: int, rho: int):
        n = len(starts)
        size = tile if n > 1 else min(tile, extent)
        infos = []
        for i, s in enumerate(starts):
            own0 = 0 if i == 0 else (starts[i - 1] + size + s) // 2
            own1 = extent if i == n - 1 else (s + size + starts[i + 1]) // 2
            w = np.ones(size, dtype=np.float64)
            if i > 0:
                v = starts[i - 1] + size - s
                for j in range(v):
                    w[j] = _ramp(j, v, rho)
            if i < n - 1:
                v = s + size - starts[i + 1]
                for j in range(v):
                    w[size - v + j] = 1.0 - _ramp(j, v, rho)
            infos.append((s, s + size, own0, own1, w))
        return infos

    def tiles(self, rho: int) -> list:
        """Row-major tile rectangles with ownership spans and blend
        weights for a stack of receptive radius rho."""
        rows = self._axis_tiles(self.starts_y, self.tile_hw[0], self.image_hw[0], rho)
        cols = self._axis_tiles(self.starts_x, self.tile_hw[1], self.image_hw[1], rho)
        out = []
        for y0, y1, oy0, oy1, wy in rows:
            for x0, x1, ox0, ox1, wx in cols:
                out.append(
                    TileRect(
                        y0=y0, y1=y1, x0=x0, x1=x1,
                        own_y0=oy0, own_y1=oy1, own_x0=ox0, own_x1=ox1,
                        wy=wy, wx=wx,
                    )
                )
        return out

    def coverage_warnings(self, rho: int) -> tuple:
        warns = []
        eff_h = self.tile_hw[0] if len(self.starts_y) > 1 else min(self.tile_hw[0], self.image_hw[0])
        eff_w = self.tile_hw[1] if len(self.starts_x) > 1 else min(self.tile_hw[1], self.image_hw[1])
        diameter = 2 * rho + 1
        if min(eff_h, eff_w) < diameter:
            warns.append(
                f"tile {eff_h}x{eff_w} is smaller than the receptive field diameter {diameter}; "
                "every pixel is boundary-contaminated"
            )
        for axis, starts, tile in (("y", self.starts_y, self.tile_hw[0]),
                                   ("x", self.starts_x, self.tile_hw[1])):
            overlaps = [starts[i] + tile - starts[i + 1] for i in range(len(starts) - 1)]
            thin = [v for v in overlaps if v < diameter]
            if thin:
                warns.append(
                    f"{axis}-axis overlap {min(thin)} cannot absorb receptive radius {rho}; "
                    "tile seams may leak through the blend"
                )
        return tuple(warns)


@dataclass(frozen=True)
class TiledResult:
    output: np.ndarray
    warnings: tuple
    layout: TileLayout


def synchronized_stats(decoder, x: np.ndarray, layout: TileLayout) -> list:
    """Pass 1: per-layer GroupNorm statistics accumulated tile-by-tile.

    Layer l's feature map is recomputed per tile from the already-merged
    statistics of layers < l, and its stats are taken over the tile's
    exclusive ownership region only, so every pixel counts exactly once.
    Tiles may run concurrently; the merge folds in row-major order.
    """
    x = check_tensor(x, "tiled input")
    if tuple(x.shape[2:]) != tuple(layout.image_hw):
        raise DimensionError(
            f"input spatial dims {x.shape[2:]} do not match layout {layout.image_hw}"
        )
    tiles = layout.tiles(decoder.receptive_radius)
    merged: list = []
    for _ in range(decoder.layer_count):
        def tile_stats(t: TileRect) -> GroupNormStats:
            piece = np.ascontiguousarray(x[:, :, t.y0 : t.y1, t.x0 : t.x1])
            feat = decoder.prefix(piece, len(merged), merged)
            own = np.ascontiguousarray(
                feat[:, :, t.own_y0 - t.y0 : t.own_y1 - t.y0, t.own_x0 - t.x0 : t.own_x1 - t.x0]
            )
            return GroupNormStats.from_tensor(own, decoder.groups)

        parts = map_in_order(tile_stats, tiles)
        acc = parts[0]
        for part in parts[1:]:
            acc = acc.merge(part)
        merged.append(acc)
    return merged


def tiled_apply(decoder, x: np.ndarray, layout: TileLayout, sync: bool = True) -> TiledResult:
    """Render x through the decoder tile-by-tile and blend overlaps.

    With sync on, all tiles normalize against the merged full-image
    statistics; with sync off each tile uses its own (the artifact-
    producing baseline).
    """
    x = check_tensor(x, "tiled input")
    if tuple(x.shape[2:]) != tuple(layout.image_hw):
        raise DimensionError(
            f"input spatial dims {x.shape[2:]} do not match layout {layout.image_hw}"
        )
    rho = decoder.receptive_radius
    tiles = layout.tiles(rho)
    stats = synchronized_stats(decoder, x, layout) if sync else None

    def render(t: TileRect) -> np.ndarray:
        piece = np.ascontiguousarray(x[:, :, t.y0 : t.y1, t.x0 : t.x1])
        return decoder.forward(piece, stats=stats)

    rendered = map_in_order(render, tiles)
    out = np.zeros((x.shape[0], rendered[0].shape[1]) + tuple(layout.image_hw), dtype=np.float32)
    for t, y in zip(tiles, rendered):
        mask = (t.wy[:, None] * t.wx[None, :]).astype(np.float32)
        out[:, :, t.y0 : t.y1, t.x0 : t.x1] += y * mask
    return TiledResult(output=out, warnings=layout.coverage_warnings(rho), layout=layout)

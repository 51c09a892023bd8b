"""A small epsilon-prediction conv U-Net with swappable convolutions.

Blocks follow the DB0..DB3 / MB / UB0..UB3 naming with UB0 the deepest
up block.  Each level runs GroupNorm+SiLU resnets with a timestep
embedding injection; attention sits at configured levels and in the mid
block.  An adaptation plan widens the receptive field of the 3x3 resnet
convs and the downsampler convs inside named blocks, per sampling step;
conv_in, conv_out, shortcut and upsampler convs are never touched.

The network is pure numpy and fully deterministic: weights are bound at
construction, forward allocates fresh arrays, and every reduction goes
through the pinned-BLAS dense paths in tensorcore.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import dten
from .dispersion import dispersed_conv
from .errors import ConfigError, DimensionError, ParameterError
from .normalization import group_norm
from .plans import AdaptationPlan
from .redilation import fractional_redilated_conv, redilated_conv, schedule_eval
from .tensorcore import Kernel, check_tensor, conv2d

__all__ = [
    "AttentionParams",
    "UNet",
    "UNetConfig",
    "WeightStore",
    "apply_adapted_conv",
    "attn_logit_scale",
    "attn_scale_baseline",
    "init_toy_weights",
    "plain_attention",
    "redilated_attention",
    "required_entries",
    "timestep_embedding",
]


@dataclass(frozen=True)
class UNetConfig:
    """Structural description of the toy denoiser.

    The default is the smallest shape that instantiates every block
    category: three levels, attention at the deepest level and the mid
    block, one resnet per level.
    """

    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    blocks_per_level: int = 1
    attention_levels: tuple = (2,)
    groups: int = 8
    cond_dim: int = 64
    cond_classes: int = 8
    in_channels: int = 4
    out_channels: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))
        object.__setattr__(self, "attention_levels", tuple(self.attention_levels))
        levels = len(self.channel_mults)
        if not 1 <= levels <= 4:
            raise ConfigError(f"1 to 4 levels supported, got {levels}")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ConfigError(f"base_channels must be even and >= 2, got {self.base_channels}")
        if self.groups < 1 or self.base_channels % self.groups:
            raise ConfigError(
                f"base_channels {self.base_channels} must divide into {self.groups} groups"
            )
        if any(m < 1 for m in self.channel_mults):
            raise ConfigError(f"channel multipliers must be >= 1, got {self.channel_mults}")
        if any(not 0 <= a < levels for a in self.attention_levels):
            raise ConfigError(
                f"attention levels {self.attention_levels} outside range 0..{levels - 1}"
            )
        if self.blocks_per_level < 1:
            raise ConfigError("blocks_per_level must be >= 1")
        for name, value in (
            ("cond_dim", self.cond_dim), ("cond_classes", self.cond_classes),
            ("in_channels", self.in_channels), ("out_channels", self.out_channels),
        ):
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def temb_dim(self) -> int:
        return 4 * self.base_channels

    def level_channels(self):
        return [self.base_channels * m for m in self.channel_mults]

    def block_names(self) -> tuple:
        downs = tuple(f"DB{l}" for l in range(self.levels))
        ups = tuple(f"UB{j}" for j in range(self.levels))
        return downs + ("MB",) + ups

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "UNetConfig":
        data = dict(data)
        for key in ("channel_mults", "attention_levels"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def required_entries(cfg: UNetConfig) -> dict:
    """Canonical name -> shape layout of every stored parameter."""
    out: dict = {}

    def conv(path, o, i, r=3):
        out[f"{path}.weight"] = (o, i, r, r)
        out[f"{path}.bias"] = (o,)

    def linear(path, o, i):
        out[f"{path}.weight"] = (o, i)
        out[f"{path}.bias"] = (o,)

    def norm(path, c):
        out[f"{path}.weight"] = (c,)
        out[f"{path}.bias"] = (c,)

    def resnet(prefix, cin, cout):
        norm(f"{prefix}.norm1", cin)
        conv(f"{prefix}.conv1", cout, cin)
        linear(f"{prefix}.time_emb_proj", cout, cfg.temb_dim)
        norm(f"{prefix}.norm2", cout)
        conv(f"{prefix}.conv2", cout, cout)
        if cin != cout:
            conv(f"{prefix}.conv_shortcut", cout, cin, r=1)

    def attention(prefix, c):
        norm(f"{prefix}.group_norm", c)
        for proj in ("to_q", "to_k", "to_v"):
            out[f"{prefix}.{proj}.weight"] = (c, c)
        linear(f"{prefix}.to_out", c, c)

    chans = cfg.level_channels()
    conv("conv_in", cfg.base_channels, cfg.in_channels)
    linear("time_embedding.linear_1", cfg.temb_dim, cfg.base_channels)
    linear("time_embedding.linear_2", cfg.temb_dim, cfg.temb_dim)
    out["class_embedding.table"] = (cfg.cond_classes, cfg.cond_dim)
    linear("class_embedding.proj", cfg.temb_dim, cfg.cond_dim)

    cur = cfg.base_channels
    for l in range(cfg.levels):
        for j in range(cfg.blocks_per_level):
            resnet(f"DB{l}.resnets.{j}", cur, chans[l])
            cur = chans[l]
        if l in cfg.attention_levels:
            for j in range(cfg.blocks_per_level):
                attention(f"DB{l}.attentions.{j}", cur)
        if l < cfg.levels - 1:
            conv(f"DB{l}.downsamplers.0.conv", cur, cur)

    resnet("MB.resnets.0", cur, cur)
    attention("MB.attentions.0", cur)
    resnet("MB.resnets.1", cur, cur)

    for j in range(cfg.levels):
        level = cfg.levels - 1 - j
        for i in range(cfg.blocks_per_level):
            cin = cur + (chans[level] if i == 0 else 0)
            resnet(f"UB{j}.resnets.{i}", cin, chans[level])
            cur = chans[level]
        if level in cfg.attention_levels:
            for i in range(cfg.blocks_per_level):
                attention(f"UB{j}.attentions.{i}", cur)
        if level > 0:
            conv(f"UB{j}.upsamplers.0.conv", cur, cur)

    norm("norm_out", cur)
    conv("conv_out", cfg.out_channels, cur)
    return out


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Orthonormal rows (rows <= cols) or columns (rows > cols), with
    QR signs fixed so the draw depends only on the rng state."""
    tall = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(tall)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(q[:rows, :cols]).astype(np.float32)


def init_toy_weights(cfg: UNetConfig, seed: int = 0) -> "WeightStore":
    """Seeded random weights: orthogonal conv/linear maps, identity
    norm affine, zero biases, Gaussian conditioning table."""
    rng = np.random.default_rng(seed)
    entries: dict = {}
    for path, shape in required_entries(cfg).items():
        if path == "class_embedding.table":
            entries[path] = rng.standard_normal(shape).astype(np.float32)
        elif path.endswith(".bias"):
            entries[path] = np.zeros(shape, dtype=np.float32)
        elif len(shape) == 4:
            flat = _orthogonal(rng, shape[0], shape[1] * shape[2] * shape[3])
            entries[path] = flat.reshape(shape)
        elif len(shape) == 2:
            entries[path] = _orthogonal(rng, shape[0], shape[1])
        else:
            entries[path] = np.ones(shape, dtype=np.float32)
    return WeightStore(entries=entries, config=cfg)


@dataclass
class WeightStore:
    """Named parameter map plus the structural config it belongs to."""

    entries: dict
    config: UNetConfig

    def save(self, path: Union[str, Path]) -> None:
        dten.write_container(path, self.entries, meta={"config": self.config.to_dict()})

    @classmethod
    def load(cls, path: Union[str, Path]) -> "WeightStore":
        entries, meta = dten.read_container(path)
        if "config" not in meta:
            raise ConfigError(f"{path}: weight container has no config metadata")
        return cls(entries=entries, config=UNetConfig.from_dict(meta["config"]))


def timestep_embedding(t: float, dim: int) -> np.ndarray:
    """Sinusoidal features: sin(t * f_j) then cos(t * f_j) with
    f_j = 10000^(-j/(dim/2))."""
    if dim % 2:
        raise ParameterError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = float(t) * freqs
    return np.concatenate([np.sin(args), np.cos(args)]).astype(np.float32)


def _silu(x: np.ndarray) -> np.ndarray:
    return x * (1.0 / (1.0 + np.exp(-x)))


@dataclass(frozen=True)
class AttentionParams:
    """Single-head QKV self-attention parameters with leading GroupNorm."""

    gn_weight: np.ndarray
    gn_bias: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wout: np.ndarray
    bout: np.ndarray
    groups: int

    @classmethod
    def from_entries(cls, entries: dict, prefix: str, groups: int) -> "AttentionParams":
        return cls(
            gn_weight=entries[f"{prefix}.group_norm.weight"],
            gn_bias=entries[f"{prefix}.group_norm.bias"],
            wq=entries[f"{prefix}.to_q.weight"],
            wk=entries[f"{prefix}.to_k.weight"],
            wv=entries[f"{prefix}.to_v.weight"],
            wout=entries[f"{prefix}.to_out.weight"],
            bout=entries[f"{prefix}.to_out.bias"],
            groups=groups,
        )


def plain_attention(h: np.ndarray, params: AttentionParams, logit_scale: float = 1.0) -> np.ndarray:
    """GroupNorm -> single-head softmax self-attention -> residual add."""
    h = check_tensor(h, "attention input")
    n, c, height, width = h.shape
    x = group_norm(h, params.groups, params.gn_weight, params.gn_bias)
    tokens = np.ascontiguousarray(x.reshape(n, c, height * width).transpose(0, 2, 1))
    q = tokens @ params.wq.T
    k = tokens @ params.wk.T
    v = tokens @ params.wv.T
    logits = (q @ k.transpose(0, 2, 1)) * np.float32(c ** -0.5 * logit_scale)
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = (weights @ v) @ params.wout.T + params.bout
    return h + np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, c, height, width)


def redilated_attention(h: np.ndarray, d: int, params: AttentionParams) -> np.ndarray:
    """Self-attention over d*d interleaved slices, merged back in place.

    Slice (a, b) holds the pixels at (i mod d, j mod d) == (a, b); each
    runs the full attention block independently, so content in one slice
    cannot influence another.
    """
    if not isinstance(d, (int, np.integer)) or d < 1:
        raise ParameterError(f"attention widening factor must be an integer >= 1, got {d!r}")
    if d == 1:
        return plain_attention(h, params)
    h = check_tensor(h, "attention input")
    if h.shape[2] % d or h.shape[3] % d:
        raise DimensionError(
            f"spatial dims {h.shape[2]}x{h.shape[3]} not divisible into {d}x{d} slices"
        )
    out = np.empty_like(h)
    for a in range(d):
        for b in range(d):
            piece = np.ascontiguousarray(h[:, :, a::d, b::d])
            out[:, :, a::d, b::d] = plain_attention(piece, params)
    return out


def attn_logit_scale(trained_tokens: int, current_tokens: int) -> float:
    """sqrt(log current / log trained), the logit rescaling used by the
    feature-scaling comparison baseline."""
    if trained_tokens < 2 or current_tokens < 2:
        raise ParameterError("token counts must be >= 2")
    return math.sqrt(math.log(current_tokens) / math.log(trained_tokens))


def attn_scale_baseline(
    h: np.ndarray, params: AttentionParams, trained_tokens: int, current_tokens: int
) -> np.ndarray:
    """Plain attention with logits rescaled for the changed token count."""
    return plain_attention(h, params, logit_scale=attn_logit_scale(trained_tokens, current_tokens))


def apply_adapted_conv(
    h: np.ndarray,
    k: Kernel,
    block: str,
    step: int,
    plan: AdaptationPlan,
    operators: Optional[dict] = None,
) -> np.ndarray:
    """Dispatch one conv according to the plan at this sampling step."""
    d = schedule_eval(plan.schedule(), step, block)
    if d <= 1.0:
        return conv2d(h, k)
    if any(s.block == block for s in plan.dispersed):
        op = (operators or {}).get(block)
        if op is None:
            raise ConfigError(
                f"block {block} is dispersed in the plan but no operator was supplied"
            )
        return dispersed_conv(h, k, op, d)
    if float(d).is_integer():
        return redilated_conv(h, k, int(d))
    return fractional_redilated_conv(h, k, d)


class _Resnet:
    def __init__(self, entries: dict, prefix: str, block: str, groups: int, cin: int, cout: int):
        self.block = block
        self.groups = groups
        self.norm1 = (entries[f"{prefix}.norm1.weight"], entries[f"{prefix}.norm1.bias"])
        self.conv1 = Kernel(entries[f"{prefix}.conv1.weight"], entries[f"{prefix}.conv1.bias"])
        self.proj = (
            entries[f"{prefix}.time_emb_proj.weight"],
            entries[f"{prefix}.time_emb_proj.bias"],
        )
        self.norm2 = (entries[f"{prefix}.norm2.weight"], entries[f"{prefix}.norm2.bias"])
        self.conv2 = Kernel(entries[f"{prefix}.conv2.weight"], entries[f"{prefix}.conv2.bias"])
        self.shortcut = None
        if cin != cout:
            self.shortcut = Kernel(
                entries[f"{prefix}.conv_shortcut.weight"],
                entries[f"{prefix}.conv_shortcut.bias"],
            )

    def forward(self, h: np.ndarray, temb_act: np.ndarray, conv_fn) -> np.ndarray:
        y = _silu(group_norm(h, self.groups, *self.norm1))
        y = conv_fn(self.block, self.conv1, y)
        y = y + (self.proj[0] @ temb_act + self.proj[1])[None, :, None, None]
        y = _silu(group_norm(y, self.groups, *self.norm2))
        y = conv_fn(self.block, self.conv2, y)
        skip = h if self.shortcut is None else conv2d(h, self.shortcut)
        return skip + y


class _Stage:
    """One named block: resnets, optional attentions, optional resampler."""

    def __init__(self, name: str):
        self.name = name
        self.resnets: list = []
        self.attentions: list = []
        self.resample: Optional[Kernel] = None


class UNet:
    def __init__(self, store: WeightStore):
        self.config = store.config
        layout = required_entries(self.config)
        have, want = set(store.entries), set(layout)
        if have != want:
            missing = ", ".join(sorted(want - have)) or "none"
            extra = ", ".join(sorted(have - want)) or "none"
            raise ConfigError(f"weight entries mismatch; missing: {missing}; extra: {extra}")
        for path, shape in layout.items():
            if tuple(store.entries[path].shape) != shape:
                raise ConfigError(
                    f"{path}: expected shape {shape}, got {store.entries[path].shape}"
                )
        e = store.entries
        cfg = self.config
        self._conv_in = Kernel(e["conv_in.weight"], e["conv_in.bias"])
        self._time = (
            (e["time_embedding.linear_1.weight"], e["time_embedding.linear_1.bias"]),
            (e["time_embedding.linear_2.weight"], e["time_embedding.linear_2.bias"]),
        )
        self._cond_table = e["class_embedding.table"]
        self._cond_proj = (e["class_embedding.proj.weight"], e["class_embedding.proj.bias"])

        chans = cfg.level_channels()
        cur = cfg.base_channels
        self._down: list = []
        for l in range(cfg.levels):
            stage = _Stage(f"DB{l}")
            for j in range(cfg.blocks_per_level):
                stage.resnets.append(
                    _Resnet(e, f"DB{l}.resnets.{j}", stage.name, cfg.groups, cur, chans[l])
                )
                cur = chans[l]
            if l in cfg.attention_levels:
                for j in range(cfg.blocks_per_level):
                    stage.attentions.append(
                        AttentionParams.from_entries(e, f"DB{l}.attentions.{j}", cfg.groups)
                    )
            if l < cfg.levels - 1:
                stage.resample = Kernel(
                    e[f"DB{l}.downsamplers.0.conv.weight"], e[f"DB{l}.downsamplers.0.conv.bias"]
                )
            self._down.append(stage)

        self._mid = _Stage("MB")
        self._mid.resnets = [
            _Resnet(e, "MB.resnets.0", "MB", cfg.groups, cur, cur),
            _Resnet(e, "MB.resnets.1", "MB", cfg.groups, cur, cur),
        ]
        self._mid.attentions = [AttentionParams.from_entries(e, "MB.attentions.0", cfg.groups)]

        self._up: list = []
        for j in range(cfg.levels):
            level = cfg.levels - 1 - j
            stage = _Stage(f"UB{j}")
            for i in range(cfg.blocks_per_level):
                cin = cur + (chans[level] if i == 0 else 0)
                stage.resnets.append(
                    _Resnet(e, f"UB{j}.resnets.{i}", stage.name, cfg.groups, cin, chans[level])
                )
                cur = chans[level]
            if level in cfg.attention_levels:
                for i in range(cfg.blocks_per_level):
                    stage.attentions.append(
                        AttentionParams.from_entries(e, f"UB{j}.attentions.{i}", cfg.groups)
                    )
            if level > 0:
                stage.resample = Kernel(
                    e[f"UB{j}.upsamplers.0.conv.weight"], e[f"UB{j}.upsamplers.0.conv.bias"]
                )
            self._up.append(stage)

        self._norm_out = (e["norm_out.weight"], e["norm_out.bias"])
        self._conv_out = Kernel(e["conv_out.weight"], e["conv_out.bias"])

    def _embed(self, step: int, timestep, cond) -> np.ndarray:
        cfg = self.config
        t = step if timestep is None else timestep
        emb = timestep_embedding(t, cfg.base_channels)
        (w1, b1), (w2, b2) = self._time
        temb = w2 @ _silu(w1 @ emb + b1) + b2
        if cond is not None:
            cond = int(cond)
            if not 0 <= cond < cfg.cond_classes:
                raise ParameterError(
                    f"conditioning id must lie in [0, {cfg.cond_classes}), got {cond}"
                )
            pw, pb = self._cond_proj
            temb = temb + (pw @ self._cond_table[cond] + pb)
        return _silu(temb)

    def forward(
        self,
        x: np.ndarray,
        step: int,
        cond: Optional[int] = None,
        plan: Optional[AdaptationPlan] = None,
        operators: Optional[dict] = None,
        timestep: Optional[int] = None,
        record: Optional[dict] = None,
    ) -> np.ndarray:
        cfg = self.config
        plan = plan if plan is not None else AdaptationPlan()
        x = check_tensor(x, "latent")
        if x.shape[1] != cfg.in_channels:
            raise DimensionError(f"latent has {x.shape[1]} channels, config wants {cfg.in_channels}")
        factor = 2 ** (cfg.levels - 1)
        if x.shape[2] % factor or x.shape[3] % factor:
            raise DimensionError(
                f"spatial dims {x.shape[2]}x{x.shape[3]} must be divisible by {factor}"
            )
        known = set(cfg.block_names())
        referenced = set(plan.factors()) | set(plan.noise_damped)
        unknown = referenced - known
        if unknown:
            raise ConfigError(
                f"plan references blocks absent from this config: {', '.join(sorted(unknown))}"
            )

        temb_act = self._embed(step, timestep, cond)
        attn_d = plan.attention_d if step < plan.tau else 1

        def conv_fn(block: str, kernel: Kernel, h: np.ndarray) -> np.ndarray:
            return apply_adapted_conv(h, kernel, block, step, plan, operators)

        def note(name: str, h: np.ndarray) -> None:
            if record is not None:
                record[name] = h.copy()

        h = conv2d(x, self._conv_in)
        note("conv_in", h)

        skips = []
        for stage in self._down:
            for res in stage.resnets:
                h = res.forward(h, temb_act, conv_fn)
            for attn in stage.attentions:
                h = redilated_attention(h, attn_d, attn)
            skips.append(h)
            if stage.resample is not None:
                h = conv_fn(stage.name, stage.resample, h)[:, :, ::2, ::2]
            note(stage.name, h)

        for res in self._mid.resnets[:1]:
            h = res.forward(h, temb_act, conv_fn)
        for attn in self._mid.attentions:
            h = redilated_attention(h, attn_d, attn)
        for res in self._mid.resnets[1:]:
            h = res.forward(h, temb_act, conv_fn)
        note("MB", h)

        for stage in self._up:
            h = np.concatenate([h, skips.pop()], axis=1)
            for res in stage.resnets:
                h = res.forward(h, temb_act, conv_fn)
            for attn in stage.attentions:
                h = redilated_attention(h, attn_d, attn)
            if stage.resample is not None:
                h = np.repeat(np.repeat(h, 2, axis=2), 2, axis=3)
                h = conv2d(h, stage.resample)
            note(stage.name, h)

        h = _silu(group_norm(h, cfg.groups, *self._norm_out))
        h = conv2d(h, self._conv_out)
        note("conv_out", h)
        return h

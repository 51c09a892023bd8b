"""Command-line entry point.

Subcommands: disperse (solve an enlargement operator), sample (run the
DDIM trajectory from a plan), verify (execute the library's property
checks), erf (measure receptive footprints), tile (tiled decode with
synchronized normalization).

Exit codes are stable for scripting: 0 success, 2 configuration error,
3 numerical failure (including failing verify checks), 4 I/O error.
Every command prints a human report by default and JSON with --json.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dispersion import (
    CalibrationSet,
    evaluate_objective,
    operator_residuals,
    solve_dispersion,
    solve_for_kernel,
)
from .dten import read_dten
from .errors import (
    ConfigError,
    DimensionError,
    NumericalError,
    ParameterError,
    SingularSystemError,
    TruncationError,
)
from .guidance import noise_damped_cfg, standard_cfg
from .images import write_pgm, write_png
from .normalization import GroupNormStats
from .plans import AdaptationPlan, RedilatedSpec, default_operator
from .redilation import fractional_redilated_conv, redilated_conv
from .sampler import SamplerConfig, sample
from .tensorcore import (
    Kernel,
    conv2d,
    footprint_count,
    footprint_width,
    impulse_response,
)
from .tiling import TileLayout, TinyDecoder, synchronized_stats, tiled_apply
from .unet import UNet, UNetConfig, WeightStore, init_toy_weights

__all__ = ["VerifyCheck", "VerifyReport", "main"]


@dataclass(frozen=True)
class VerifyCheck:
    name: str
    passed: bool
    measured: float
    threshold: float

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "measured": self.measured,
            "threshold": self.threshold,
        }


@dataclass(frozen=True)
class VerifyReport:
    suite: str
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "passed": self.passed,
            "checks": [c.to_dict() for c in self.checks],
        }


def _upper_bound(name: str, measured: float, threshold: float) -> VerifyCheck:
    return VerifyCheck(name, measured <= threshold, float(measured), float(threshold))


def _lower_bound(name: str, measured: float, threshold: float) -> VerifyCheck:
    return VerifyCheck(name, measured >= threshold, float(measured), float(threshold))


def _suite_identity(seed: int) -> list:
    rng = np.random.default_rng(seed)
    h = np.ascontiguousarray(rng.standard_normal((1, 3, 12, 12)).astype(np.float32))
    k = Kernel(
        rng.standard_normal((2, 3, 3, 3)).astype(np.float32),
        rng.standard_normal(2).astype(np.float32),
    )
    checks = [
        _upper_bound(
            "redilation_identity",
            float(np.max(np.abs(conv2d(h, k) - redilated_conv(h, k, 1)))),
            0.0,
        ),
        _upper_bound(
            "fractional_degeneration",
            float(np.max(np.abs(fractional_redilated_conv(h, k, 2.0) - redilated_conv(h, k, 2)))),
            1e-6,
        ),
    ]
    c = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    u = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    checks.append(
        _upper_bound(
            "guidance_degeneration",
            float(np.max(np.abs(noise_damped_cfg(u, c, u, 7.5) - standard_cfg(c, u, 7.5)))),
            0.0,
        )
    )
    net = UNet(init_toy_weights(UNetConfig(), seed=0))
    x = np.ascontiguousarray(rng.standard_normal((1, 4, 16, 16)).astype(np.float32))
    plain = net.forward(x, 1, cond=1)
    unit = net.forward(
        x, 1, cond=1,
        plan=AdaptationPlan(redilated=(RedilatedSpec("MB", 1.0),), tau=2, steps=4),
    )
    checks.append(_upper_bound("plan_identity", float(np.max(np.abs(plain - unit))), 0.0))
    return checks


def _suite_dispersion(seed: int) -> list:
    calib = CalibrationSet.white_noise(count=48, size=16, seed=seed)
    op = solve_dispersion(3, 5, 2, 1.0, calib)
    checks = [
        _upper_bound("structure_residual", op.structure_residual, 0.5),
        _upper_bound("pixel_residual", op.pixel_residual, 0.35),
    ]
    rng = np.random.default_rng(seed + 1)
    gap = 0.0
    for _ in range(6):
        k = rng.standard_normal((3, 3)).astype(np.float32)
        via_op = (op.R @ k.reshape(-1)).reshape(5, 5)
        direct = solve_for_kernel(k, 5, 2, 1.0, calib)
        o1 = evaluate_objective(via_op, k, 2, 1.0, calib)
        o2 = evaluate_objective(direct, k, 2, 1.0, calib)
        gap = max(gap, abs(o1 - o2) / max(o1, o2))
    checks.append(_upper_bound("universality_gap", gap, 1e-6))
    holdout = CalibrationSet.white_noise(count=48, size=16, seed=seed + 7919)
    s_hold, _ = operator_residuals(op, holdout)
    checks.append(_upper_bound("holdout_residual_ratio", s_hold / op.structure_residual, 2.0))
    return checks


def _suite_tiling(seed: int) -> list:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 4, 40, 40)).astype(np.float32)
    x = np.ascontiguousarray(x + np.linspace(0.0, 5.0, 40, dtype=np.float32)[None, None, None, :])
    decoder = TinyDecoder.seeded(seed=seed)
    layout = TileLayout.grid((40, 40), 24, 8)
    full = decoder.forward(x)
    synced = tiled_apply(decoder, x, layout, sync=True).output
    unsynced = tiled_apply(decoder, x, layout, sync=False).output
    gap_on = float(np.max(np.abs(synced - full)))
    gap_off = float(np.max(np.abs(unsynced - full)))
    acc = np.zeros(layout.image_hw, dtype=np.float64)
    for t in layout.tiles(decoder.receptive_radius):
        acc[t.y0 : t.y1, t.x0 : t.x1] += np.outer(t.wy, t.wx)
    merged = synchronized_stats(decoder, x, layout)
    stats_gap = 0.0
    for l, stats in enumerate(merged):
        feat = decoder.prefix(x, l, merged)
        reference = GroupNormStats.from_tensor(feat, decoder.groups)
        for got, want in zip(stats.mean_var(), reference.mean_var()):
            stats_gap = max(stats_gap, float(np.max(np.abs(got - want))))
    return [
        _upper_bound("sync_full_image_gap", gap_on, 1e-4),
        _lower_bound("sync_off_artifact_ratio", gap_off / max(gap_on, 1e-30), 10.0),
        _upper_bound("blend_partition_deviation", float(np.max(np.abs(acc - 1.0))), 1e-6),
        _upper_bound("stats_merge_gap", stats_gap, 1e-8),
    ]


_SUITES = {
    "identity": _suite_identity,
    "dispersion": _suite_dispersion,
    "tiling": _suite_tiling,
}


def _parse_size(text: str) -> tuple:
    parts = text.lower().split("x")
    if len(parts) != 2 or not all(p.isdigit() and int(p) > 0 for p in parts):
        raise ConfigError(f"size must look like 128x128, got {text!r}")
    return int(parts[0]), int(parts[1])


def _cmd_disperse(args) -> tuple:
    size = max(16, 2 * args.rprime + 3)
    calib = CalibrationSet.white_noise(count=64, size=size, seed=args.seed)
    op = solve_dispersion(args.r, args.rprime, args.d, args.eta, calib)
    op.save(args.out)
    report = {
        "command": "disperse",
        "r": op.r,
        "rprime": op.rprime,
        "d": op.d,
        "eta": op.eta,
        "structure_residual": op.structure_residual,
        "pixel_residual": op.pixel_residual,
        "out": str(args.out),
    }
    lines = [
        f"solved {op.r}x{op.r} -> {op.rprime}x{op.rprime} at scale {op.d} (eta={op.eta})",
        f"structure_residual {op.structure_residual:.6f}",
        f"pixel_residual {op.pixel_residual:.6f}",
        f"wrote {args.out}",
    ]
    return 0, report, lines


def _cmd_sample(args) -> tuple:
    plan = AdaptationPlan.load(args.plan)
    if args.weights:
        store = WeightStore.load(args.weights)
    else:
        store = init_toy_weights(UNetConfig(), seed=0)
    net = UNet(store)
    height, width = _parse_size(args.size)
    cfg = SamplerConfig(
        seed=args.seed, latent_shape=(store.config.in_channels, height, width)
    )
    result = sample(net, plan, cfg, cond=args.cond, dump_dir=args.dump_steps)
    if args.out:
        write_png(args.out, result.output)
    report = {
        "command": "sample",
        "plan": str(args.plan),
        "size": [height, width],
        "seed": args.seed,
        "steps": len(result.residuals),
        "residuals": list(result.residuals),
        "timesteps": list(result.timesteps),
        "out": str(args.out) if args.out else None,
        "dump_steps": str(args.dump_steps) if args.dump_steps else None,
    }
    lines = [f"sampled {height}x{width} latent in {len(result.residuals)} steps (seed {args.seed})"]
    if args.out:
        lines.append(f"wrote {args.out}")
    if args.dump_steps:
        lines.append(f"dumped per-step frames to {args.dump_steps}")
    lines.append(f"final residual {result.residuals[-1]:.6f}")
    return 0, report, lines


def _cmd_verify(args) -> tuple:
    names = list(_SUITES) if args.suite == "all" else [args.suite]
    checks = []
    for name in names:
        checks.extend(_SUITES[name](args.seed))
    report_obj = VerifyReport(suite=args.suite, checks=tuple(checks))
    report = {"command": "verify", **report_obj.to_dict()}
    lines = [
        f"{'PASS' if c.passed else 'FAIL'} {c.name}: measured={c.measured:.3e} "
        f"threshold={c.threshold:.3e}"
        for c in checks
    ]
    lines.append(
        f"{len(checks)} checks, {sum(not c.passed for c in checks)} failed"
        f" ({args.suite} suite)"
    )
    return (0 if report_obj.passed else 3), report, lines


def _probe_kernel() -> Kernel:
    return Kernel(np.ones((1, 1, 3, 3), dtype=np.float32))


def _erf_entry(mode: str, block, d: float) -> dict:
    k = _probe_kernel()
    extent = 25

    def redilated(g):
        if float(d).is_integer():
            return redilated_conv(g, k, int(d))
        return fractional_redilated_conv(g, k, d)

    if mode == "redilated":
        resp = impulse_response(redilated, extent)
        entry = {"mode": mode, "block": block, "d": d}
    else:
        op = default_operator(math.ceil(d))

        def dispersed(g):
            from .dispersion import dispersed_conv

            return dispersed_conv(g, k, op, d)

        resp = impulse_response(dispersed, extent)
        entry = {"mode": mode, "block": block, "d": d}
        base = impulse_response(redilated, extent)
        entry["gap_fill"] = footprint_count(resp) - footprint_count(base)
    height, width = footprint_width(resp)
    entry["width"] = max(height, width)
    entry["taps"] = footprint_count(resp)
    entry["_frame"] = np.max(np.abs(resp), axis=(0, 1))
    return entry


def _cmd_erf(args) -> tuple:
    if args.plan:
        plan = AdaptationPlan.load(args.plan)
        specs = [("redilated", s.block, s.d) for s in plan.redilated]
        specs += [("dispersed", s.block, s.d) for s in plan.dispersed]
        if not specs:
            raise ConfigError("plan adapts no blocks; nothing to probe")
    elif args.d is not None:
        specs = [(args.mode, None, args.d)]
    else:
        raise ConfigError("provide --plan or --d")

    out = Path(args.out)
    entries = []
    lines = []
    for mode, block, d in specs:
        entry = _erf_entry(mode, block, d)
        frame = entry.pop("_frame")
        path = out if len(specs) == 1 else out.with_name(f"{out.stem}_{block}{out.suffix}")
        write_pgm(path, frame)
        entry["image"] = str(path)
        entries.append(entry)
        label = f"{block} {mode}" if block else mode
        extra = f", gap_fill {entry['gap_fill']}" if "gap_fill" in entry else ""
        lines.append(
            f"{label} d={d}: width {entry['width']} (base 3), "
            f"taps {entry['taps']}{extra} -> {path}"
        )
    return 0, {"command": "erf", "entries": entries}, lines


def _cmd_tile(args) -> tuple:
    x = read_dten(args.input)
    decoder = TinyDecoder.load(args.weights) if args.weights else TinyDecoder.seeded(seed=0)
    layout = TileLayout.grid(tuple(x.shape[2:]), args.tile, args.overlap)
    result = tiled_apply(decoder, x, layout, sync=(args.sync == "on"))
    write_png(args.out, result.output)
    report = {
        "command": "tile",
        "input": str(args.input),
        "grid": list(layout.grid_shape),
        "sync": args.sync,
        "warnings": list(result.warnings),
        "out": str(args.out),
    }
    lines = [f"decoded {x.shape[2]}x{x.shape[3]} in {layout.grid_shape} tiles (sync {args.sync})"]
    lines.extend(f"warning: {w}" for w in result.warnings)
    lines.append(f"wrote {args.out}")
    return 0, report, lines


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rescalekit",
        description="Receptive-field adaptation toolkit for conv denoisers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--json", action="store_true", help="emit a JSON report")
        p.set_defaults(handler=handler)
        return p

    p = add("disperse", _cmd_disperse, "solve a kernel enlargement operator")
    p.add_argument("--r", type=int, required=True, help="source kernel size")
    p.add_argument("--rprime", type=int, required=True, help="enlarged kernel size")
    p.add_argument("--d", type=float, required=True, help="perception-field multiple")
    p.add_argument("--eta", type=float, required=True, help="pixel-term weight")
    p.add_argument("--seed", type=int, required=True, help="calibration noise seed")
    p.add_argument("--out", required=True, help="output operator path (.dten)")

    p = add("sample", _cmd_sample, "run the deterministic sampling trajectory")
    p.add_argument("--plan", required=True, help="adaptation plan JSON")
    p.add_argument("--weights", help="denoiser weights (.dten); seeded toy weights if omitted")
    p.add_argument("--seed", type=int, required=True, help="initial-noise seed")
    p.add_argument("--size", required=True, help="latent size, e.g. 128x128")
    p.add_argument("--out", help="output PNG path")
    p.add_argument("--dump-steps", help="directory for per-step diagnostic PGMs")
    p.add_argument("--cond", type=int, default=0, help="conditioning class id")

    p = add("verify", _cmd_verify, "run the library's property checks")
    p.add_argument("--suite", choices=["all", *sorted(_SUITES)], default="all")
    p.add_argument("--seed", type=int, default=0)

    p = add("erf", _cmd_erf, "measure receptive footprints of adapted convs")
    p.add_argument("--plan", help="probe every adapted block of this plan")
    p.add_argument("--d", type=float, help="probe a single widening factor")
    p.add_argument("--mode", choices=["redilated", "dispersed"], default="redilated")
    p.add_argument("--out", required=True, help="heatmap image path (PGM)")

    p = add("tile", _cmd_tile, "tiled decode with synchronized normalization")
    p.add_argument("--input", required=True, help="latent tensor (.dten)")
    p.add_argument("--weights", help="decoder weights (.dten); seeded stand-in if omitted")
    p.add_argument("--tile", type=int, required=True, help="tile edge length")
    p.add_argument("--overlap", type=int, required=True, help="tile overlap in pixels")
    p.add_argument("--sync", choices=["on", "off"], default="on")
    p.add_argument("--out", required=True, help="output PNG path")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        code, report, lines = args.handler(args)
    except (ConfigError, ParameterError, DimensionError, TruncationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SingularSystemError, NumericalError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        for line in lines:
            print(line)
    return code


if __name__ == "__main__":
    raise SystemExit(main())

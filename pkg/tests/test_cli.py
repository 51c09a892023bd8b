"""Command-line surface: arguments, exit codes, reports, artifacts."""

import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from rescalekit.cli import main
from rescalekit.dispersion import DispersionOperator
from rescalekit.dten import write_dten
from rescalekit.plans import AdaptationPlan, RedilatedSpec
from rescalekit.tiling import TinyDecoder
from rescalekit.unet import UNetConfig, init_toy_weights


@pytest.fixture()
def plan_path(tmp_path):
    plan = AdaptationPlan(redilated=(RedilatedSpec("MB", 2.0),), tau=1, steps=3)
    path = tmp_path / "plan.json"
    plan.save(path)
    return path


@pytest.fixture(scope="module")
def weights_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("weights") / "toy.dten"
    init_toy_weights(UNetConfig(), seed=11).save(path)
    return path


def run_json(capsys, argv):
    code = main(argv + ["--json"])
    out = capsys.readouterr().out
    return code, json.loads(out)


class TestDisperse:
    def test_writes_operator(self, tmp_path, capsys):
        out = tmp_path / "op.dten"
        code = main(
            ["disperse", "--r", "3", "--rprime", "5", "--d", "2", "--eta", "1.0",
             "--seed", "0", "--out", str(out)]
        )
        assert code == 0
        op = DispersionOperator.load(out)
        assert (op.r, op.rprime, op.d) == (3, 5, 2.0)
        text = capsys.readouterr().out
        assert "structure_residual" in text

    def test_json_report(self, tmp_path, capsys):
        out = tmp_path / "op.dten"
        code, report = run_json(
            capsys,
            ["disperse", "--r", "3", "--rprime", "5", "--d", "2", "--eta", "1.0",
             "--seed", "0", "--out", str(out)],
        )
        assert code == 0
        assert report["command"] == "disperse"
        assert report["structure_residual"] > 0.0
        assert report["pixel_residual"] > 0.0

    def test_bad_geometry_is_config_error(self, tmp_path):
        code = main(
            ["disperse", "--r", "3", "--rprime", "7", "--d", "2", "--eta", "1.0",
             "--seed", "0", "--out", str(tmp_path / "op.dten")]
        )
        assert code == 2

    def test_seed_required(self, tmp_path):
        code = main(
            ["disperse", "--r", "3", "--rprime", "5", "--d", "2", "--eta", "1.0",
             "--out", str(tmp_path / "op.dten")]
        )
        assert code == 2


class TestSample:
    def test_renders_png(self, tmp_path, plan_path, weights_path):
        out = tmp_path / "img.png"
        code = main(
            ["sample", "--plan", str(plan_path), "--weights", str(weights_path),
             "--seed", "3", "--size", "8x8", "--out", str(out)]
        )
        assert code == 0
        img = Image.open(out)
        assert img.size == (8, 8)
        assert img.mode == "RGB"

    def test_deterministic_output_bytes(self, tmp_path, plan_path, weights_path):
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        for out in (a, b):
            assert main(
                ["sample", "--plan", str(plan_path), "--weights", str(weights_path),
                 "--seed", "3", "--size", "8x8", "--out", str(out)]
            ) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_dump_steps(self, tmp_path, plan_path, weights_path):
        dump = tmp_path / "steps"
        code = main(
            ["sample", "--plan", str(plan_path), "--weights", str(weights_path),
             "--seed", "3", "--size", "8x8", "--dump-steps", str(dump)]
        )
        assert code == 0
        frames = sorted(p.name for p in dump.iterdir())
        assert len(frames) == 12
        assert "step_000_x0.pgm" in frames

    def test_json_report(self, tmp_path, plan_path, weights_path, capsys):
        code, report = run_json(
            capsys,
            ["sample", "--plan", str(plan_path), "--weights", str(weights_path),
             "--seed", "3", "--size", "8x8"],
        )
        assert code == 0
        assert report["steps"] == 3
        assert len(report["residuals"]) == 3

    def test_bad_size_string(self, plan_path, weights_path):
        code = main(
            ["sample", "--plan", str(plan_path), "--weights", str(weights_path),
             "--seed", "3", "--size", "8by8"]
        )
        assert code == 2

    def test_indivisible_size(self, plan_path, weights_path):
        code = main(
            ["sample", "--plan", str(plan_path), "--weights", str(weights_path),
             "--seed", "3", "--size", "10x10"]
        )
        assert code == 2

    def test_missing_plan_is_io_error(self, tmp_path, weights_path):
        code = main(
            ["sample", "--plan", str(tmp_path / "nope.json"), "--weights",
             str(weights_path), "--seed", "3", "--size", "8x8"]
        )
        assert code == 4

    def test_malformed_plan_is_config_error(self, tmp_path, weights_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"bogus": 1}')
        code = main(
            ["sample", "--plan", str(bad), "--weights", str(weights_path),
             "--seed", "3", "--size", "8x8"]
        )
        assert code == 2

    def test_default_weights(self, tmp_path, plan_path):
        code = main(
            ["sample", "--plan", str(plan_path), "--seed", "3", "--size", "8x8",
             "--out", str(tmp_path / "img.png")]
        )
        assert code == 0


class TestVerify:
    @pytest.mark.parametrize("suite", ["identity", "dispersion", "tiling", "all"])
    def test_suites_pass(self, suite, capsys):
        code, report = run_json(capsys, ["verify", "--suite", suite])
        assert code == 0
        assert report["passed"] is True
        assert all(c["passed"] for c in report["checks"])

    def test_dispersion_suite_reports_residuals(self, capsys):
        _, report = run_json(capsys, ["verify", "--suite", "dispersion"])
        names = {c["name"] for c in report["checks"]}
        assert {"structure_residual", "pixel_residual", "universality_gap"} <= names

    def test_tiling_suite_reports_full_image_gap(self, capsys):
        _, report = run_json(capsys, ["verify", "--suite", "tiling"])
        gap = next(c for c in report["checks"] if c["name"] == "sync_full_image_gap")
        assert gap["measured"] <= 1e-4

    def test_human_output_lines(self, capsys):
        code = main(["verify", "--suite", "identity"])
        assert code == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.strip()]
        assert all(l.startswith("PASS") or l.startswith("FAIL") for l in lines[:-1])

    def test_unknown_suite(self):
        assert main(["verify", "--suite", "bogus"]) == 2


class TestErf:
    def test_redilated_width(self, tmp_path, capsys):
        out = tmp_path / "erf.pgm"
        code, report = run_json(capsys, ["erf", "--d", "2", "--out", str(out)])
        assert code == 0
        entry = report["entries"][0]
        assert entry["width"] == 5
        assert entry["taps"] == 9
        assert out.exists() and out.read_bytes().startswith(b"P5\n")

    def test_unit_factor_width(self, tmp_path, capsys):
        code, report = run_json(
            capsys, ["erf", "--d", "1", "--out", str(tmp_path / "e.pgm")]
        )
        assert code == 0
        assert report["entries"][0]["width"] == 3

    def test_dispersed_fills_gaps(self, tmp_path, capsys):
        code, report = run_json(
            capsys,
            ["erf", "--d", "2", "--mode", "dispersed", "--out", str(tmp_path / "e.pgm")],
        )
        assert code == 0
        entry = report["entries"][0]
        assert entry["width"] <= 5
        assert entry["gap_fill"] > 0

    def test_plan_mode(self, tmp_path, plan_path, capsys):
        code, report = run_json(
            capsys, ["erf", "--plan", str(plan_path), "--out", str(tmp_path / "e.pgm")]
        )
        assert code == 0
        assert [e["block"] for e in report["entries"]] == ["MB"]
        assert report["entries"][0]["width"] == 5

    def test_requires_plan_or_factor(self, tmp_path):
        assert main(["erf", "--out", str(tmp_path / "e.pgm")]) == 2


class TestTile:
    @pytest.fixture()
    def latent_path(self, tmp_path):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 4, 40, 40)).astype(np.float32)
        x += np.linspace(0, 4, 40, dtype=np.float32)[None, None, None, :]
        path = tmp_path / "x.dten"
        write_dten(path, np.ascontiguousarray(x))
        return path

    def test_tiled_decode(self, tmp_path, latent_path, capsys):
        out = tmp_path / "y.png"
        code, report = run_json(
            capsys,
            ["tile", "--input", str(latent_path), "--tile", "24", "--overlap", "8",
             "--sync", "on", "--out", str(out)],
        )
        assert code == 0
        assert report["warnings"] == []
        assert report["grid"] == [2, 2]
        img = Image.open(out)
        assert img.size == (40, 40)
        assert img.mode == "RGB"

    def test_sync_off_runs(self, tmp_path, latent_path):
        code = main(
            ["tile", "--input", str(latent_path), "--tile", "24", "--overlap", "8",
             "--sync", "off", "--out", str(tmp_path / "y.png")]
        )
        assert code == 0

    def test_saved_decoder_weights(self, tmp_path, latent_path):
        dec_path = tmp_path / "dec.dten"
        TinyDecoder.seeded(seed=9).save(dec_path)
        code = main(
            ["tile", "--input", str(latent_path), "--weights", str(dec_path),
             "--tile", "24", "--overlap", "8", "--sync", "on",
             "--out", str(tmp_path / "y.png")]
        )
        assert code == 0

    def test_thin_overlap_reports_warning(self, tmp_path, latent_path, capsys):
        code, report = run_json(
            capsys,
            ["tile", "--input", str(latent_path), "--tile", "20", "--overlap", "6",
             "--sync", "on", "--out", str(tmp_path / "y.png")],
        )
        assert code == 0
        assert any("overlap" in w for w in report["warnings"])

    def test_missing_input_is_io_error(self, tmp_path):
        code = main(
            ["tile", "--input", str(tmp_path / "nope.dten"), "--tile", "24",
             "--overlap", "8", "--sync", "on", "--out", str(tmp_path / "y.png")]
        )
        assert code == 4

    def test_invalid_layout_is_config_error(self, tmp_path, latent_path):
        code = main(
            ["tile", "--input", str(latent_path), "--tile", "15", "--overlap", "8",
             "--sync", "on", "--out", str(tmp_path / "y.png")]
        )
        assert code == 2


class TestEntryPoint:
    def test_module_invocation(self):
        proc = subprocess.run(
            [sys.executable, "-m", "rescalekit.cli", "verify", "--suite", "identity"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert "PASS" in proc.stdout

"""Byte-level checks for the PNG/PGM emitters."""

import numpy as np
import pytest
from PIL import Image

from rescalekit.errors import DimensionError
from rescalekit.images import channel_mean_frame, to_uint8, write_png, write_pgm


class TestToUint8:
    def test_frozen_mapping(self):
        # linear [-1, 1] -> [0, 255], banker's rounding at .5
        x = np.array([-1.0, -0.5, 0.0, 0.5, 1.0], dtype=np.float32)
        assert to_uint8(x).tolist() == [0, 64, 128, 191, 255]

    def test_clips_out_of_range(self):
        x = np.array([-3.0, 3.0], dtype=np.float32)
        assert to_uint8(x).tolist() == [0, 255]

    def test_dtype(self):
        assert to_uint8(np.zeros(4, dtype=np.float32)).dtype == np.uint8


class TestWritePng:
    def test_single_channel_writes_grayscale(self, tmp_path):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, size=(1, 1, 6, 5)).astype(np.float32)
        path = tmp_path / "g.png"
        write_png(path, x)
        img = Image.open(path)
        assert img.mode == "L"
        assert img.size == (5, 6)
        assert np.array_equal(np.asarray(img), to_uint8(x[0, 0]))

    def test_multichannel_uses_first_three_as_rgb(self, tmp_path):
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, size=(1, 4, 4, 7)).astype(np.float32)
        path = tmp_path / "c.png"
        write_png(path, x)
        img = Image.open(path)
        assert img.mode == "RGB"
        assert img.size == (7, 4)
        got = np.asarray(img)
        want = np.stack([to_uint8(x[0, c]) for c in range(3)], axis=-1)
        assert np.array_equal(got, want)

    def test_three_dim_input_accepted(self, tmp_path):
        x = np.zeros((1, 4, 4), dtype=np.float32)
        write_png(tmp_path / "z.png", x)
        assert Image.open(tmp_path / "z.png").size == (4, 4)

    def test_two_channels_rejected(self, tmp_path):
        with pytest.raises(DimensionError):
            write_png(tmp_path / "bad.png", np.zeros((1, 2, 4, 4), dtype=np.float32))

    def test_batch_larger_than_one_rejected(self, tmp_path):
        with pytest.raises(DimensionError):
            write_png(tmp_path / "bad.png", np.zeros((2, 1, 4, 4), dtype=np.float32))


class TestChannelMeanFrame:
    def test_mean_over_channels(self):
        x = np.zeros((1, 2, 3, 3), dtype=np.float32)
        x[0, 0] = 1.0
        x[0, 1] = 3.0
        frame = channel_mean_frame(x)
        assert frame.shape == (3, 3)
        assert np.allclose(frame, 2.0)


class TestWritePgm:
    def _parse(self, path):
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n")
        header, _, payload = raw.partition(b"255\n")
        dims = header.split(b"\n")[1].split()
        w, h = int(dims[0]), int(dims[1])
        return w, h, np.frombuffer(payload, dtype=np.uint8).reshape(h, w)

    def test_autoscale_spans_full_range(self, tmp_path):
        frame = np.array([[0.0, 5.0], [10.0, 5.0]], dtype=np.float32)
        path = tmp_path / "f.pgm"
        write_pgm(path, frame)
        w, h, data = self._parse(path)
        assert (w, h) == (2, 2)
        assert data.tolist() == [[0, 128], [255, 128]]

    def test_constant_frame_is_mid_gray(self, tmp_path):
        path = tmp_path / "c.pgm"
        write_pgm(path, np.full((3, 4), 7.5, dtype=np.float32))
        _, _, data = self._parse(path)
        assert np.all(data == 128)

    def test_fixed_range_mode(self, tmp_path):
        path = tmp_path / "r.pgm"
        write_pgm(path, np.array([[-1.0, 0.0, 1.0]], dtype=np.float32), autoscale=False)
        _, _, data = self._parse(path)
        assert data.tolist() == [[0, 128, 255]]

    def test_non_2d_rejected(self, tmp_path):
        with pytest.raises(DimensionError):
            write_pgm(tmp_path / "bad.pgm", np.zeros((2, 2, 2), dtype=np.float32))

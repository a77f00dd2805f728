"""PPM and STSCW byte-level behavior, plus dataset scanning."""

import struct
import zlib

import numpy as np
import pytest

from stsc import formats
from stsc.formats import (CrcError, FormatError, read_image, read_weights,
                          scan_dataset, write_image, write_weights)
from stsc.layers import ParamStore
from stsc.tensor import Tensor


class TestPpm:
    def test_roundtrip_is_bit_exact_for_quantized_values(self, tmp_path):
        rng = np.random.default_rng(1)
        q = rng.integers(0, 256, (1, 3, 7, 5), dtype=np.uint8)
        t = Tensor((q / 255.0).astype(np.float32))
        p = tmp_path / "x.ppm"
        write_image(t, p)
        back = read_image(p)
        assert np.array_equal(np.floor(back.data * 255 + 0.5), q)

    def test_header_bytes(self, tmp_path):
        p = tmp_path / "x.ppm"
        write_image(Tensor(np.zeros((1, 3, 4, 6), dtype=np.float32)), p)
        raw = p.read_bytes()
        assert raw.startswith(b"P6\n6 4\n255\n")
        assert len(raw) == len(b"P6\n6 4\n255\n") + 4 * 6 * 3

    def test_rounding_half_away_from_zero(self, tmp_path):
        t = Tensor(np.full((1, 3, 1, 1), 127.5 / 255.0, dtype=np.float64))
        p = tmp_path / "x.ppm"
        write_image(t, p)
        assert p.read_bytes()[-1] == 128

    def test_values_clamped(self, tmp_path):
        t = Tensor(np.array([[[[-0.5]], [[0.5]], [[1.5]]]], dtype=np.float32))
        p = tmp_path / "x.ppm"
        write_image(t, p)
        assert list(p.read_bytes()[-3:]) == [0, 128, 255]

    def test_comments_and_whitespace_tolerated(self, tmp_path):
        p = tmp_path / "x.ppm"
        p.write_bytes(b"P6 # a comment\n# another\n 2\t1 \n255\n" + bytes(6))
        assert read_image(p).shape == (1, 3, 1, 2)

    def test_p5_rejected_with_offset(self, tmp_path):
        p = tmp_path / "x.ppm"
        p.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(FormatError, match="byte 0"):
            read_image(p)

    def test_wrong_maxval_rejected(self, tmp_path):
        p = tmp_path / "x.ppm"
        p.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(FormatError, match="maxval"):
            read_image(p)

    def test_truncated_payload_names_offset(self, tmp_path):
        p = tmp_path / "x.ppm"
        p.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(FormatError, match="truncated payload"):
            read_image(p)

    def test_channel_order_is_rgb(self, tmp_path):
        p = tmp_path / "x.ppm"
        p.write_bytes(b"P6\n1 1\n255\n" + bytes([255, 0, 0]))
        t = read_image(p)
        assert t.data[0, 0, 0, 0] == 1.0 and t.data[0, 1, 0, 0] == 0.0


def _store():
    s = ParamStore()
    s.add("a.weight", Tensor(np.arange(24, dtype=np.float32).reshape(2, 3, 2, 2)))
    s.add("a.bias", Tensor(np.array([1.0, -2.0], dtype=np.float32)))
    s.add("meta.iter", Tensor(np.array([7.0], dtype=np.float64)))
    return s


class TestStscw:
    def test_roundtrip_bit_exact(self, tmp_path):
        p = str(tmp_path / "w.stscw")
        write_weights(_store(), p)
        back = read_weights(p)
        src = _store()
        assert list(back.names()) == list(src.names())
        for n in src.names():
            assert back[n].dtype == src[n].dtype
            assert np.array_equal(back[n].data, src[n].data)

    def test_deterministic_bytes(self, tmp_path):
        p1, p2 = str(tmp_path / "1"), str(tmp_path / "2")
        write_weights(_store(), p1)
        write_weights(_store(), p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_magic_and_count(self, tmp_path):
        p = str(tmp_path / "w")
        write_weights(_store(), p)
        raw = open(p, "rb").read()
        assert raw[:8] == b"STSCW001"
        assert struct.unpack_from("<I", raw, 8)[0] == 3

    def test_trailing_crc_verifies(self, tmp_path):
        p = str(tmp_path / "w")
        write_weights(_store(), p)
        raw = open(p, "rb").read()
        assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4]) & 0xFFFFFFFF

    def test_single_flipped_bit_detected(self, tmp_path):
        p = str(tmp_path / "w")
        write_weights(_store(), p)
        raw = bytearray(open(p, "rb").read())
        raw[30] ^= 0x01
        open(p, "wb").write(bytes(raw))
        with pytest.raises(CrcError):
            read_weights(p)

    def test_bad_magic_reported_before_crc(self, tmp_path):
        p = str(tmp_path / "w")
        write_weights(_store(), p)
        raw = bytearray(open(p, "rb").read())
        raw[0] = ord(b"X")
        open(p, "wb").write(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            read_weights(p)

    def test_float64_tag(self, tmp_path):
        p = str(tmp_path / "w")
        write_weights(_store(), p)
        back = read_weights(p)
        assert back["meta.iter"].dtype == np.float64
        assert back["a.weight"].dtype == np.float32

    def test_no_tmp_file_left_behind(self, tmp_path):
        p = tmp_path / "w"
        write_weights(_store(), str(p))
        assert sorted(f.name for f in tmp_path.iterdir()) == ["w"]

    def test_truncated_file_rejected(self, tmp_path):
        p = str(tmp_path / "w")
        write_weights(_store(), p)
        raw = open(p, "rb").read()
        open(p, "wb").write(raw[: len(raw) // 2])
        with pytest.raises(FormatError):
            read_weights(p)

    def test_order_preserved(self, tmp_path):
        s = ParamStore()
        for n in ("z.weight", "a.weight", "m.weight"):
            s.add(n, Tensor(np.zeros(1, dtype=np.float32)))
        p = str(tmp_path / "w")
        write_weights(s, p)
        assert list(read_weights(p).names()) == ["z.weight", "a.weight", "m.weight"]


class TestScanDataset:
    def _make(self, tmp_path, names, hw=16):
        for d in ("input", "gt"):
            (tmp_path / d).mkdir(exist_ok=True)
        rng = np.random.default_rng(0)
        for d, ns in names.items():
            for n in ns:
                img = Tensor(rng.uniform(0, 1, (1, 3, hw, hw)).astype(np.float32))
                write_image(img, tmp_path / d / n)

    def test_pairs_sorted(self, tmp_path):
        self._make(tmp_path, {"input": ["b.ppm", "a.ppm"], "gt": ["a.ppm", "b.ppm"]})
        layout = scan_dataset(tmp_path)
        assert [p[0] for p in layout.pairs] == ["a.ppm", "b.ppm"]
        assert not layout.warnings

    def test_unpaired_warned(self, tmp_path):
        self._make(tmp_path, {"input": ["a.ppm", "c.ppm"], "gt": ["a.ppm", "d.ppm"]})
        layout = scan_dataset(tmp_path)
        assert [p[0] for p in layout.pairs] == ["a.ppm"]
        assert len(layout.warnings) == 2

    def test_missing_dir_raises(self, tmp_path):
        (tmp_path / "input").mkdir()
        with pytest.raises(FormatError, match="layout"):
            scan_dataset(tmp_path)

    def test_min_size_filter(self, tmp_path):
        self._make(tmp_path, {"input": ["small.ppm"], "gt": ["small.ppm"]}, hw=8)
        layout = scan_dataset(tmp_path, min_size=16)
        assert not layout.pairs
        assert any("small.ppm" in w for w in layout.warnings)

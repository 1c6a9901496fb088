"""Codec exactness and fuzz robustness."""

import struct

import numpy as np
import pytest

from ctxsyn import codecs
from ctxsyn.codecs import (CodecError, FlowField, Frame, TensorContainer,
                           read_container, read_flo, read_image,
                           write_container, write_flo, write_image)


def random_flow(rng, w=None, h=None) -> FlowField:
    w = w or int(rng.integers(1, 24))
    h = h or int(rng.integers(1, 24))
    return FlowField(w, h,
                     rng.standard_normal((h, w)).astype(np.float32) * 10,
                     rng.standard_normal((h, w)).astype(np.float32) * 10)


def random_frame(rng, w=None, h=None) -> Frame:
    w = w or int(rng.integers(1, 24))
    h = h or int(rng.integers(1, 24))
    return Frame.from_array(rng.random((3, h, w)).astype(np.float32))


class TestFlo:
    def test_zero_field_roundtrip(self):
        f = codecs.zero_flow(2, 2)
        out = read_flo(write_flo(f))
        assert (out.width, out.height) == (2, 2)
        assert np.array_equal(out.u, f.u) and np.array_equal(out.v, f.v)

    def test_bad_magic_rejected(self):
        data = struct.pack("<fii", 0.0, 2, 2) + b"\0" * 32
        with pytest.raises(CodecError, match="not a flow file"):
            read_flo(data)

    def test_random_roundtrip_bit_exact(self, rng):
        for _ in range(20):
            f = random_flow(rng)
            blob = write_flo(f)
            assert write_flo(read_flo(blob)) == blob

    def test_truncation_is_clean_error(self, rng):
        blob = write_flo(random_flow(rng, 5, 4))
        with pytest.raises(CodecError, match="expected .* bytes"):
            read_flo(blob[:-3])

    def test_zero_sized_rejected(self):
        f = FlowField(0, 0, np.zeros((0, 0), np.float32),
                      np.zeros((0, 0), np.float32))
        with pytest.raises(CodecError, match="zero-sized"):
            write_flo(f)

    def test_unknown_sentinel_preserved(self):
        f = codecs.zero_flow(3, 3)
        f.u[1, 1] = 1e10
        out = read_flo(write_flo(f))
        assert out.unknown_mask()[1, 1]
        assert out.unknown_mask().sum() == 1


class TestImage:
    def test_single_pixel_scale(self):
        blob = b"P6\n1 1\n255\n" + bytes([255, 0, 0])
        frame = read_image(blob)
        assert frame.rgb[:, 0, 0] == pytest.approx([1.0, 0.0, 0.0])

    def test_all_zero_roundtrip(self):
        frame = Frame.from_array(np.zeros((3, 4, 5), np.float32))
        out = read_image(write_image(frame))
        assert np.array_equal(out.rgb, frame.rgb)

    def test_second_generation_roundtrip_idempotent(self, rng):
        raw = write_image(random_frame(rng))
        gen1 = write_image(read_image(raw))
        gen2 = write_image(read_image(gen1))
        assert gen1 == gen2

    def test_comment_in_header(self):
        blob = b"P6\n# a comment\n2 1\n255\n" + bytes(6)
        frame = read_image(blob)
        assert (frame.width, frame.height) == (2, 1)

    def test_wrong_maxval_rejected(self):
        with pytest.raises(CodecError, match="maxval 255"):
            read_image(b"P6\n1 1\n65535\n" + bytes(6))

    def test_malformed_header_rejected(self):
        with pytest.raises(CodecError, match="not a binary PPM"):
            read_image(b"P5\n1 1\n255\n" + bytes(3))

    def test_clamp_only_on_encode(self):
        frame = Frame.from_array(np.array([[[1.25]], [[-0.5]], [[0.5]]],
                                          dtype=np.float32))
        out = read_image(write_image(frame))
        # in-range values move at most half a quantization step (1/510)
        assert out.rgb[:, 0, 0] == pytest.approx([1.0, 0.0, 0.5], abs=1 / 509)


class TestContainer:
    def test_empty_roundtrip(self):
        blob = write_container(TensorContainer())
        assert len(read_container(blob)) == 0
        assert write_container(read_container(blob)) == blob

    def test_single_entry_roundtrip(self):
        c = TensorContainer()
        c.add("w", np.array([[1, 2], [3, 4]], np.float32))
        out = read_container(write_container(c))
        assert out.names() == ["w"]
        assert np.array_equal(out.get("w"), c.get("w"))

    def test_duplicate_names_rejected(self):
        c = TensorContainer()
        c.add("w", np.zeros(2, np.float32))
        with pytest.raises(CodecError, match="duplicate"):
            c.add("w", np.zeros(2, np.float32))

    def test_order_preserved(self, rng):
        c = TensorContainer()
        names = [f"p{i}" for i in range(7)]
        for n in names:
            c.add(n, rng.random(3).astype(np.float32))
        assert read_container(write_container(c)).names() == names

    def test_random_roundtrip_bit_exact(self, rng):
        for _ in range(10):
            c = TensorContainer()
            for i in range(int(rng.integers(1, 6))):
                shape = tuple(rng.integers(1, 5, size=int(rng.integers(1, 4))))
                c.add(f"t{i}", rng.standard_normal(shape).astype(np.float32))
            blob = write_container(c)
            assert write_container(read_container(blob)) == blob

    def test_truncations_never_crash(self, rng):
        c = TensorContainer()
        c.add("weights", rng.standard_normal((4, 3)).astype(np.float32))
        c.add("bias", rng.standard_normal(4).astype(np.float32))
        blob = write_container(c)
        for cut in range(len(blob)):
            with pytest.raises(CodecError):
                read_container(blob[:cut])

    def test_trailing_bytes_rejected(self, rng):
        blob = write_container(TensorContainer()) + b"x"
        with pytest.raises(CodecError, match="trailing"):
            read_container(blob)

    def test_missing_entry_error_names_it(self):
        with pytest.raises(CodecError, match="'nope'"):
            TensorContainer().get("nope")


def test_fuzzed_truncations_all_codecs(rng):
    flow_blob = write_flo(random_flow(rng, 6, 5))
    img_blob = write_image(random_frame(rng, 6, 5))
    c = TensorContainer()
    c.add("x", rng.random((2, 3)).astype(np.float32))
    cont_blob = write_container(c)
    for blob, reader in ((flow_blob, read_flo), (img_blob, read_image),
                         (cont_blob, read_container)):
        for _ in range(60):
            cut = int(rng.integers(0, len(blob)))
            try:
                reader(blob[:cut])
            except CodecError:
                pass

import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dtir.checkpoint import decode, encode, load_checkpoint, load_state, save_checkpoint
from dtir.errors import ContractError, CrcMismatch, MalformedContainer, ShapeError
from dtir.model import ModelSpec, build_model

SMALL = ModelSpec(base_channels=4, depth=2, embed_dim=8, n_experts=2, adapter_dim=2)


def _hand_encode(state):
    # independent writer following the documented byte layout
    out = bytearray(b"DTIR") + struct.pack("<I", 1) + struct.pack("<I", len(state))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw + bytes([0]) + struct.pack("<I", arr.ndim)
        for d in arr.shape:
            out += struct.pack("<I", d)
        for v in np.asarray(arr, dtype=np.float64).ravel():
            out += struct.pack("<f", v)
    return bytes(out) + struct.pack("<I", zlib.crc32(bytes(out)))


class TestFormat:
    def test_matches_hand_written_layout(self):
        state = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "béta": np.array(1.5, np.float32)}
        assert encode(state) == _hand_encode(state)

    def test_little_endian_header(self):
        buf = encode({})
        assert buf[:12] == b"DTIR\x01\x00\x00\x00\x00\x00\x00\x00"
        assert len(buf) == 16

    @settings(max_examples=40, deadline=None)
    @given(st.dictionaries(st.text(min_size=1, max_size=8),
                           arrays(np.float32, st.tuples(st.integers(0, 3), st.integers(1, 4)),
                                  elements=st.floats(-1e6, 1e6, width=32)),
                           max_size=4))
    def test_round_trip(self, state):
        back = decode(encode(state))
        assert list(back) == list(state)
        for k in state:
            assert back[k].tobytes() == state[k].tobytes()
        assert encode(back) == encode(state)


class TestCorruption:
    def setup_method(self):
        self.buf = encode({"w": np.linspace(-1, 1, 10, dtype=np.float32), "b": np.zeros(2, np.float32)})

    def test_flipped_payload_byte(self):
        bad = bytearray(self.buf)
        bad[30] ^= 0x01
        with pytest.raises(CrcMismatch):
            decode(bytes(bad))

    @pytest.mark.parametrize("cut", [1, 4, 9, 20])
    def test_truncated(self, cut):
        with pytest.raises(MalformedContainer):
            decode(self.buf[:-cut])

    def test_bad_magic_and_version(self):
        with pytest.raises(MalformedContainer):
            decode(b"XXXX" + self.buf[4:])
        body = b"DTIR" + struct.pack("<II", 2, 0)
        with pytest.raises(MalformedContainer):
            decode(body + struct.pack("<I", zlib.crc32(body)))

    def test_duplicate_names(self):
        one = encode({"w": np.ones(1, np.float32)})[12:-4]
        body = b"DTIR" + struct.pack("<II", 1, 2) + one + one
        with pytest.raises(MalformedContainer):
            decode(body + struct.pack("<I", zlib.crc32(body)))

    def test_unknown_dtype(self):
        body = b"DTIR" + struct.pack("<II", 1, 1) + struct.pack("<I", 1) + b"w" + bytes([7]) + struct.pack("<II", 1, 1) + b"\0" * 4
        with pytest.raises(MalformedContainer):
            decode(body + struct.pack("<I", zlib.crc32(body)))

    def test_trailing_bytes(self):
        body = self.buf[:-4] + b"\0\0"
        with pytest.raises(MalformedContainer):
            decode(body + struct.pack("<I", zlib.crc32(body)))


class TestFiles:
    def test_save_load_save_byte_identical(self, tmp_path):
        params = build_model(SMALL, 3)
        save_checkpoint(params, tmp_path / "a.ckpt")
        loaded = load_checkpoint(tmp_path / "a.ckpt", params)
        save_checkpoint(loaded, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert not list(tmp_path.glob("*.tmp"))

    def test_raw_state_and_shape_check(self, tmp_path):
        params = build_model(SMALL, 0)
        state = params.state()
        save_checkpoint(state, tmp_path / "s.ckpt")
        assert set(load_state(tmp_path / "s.ckpt")) == set(state)
        name = next(iter(state))
        state[name] = np.zeros(state[name].size + 1, np.float32)
        save_checkpoint(state, tmp_path / "bad.ckpt")
        with pytest.raises(ShapeError):
            load_checkpoint(tmp_path / "bad.ckpt", params)
        del state[name]
        save_checkpoint(state, tmp_path / "missing.ckpt")
        with pytest.raises(ContractError):
            load_checkpoint(tmp_path / "missing.ckpt", params)

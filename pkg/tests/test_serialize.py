"""TNSR tensor files and named-tensor checkpoints."""
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from cesst.serialize import (FormatError, load_checkpoint, load_tensor, save_checkpoint, save_tensor,
                             tensor_from_bytes, tensor_to_bytes)


class TestTnsr:
    def test_header_layout_is_little_endian(self):
        buf = tensor_to_bytes(np.arange(6, dtype=np.float32).reshape(2, 3))
        assert buf[:4] == b"TNSR"
        version, rank = struct.unpack_from("<HH", buf, 4)
        assert (version, rank) == (1, 2)
        assert struct.unpack_from("<QQ", buf, 8) == (2, 3)
        assert buf[24] == 0
        assert np.frombuffer(buf[25:], dtype="<f4").tolist() == [0, 1, 2, 3, 4, 5]

    @given(st.sampled_from([np.float32, np.float64]).flatmap(
        lambda dt: arrays(dt, array_shapes(min_dims=1, max_dims=4, max_side=5),
                          elements=st.floats(-1e6, 1e6, width=32))))
    @settings(max_examples=50, deadline=None)
    def test_round_trip_bit_exact(self, arr):
        back = tensor_from_bytes(tensor_to_bytes(arr))
        assert back.dtype == arr.dtype and back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()

    def test_file_round_trip(self, tmp_path, rng):
        arr = rng.standard_normal((3, 4, 5))
        save_tensor(tmp_path / "a.tnsr", arr)
        assert np.array_equal(load_tensor(tmp_path / "a.tnsr"), arr)

    def test_truncated_payload(self):
        buf = tensor_to_bytes(np.ones((2, 2), dtype=np.float64))
        with pytest.raises(FormatError):
            tensor_from_bytes(buf[:-3])

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            tensor_from_bytes(b"XXXX" + tensor_to_bytes(np.ones(2))[4:])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        tensors = {"a.weight": rng.standard_normal((3, 2)).astype(np.float32),
                   "b": rng.standard_normal(5), "scalar": np.array(2.5)}
        save_checkpoint(tmp_path / "c.ckpt", tensors, {"step": 7, "note": "x"})
        back, meta = load_checkpoint(tmp_path / "c.ckpt")
        assert meta == {"step": 7, "note": "x"}
        assert set(back) == set(tensors)
        for k, v in tensors.items():
            assert back[k].dtype == v.dtype and back[k].tobytes() == v.tobytes()

    def test_truncated_checkpoint(self, tmp_path, rng):
        save_checkpoint(tmp_path / "c.ckpt", {"a": rng.standard_normal(10)})
        raw = (tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:-8])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"hello world, not a checkpoint")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "x")

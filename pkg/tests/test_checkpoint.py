import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from retinex_llie import checkpoint as ckpt


def test_layout_matches_format():
    buf = ckpt.encode({"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    assert buf[:4] == b"BLNT"
    assert struct.unpack("<II", buf[4:12]) == (1, 1)
    assert struct.unpack("<I", buf[12:16]) == (1,)
    assert buf[16:17] == b"w"
    assert struct.unpack("<BI", buf[17:22]) == (0, 2)
    assert struct.unpack("<2I", buf[22:30]) == (2, 3)
    assert np.frombuffer(buf[30:], dtype="<f4").tolist() == list(range(6))


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint8, np.int64])
def test_roundtrip_dtypes(dtype):
    a = (np.arange(24) * 3).astype(dtype).reshape(2, 3, 4)
    out = ckpt.decode(ckpt.encode({"a": a, "s": np.array(5, dtype=dtype)}))
    assert out["a"].dtype == a.dtype and np.array_equal(out["a"], a)
    assert out["s"].shape == () and out["s"] == 5


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(max_dims=4, max_side=5),
                  elements=st.floats(width=32, allow_nan=False)))
def test_roundtrip_bit_exact(arr):
    out = ckpt.decode(ckpt.encode({"x": arr}))["x"]
    assert out.tobytes() == arr.tobytes() and out.shape == arr.shape


def test_save_load_groups_and_meta(tmp_path):
    p = tmp_path / "c.blnt"
    w = torch.randn(4, 3, 3, 3)
    ckpt.save_checkpoint(p, {"decom": {"head.w": w}, "ncbc": {"l0.b": torch.zeros(2)}}, {"step": 7})
    groups, meta = ckpt.load_checkpoint(p)
    assert meta == {"step": 7}
    assert torch.equal(groups["decom"]["head.w"], w)
    assert list(groups) == ["decom", "ncbc"]
    assert ckpt.params_digest(groups["decom"]) == ckpt.params_digest({"head.w": w})


def test_corrupt_inputs_rejected(tmp_path):
    good = ckpt.encode({"a": np.ones(3, dtype=np.float32)})
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.decode(b"PK\x03\x04" + good[4:])
    for cut in (2, 10, 20, len(good) - 1):
        with pytest.raises(ckpt.CheckpointError, match="truncated"):
            ckpt.decode(good[:cut])
    with pytest.raises(ckpt.CheckpointError, match="trailing"):
        ckpt.decode(good + b"\0")
    with pytest.raises(ckpt.CheckpointError, match="version"):
        ckpt.decode(b"BLNT" + struct.pack("<II", 2, 0))
    with pytest.raises(ckpt.CheckpointError, match="dtype"):
        ckpt.encode({"c": np.zeros(2, dtype=np.complex64)})
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_checkpoint(tmp_path / "missing.blnt")


def test_digest_sensitive_to_one_bit():
    a = {"w": torch.zeros(4)}
    b = {"w": torch.zeros(4)}
    b["w"][2] = 1e-30
    assert ckpt.params_digest(a) != ckpt.params_digest(b)

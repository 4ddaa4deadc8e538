import json
import struct

import numpy as np
import pytest

from modelmix import checkpoint as ck
from modelmix import nets
from modelmix.diffcore import Tensor
from modelmix.nets import UNetConfig


@pytest.fixture
def model():
    return nets.build_model(UNetConfig(num_classes=2, base_channels=4), "pathology", np.random.default_rng(0))


def test_model_roundtrip_bit_exact(tmp_path, model):
    path = tmp_path / "m.mmck"
    ck.save_model(path, model, {"epoch": 3})
    back = ck.load_model(path)
    assert back.cfg == model.cfg and back.task_id == "pathology"
    for (n1, a), (n2, b) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and a.data.tobytes() == b.data.tobytes()
    x = Tensor(np.random.default_rng(1).random((1, 1, 16, 16)).astype(np.float32))
    assert nets.forward(model, x).data.tobytes() == nets.forward(back, x).data.tobytes()
    _, meta = ck.load_tensors(path)
    assert meta["epoch"] == 3


def test_layout(tmp_path):
    path = tmp_path / "t.mmck"
    ck.save_tensors(path, {"a": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"k": 1})
    raw = path.read_bytes()
    assert raw[:4] == b"MMCK" and raw[4] == ck.VERSION
    (hlen,) = struct.unpack("<Q", raw[5:13])
    header = json.loads(raw[13:13 + hlen])
    assert header["tensors"] == [{"name": "a", "shape": [2, 3], "dtype": "f32"}]
    np.testing.assert_array_equal(np.frombuffer(raw[13 + hlen:], "<f4"), np.arange(6))


def test_save_is_deterministic(tmp_path, model):
    ck.save_model(tmp_path / "a", model)
    ck.save_model(tmp_path / "b", model)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


@pytest.mark.parametrize("mutate,match", [
    (lambda r: b"XXXX" + r[4:], "bad magic"),
    (lambda r: r[:4] + bytes([9]) + r[5:], "version"),
    (lambda r: r[:-3], "truncated data"),
    (lambda r: r + b"\0\0\0\0", "trailing"),
    (lambda r: r[:13] + b"#" + r[14:], "corrupt header"),
    (lambda r: r[:5] + struct.pack("<Q", 10**9) + r[13:], "truncated header"),
    (lambda r: r[:3], "bad magic"),
])
def test_corrupted_files(tmp_path, model, mutate, match):
    path = tmp_path / "m.mmck"
    ck.save_model(path, model)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(ck.CheckpointError, match=match):
        ck.load_model(path)


def test_missing_config_in_header(tmp_path):
    path = tmp_path / "t.mmck"
    ck.save_tensors(path, {"a": np.zeros(2, np.float32)})
    with pytest.raises(ck.CheckpointError, match="unet"):
        ck.load_model(path)


def test_tensor_set_mismatch(tmp_path, model):
    path = tmp_path / "t.mmck"
    state = model.state_dict()
    state.pop("head.bias")
    ck.save_tensors(path, state, {"task_id": "x", "unet": model.cfg.to_dict()})
    with pytest.raises(ck.CheckpointError, match="missing"):
        ck.load_model(path)

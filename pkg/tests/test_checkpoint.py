import struct

import numpy as np
import pytest

from jointsal import checkpoint
from jointsal.config import ModelConfig
from jointsal.errors import ContractError, DecodeError, VersionError
from jointsal.model import JointSaliencyNet
from jointsal.optim import SGDMomentum


def test_encode_layout():
    buf = checkpoint.encode({"a": 1}, {"w": np.array([[1.0, 2.0]])})
    assert buf[:4] == b"SSTM"
    assert struct.unpack("<I", buf[4:8])[0] == 1
    n = struct.unpack("<I", buf[8:12])[0]
    assert buf[12 : 12 + n] == b'{"a": 1}'
    rest = buf[12 + n :]
    assert struct.unpack("<IIb", rest[:9]) == (1, 1, ord("w"))
    assert struct.unpack("<III", rest[9:21]) == (2, 1, 2)
    assert struct.unpack("<2d", rest[21:]) == (1.0, 2.0)


def test_decode_errors():
    buf = checkpoint.encode({}, {"w": np.ones(3)})
    assert checkpoint.decode(buf)[1]["w"].tolist() == [1, 1, 1]
    with pytest.raises(DecodeError):
        checkpoint.decode(b"XXXX" + buf[4:])
    with pytest.raises(DecodeError):
        checkpoint.decode(buf[:-1])
    with pytest.raises(DecodeError):
        checkpoint.decode(buf + b"\0")
    with pytest.raises(VersionError):
        checkpoint.decode(buf[:4] + struct.pack("<I", 2) + buf[8:])


def test_forward_bit_exact_roundtrip(tmp_path):
    cfg = ModelConfig(depth=1, seed=3)
    model = JointSaliencyNet(cfg)
    images = np.random.default_rng(0).random((2, 3, 48, 64))
    opt = SGDMomentum(model.parameters())
    opt.step([np.ones(p.shape) for p in model.parameters()])
    before, masks = model.predict(images, emit_seg=True)
    checkpoint.save(tmp_path / "m.sstm", model, {"step": 1}, opt)

    other = JointSaliencyNet(ModelConfig(depth=1, seed=99))
    opt2 = SGDMomentum(other.parameters())
    meta, records = checkpoint.read(tmp_path / "m.sstm")
    checkpoint.load_into(other, records, opt2, meta)
    after, masks2 = other.predict(images, emit_seg=True)
    assert np.array_equal(before, after) and np.array_equal(masks, masks2)
    assert all(np.array_equal(a, b) for a, b in zip(opt.velocity, opt2.velocity))
    assert meta["step"] == 1


def test_mismatched_model(tmp_path):
    model = JointSaliencyNet(ModelConfig(depth=1))
    checkpoint.save(tmp_path / "m.sstm", model, {})
    _, records = checkpoint.read(tmp_path / "m.sstm")
    with pytest.raises(ContractError):
        checkpoint.load_into(JointSaliencyNet(ModelConfig(depth=2)), records)

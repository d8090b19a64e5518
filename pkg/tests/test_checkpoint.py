import struct

import numpy as np
import pytest
import torch

from densetrack.checkpoint import (
    MAGIC,
    load_arrays,
    load_encoder,
    load_pair,
    save_arrays,
    save_encoder,
    save_pair,
    save_probabilities,
)
from densetrack.correspond import Encoder, EncoderConfig
from densetrack.errors import LoadError
from densetrack.memory import MomentumPair, momentum_update


def _encoder(seed=0):
    torch.manual_seed(seed)
    return Encoder(EncoderConfig(widths=(4, 8, 8), blocks=(1, 0, 0)))


def test_array_round_trip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(0, np.float32), "c": np.float32(2.5)}
    save_arrays(tmp_path / "x.ckpt", arrays, "test", {"k": 1}, {"note": "hi"})
    back, header = load_arrays(tmp_path / "x.ckpt")
    assert header["kind"] == "test" and header["architecture"] == {"k": 1} and header["meta"] == {"note": "hi"}
    for k, v in arrays.items():
        np.testing.assert_array_equal(back[k], v)


def test_layout_is_documented(tmp_path):
    save_arrays(tmp_path / "x.ckpt", {"a": np.array([1.0, 2.0], np.float32)}, "test")
    raw = (tmp_path / "x.ckpt").read_bytes()
    magic, version, n = struct.unpack_from("<6sHI", raw)
    assert magic == MAGIC and version == 1
    assert np.frombuffer(raw[12 + n :], "<f4").tolist() == [1.0, 2.0]


def test_encoder_round_trip_is_exact(tmp_path):
    enc = _encoder()
    save_encoder(tmp_path / "e.ckpt", enc)
    back = load_encoder(tmp_path / "e.ckpt")
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(enc.eval()(x), back(x))


def test_pair_round_trip(tmp_path):
    pair = MomentumPair(_encoder(0), _encoder(1), 0.9)
    momentum_update(pair)
    save_pair(tmp_path / "p.ckpt", pair)
    back = load_pair(tmp_path / "p.ckpt")
    assert back.m == 0.9
    for a, b in zip(pair.theta_r.parameters(), back.theta_r.parameters()):
        assert torch.equal(a, b)
    # a pair file can seed a single encoder (the query branch)
    q = load_encoder(tmp_path / "p.ckpt")
    assert all(torch.equal(a, b) for a, b in zip(pair.theta_q.parameters(), q.parameters()))


def test_encoder_file_gives_identical_branches(tmp_path):
    save_encoder(tmp_path / "e.ckpt", _encoder())
    pair = load_pair(tmp_path / "e.ckpt")
    assert pair.theta_q is not pair.theta_r
    assert all(torch.equal(a, b) for a, b in zip(pair.theta_q.parameters(), pair.theta_r.parameters()))


def test_bad_files(tmp_path):
    (tmp_path / "junk").write_bytes(b"not a checkpoint at all")
    with pytest.raises(LoadError):
        load_arrays(tmp_path / "junk")
    (tmp_path / "short").write_bytes(b"DT")
    with pytest.raises(LoadError):
        load_arrays(tmp_path / "short")
    save_arrays(tmp_path / "v2", {}, "x")
    raw = bytearray((tmp_path / "v2").read_bytes())
    raw[6] = 2
    (tmp_path / "v2").write_bytes(bytes(raw))
    with pytest.raises(LoadError, match="version"):
        load_arrays(tmp_path / "v2")
    save_probabilities(tmp_path / "probs", [np.zeros((2, 2, 2))])
    with pytest.raises(LoadError):
        load_pair(tmp_path / "probs")


def test_truncated_tensor(tmp_path):
    save_arrays(tmp_path / "x", {"a": np.ones(100, np.float32)}, "test")
    raw = (tmp_path / "x").read_bytes()
    (tmp_path / "x").write_bytes(raw[:-8])
    with pytest.raises(LoadError, match="truncated"):
        load_arrays(tmp_path / "x")

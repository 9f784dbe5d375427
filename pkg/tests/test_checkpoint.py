import struct

import numpy as np
import pytest

from kpmotion import checkpoint, optim
from kpmotion.autograd import Tensor


def test_round_trip_multiple_sections(tmp_path):
    rng = np.random.default_rng(0)
    a = checkpoint.Section("AAAA", {"K": "21", "note": "x y"},
                           {"w": rng.normal(size=(3, 4)), "s": np.array(2.5)})
    b = checkpoint.Section("BBBB", {}, {"v": rng.normal(size=7)})
    p = tmp_path / "m.tkn"
    checkpoint.write(p, [a, b])
    back = checkpoint.read(p)
    assert [s.tag for s in back] == ["AAAA", "BBBB"]
    assert back[0].meta == a.meta
    assert np.array_equal(back[0].arrays["w"], a.arrays["w"])
    assert back[0].arrays["s"].shape == () and back[0].arrays["s"] == 2.5
    assert np.array_equal(checkpoint.find(back, "BBBB").arrays["v"], b.arrays["v"])


def test_byte_layout(tmp_path):
    p = tmp_path / "m.tkn"
    checkpoint.write(p, [checkpoint.Section("ABCD", {"k": "v"}, {"x": np.array([1.0, -2.0])})])
    raw = p.read_bytes()
    header = b"k=v\narrays=x:2\n"
    assert raw[:9] == b"TKNv1ABCD"
    assert struct.unpack("<I", raw[9:13])[0] == len(header)
    assert raw[13:13 + len(header)] == header
    assert np.array_equal(np.frombuffer(raw[13 + len(header):], dtype="<f8"), [1.0, -2.0])


def test_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "bad.tkn"
    p.write_bytes(b"NOPE!")
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.read(p)
    good = tmp_path / "g.tkn"
    checkpoint.write(good, [checkpoint.Section("ABCD", {}, {"x": np.zeros(10)})])
    p.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.read(p)


def test_missing_section_and_bad_tag(tmp_path):
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.find([], "STG1")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.Section("TOOLONG")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.write(tmp_path / "x", [checkpoint.Section("ABCD", {"a": "1\n2"})])


def test_sgd_momentum_update_rule():
    params = {"w": np.array([1.0, 2.0])}
    vel = {"w": np.array([0.5, 0.0])}
    t = {"w": Tensor(params["w"], requires_grad=True)}
    t["w"].grad = np.array([1.0, -1.0])
    assert optim.sgd_momentum(params, vel, t, lr=0.1, momentum=0.9) == []
    # v = 0.9 * [0.5, 0] + [1, -1]; p -= 0.1 v
    assert np.allclose(vel["w"], [1.45, -1.0])
    assert np.allclose(params["w"], [1.0 - 0.145, 2.1])


def test_clip_scale():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert optim.clip_scale(g, None) == 1.0
    assert optim.clip_scale(g, 10.0) == 1.0
    assert optim.clip_scale(g, 1.0) == pytest.approx(0.2)


def test_non_finite_parameter_reported():
    params = {"w": np.array([1.0])}
    vel = {"w": np.zeros(1)}
    t = {"w": Tensor(params["w"], requires_grad=True)}
    t["w"].grad = np.array([np.inf])
    assert optim.sgd_momentum(params, vel, t, lr=0.1) == ["w"]

import numpy as np
import pytest

from moformer.autodiff import Adam, parameter
from moformer.checkpoint import Checkpoint, check_compatible
from moformer.errors import CheckpointError


def sample(rng):
    params = {"w": parameter(rng.normal(size=(3, 4))), "b": parameter(rng.normal(size=4))}
    opt = Adam([(params, 0.01)], weight_decay=1e-6)
    opt.step({k: rng.normal(size=v.shape) for k, v in params.items()})
    return Checkpoint("encoder/test", {"seed": 3, "nested": {"x": [1, 2]}},
                      {k: v.data for k, v in params.items()}, {"note": "hi"}, opt.state)


def test_round_trip_is_byte_identical(tmp_path, rng):
    ck = sample(rng)
    ck.save(tmp_path / "a.ckpt")
    loaded = Checkpoint.load(tmp_path / "a.ckpt")
    loaded.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for k, v in ck.tensors.items():
        assert np.array_equal(loaded.tensors[k], v)
    assert loaded.adam.t == 1 and np.array_equal(loaded.adam.m["w"], ck.adam.m["w"])
    assert loaded.config == ck.config and loaded.meta == ck.meta and loaded.kind == ck.kind


def test_corruption_detected(tmp_path, rng):
    blob = bytearray(sample(rng).to_bytes())
    blob[len(blob) // 2] ^= 0x01
    with pytest.raises(CheckpointError, match="checksum"):
        Checkpoint.from_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"not a checkpoint at all, definitely not" * 2)


def test_incompatible_shapes_name_both():
    with pytest.raises(CheckpointError) as err:
        check_compatible({"w": (3, 4)}, {"w": np.zeros((5, 4))}, "encoder")
    assert "(5, 4)" in str(err.value) and "(3, 4)" in str(err.value)
    with pytest.raises(CheckpointError, match="missing"):
        check_compatible({"w": (3, 4)}, {}, "encoder")

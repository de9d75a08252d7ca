import os
import struct
import numpy as np
import pytest
from nlss.utils import DataError
from nlss.tensor import Tensor
from nlss.models import MiniUNetConfig, FusionSpec, SegmentationModel, build
from nlss.serialize import (
    save_tensor,
    load_tensor,
    save_checkpoint,
    load_checkpoint,
    save_model,
    load_model,
    write_location,
    read_location,
)


@pytest.fixture
def config():
    return MiniUNetConfig(in_channels=(2, 3), base_width=2, depth=1, num_classes=3, input_size=8)


def test_tensor_layout(tmpdir):
    path = os.path.join(str(tmpdir), "t.nlt")
    save_tensor(path, np.arange(6.0).reshape(2, 3))
    with open(path, "rb") as f:
        raw = f.read()
    assert raw[:4] == b"NLT1"
    assert struct.unpack("<3I", raw[4:16]) == (2, 2, 3)
    assert len(raw) == 16 + 6 * 8
    assert struct.unpack("<d", raw[16 + 8 : 16 + 16])[0] == 1.0
    np.testing.assert_equal(load_tensor(path), np.arange(6.0).reshape(2, 3))


def test_scalar_tensor(tmpdir):
    path = os.path.join(str(tmpdir), "s.nlt")
    save_tensor(path, np.array(3.5))
    out = load_tensor(path)
    assert out.shape == ()
    assert out == 3.5


def test_bad_magic(tmpdir):
    path = os.path.join(str(tmpdir), "bad.nlt")
    with open(path, "wb") as f:
        f.write(b"XXXX" + b"\0" * 12)
    with pytest.raises(DataError):
        load_tensor(path)


def test_truncated(tmpdir):
    path = os.path.join(str(tmpdir), "short.nlt")
    save_tensor(path, np.ones((4, 4)))
    with open(path, "rb") as f:
        raw = f.read()
    with open(path, "wb") as f:
        f.write(raw[:-3])
    with pytest.raises(DataError):
        load_tensor(path)


def test_checkpoint_keeps_order_and_header(tmpdir):
    path = os.path.join(str(tmpdir), "c.nlck")
    tensors = {"b": np.ones(2), "a": np.zeros((1, 2))}
    save_checkpoint(path, {"epoch": 3}, tensors)
    header, loaded = load_checkpoint(path)
    assert header == {"epoch": 3}
    assert list(loaded) == ["b", "a"]
    np.testing.assert_equal(loaded["a"], tensors["a"])


def test_middle_pair_reload(tmpdir, config):
    path = os.path.join(str(tmpdir), "pair.nlck")
    pair = build(config, FusionSpec("middle"), seed=3)
    pair.decoder(1).ups[0].bn.running_mean[...] = 0.25
    save_model(path, pair, extra={"epoch": 4}, extra_tensors={"optim/step": np.array(2.0)})
    model, extra, rest = load_model(path)
    assert extra == {"epoch": 4}
    assert list(rest) == ["optim/step"]
    assert model.decoder(1) is model.decoder(2)
    np.testing.assert_equal(model.decoder(2).ups[0].bn.running_mean, 0.25)
    x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 8, 8)))
    pair.eval()
    model.eval()
    np.testing.assert_equal(model(2, x).data, pair(2, x).data)


def test_segmentation_model_reload(tmpdir, config):
    path = os.path.join(str(tmpdir), "seg.nlck")
    seg = build(config, FusionSpec("late"), seed=1).segmentation_model(2)
    save_model(path, seg)
    model, _, _ = load_model(path)
    assert isinstance(model, SegmentationModel)
    for (k, a), (k2, b) in zip(seg.state_dict().items(), model.state_dict().items()):
        assert k == k2
        np.testing.assert_equal(a, b)


def test_unknown_checkpoint_kind(tmpdir):
    path = os.path.join(str(tmpdir), "odd.nlck")
    save_checkpoint(path, {"kind": "other"}, {})
    with pytest.raises(DataError):
        load_model(path)


@pytest.mark.parametrize("with_clean", [True, False])
def test_location_file(tmpdir, with_clean):
    rng = np.random.default_rng(0)
    path = os.path.join(str(tmpdir), "loc.nlds")
    images1 = rng.normal(size=(4, 2, 6, 6))
    images2 = rng.normal(size=(4, 3, 6, 6))
    labels = rng.integers(0, 3, size=(4, 6, 6)).astype(np.uint8)
    labels[0, 0, 0] = 255
    clean = labels[1] if with_clean else None
    write_location(path, images1, images2, labels, clean)
    i1, i2, y, c = read_location(path)
    np.testing.assert_equal(i1, images1)
    np.testing.assert_equal(i2, images2)
    np.testing.assert_equal(y, labels)
    if with_clean:
        np.testing.assert_equal(c, clean)
    else:
        assert c is None


def test_location_version(tmpdir):
    path = os.path.join(str(tmpdir), "loc.nlds")
    write_location(path, np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)), np.zeros((1, 2, 2), dtype=np.uint8))
    with open(path, "r+b") as f:
        f.seek(4)
        f.write(struct.pack("<H", 9))
    with pytest.raises(DataError):
        read_location(path)

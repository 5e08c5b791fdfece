"""Model wiring: channel counts, strides, head independence, checkpoints."""

import numpy as np
import pytest

from twostream import numerics as nm
from twostream.checkpoint import (CheckpointError, load_checkpoint,
                                  save_checkpoint)
from twostream.model import (ModelConfig, backbone_forward, extract_object_repr,
                             init_params, object_stream_forward,
                             pixel_stream_forward)


@pytest.fixture(scope="module")
def setup():
    cfg = ModelConfig()
    store = init_params(cfg, seed=0)
    image = nm.Tensor(np.random.default_rng(0)
                      .random((3, 32, 32)).astype(np.float32))
    f4, f8 = backbone_forward(store, image)
    return cfg, store, image, f4, f8


def test_stride_arithmetic(setup):
    cfg, store, image, f4, f8 = setup
    assert f4.shape[1:] == (8, 8)    # 32 / 4
    assert f8.shape[1:] == (4, 4)    # 32 / 8


def test_head_channel_counts(setup):
    cfg, store, image, f4, f8 = setup
    assert cfg.k == 6
    cls_map, reg_map, repr_map = object_stream_forward(store, f8)
    assert cls_map.shape[0] == 3 * 6       # 18
    assert reg_map.shape[0] == 4 * 6       # 24
    assert repr_map.shape[0] == 2 * 32 * 6  # 384
    psi = pixel_stream_forward(store, f4)
    assert psi.shape == (32, 8, 8)


def test_backbone_rejects_bad_dims(setup):
    cfg, store, *_ = setup
    with pytest.raises(nm.ShapeError):
        backbone_forward(store, nm.Tensor(np.zeros((3, 30, 32), dtype=np.float32)))


def test_heads_independent(setup):
    """Perturbing the cls head must leave reg and repr outputs unchanged."""
    cfg, store, image, f4, f8 = setup
    _, reg0, repr0 = object_stream_forward(store, f8)
    w = store["obj.cls2.w"]
    orig = w.data.copy()
    w.data += 1.0
    cls1, reg1, repr1 = object_stream_forward(store, f8)
    w.data = orig
    np.testing.assert_array_equal(reg0.data, reg1.data)
    np.testing.assert_array_equal(repr0.data, repr1.data)


def test_cls_bias_initialized_for_focal():
    store = init_params(ModelConfig(), seed=3)
    np.testing.assert_allclose(store["obj.cls2.b"].data, -np.log(99.0),
                               rtol=1e-6)


def test_init_deterministic():
    a = init_params(ModelConfig(), seed=7)
    b = init_params(ModelConfig(), seed=7)
    for name in a.names():
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_extract_object_repr_gradient_sparsity():
    """Gradients flow only into the selected cell/slot's channels."""
    d, k, h, w = 4, 2, 3, 3
    repr_map = nm.Tensor(np.random.default_rng(1)
                         .random((2 * d * k, h, w)).astype(np.float32),
                         requires_grad=True)
    rep = extract_object_repr(repr_map, cell_y=1, cell_x=2, slot=1, d=d)
    assert rep.shape == (2, d)
    nm.tsum(rep).backward()
    g = repr_map.grad
    nz = np.nonzero(g)
    assert set(nz[1]) == {1} and set(nz[2]) == {2}
    assert set(nz[0]) == set(range(2 * d * 1, 2 * d * 2))  # slot 1's channels


def test_extract_object_repr_out_of_range():
    repr_map = nm.Tensor(np.zeros((16, 3, 3), dtype=np.float32))
    with pytest.raises(IndexError):
        extract_object_repr(repr_map, 3, 0, 0, d=4)


# ---------------------------------------------------------------------------
# checkpoint format

def test_checkpoint_roundtrip_bits(tmp_path):
    store = init_params(ModelConfig(), seed=0)
    arrays = store.state_arrays()
    path = str(tmp_path / "m.rdsn")
    save_checkpoint(path, arrays)
    back = load_checkpoint(path)
    assert set(back) == set(arrays)
    for name in arrays:
        np.testing.assert_array_equal(back[name],
                                      np.asarray(arrays[name], dtype=np.float32))


def test_checkpoint_magic_and_version(tmp_path):
    path = str(tmp_path / "m.rdsn")
    save_checkpoint(path, {"a": np.zeros(3)})
    raw = open(path, "rb").read()
    assert raw[:4] == b"RDSN"

    bad = tmp_path / "bad.rdsn"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(str(bad))

    import struct
    bumped = tmp_path / "v9.rdsn"
    bumped.write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(str(bumped))


def test_checkpoint_truncation(tmp_path):
    path = str(tmp_path / "m.rdsn")
    save_checkpoint(path, {"a": np.arange(100.0)})
    raw = open(path, "rb").read()
    trunc = tmp_path / "t.rdsn"
    trunc.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(trunc))


def test_checkpoint_momentum_roundtrip(tmp_path):
    store = init_params(ModelConfig(), seed=0)
    store.momentum["backbone.c1.w"][:] = 0.5
    path = str(tmp_path / "m.rdsn")
    save_checkpoint(path, store.state_arrays())
    fresh = init_params(ModelConfig(), seed=1)
    fresh.load_state_arrays(load_checkpoint(path))
    np.testing.assert_array_equal(fresh.momentum["backbone.c1.w"],
                                  store.momentum["backbone.c1.w"])
    for name in store.names():
        np.testing.assert_array_equal(fresh[name].data, store[name].data)

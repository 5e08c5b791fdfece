"""The two-stream network: shared backbone, object stream, pixel stream.

Object stream (stride 8): three parallel heads over anchors — classification
(c*k channels), box regression (4k) and per-anchor instance representations
(2*d*k, a foreground and a background d-vector each).  Pixel stream
(stride 4): an FCN head producing a d-channel per-pixel representation map.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .anchors import AnchorGrid
from .numerics import ShapeError


@dataclass
class ModelConfig:
    num_classes: int = 3
    repr_dim: int = 32          # d, shared by both streams
    backbone_channels: int = 64
    pixel_hidden: int = 256
    pixel_stride: int = 4
    anchor_grid: AnchorGrid = field(default_factory=lambda: AnchorGrid(
        stride=8, scales=(14, 28, 52), ratios=(0.6, 1.6)))

    @property
    def k(self):
        return self.anchor_grid.k


def _conv_param(store, rng, name, c_out, c_in, kh, kw):
    fan_in = c_in * kh * kw
    std = np.sqrt(2.0 / fan_in)
    store.add(name + ".w", rng.standard_normal((c_out, c_in, kh, kw)) * std)
    store.add(name + ".b", np.zeros(c_out))


def init_params(cfg, seed=0):
    """Fresh ParamStore for a model configuration, deterministically seeded."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xD5))))
    store = nm.ParamStore()
    bc = cfg.backbone_channels
    _conv_param(store, rng, "backbone.c1", 32, 3, 3, 3)
    _conv_param(store, rng, "backbone.c2", bc, 32, 3, 3)
    _conv_param(store, rng, "backbone.c3", bc, bc, 3, 3)
    _conv_param(store, rng, "backbone.c4", bc, bc, 3, 3)
    _conv_param(store, rng, "backbone.c5", bc, bc, 3, 3)
    _conv_param(store, rng, "backbone.c6", bc, bc, 3, 3)

    c, k, d = cfg.num_classes, cfg.k, cfg.repr_dim
    _conv_param(store, rng, "obj.cls1", bc, bc, 3, 3)
    _conv_param(store, rng, "obj.cls2", c * k, bc, 3, 3)
    _conv_param(store, rng, "obj.reg1", bc, bc, 3, 3)
    _conv_param(store, rng, "obj.reg2", 4 * k, bc, 3, 3)
    _conv_param(store, rng, "obj.repr1", bc, bc, 3, 3)
    _conv_param(store, rng, "obj.repr2", 2 * d * k, bc, 3, 3)
    # start classification near p=0.01 so focal loss does not blow up early
    store["obj.cls2.b"].data[:] = -np.log(99.0)

    _conv_param(store, rng, "pix.h1", cfg.pixel_hidden, bc, 3, 3)
    _conv_param(store, rng, "pix.h2", cfg.pixel_hidden, cfg.pixel_hidden, 3, 3)
    _conv_param(store, rng, "pix.proj", d, cfg.pixel_hidden, 1, 1)
    return store


def _conv_block(store, name, x, act=True):
    y = nm.bias_add(nm.conv2d(x, store[name + ".w"]), store[name + ".b"])
    return nm.relu(y) if act else y


def backbone_forward(store, image):
    """image: (3,H,W) Tensor with H, W divisible by 8 -> (stride4, stride8)."""
    image = nm.as_tensor(image)
    _, h, w = image.shape
    if h % 8 or w % 8:
        raise ShapeError(f"backbone: image dims must be divisible by 8, got {h}x{w}")
    x = _conv_block(store, "backbone.c1", image)
    x = nm.avg_pool2(x)
    x = _conv_block(store, "backbone.c2", x)
    x = nm.avg_pool2(x)
    x = _conv_block(store, "backbone.c3", x)
    f4 = _conv_block(store, "backbone.c4", x)
    x = nm.avg_pool2(f4)
    x = _conv_block(store, "backbone.c5", x)
    f8 = _conv_block(store, "backbone.c6", x)
    return f4, f8


def object_stream_forward(store, f8):
    """Stride-8 features -> (cls_map, reg_map, repr_map) Tensors."""
    cls_map = _conv_block(store, "obj.cls2",
                          _conv_block(store, "obj.cls1", f8), act=False)
    reg_map = _conv_block(store, "obj.reg2",
                          _conv_block(store, "obj.reg1", f8), act=False)
    repr_map = _conv_block(store, "obj.repr2",
                           _conv_block(store, "obj.repr1", f8), act=False)
    return cls_map, reg_map, repr_map


def pixel_stream_forward(store, f4):
    """Stride-4 features -> Psi(U), the (d, h_f, w_f) pixel representations."""
    x = _conv_block(store, "pix.h1", f4)
    x = _conv_block(store, "pix.h2", x)
    return _conv_block(store, "pix.proj", x, act=False)


def extract_object_repr(repr_map, cell_y, cell_x, slot, d):
    """Slice one anchor's (2, d) instance representation out of the repr map.

    Slot s owns channels [2d*s, 2d*(s+1)); the first d are the foreground
    vector, the rest the background vector.
    """
    repr_map = nm.as_tensor(repr_map)
    ck, h, w = repr_map.shape
    k = ck // (2 * d)
    if not (0 <= cell_y < h and 0 <= cell_x < w and 0 <= slot < k):
        raise IndexError(f"extract_object_repr: cell ({cell_y},{cell_x}) slot "
                         f"{slot} out of range for map {repr_map.shape}")
    rows = nm.head_view(repr_map, k)  # (h*w*k, 2d)
    idx = (cell_y * w + cell_x) * k + slot
    return nm.reshape(nm.take_rows(rows, [idx]), (2, d))

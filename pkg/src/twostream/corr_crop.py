"""Object-assisted instance segmentation: correlation, expanded-box cropping
and the OHEM-balanced mask loss.

Coordinates: boxes live in image pixels as (x1, y1, x2, y2); they are mapped
into the representation-map frame by dividing by the pixel-stream stride.
A map pixel belongs to a region iff its center falls inside the float box.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ShapeError

TRAIN_EXPAND_RATIO = 1.5
INFER_EXPAND_RATIO = 1.2
OHEM_BG_PER_FG = 1  # hard-background : foreground ratio


@dataclass
class CropRegion:
    box: tuple      # expanded, clipped (x1, y1, x2, y2) in the target frame
    ratio: float
    empty: bool = False


def correlate(psi, obj_repr):
    """Eq.-style correlation: the two d-vectors of ``obj_repr`` act as 1x1
    conv filters over ``psi``; channel softmax yields per-pixel (fg, bg)
    probabilities for the object."""
    psi = nm.as_tensor(psi)
    obj_repr = nm.as_tensor(obj_repr)
    if obj_repr.shape[-1] != psi.shape[0] or obj_repr.shape[-2] != 2:
        raise ShapeError(f"correlate: representation {obj_repr.shape} does not "
                         f"match pixel map {psi.shape}")
    filters = nm.reshape(obj_repr, (2, psi.shape[0], 1, 1))
    return nm.softmax_channels(nm.conv2d(psi, filters))


def expand_box(box, ratio, bounds):
    """Scale a corner box about its center by ``ratio`` and clip to bounds
    (width, height).  Degenerate boxes become a 1x1 region at their center."""
    if ratio < 1.0:
        raise ValueError(f"expand_box: ratio must be >= 1, got {ratio}")
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    cx, cy = x1 + w / 2, y1 + h / 2
    if w <= 0 or h <= 0:
        w = h = 1.0
    else:
        w, h = w * ratio, h * ratio
    ex1, ey1, ex2, ey2 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
    bw, bh = bounds
    cx1, cy1 = max(0.0, ex1), max(0.0, ey1)
    cx2, cy2 = min(float(bw), ex2), min(float(bh), ey2)
    empty = cx1 >= cx2 or cy1 >= cy2
    return CropRegion((cx1, cy1, cx2, cy2), ratio, empty)


def region_mask(region, h, w):
    """Binary (h, w) membership map by pixel-center containment."""
    if region.empty:
        return np.zeros((h, w), dtype=bool)
    x1, y1, x2, y2 = region.box
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    return ((ys >= y1) & (ys < y2))[:, None] & ((xs >= x1) & (xs < x2))[None, :]


def downsample_mask(mask, stride):
    """Full-resolution binary mask -> map-frame mask by >= 0.5 area coverage."""
    mh, mw = mask.shape
    if mh % stride or mw % stride:
        raise ShapeError(f"downsample_mask: {mh}x{mw} not divisible by {stride}")
    blocks = mask.reshape(mh // stride, stride, mw // stride, stride)
    return blocks.mean(axis=(1, 3)) >= 0.5


def ohem_weights(fg_prob, target, supervised, bg_per_fg=OHEM_BG_PER_FG):
    """Supervision weights for one object's similarity map.

    All foreground pixels inside the supervised region get weight 1; the
    hardest ``bg_per_fg * n_fg`` background pixels inside (largest current
    cross-entropy, ties to lower flat index) get weight 1; everything else 0.
    """
    fg = target & supervised
    bg = (~target) & supervised
    n_fg = int(fg.sum())
    weights = np.zeros(target.shape, dtype=np.float32)
    weights[fg] = 1.0
    n_bg = min(int(bg.sum()), bg_per_fg * n_fg)
    if n_bg > 0:
        p = np.clip(fg_prob, nm.PROB_EPS, 1 - nm.PROB_EPS)
        ce = -np.log(1 - p)  # bg target: loss grows with predicted fg prob
        ce_flat = np.where(bg, ce, -np.inf).ravel()
        hard = np.argsort(-ce_flat, kind="stable")[:n_bg]
        w_flat = weights.ravel()
        w_flat[hard] = 1.0
    return weights


def mask_target_and_weights(gt_mask, gt_box, stride, map_h, map_w, fg_prob,
                            expand_ratio=TRAIN_EXPAND_RATIO, crop=True):
    """Downsampled target plus OHEM weights for one object.

    Returns (target, weights, skipped).  ``crop=False`` supervises the whole
    map (used only to probe the weight bookkeeping)."""
    target = downsample_mask(gt_mask, stride)[:map_h, :map_w]
    if not target.any():
        return target, np.zeros((map_h, map_w), dtype=np.float32), True
    if crop:
        scaled = tuple(c / stride for c in gt_box)
        region = expand_box(scaled, expand_ratio, (map_w, map_h))
        supervised = region_mask(region, map_h, map_w)
    else:
        supervised = np.ones((map_h, map_w), dtype=bool)
    return target, ohem_weights(fg_prob, target, supervised), False


def mask_training_loss(similarity_maps, gt_masks, gt_boxes, stride,
                       expand_ratio=TRAIN_EXPAND_RATIO):
    """Mean over objects of the OHEM-weighted pixel cross-entropy.

    ``similarity_maps``: per positive anchor (2, h_f, w_f) Tensors;
    ``gt_masks``/``gt_boxes``: the matched instance's full-resolution mask and
    corner box.  Objects whose mask vanishes at map resolution are skipped.
    Returns (loss Tensor, skipped count)."""
    losses = []
    skipped = 0
    for sim, mask, box in zip(similarity_maps, gt_masks, gt_boxes):
        _, map_h, map_w = sim.shape
        fg_prob = nm.take_rows(sim, [0])  # (1, h, w)
        target, weights, skip = mask_target_and_weights(
            mask, box, stride, map_h, map_w, fg_prob.data[0],
            expand_ratio=expand_ratio)
        if skip:
            skipped += 1
            continue
        losses.append(nm.pixel_cross_entropy(
            fg_prob, target[None].astype(np.float32), weights[None]))
    if not losses:
        zero = nm.Tensor(np.asarray(0.0, dtype=np.float32))
        return zero, skipped
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / len(losses)), skipped


def crop_inference_mask(similarity_map, box, stride,
                        expand_ratio=INFER_EXPAND_RATIO):
    """Foreground channel inside the expanded predicted box, zero outside.

    ``box`` is in image coordinates; returns (fg Tensor (h,w), warning flag
    set when the box misses the map entirely)."""
    similarity_map = nm.as_tensor(similarity_map)
    _, map_h, map_w = similarity_map.shape
    scaled = tuple(c / stride for c in box)
    region = expand_box(scaled, expand_ratio, (map_w, map_h))
    member = region_mask(region, map_h, map_w)
    fg = nm.reshape(nm.take_rows(similarity_map, [0]), (map_h, map_w))
    return nm.mul_const(fg, member.astype(similarity_map.dtype)), region.empty

"""Anchor grids, IoU, box coding, matching and NMS.

Boxes are (x1, y1, x2, y2) floats in image pixels throughout this module;
the dataset's (x, y, w, h) convention is converted at the pipeline edges.
"""

from dataclasses import dataclass

import numpy as np

LABEL_NEGATIVE = -1
LABEL_IGNORE = -2


@dataclass
class AnchorGrid:
    stride: int = 8
    scales: tuple = (32, 48, 64)
    ratios: tuple = (0.5, 1.0, 2.0)  # ratio = h / w

    @property
    def k(self):
        return len(self.scales) * len(self.ratios)

    def generate(self, image_h, image_w):
        """All anchors for an image, ordered (y*gw + x)*k + slot.

        Slot order is scale-major: slot = scale_index * len(ratios) + ratio_index.
        Centers sit at (i + 0.5) * stride.
        """
        gh, gw = image_h // self.stride, image_w // self.stride
        sizes = []
        for s in self.scales:
            for r in self.ratios:
                w = s / np.sqrt(r)
                h = s * np.sqrt(r)
                sizes.append((w, h))
        sizes = np.asarray(sizes, dtype=np.float64)  # (k, 2)
        cx = (np.arange(gw) + 0.5) * self.stride
        cy = (np.arange(gh) + 0.5) * self.stride
        ctr = np.stack(np.meshgrid(cy, cx, indexing="ij"), axis=-1)  # (gh,gw,2) y,x
        ctr = ctr.reshape(gh * gw, 1, 2)
        wh = sizes[None, :, :]
        x1 = ctr[:, :, 1] - wh[:, :, 0] / 2
        y1 = ctr[:, :, 0] - wh[:, :, 1] / 2
        x2 = ctr[:, :, 1] + wh[:, :, 0] / 2
        y2 = ctr[:, :, 0] + wh[:, :, 1] / 2
        return np.stack([x1, y1, x2, y2], axis=-1).reshape(-1, 4)


def iou_matrix(a, b):
    """Pairwise IoU of two (n,4) / (m,4) corner-box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.clip(ix2 - ix1, 0, None)
    ih = np.clip(iy2 - iy1, 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def match_anchors(anchor_boxes, gt_boxes, pos_thr=0.5, neg_thr=0.4):
    """Per-anchor assignment: gt index for positives, -1 negative, -2 ignore.

    IoU >= pos_thr -> positive, < neg_thr -> negative, in between -> ignore.
    Each gt additionally force-claims its single best-IoU anchor so every gt
    owns at least one positive.
    """
    n = len(anchor_boxes)
    labels = np.full(n, LABEL_NEGATIVE, dtype=np.int64)
    if len(gt_boxes) == 0:
        return labels
    ious = iou_matrix(anchor_boxes, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou >= pos_thr] = best_gt[best_iou >= pos_thr]
    labels[(best_iou >= neg_thr) & (best_iou < pos_thr)] = LABEL_IGNORE
    for g in range(ious.shape[1]):
        a = int(ious[:, g].argmax())  # argmax ties -> lowest anchor index
        labels[a] = g
    return labels


EXP_CLAMP = 4.0


def encode_box(anchor, box):
    """Center/size offsets of a corner box relative to its anchor."""
    anchor = np.asarray(anchor, dtype=np.float64)
    box = np.asarray(box, dtype=np.float64)
    aw, ah = anchor[..., 2] - anchor[..., 0], anchor[..., 3] - anchor[..., 1]
    ax, ay = anchor[..., 0] + aw / 2, anchor[..., 1] + ah / 2
    bw, bh = box[..., 2] - box[..., 0], box[..., 3] - box[..., 1]
    bx, by = box[..., 0] + bw / 2, box[..., 1] + bh / 2
    return np.stack([(bx - ax) / aw, (by - ay) / ah,
                     np.log(bw / aw), np.log(bh / ah)], axis=-1)


def decode_box(anchor, offsets):
    anchor = np.asarray(anchor, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    aw, ah = anchor[..., 2] - anchor[..., 0], anchor[..., 3] - anchor[..., 1]
    ax, ay = anchor[..., 0] + aw / 2, anchor[..., 1] + ah / 2
    bx = ax + offsets[..., 0] * aw
    by = ay + offsets[..., 1] * ah
    bw = aw * np.exp(np.minimum(offsets[..., 2], EXP_CLAMP))
    bh = ah * np.exp(np.minimum(offsets[..., 3], EXP_CLAMP))
    return np.stack([bx - bw / 2, by - bh / 2, bx + bw / 2, by + bh / 2], axis=-1)


def nms(boxes, scores, classes, iou_threshold=0.5):
    """Greedy per-class NMS; returns kept indices in descending-score order.

    Score ties break toward the lower input index; boxes with IoU strictly
    above the threshold are suppressed.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    order = np.lexsort((np.arange(len(scores)), -scores))
    kept = []
    for i in order:
        keep = True
        for j in kept:
            if classes[i] == classes[j] and iou_matrix(boxes[i], boxes[j])[0, 0] > iou_threshold:
                keep = False
                break
        if keep:
            kept.append(int(i))
    return kept


def clip_box(box, width, height):
    x1, y1, x2, y2 = box
    return (float(np.clip(x1, 0, width)), float(np.clip(y1, 0, height)),
            float(np.clip(x2, 0, width)), float(np.clip(y2, 0, height)))


def xywh_to_corners(b):
    x, y, w, h = b
    return (float(x), float(y), float(x + w), float(y + h))


def corners_to_xywh(b):
    x1, y1, x2, y2 = b
    return (float(x1), float(y1), float(x2 - x1), float(y2 - y1))

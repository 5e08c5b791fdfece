"""End-to-end training, inference and evaluation.

Training phase one fits the detector + mask branch with the multi-task loss
L = L_cls + lambda_r * L_reg + lambda_m * L_mask; phase two fits the boundary
refinement parameters alone on collected (mask, gt box, regressed box)
triples.  Inference follows the fixed order: score threshold, NMS,
representation extraction, correlation, expanded cropping, upsampling to
image size, boundary refinement, mask binarization.
"""

from dataclasses import dataclass, field

import numpy as np

from . import anchors as anc
from . import corr_crop, mbrm
from . import numerics as nm
from .datagen import min_enclosing_box
from .model import (ModelConfig, backbone_forward, extract_object_repr,
                    object_stream_forward, pixel_stream_forward)

SCORE_THRESHOLD = 0.3
NMS_IOU = 0.5
MASK_THRESHOLD = 0.4
IOU_THRESHOLDS = np.round(np.arange(0.5, 0.96, 0.05), 2)
# size strata scaled to 128x128 toy scenes (areas in pixels)
AREA_SMALL = 16 ** 2
AREA_MEDIUM = 48 ** 2
AREA_RANGES = {
    "all": (0.0, float("inf")),
    "small": (0.0, AREA_SMALL),
    "medium": (AREA_SMALL, AREA_MEDIUM),
    "large": (AREA_MEDIUM, float("inf")),
}


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    iterations: int = 2000
    batch_size: int = 4
    lambda_reg: float = 1.0
    lambda_mask: float = 1.0
    warmup: int = 200
    decay_at: int = 1800     # step lr decay; 0 disables
    decay_factor: float = 0.1
    flip_augment: bool = True
    seed: int = 0

    def validate(self):
        if self.lambda_reg < 0 or self.lambda_mask < 0:
            raise TrainError("loss weights must be nonnegative")


@dataclass
class DetectionResult:
    class_id: int
    score: float
    box_regressed: tuple  # (x1, y1, x2, y2), clipped to the image
    box_refined: tuple
    mask: np.ndarray      # bool, image resolution


def _flip_sample(image, instances):
    image = image[:, ::-1].copy()
    w = image.shape[1]
    flipped = []
    for class_id, box, mask in instances:
        x1, y1, x2, y2 = box
        flipped.append((class_id, (w - x2, y1, w - x1, y2), mask[:, ::-1].copy()))
    return image, flipped


def _sample_targets(sample, flip=False):
    """(image, [(class_id, corner box, mask), ...]) from a SceneSample."""
    instances = [(inst.class_id, anc.xywh_to_corners(inst.bbox), inst.mask)
                 for inst in sample.instances]
    image = sample.image
    if flip:
        image, instances = _flip_sample(image, instances)
    return image, instances


def forward_losses(store, mcfg, image, instances, tcfg):
    """Per-image loss terms; returns (dict of Tensors, stats dict)."""
    img_t = nm.Tensor(np.ascontiguousarray(image.transpose(2, 0, 1)))
    h, w = image.shape[:2]
    f4, f8 = backbone_forward(store, img_t)
    cls_map, reg_map, repr_map = object_stream_forward(store, f8)
    psi = pixel_stream_forward(store, f4)

    grid = mcfg.anchor_grid
    anchor_boxes = grid.generate(h, w)
    gt_boxes = np.asarray([box for _, box, _ in instances]).reshape(-1, 4)
    assignment = anc.match_anchors(anchor_boxes, gt_boxes)

    class_labels = assignment.copy()
    pos = assignment >= 0
    class_labels[pos] = [instances[g][0] for g in assignment[pos]]
    cls_rows = nm.head_view(cls_map, grid.k)
    loss_cls = nm.focal_loss(cls_rows, class_labels)

    pos_idx = np.nonzero(pos)[0]
    stats = {"positives": len(pos_idx), "mask_skipped": 0}
    zero = nm.Tensor(np.asarray(0.0, dtype=np.float32))
    if len(pos_idx) == 0:
        return {"cls": loss_cls, "reg": zero, "mask": zero}, stats

    reg_rows = nm.head_view(reg_map, grid.k)
    pred_off = nm.take_rows(reg_rows, pos_idx)
    targets = anc.encode_box(anchor_boxes[pos_idx],
                             gt_boxes[assignment[pos_idx]])
    loss_reg = nm.smooth_l1(pred_off, targets.astype(np.float32)) \
        * (1.0 / len(pos_idx))

    repr_rows = nm.head_view(repr_map, grid.k)
    d = mcfg.repr_dim
    sims, masks, boxes = [], [], []
    for a in pos_idx:
        rep = nm.reshape(nm.take_rows(repr_rows, [int(a)]), (2, d))
        sims.append(corr_crop.correlate(psi, rep))
        g = assignment[a]
        masks.append(instances[g][2])
        boxes.append(instances[g][1])
    loss_mask, skipped = corr_crop.mask_training_loss(
        sims, masks, boxes, stride=mcfg.pixel_stride)
    stats["mask_skipped"] = skipped
    return {"cls": loss_cls, "reg": loss_reg, "mask": loss_mask}, stats


def train_step(batch, store, mcfg, tcfg, lr=None):
    """One SGD step on a batch of (image, instances) pairs.

    Returns the mean loss breakdown as floats; aborts on a non-finite term."""
    terms = {"cls": [], "reg": [], "mask": []}
    totals = []
    for image, instances in batch:
        losses, _ = forward_losses(store, mcfg, image, instances, tcfg)
        for key, t in losses.items():
            if not np.isfinite(t.data):
                raise TrainError(f"non-finite {key} loss in train_step")
            terms[key].append(t.item())
        totals.append(losses["cls"]
                      + losses["reg"] * tcfg.lambda_reg
                      + losses["mask"] * tcfg.lambda_mask)
    total = totals[0]
    for t in totals[1:]:
        total = total + t
    total = total * (1.0 / len(batch))
    total.backward()
    nm.sgd_step(store, tcfg.lr if lr is None else lr, tcfg.momentum)
    out = {key: float(np.mean(vals)) for key, vals in terms.items()}
    out["total"] = total.item()
    return out


def _iteration_rng(seed, iteration):
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((seed, 0xA1, iteration))))


def train(samples, store, mcfg, tcfg, start_iteration=0, on_iteration=None):
    """Phase-one training loop.  Deterministic given (samples, seed); batches
    and flips are drawn from per-iteration seeded generators so resumed runs
    replay the identical schedule.  Returns the loss history."""
    tcfg.validate()
    history = []
    for it in range(start_iteration, tcfg.iterations):
        rng = _iteration_rng(tcfg.seed, it)
        idx = rng.integers(0, len(samples), size=tcfg.batch_size)
        flips = rng.random(tcfg.batch_size) < 0.5 if tcfg.flip_augment \
            else np.zeros(tcfg.batch_size, dtype=bool)
        batch = [_sample_targets(samples[int(i)], flip=bool(fl))
                 for i, fl in zip(idx, flips)]
        lr = tcfg.lr * min(1.0, (it + 1) / max(1, tcfg.warmup))
        if tcfg.decay_at and it >= tcfg.decay_at:
            lr *= tcfg.decay_factor
        row = train_step(batch, store, mcfg, tcfg, lr=lr)
        row["iteration"] = it
        history.append(row)
        if on_iteration is not None:
            on_iteration(it, row)
    return history


# ---------------------------------------------------------------------------
# inference

def infer(image, store, mcfg, mbrm_params, score_threshold=SCORE_THRESHOLD,
          nms_iou=NMS_IOU, mask_threshold=MASK_THRESHOLD,
          expand_ratio=corr_crop.INFER_EXPAND_RATIO):
    """Detections for one (H, W, 3) image, in the fixed pipeline order."""
    h, w = image.shape[:2]
    img_t = nm.Tensor(np.ascontiguousarray(image.transpose(2, 0, 1)))
    f4, f8 = backbone_forward(store, img_t)
    cls_map, reg_map, repr_map = object_stream_forward(store, f8)
    psi = pixel_stream_forward(store, f4)
    grid = mcfg.anchor_grid
    anchor_boxes = grid.generate(h, w)

    scores = nm._sigmoid(nm.head_view(cls_map, grid.k).data)  # (A, c)
    offsets = nm.head_view(reg_map, grid.k).data
    a_idx, c_idx = np.nonzero(scores >= score_threshold)
    if len(a_idx) == 0:
        return []
    cand_boxes = anc.decode_box(anchor_boxes[a_idx], offsets[a_idx])
    cand_boxes = np.asarray([anc.clip_box(b, w, h) for b in cand_boxes])
    cand_scores = scores[a_idx, c_idx]
    keep = anc.nms(cand_boxes, cand_scores, c_idx, iou_threshold=nms_iou)

    repr_rows = nm.head_view(repr_map, grid.k)
    results = []
    for i in keep:
        a = int(a_idx[i])
        box = tuple(float(v) for v in cand_boxes[i])
        rep = nm.reshape(nm.take_rows(repr_rows, [a]), (2, mcfg.repr_dim))
        sim = corr_crop.correlate(psi, rep)
        cropped, _ = corr_crop.crop_inference_mask(
            sim, box, mcfg.pixel_stride, expand_ratio=expand_ratio)
        full = nm.bilinear_upsample(
            nm.reshape(cropped, (1,) + cropped.shape), h, w).data[0]
        refined, _ = mbrm.refine_box(box, full, mbrm_params)
        results.append(DetectionResult(
            class_id=int(c_idx[i]),
            score=float(cand_scores[i]),
            box_regressed=box,
            box_refined=tuple(float(v) for v in refined),
            mask=full >= mask_threshold,
        ))
    return results


def collect_mbrm_samples(samples, store, mcfg, min_iou=0.5,
                         score_threshold=SCORE_THRESHOLD):
    """(upsampled mask, gt box, regressed box) triples for phase-two training.

    Uses the model's own regressed boxes (teacher forcing with detections
    matched to gt at IoU >= min_iou)."""
    bypass = mbrm.MbrmParams(gamma=0.0)
    triples = []
    for sample in samples:
        _, instances = _sample_targets(sample)
        if not instances:
            continue
        gt_boxes = np.asarray([b for _, b, _ in instances])
        h, w = sample.image.shape[:2]
        img_t = nm.Tensor(np.ascontiguousarray(sample.image.transpose(2, 0, 1)))
        f4, f8 = backbone_forward(store, img_t)
        cls_map, reg_map, repr_map = object_stream_forward(store, f8)
        psi = pixel_stream_forward(store, f4)
        grid = mcfg.anchor_grid
        anchor_boxes = grid.generate(h, w)
        scores = nm._sigmoid(nm.head_view(cls_map, grid.k).data)
        offsets = nm.head_view(reg_map, grid.k).data
        a_idx, c_idx = np.nonzero(scores >= score_threshold)
        if len(a_idx) == 0:
            continue
        cand = anc.decode_box(anchor_boxes[a_idx], offsets[a_idx])
        cand = np.asarray([anc.clip_box(b, w, h) for b in cand])
        keep = anc.nms(cand, scores[a_idx, c_idx], c_idx)
        repr_rows = nm.head_view(repr_map, grid.k)
        for i in keep:
            ious = anc.iou_matrix(cand[i], gt_boxes)[0]
            g = int(ious.argmax())
            if ious[g] < min_iou:
                continue
            rep = nm.reshape(nm.take_rows(repr_rows, [int(a_idx[i])]),
                             (2, mcfg.repr_dim))
            sim = corr_crop.correlate(psi, rep)
            box = tuple(float(v) for v in cand[i])
            cropped, _ = corr_crop.crop_inference_mask(sim, box, mcfg.pixel_stride)
            full = nm.bilinear_upsample(
                nm.reshape(cropped, (1,) + cropped.shape), h, w).data[0]
            triples.append((full, instances[g][1], box))
    return triples


def direct_baseline(detection, mask_threshold=MASK_THRESHOLD):
    """Replace a detection's boxes by the minimum enclosing rectangle of its
    binarized mask (the "direct" baseline).  Empty mask -> None (dropped)."""
    mask = detection.mask
    if not mask.any():
        return None
    x, y, w, h = min_enclosing_box(mask)
    box = (float(x), float(y), float(x + w), float(y + h))
    return DetectionResult(detection.class_id, detection.score, box, box, mask)


def boundary_error(pred_box, gt_box):
    """Mean absolute per-side coordinate error (pixels) between corner boxes."""
    return float(np.mean(np.abs(np.asarray(pred_box, dtype=np.float64)
                                - np.asarray(gt_box, dtype=np.float64))))


# ---------------------------------------------------------------------------
# COCO-style evaluation

@dataclass
class EvalReport:
    iou_type: str
    ap: float
    ap50: float
    ap75: float
    ap_small: float
    ap_medium: float
    ap_large: float
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        out = {"iou_type": self.iou_type, "AP": self.ap, "AP50": self.ap50,
               "AP75": self.ap75, "AP_S": self.ap_small, "AP_M": self.ap_medium,
               "AP_L": self.ap_large}
        out.update(self.extras)
        return out

    def table(self):
        rows = [f"{k:>8}: {v:.4f}" if isinstance(v, float) else f"{k:>8}: {v}"
                for k, v in self.to_dict().items()]
        return "\n".join(rows)


def mask_iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def _det_entries(results, iou_type, box_field):
    """Flatten per-image results into (image, class, score, box/mask, area)."""
    out = []
    for img_id, dets in enumerate(results):
        for j, det in enumerate(dets):
            box = det.box_refined if box_field == "refined" else det.box_regressed
            if iou_type == "mask":
                area = float(det.mask.sum())
            else:
                area = (box[2] - box[0]) * (box[3] - box[1])
            out.append({"image": img_id, "order": j, "class": det.class_id,
                        "score": det.score, "box": box, "mask": det.mask,
                        "area": area})
    return out


def _gt_entries(gt_samples):
    out = []
    for img_id, sample in enumerate(gt_samples):
        for inst in sample.instances:
            out.append({"image": img_id, "class": inst.class_id,
                        "box": anc.xywh_to_corners(inst.bbox),
                        "mask": inst.mask, "area": float(inst.mask.sum())})
    return out


def _pair_iou(det, gt, iou_type):
    if iou_type == "mask":
        return mask_iou(det["mask"], gt["mask"])
    return float(anc.iou_matrix(det["box"], gt["box"])[0, 0])


def _average_precision(flags, n_gt):
    """101-point interpolated AP from ordered (is_tp, is_ignored) flags."""
    tp = fp = 0
    precisions, recalls = [], []
    for is_tp, ignored in flags:
        if ignored:
            continue
        if is_tp:
            tp += 1
        else:
            fp += 1
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_gt)
    if not precisions:
        return 0.0
    precisions = np.asarray(precisions)
    recalls = np.asarray(recalls)
    # precision envelope, then sample at 101 recall points
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    ap = 0.0
    for r in np.linspace(0, 1, 101):
        idx = np.searchsorted(recalls, r, side="left")
        ap += precisions[idx] if idx < len(precisions) else 0.0
    return ap / 101.0


def _ap_for(dets, gts, classes, iou_thresholds, area_range, iou_type):
    """Mean AP over classes (with >=1 in-range gt) and IoU thresholds."""
    lo, hi = area_range
    aps = []
    for cls in classes:
        cdets = sorted((d for d in dets if d["class"] == cls),
                       key=lambda d: (-d["score"], d["image"], d["order"]))
        cgts = [g for g in gts if g["class"] == cls]
        for g in cgts:
            g["ignore"] = not (lo <= g["area"] < hi)
        n_gt = sum(not g["ignore"] for g in cgts)
        if n_gt == 0:
            continue
        for thr in iou_thresholds:
            matched = set()
            flags = []
            for det in cdets:
                best, best_iou = None, thr
                best_ign, best_ign_iou = None, thr
                for gi, g in enumerate(cgts):
                    if g["image"] != det["image"] or gi in matched:
                        continue
                    iou = _pair_iou(det, g, iou_type)
                    if g["ignore"]:
                        if iou >= best_ign_iou:
                            best_ign, best_ign_iou = gi, iou
                    elif iou >= best_iou:
                        best, best_iou = gi, iou
                if best is not None:
                    matched.add(best)
                    flags.append((True, False))
                elif best_ign is not None:
                    matched.add(best_ign)
                    flags.append((False, True))
                elif not (lo <= det["area"] < hi):
                    flags.append((False, True))
                else:
                    flags.append((False, False))
            aps.append(_average_precision(flags, n_gt))
    return float(np.mean(aps)) if aps else 0.0


def evaluate_ap(results, gt_samples, iou_type="box", box_field="refined"):
    """COCO-style AP report (IoU 0.5:0.95, AP50/75, size strata)."""
    if iou_type not in ("box", "mask"):
        raise ValueError(f"iou_type must be 'box' or 'mask', got {iou_type!r}")
    dets = _det_entries(results, iou_type, box_field)
    gts = _gt_entries(gt_samples)
    classes = sorted({g["class"] for g in gts})
    full = AREA_RANGES["all"]
    return EvalReport(
        iou_type=iou_type,
        ap=_ap_for(dets, gts, classes, IOU_THRESHOLDS, full, iou_type),
        ap50=_ap_for(dets, gts, classes, [0.5], full, iou_type),
        ap75=_ap_for(dets, gts, classes, [0.75], full, iou_type),
        ap_small=_ap_for(dets, gts, classes, IOU_THRESHOLDS,
                         AREA_RANGES["small"], iou_type),
        ap_medium=_ap_for(dets, gts, classes, IOU_THRESHOLDS,
                          AREA_RANGES["medium"], iou_type),
        ap_large=_ap_for(dets, gts, classes, IOU_THRESHOLDS,
                         AREA_RANGES["large"], iou_type),
    )


def match_detections_to_gt(results, gt_samples, min_iou=0.5, box_field="refined"):
    """Greedy per-image matching by descending score; returns a list of
    (detection, matched instance) pairs with box IoU >= min_iou."""
    pairs = []
    for dets, sample in zip(results, gt_samples):
        if not sample.instances:
            continue
        gt_boxes = np.asarray([anc.xywh_to_corners(i.bbox)
                               for i in sample.instances])
        taken = set()
        for det in sorted(dets, key=lambda d: -d.score):
            box = det.box_refined if box_field == "refined" else det.box_regressed
            ious = anc.iou_matrix(box, gt_boxes)[0]
            order = np.argsort(-ious)
            for g in order:
                if int(g) in taken:
                    continue
                if ious[g] < min_iou:
                    break
                taken.add(int(g))
                pairs.append((det, sample.instances[int(g)]))
                break
    return pairs


def mean_boundary_error(results, gt_samples, box_field="refined",
                        area_range=None):
    """Mean per-side boundary error over matched detections (pixels).

    Matching always uses the same (refined) geometry so that box_field only
    changes which box is scored, not which pairs are compared."""
    pairs = match_detections_to_gt(results, gt_samples)
    errs = []
    for det, inst in pairs:
        if area_range is not None:
            lo, hi = area_range
            if not (lo <= float(inst.mask.sum()) < hi):
                continue
        box = det.box_refined if box_field == "refined" else det.box_regressed
        errs.append(boundary_error(box, anc.xywh_to_corners(inst.bbox)))
    return float(np.mean(errs)) if errs else float("nan")


def mean_mask_iou(results, gt_samples):
    """Mean mask IoU over detections matched to gt by box IoU >= 0.5."""
    pairs = match_detections_to_gt(results, gt_samples)
    vals = [mask_iou(det.mask, inst.mask) for det, inst in pairs]
    return float(np.mean(vals)) if vals else float("nan")

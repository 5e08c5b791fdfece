"""Deterministic synthetic scenes: colored shapes on a noisy background.

Class ids are shape types (0 rectangle, 1 ellipse, 2 triangle).  All
rasterization membership tests use integer arithmetic only, so masks are
reproducible across platforms; floats touch the image colors, never the
geometry.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

CLASS_NAMES = ("rectangle", "ellipse", "triangle")


class GenerationError(RuntimeError):
    pass


class EmptyMaskError(ValueError):
    pass


class DatasetError(RuntimeError):
    pass


@dataclass
class GenConfig:
    image_size: int = 128
    min_instances: int = 1
    max_instances: int = 4
    num_classes: int = 3

    def validate(self):
        if self.image_size < 32:
            raise GenerationError(f"image_size must be >= 32, got {self.image_size}")
        if self.num_classes not in (2, 3):
            raise GenerationError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if not 1 <= self.min_instances <= self.max_instances:
            raise GenerationError("need 1 <= min_instances <= max_instances")


@dataclass
class Instance:
    class_id: int
    bbox: tuple  # (x, y, w, h) in pixels
    mask: np.ndarray  # bool (H, W)


@dataclass
class SceneSample:
    image: np.ndarray  # (H, W, 3) float32 in [0,1]
    instances: list = field(default_factory=list)


def min_enclosing_box(mask):
    """Tightest (x, y, w, h) covering all foreground pixels of a binary mask."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    return (x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def _raster_rectangle(size, x0, y0, w, h):
    m = np.zeros((size, size), dtype=bool)
    m[y0:y0 + h, x0:x0 + w] = True
    return m


def _raster_ellipse(size, x0, y0, w, h):
    # doubled coordinates keep the center test in integers
    cx2, cy2 = 2 * x0 + w - 1, 2 * y0 + h - 1
    xs = 2 * np.arange(size, dtype=np.int64) - cx2
    ys = 2 * np.arange(size, dtype=np.int64) - cy2
    dx2 = xs[None, :] ** 2
    dy2 = ys[:, None] ** 2
    return dx2 * h * h + dy2 * w * w <= w * w * h * h


def _raster_triangle(size, verts):
    (x0, y0), (x1, y1), (x2, y2) = [(int(x), int(y)) for x, y in verts]
    xs = np.arange(size, dtype=np.int64)[None, :]
    ys = np.arange(size, dtype=np.int64)[:, None]
    d0 = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
    d1 = (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1)
    d2 = (x0 - x2) * (ys - y2) - (y0 - y2) * (xs - x2)
    return ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))


def _sample_shape(rng, cfg):
    size = cfg.image_size
    lo = max(4, (8 * size) // 100)
    hi = (60 * size) // 100
    class_id = int(rng.integers(0, cfg.num_classes))
    w = int(rng.integers(lo, hi + 1))
    h = int(rng.integers(lo, hi + 1))
    x0 = int(rng.integers(0, size - w + 1))
    y0 = int(rng.integers(0, size - h + 1))
    if class_id == 0:
        raster = _raster_rectangle(size, x0, y0, w, h)
    elif class_id == 1:
        raster = _raster_ellipse(size, x0, y0, w, h)
    else:
        # vertices inside the sampled box; resample until clearly non-degenerate
        while True:
            vx = rng.integers(x0, x0 + w, size=3)
            vy = rng.integers(y0, y0 + h, size=3)
            area2 = abs((vx[1] - vx[0]) * (vy[2] - vy[0])
                        - (vx[2] - vx[0]) * (vy[1] - vy[0]))
            if area2 * 5 >= 2 * w * h:  # triangle area >= 20% of its box
                break
        raster = _raster_triangle(size, list(zip(vx, vy)))
    color = rng.uniform(0.4, 1.0, size=3)
    return class_id, raster, color


def generate_scene(seed, cfg):
    """Deterministic scene for a given seed; later shapes occlude earlier ones."""
    cfg.validate()
    size = cfg.image_size
    for attempt in range(100):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, attempt))))
        n = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
        background = rng.uniform(0.0, 0.3, size=3)
        shapes = [_sample_shape(rng, cfg) for _ in range(n)]

        # occlusion: the last-drawn shape wins contested pixels
        visible = []
        occupied_later = np.zeros((size, size), dtype=bool)
        for class_id, raster, _ in reversed(shapes):
            visible.append(raster & ~occupied_later)
            occupied_later |= raster
        visible.reverse()
        if any(not m.any() for m in visible):
            continue  # a fully occluded instance: regenerate the scene

        image = np.empty((size, size, 3), dtype=np.float32)
        image[:] = background
        for (class_id, raster, color) in shapes:
            image[raster] = color
        image += rng.normal(0.0, 0.02, size=image.shape)
        np.clip(image, 0.0, 1.0, out=image)

        instances = [Instance(class_id, min_enclosing_box(m), m)
                     for (class_id, _, _), m in zip(shapes, visible)]
        return SceneSample(image.astype(np.float32), instances)
    raise GenerationError(f"could not generate a valid scene for seed {seed}")


# ---------------------------------------------------------------------------
# RLE mask storage (column-major, first run is background)

def rle_encode(mask):
    flat = np.asarray(mask, dtype=bool).reshape(-1, order="F")
    if flat.size == 0:
        return []
    changes = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:  # must start with a background run
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs, height, width):
    total = sum(runs)
    if total != height * width:
        raise DatasetError(f"RLE runs sum to {total}, expected {height * width}")
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    value = False
    for r in runs:
        if value:
            flat[pos:pos + r] = True
        pos += r
        value = not value
    return flat.reshape((height, width), order="F")


# ---------------------------------------------------------------------------
# dataset directory: images/*.png + annotations.json (written last)

MANIFEST = "annotations.json"


def write_dataset(samples, directory, meta=None):
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    images, annotations = [], []
    ann_id = 0
    for i, sample in enumerate(samples):
        name = f"{i:06d}.png"
        h, w = sample.image.shape[:2]
        arr = np.round(sample.image * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(directory, "images", name))
        images.append({"id": i, "file_name": name, "width": w, "height": h})
        for inst in sample.instances:
            annotations.append({
                "id": ann_id,
                "image_id": i,
                "category_id": int(inst.class_id),
                "bbox": [float(v) for v in inst.bbox],
                "rle": rle_encode(inst.mask),
            })
            ann_id += 1
    manifest = {"meta": meta or {}, "images": images, "annotations": annotations}
    with open(os.path.join(directory, MANIFEST), "w", encoding="utf-8") as f:
        json.dump(manifest, f)


def load_dataset(directory):
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise DatasetError(f"missing or incomplete dataset: no {path}")
    with open(path, encoding="utf-8") as f:
        manifest = json.load(f)
    by_image = {}
    for ann in manifest["annotations"]:
        by_image.setdefault(ann["image_id"], []).append(ann)
    samples = []
    for rec in manifest["images"]:
        img_path = os.path.join(directory, "images", rec["file_name"])
        if not os.path.exists(img_path):
            raise DatasetError(f"manifest references missing image: {img_path}")
        try:
            arr = np.asarray(Image.open(img_path))
        except Exception as exc:
            raise DatasetError(f"corrupt image file {img_path}: {exc}") from exc
        image = arr.astype(np.float32) / 255.0
        instances = []
        for ann in by_image.get(rec["id"], []):
            mask = rle_decode(ann["rle"], rec["height"], rec["width"])
            instances.append(Instance(int(ann["category_id"]),
                                      tuple(ann["bbox"]), mask))
        samples.append(SceneSample(image, instances))
    return samples, manifest.get("meta", {})

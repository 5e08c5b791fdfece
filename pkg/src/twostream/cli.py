"""Command-line surface: gen-data, train, train-mbrm, infer, eval, viz.

Configuration is a flat key=value file; command-line ``--set key=value``
overrides take precedence.  Every output directory receives a
``run_meta.json`` echoing the effective configuration and seed.  Errors are
reported as one JSON object on stderr with a nonzero exit code.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, fields

import numpy as np
from PIL import Image, ImageDraw

from . import __version__, datagen, mbrm, pipeline
from .anchors import AnchorGrid
from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import DatasetError, GenConfig, generate_scene, load_dataset, write_dataset
from .model import ModelConfig, init_params
from .pipeline import TrainConfig


class CliError(RuntimeError):
    pass


RESULTS_VERSION = 1


@dataclass
class RunConfig:
    image_size: int = 128
    num_classes: int = 3
    min_instances: int = 1
    max_instances: int = 4
    repr_dim: int = 32
    anchor_stride: int = 8
    pixel_stride: int = 4
    anchor_scales: str = "14,28,52"
    anchor_ratios: str = "0.6,1.6"
    lr: float = 0.01
    momentum: float = 0.9
    iterations: int = 2000
    batch_size: int = 4
    warmup: int = 200
    lr_decay_at: int = 1800
    lr_decay_factor: float = 0.1
    lambda_reg: float = 1.0
    lambda_mask: float = 1.0
    flip_augment: bool = True
    checkpoint_every: int = 500
    mbrm_scope: int = 4
    mbrm_gamma: float = 0.05
    mbrm_lr: float = 0.1
    mbrm_iterations: int = 1000
    score_threshold: float = 0.3
    nms_iou: float = 0.5
    mask_threshold: float = 0.4
    infer_expand_ratio: float = 1.2
    seed: int = 0

    def model_config(self):
        scales = tuple(float(s) for s in self.anchor_scales.split(","))
        ratios = tuple(float(r) for r in self.anchor_ratios.split(","))
        return ModelConfig(
            num_classes=self.num_classes, repr_dim=self.repr_dim,
            pixel_stride=self.pixel_stride,
            anchor_grid=AnchorGrid(stride=self.anchor_stride,
                                   scales=scales, ratios=ratios))

    def train_config(self):
        return TrainConfig(lr=self.lr, momentum=self.momentum,
                           iterations=self.iterations, batch_size=self.batch_size,
                           lambda_reg=self.lambda_reg, lambda_mask=self.lambda_mask,
                           warmup=self.warmup, decay_at=self.lr_decay_at,
                           decay_factor=self.lr_decay_factor,
                           flip_augment=self.flip_augment, seed=self.seed)

    def gen_config(self):
        return GenConfig(image_size=self.image_size,
                         min_instances=self.min_instances,
                         max_instances=self.max_instances,
                         num_classes=self.num_classes)

    def mbrm_params(self):
        return mbrm.MbrmParams(scope=self.mbrm_scope, gamma=self.mbrm_gamma)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(RunConfig)}


def _coerce(value, target_type):
    if target_type is bool:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise CliError(f"expected a boolean, got {value!r}")
    return target_type(value)


def build_config(config_path=None, overrides=()):
    cfg = RunConfig()
    types = {f.name: f.type if isinstance(f.type, type) else type(getattr(cfg, f.name))
             for f in fields(RunConfig)}
    pairs = []
    if config_path:
        with open(config_path, encoding="utf-8") as f:
            for ln, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise CliError(f"{config_path}:{ln}: expected key=value")
                key, value = (s.strip() for s in line.split("=", 1))
                pairs.append((key, value))
    for item in overrides:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        pairs.append((key, value))
    for key, value in pairs:
        if key not in types:
            raise CliError(f"unknown configuration key {key!r}")
        setattr(cfg, key, _coerce(value, types[key]))
    return cfg


def write_run_meta(directory, command, cfg):
    meta = {"command": command, "version": __version__, "seed": cfg.seed,
            "config": cfg.to_dict()}
    with open(os.path.join(directory, "run_meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args):
    cfg = build_config(args.config, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise CliError(f"output directory {out!r} is not empty (use --force)")
    os.makedirs(out, exist_ok=True)
    gcfg = cfg.gen_config()
    samples = [generate_scene(cfg.seed * 1_000_003 + i, gcfg)
               for i in range(args.count)]
    write_run_meta(out, "gen-data", cfg)
    # the manifest is written last and doubles as the completion marker
    write_dataset(samples, out, meta={"seed": cfg.seed, "count": args.count,
                                      "config": cfg.to_dict()})
    print(f"wrote {args.count} scenes to {out}")


def _load_store(cfg, path):
    store = init_params(cfg.model_config(), seed=cfg.seed)
    arrays = load_checkpoint(path)
    store.load_state_arrays(arrays)
    return store, arrays


def _checkpoint_path(path):
    if os.path.isdir(path):
        path = os.path.join(path, "checkpoint.rdsn")
    if not os.path.exists(path):
        raise CliError(f"checkpoint not found: {path}")
    return path


def cmd_train(args):
    cfg = build_config(args.config, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations is not None:
        cfg.iterations = args.iterations
    samples, _ = load_dataset(args.data)
    if not samples:
        raise CliError(f"dataset {args.data!r} is empty")
    os.makedirs(args.out, exist_ok=True)
    mcfg = cfg.model_config()
    store = init_params(mcfg, seed=cfg.seed)
    start = 0
    ckpt = os.path.join(args.out, "checkpoint.rdsn")
    if args.resume:
        arrays = load_checkpoint(_checkpoint_path(args.out))
        store.load_state_arrays(arrays)
        start = int(arrays["train.iteration"][0])
    write_run_meta(args.out, "train", cfg)
    log_path = os.path.join(args.out, "loss_log.csv")
    logf = open(log_path, "a" if args.resume else "w", newline="")
    logger = csv.writer(logf)
    if start == 0:
        logger.writerow(["iteration", "cls", "reg", "mask", "total"])

    def save(iteration, path):
        arrays = store.state_arrays()
        arrays["train.iteration"] = np.asarray([iteration + 1], dtype=np.float32)
        save_checkpoint(path, arrays)

    def on_iteration(it, row):
        logger.writerow([it, row["cls"], row["reg"], row["mask"], row["total"]])
        if (it + 1) % cfg.checkpoint_every == 0 and (it + 1) < cfg.iterations:
            save(it, os.path.join(args.out, f"checkpoint_{it + 1:06d}.rdsn"))

    try:
        pipeline.train(samples, store, mcfg, cfg.train_config(),
                       start_iteration=start, on_iteration=on_iteration)
    finally:
        logf.close()
    save(cfg.iterations - 1, ckpt)
    print(f"trained {cfg.iterations - start} iterations; checkpoint at {ckpt}")


def cmd_train_mbrm(args):
    cfg = build_config(args.config, args.set)
    samples, _ = load_dataset(args.data)
    path = _checkpoint_path(args.checkpoint)
    store, arrays = _load_store(cfg, path)
    os.makedirs(args.out, exist_ok=True)
    write_run_meta(args.out, "train-mbrm", cfg)
    mcfg = cfg.model_config()
    triples = pipeline.collect_mbrm_samples(samples, store, mcfg,
                                            score_threshold=cfg.score_threshold)
    if not triples:
        raise CliError("no detections matched ground truth; train the model first")
    params = cfg.mbrm_params()
    log_path = os.path.join(args.out, "mbrm_loss_log.csv")
    with open(log_path, "w", newline="") as logf:
        logger = csv.writer(logf)
        logger.writerow(["iteration", "loss"])
        mbrm.train_mbrm(triples, params, lr=cfg.mbrm_lr,
                        iterations=cfg.mbrm_iterations, seed=cfg.seed,
                        log=lambda it, loss: logger.writerow([it, loss]))
    # all phase-one tensors pass through bit-identical
    out_arrays = dict(arrays)
    out_arrays.update(params.state_arrays())
    out_path = os.path.join(args.out, "checkpoint.rdsn")
    save_checkpoint(out_path, out_arrays)
    print(f"trained MBRM on {len(triples)} instances; checkpoint at {out_path}")


def _mbrm_from_arrays(cfg, arrays):
    params = cfg.mbrm_params()
    if "mbrm.kernel" in arrays:
        if arrays["mbrm.kernel"].shape != params.kernel.shape:
            raise CliError(
                f"checkpoint MBRM kernel {arrays['mbrm.kernel'].shape} does not "
                f"match configured scope {cfg.mbrm_scope} "
                f"(expected {params.kernel.shape})")
        params.load_state_arrays(arrays)
    return params


def cmd_infer(args):
    cfg = build_config(args.config, args.set)
    samples, _ = load_dataset(args.data)
    store, arrays = _load_store(cfg, _checkpoint_path(args.checkpoint))
    params = _mbrm_from_arrays(cfg, arrays)
    mcfg = cfg.model_config()
    records = []
    for img_id, sample in enumerate(samples):
        dets = pipeline.infer(sample.image, store, mcfg, params,
                              score_threshold=cfg.score_threshold,
                              nms_iou=cfg.nms_iou,
                              mask_threshold=cfg.mask_threshold,
                              expand_ratio=cfg.infer_expand_ratio)
        for det in dets:
            records.append({
                "image_id": img_id,
                "class_id": det.class_id,
                "score": det.score,
                "box_regressed": list(det.box_regressed),
                "box_refined": list(det.box_refined),
                "mask_rle": datagen.rle_encode(det.mask),
            })
    payload = {"version": RESULTS_VERSION, "detections": records}
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True)
    print(f"wrote {len(records)} detections to {args.out}")


def load_results(path, samples):
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("version") != RESULTS_VERSION:
        raise CliError(f"{path}: unsupported results version "
                       f"{payload.get('version')!r}")
    results = [[] for _ in samples]
    for rec in payload["detections"]:
        img = rec["image_id"]
        h, w = samples[img].image.shape[:2]
        results[img].append(pipeline.DetectionResult(
            class_id=int(rec["class_id"]),
            score=float(rec["score"]),
            box_regressed=tuple(rec["box_regressed"]),
            box_refined=tuple(rec["box_refined"]),
            mask=datagen.rle_decode(rec["mask_rle"], h, w),
        ))
    return results


def cmd_eval(args):
    cfg = build_config(args.config, args.set)
    samples, _ = load_dataset(args.data)
    results = load_results(args.results, samples)
    if args.boxes == "direct":
        results = [[d for d in (pipeline.direct_baseline(det) for det in dets)
                    if d is not None] for dets in results]
        box_field = "refined"  # direct boxes are stored in both fields
    else:
        box_field = args.boxes
    box_report = pipeline.evaluate_ap(results, samples, iou_type="box",
                                      box_field=box_field)
    mask_report = pipeline.evaluate_ap(results, samples, iou_type="mask")
    report = {
        "boxes": args.boxes,
        "box_ap": box_report.to_dict(),
        "mask_ap": mask_report.to_dict(),
        "boundary_error": {
            name: pipeline.mean_boundary_error(
                results, samples, box_field=box_field,
                area_range=pipeline.AREA_RANGES[name])
            for name in ("all", "small", "medium", "large")
        },
    }
    text = (f"== box AP ({args.boxes}) ==\n{box_report.table()}\n"
            f"== mask AP ==\n{mask_report.table()}\n"
            f"== mean boundary error (px) ==\n"
            + "\n".join(f"{k:>8}: {v:.4f}" for k, v in report["boundary_error"].items()))
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True)


CLASS_COLORS = [(255, 80, 80), (80, 200, 80), (90, 120, 255)]


def cmd_viz(args):
    cfg = build_config(args.config, args.set)
    samples, _ = load_dataset(args.data)
    results = load_results(args.results, samples)
    os.makedirs(args.out, exist_ok=True)
    for img_id, (sample, dets) in enumerate(zip(samples, results)):
        base = Image.fromarray(np.round(sample.image * 255).astype(np.uint8))
        base = base.convert("RGBA")
        overlay = Image.new("RGBA", base.size, (0, 0, 0, 0))
        draw = ImageDraw.Draw(overlay)
        for det in dets:
            color = CLASS_COLORS[det.class_id % len(CLASS_COLORS)]
            mask_img = np.zeros((*det.mask.shape, 4), dtype=np.uint8)
            mask_img[det.mask] = (*color, 128)  # 50% opacity
            overlay.alpha_composite(Image.fromarray(mask_img))
            draw.rectangle(det.box_regressed, outline=(255, 200, 0, 255))
            draw.rectangle(det.box_refined, outline=(0, 255, 255, 255))
            draw.text((det.box_refined[0] + 2, det.box_refined[1] + 2),
                      f"{det.class_id}:{det.score:.2f}", fill=(255, 255, 255, 255))
        out = Image.alpha_composite(base, overlay).convert("RGB")
        out.save(os.path.join(args.out, f"{img_id:06d}.png"))
    print(f"wrote {len(samples)} overlays to {args.out}")


# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a configuration key")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="twostream",
        description="two-stream detection + instance segmentation on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="phase-one training (detector + masks)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-mbrm", help="phase-two boundary refinement training")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True,
                   help="phase-one checkpoint file or run directory")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train_mbrm)

    p = sub.add_parser("infer", help="run inference over a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="results JSON path")
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="COCO-style evaluation of a results file")
    p.add_argument("--results", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--boxes", choices=("regressed", "refined", "direct"),
                   default="refined")
    p.add_argument("--out", help="report JSON path")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="render detection overlays")
    p.add_argument("--results", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point
        json.dump({"error": type(exc).__name__, "message": str(exc)},
                  sys.stderr)
        sys.stderr.write("\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: gen-data, train, eval, detect, selfcheck.

Every subcommand writes a resolved-config snapshot into its output directory
so any artifact can be reproduced from its own files.  Failures exit nonzero
with a one-line diagnosis on stderr.
"""

import os

# Worker caps must land in the environment before numpy loads its BLAS.
_threads = os.environ.get("OS2DKIT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import config as configmod
from . import datagen, evalkit, geometry, selfcheck, trainer


@dataclass(frozen=True)
class GenConfig:
    n_classes: int = 40
    n_train_images: int = 120
    n_val_images: int = 30
    n_val_old_images: int = 12
    seed: int = 0
    rotated: bool = False
    scene_size: int = datagen.SCENE_SIZE


@dataclass(frozen=True)
class EvalJob:
    data: str = ""
    ckpt: str = ""
    split: str = "val_new"
    mode: str = "head"  # head | square | target_ar
    variant: str = "v1"
    rotations: bool = False
    pyramid_levels: tuple[float, ...] = evalkit.PYRAMID_LEVELS
    score_threshold: float = evalkit.SCORE_THRESHOLD
    nms_iou: float = evalkit.NMS_IOU
    annotate: bool = False
    score_maps: bool = False


@dataclass(frozen=True)
class DetectJob:
    image: str = ""
    class_image: str = ""
    ckpt: str = ""
    dataset_scale: int = 0  # 0: read from checkpoint metadata
    mode: str = "head"
    variant: str = "v1"
    rotations: bool = False
    pyramid_levels: tuple[float, ...] = evalkit.PYRAMID_LEVELS
    score_threshold: float = evalkit.SCORE_THRESHOLD
    nms_iou: float = evalkit.NMS_IOU
    annotate: bool = True


def _load_job(cls, args, flag_overrides=()):
    """defaults < --config file < positional key=value < dedicated flags."""
    overrides = configmod.parse_flat("\n".join(args.overrides), source="<args>")
    overrides.update({k: str(v) for k, v in flag_overrides if v is not None})
    return configmod.load_config(cls, args.config, overrides)


def _snapshot(job, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(
        configmod.format_flat(configmod.dataclass_to_flat(job)))


def _load_png_chw(path: str) -> np.ndarray:
    return datagen.image_to_chw(np.asarray(Image.open(path).convert("RGB")))


def _to_pil(image_chw: np.ndarray) -> Image.Image:
    arr = np.clip(image_chw * 255.0, 0.0, 255.0).round().astype(np.uint8)
    return Image.fromarray(arr.transpose(1, 2, 0), "RGB")


def _draw_boxes(img: Image.Image, rows) -> None:
    draw = ImageDraw.Draw(img)
    for box, color in rows:
        draw.rectangle([float(v) for v in box], outline=color, width=2)


def cmd_gen_data(args) -> int:
    job = _load_job(GenConfig, args, [("seed", args.seed)])
    out = Path(args.out)
    datagen.generate_dataset(out, n_classes=job.n_classes,
                             n_train_images=job.n_train_images,
                             n_val_images=job.n_val_images,
                             n_val_old_images=job.n_val_old_images,
                             seed=job.seed, rotated=job.rotated,
                             scene_size=job.scene_size)
    _snapshot(job, out)
    ds = datagen.load_dataset(out)
    print(f"dataset at {out}: {len(ds.classes)} classes, "
          f"{sum(len(v) for v in ds.splits.values())} scenes, "
          f"dataset_scale {ds.dataset_scale}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_job(trainer.TrainConfig, args,
                    [("seed", args.seed), ("variant", args.variant),
                     ("loss_type", args.loss), ("remap", args.remap)])
    ds = datagen.load_dataset(args.data)
    res = trainer.train(ds, cfg, args.out)
    print(f"trained {cfg.steps} steps; best quick-val mAP {res.best_map:.4f} "
          f"at step {res.best_step}; artifacts in {res.out_dir}")
    return 0


def _write_ap_table(result: evalkit.EvalResult, path: Path) -> None:
    with open(path, "w") as f:
        f.write("class\tap\tn_gt\n")
        for cid in sorted(result.n_gt):
            ap = result.ap.get(cid)
            f.write(f"{cid}\t{'excluded' if ap is None else format(ap, '.6f')}\t"
                    f"{result.n_gt[cid]}\n")
        f.write(f"mAP\t{result.map:.6f}\t\n")


def _annotate_split(records, detections, out_dir: Path) -> None:
    """Overlay detections per scene: correct ones green, incorrect red."""
    out_dir.mkdir(parents=True, exist_ok=True)
    by_image: dict[str, list] = {}
    for d in detections:
        by_image.setdefault(d.image_id, []).append(d)
    for r in records:
        img = _to_pil(r.load_image())
        boxes, cids = r.boxes(), r.class_ids()
        rows = []
        for d in by_image.get(r.name, ()):
            same = cids == d.class_id
            hit = same.any() and float(np.max(geometry.iou(d.box[None], boxes[same]))) >= 0.5
            rows.append((d.box, (0, 200, 0) if hit else (220, 0, 0)))
        _draw_boxes(img, rows)
        img.save(out_dir / f"{r.name}.png")


def _write_score_maps(records, class_images, store, job, dataset_scale: int,
                      out_dir: Path) -> None:
    """Grayscale per-class score maps at pyramid level 1.0; lighter is higher."""
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = evalkit.EvalConfig(dataset_scale=dataset_scale, rotations=job.rotations,
                             variant=job.variant)
    for r in records:
        maps = evalkit.class_score_maps(r.load_image(), class_images, store, cfg,
                                        mode=job.mode, level=1.0)
        for cid, sm in maps.items():
            lo, hi = float(sm.min()), float(sm.max())
            norm = (sm - lo) / (hi - lo) if hi > lo else np.zeros_like(sm)
            Image.fromarray((norm * 255.0).round().astype(np.uint8), "L").save(
                out_dir / f"{r.name}_class{cid}.png")


_SPLIT_CLASSES = {"val_new": "unseen_class_ids", "train": "train_class_ids",
                  "val_old": "train_class_ids"}


def cmd_eval(args) -> int:
    job = _load_job(EvalJob, args,
                    [("variant", args.variant), ("rotations", args.rotations)])
    if not job.data or not job.ckpt:
        raise configmod.ConfigError("eval needs data= and ckpt= settings")
    out = Path(args.out)
    _snapshot(job, out)
    ds = datagen.load_dataset(job.data)
    if job.split not in ds.splits:
        raise configmod.ConfigError(f"unknown split {job.split!r}")
    records = ds.splits[job.split]
    store, _ = trainer.load_model(job.ckpt)
    class_ids = getattr(ds, _SPLIT_CLASSES[job.split])
    class_images = {cid: ds.class_image(cid) for cid in class_ids}
    cfg = evalkit.EvalConfig(dataset_scale=ds.dataset_scale,
                             pyramid_levels=tuple(job.pyramid_levels),
                             score_threshold=job.score_threshold,
                             nms_iou=job.nms_iou, rotations=job.rotations,
                             variant=job.variant)
    result, detections = evalkit.evaluate_dataset(records, class_images, store, cfg,
                                                  mode=job.mode)
    _write_ap_table(result, out / "ap_table.txt")
    evalkit.export_detections(detections, out / "detections.txt")
    if job.annotate:
        _annotate_split(records, detections, out / "annotated")
    if job.score_maps:
        _write_score_maps(records, class_images, store, job, ds.dataset_scale,
                          out / "score_maps")
    print(f"{job.split} mAP {result.map:.4f} over {len(records)} images, "
          f"{len(detections)} detections; table in {out / 'ap_table.txt'}")
    return 0


def cmd_detect(args) -> int:
    job = _load_job(DetectJob, args,
                    [("variant", args.variant), ("rotations", args.rotations)])
    if not job.image or not job.class_image or not job.ckpt:
        raise configmod.ConfigError("detect needs image=, class_image= and ckpt=")
    out = Path(args.out)
    _snapshot(job, out)
    store, meta = trainer.load_model(job.ckpt)
    scale = job.dataset_scale or int(meta.get("dataset_scale", 0))
    if scale <= 0:
        raise configmod.ConfigError(
            "checkpoint lacks a dataset scale; pass dataset_scale=N")
    image = _load_png_chw(job.image)
    class_images = {0: _load_png_chw(job.class_image)}
    cfg = evalkit.EvalConfig(dataset_scale=scale,
                             pyramid_levels=tuple(job.pyramid_levels),
                             score_threshold=job.score_threshold,
                             nms_iou=job.nms_iou, rotations=job.rotations,
                             variant=job.variant)
    detections = evalkit.pyramid_detect(image, Path(job.image).stem, class_images,
                                        store, cfg, mode=job.mode)
    evalkit.export_detections(detections, out / "detections.txt")
    if job.annotate:
        img = _to_pil(image)
        _draw_boxes(img, [(d.box, (0, 200, 0)) for d in detections])
        img.save(out / "detections.png")
    if detections:
        best = max(d.score for d in detections)
        print(f"{len(detections)} detections (best score {best:.4f}); "
              f"results in {out / 'detections.txt'}")
    else:
        print(f"no detections above threshold {cfg.score_threshold}; "
              f"empty file at {out / 'detections.txt'}")
    return 0


def cmd_selfcheck(args) -> int:
    ok = selfcheck.run_all(seed=args.seed if args.seed is not None else 0)
    print("selfcheck:", "all checks passed" if ok else "FAILURES above")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="os2dkit",
                                     description="one-shot detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("overrides", nargs="*", metavar="key=value",
                       help="config overrides, applied after --config")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--seed", type=int, default=None)
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", choices=("v1", "v2"))
    p.add_argument("--loss", choices=("cl", "rll"))
    p.add_argument("--remap", choices=("on", "off"))
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--variant", choices=("v1", "v2"))
    p.add_argument("--rotations", choices=("on", "off"))
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("detect", help="detect one class image in one input image")
    p.add_argument("--variant", choices=("v1", "v2"))
    p.add_argument("--rotations", choices=("on", "off"))
    common(p)
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("selfcheck", help="gradient checks and oracle equivalences")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (configmod.ConfigError, datagen.DatasetError, FileNotFoundError,
            ValueError) as e:
        print(f"os2dkit: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

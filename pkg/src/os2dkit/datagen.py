"""Procedural shelf-scene dataset generator and loader.

Scenes are shelf-like composites: a banded background with glyph "products"
pasted on a jittered grid, optional occluder tags, and small distractor
glyphs that belong to no listed class.  Class templates are layered-primitive
glyphs rendered once per class.  Splits follow the one-shot protocol: 70% of
the classes appear in training scenes, the remaining 30% only in the
"val_new" scenes, plus a small "val_old" split with seen classes.

On-disk layout under the dataset root:

    manifest.json            schema "os2d-synth-1": splits, class files,
                             dataset scale, normalization stats, seed
    classes/class_XXXX.png   one RGB template per class
    images/NAME.png          RGB scenes
    annotations/NAME.json    {"image", "width", "height", "objects": [...]}

Every byte is a deterministic function of the seed.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

SCHEMA = "os2d-synth-1"
SCENE_SIZE = 192
TEMPLATE_SIDE_RANGE = (32, 96)
INSTANCE_SCALE_RANGE = (0.7, 1.3)
DISTRACTOR_SCALE_RANGE = (0.35, 0.7)
# Occlusion above this fraction of the box area marks the object "difficult".
DIFFICULT_OCCLUSION = 0.25
MAX_TEMPLATE_CORRELATION = 0.95
# Span of the 15-cell matching window at feature stride 8, in pixels; the
# dataset scale resizes scenes so the mean object fills roughly this extent.
TEMPLATE_EXTENT_PX = 120
_N_DISTRACTOR_GLYPHS = 8


class DatasetError(Exception):
    """Raised for schema, file, or annotation problems in a dataset on disk."""


# ---------------------------------------------------------------------------
# glyph templates


def _rand_color(rng: np.random.Generator, s_lo=0.45, v_lo=0.35, v_hi=1.0) -> tuple[int, int, int]:
    h = rng.uniform()
    s = rng.uniform(s_lo, 1.0)
    v = rng.uniform(v_lo, v_hi)
    return tuple(int(round(c * 255)) for c in colorsys.hsv_to_rgb(h, s, v))


def _rand_subbox(rng: np.random.Generator, w: int, h: int) -> tuple[int, int, int, int]:
    x1 = int(rng.integers(0, max(w - 8, 1)))
    y1 = int(rng.integers(0, max(h - 8, 1)))
    x2 = int(rng.integers(x1 + 6, w))
    y2 = int(rng.integers(y1 + 6, h))
    return x1, y1, x2, y2


def render_template(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    """One glyph template as (height, width, 3) uint8: 3-7 layered primitives."""
    img = Image.new("RGB", (width, height), _rand_color(rng))
    dr = ImageDraw.Draw(img)
    if rng.uniform() < 0.5:  # two-part stacked body
        split = int(height * rng.uniform(0.3, 0.7))
        dr.rectangle([0, split, width - 1, height - 1], fill=_rand_color(rng))
    for _ in range(int(rng.integers(3, 8))):
        kind = int(rng.integers(3))
        x1, y1, x2, y2 = _rand_subbox(rng, width, height)
        color = _rand_color(rng, v_lo=0.15)
        if kind == 0:
            dr.rectangle([x1, y1, x2, y2], fill=color)
        elif kind == 1:
            dr.ellipse([x1, y1, x2, y2], fill=color)
        else:  # stripes
            step = int(rng.integers(5, 12))
            lw = int(rng.integers(2, 5))
            horizontal = rng.uniform() < 0.5
            if horizontal:
                for y in range(y1, y2 + 1, step):
                    dr.line([x1, y, x2, y], fill=color, width=lw)
            else:
                for x in range(x1, x2 + 1, step):
                    dr.line([x, y1, x, y2], fill=color, width=lw)
    dr.rectangle([0, 0, width - 1, height - 1], outline=_rand_color(rng, s_lo=0.0, v_lo=0.0, v_hi=0.45))
    return np.asarray(img, dtype=np.uint8)


def _template_signature(template: np.ndarray) -> np.ndarray:
    """Grayscale 48x48 zero-mean unit-norm vector for pairwise correlation."""
    img = Image.fromarray(template).resize((48, 48), Image.BILINEAR).convert("L")
    v = np.asarray(img, dtype=np.float64).ravel()
    v = v - v.mean()
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def template_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two templates on a common 48x48 gray raster."""
    return float(_template_signature(a) @ _template_signature(b))


@dataclass
class GlyphClass:
    class_id: int
    template: np.ndarray  # (h, w, 3) uint8
    render_seed: int


def make_glyph_classes(n_classes: int, seed: int, tag: int = 0) -> list[GlyphClass]:
    """Deterministic glyph set with pairwise template correlation < 0.95.

    A class whose template correlates too strongly with an earlier one is
    re-rendered from the next sub-seed until the bound holds.
    """
    lo, hi = TEMPLATE_SIDE_RANGE
    classes: list[GlyphClass] = []
    signatures: list[np.ndarray] = []
    for cid in range(n_classes):
        attempt = 0
        while True:
            render_seed = attempt
            rng = np.random.default_rng(np.random.SeedSequence((seed, tag, cid, attempt)))
            w = int(rng.integers(lo, hi + 1))
            h = int(rng.integers(lo, hi + 1))
            t = render_template(rng, w, h)
            sig = _template_signature(t)
            if all(float(sig @ s) < MAX_TEMPLATE_CORRELATION for s in signatures):
                break
            attempt += 1
            if attempt > 64:
                raise RuntimeError(f"could not decorrelate template for class {cid}")
        classes.append(GlyphClass(cid, t, render_seed))
        signatures.append(sig)
    return classes


# ---------------------------------------------------------------------------
# scene rendering


@dataclass
class Instance:
    class_id: int
    box: tuple[int, int, int, int]  # x1, y1, x2, y2 pixels
    scale: float
    rotation_k: int
    occlusion: float
    difficult: bool


def _paint_background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = np.array(_rand_color(rng, s_lo=0.0, v_lo=0.65, v_hi=0.9), dtype=np.float64)
    scene = np.tile(base, (size, size, 1))
    band_h = size // 3
    for i in range(0, size, band_h):
        scene[i:i + band_h] *= rng.uniform(0.92, 1.0)
    for y in range(band_h - 2, size - 1, band_h):  # shelf edges
        scene[y:y + 3] *= 0.55
    return scene


def _boxes_clear(box: tuple[int, int, int, int], others: list[tuple[int, int, int, int]],
                 margin: int) -> bool:
    x1, y1, x2, y2 = box
    for ox1, oy1, ox2, oy2 in others:
        if x1 < ox2 + margin and ox1 < x2 + margin and y1 < oy2 + margin and oy1 < y2 + margin:
            return False
    return True


def _place_box(rng: np.random.Generator, size: int, w: int, h: int,
               taken: list[tuple[int, int, int, int]], margin: int,
               tries: int = 60) -> tuple[int, int, int, int] | None:
    cells = [(r, c) for r in range(2) for c in range(2)]
    half = size // 2
    for t in range(tries):
        r, c = cells[int(rng.integers(4))]
        cy = r * half + half // 2 + int(rng.integers(-24, 25))
        cx = c * half + half // 2 + int(rng.integers(-24, 25))
        x1 = int(np.clip(cx - w // 2, 2, size - 2 - w))
        y1 = int(np.clip(cy - h // 2, 2, size - 2 - h))
        box = (x1, y1, x1 + w, y1 + h)
        if _boxes_clear(box, taken, margin):
            return box
    return None


def _paste(scene: np.ndarray, template: np.ndarray, box: tuple[int, int, int, int],
           rotation_k: int) -> None:
    x1, y1, x2, y2 = box
    t = np.rot90(template, rotation_k) if rotation_k else template
    resized = Image.fromarray(t).resize((x2 - x1, y2 - y1), Image.BILINEAR)
    scene[y1:y2, x1:x2] = np.asarray(resized, dtype=np.float64)


def _occlude(rng: np.random.Generator, scene: np.ndarray,
             box: tuple[int, int, int, int]) -> float:
    """Paint an occluder rectangle fully inside box; returns the exact covered fraction."""
    x1, y1, x2, y2 = box
    bw, bh = x2 - x1, y2 - y1
    f = rng.uniform(0.06, 0.45)
    ar = rng.uniform(0.5, 2.0)
    ow = int(np.clip(round(np.sqrt(f * bw * bh * ar)), 3, bw))
    oh = int(np.clip(round(f * bw * bh / ow), 3, bh))
    ox = x1 + int(rng.integers(0, bw - ow + 1))
    oy = y1 + int(rng.integers(0, bh - oh + 1))
    scene[oy:oy + oh, ox:ox + ow] = np.array(_rand_color(rng, s_lo=0.0, v_lo=0.25, v_hi=0.95),
                                             dtype=np.float64)
    return (ow * oh) / float(bw * bh)


def render_scene(rng: np.random.Generator, classes: dict[int, np.ndarray],
                 slot_class_ids: list[int], distractors: list[np.ndarray],
                 size: int = SCENE_SIZE, rotated: bool = False,
                 occlusion_prob: float = 0.35) -> tuple[np.ndarray, list[Instance], list[int]]:
    """Render one scene; returns (uint8 image, instances, class ids that did not fit)."""
    lo, hi = INSTANCE_SCALE_RANGE
    scene = _paint_background(rng, size)
    instances: list[Instance] = []
    taken: list[tuple[int, int, int, int]] = []
    unplaced: list[int] = []
    for cid in slot_class_ids:
        template = classes[cid]
        scale = float(rng.uniform(lo, hi))
        k = int(rng.integers(4)) if rotated else 0
        th, tw = template.shape[:2]
        if k % 2 == 1:
            th, tw = tw, th
        w = min(int(round(tw * scale)), size - 6)
        h = min(int(round(th * scale)), size - 6)
        box = _place_box(rng, size, w, h, taken, margin=4)
        if box is None:
            unplaced.append(cid)
            continue
        _paste(scene, template, box, k)
        occ = 0.0
        if rng.uniform() < occlusion_prob:
            occ = _occlude(rng, scene, box)
        instances.append(Instance(cid, box, scale, k, occ, occ > DIFFICULT_OCCLUSION))
        taken.append(box)
    for _ in range(int(rng.integers(0, 3))):
        template = distractors[int(rng.integers(len(distractors)))]
        scale = float(rng.uniform(*DISTRACTOR_SCALE_RANGE))
        th, tw = template.shape[:2]
        w = max(int(round(tw * scale)), 8)
        h = max(int(round(th * scale)), 8)
        box = _place_box(rng, size, w, h, taken, margin=2, tries=30)
        if box is None:
            continue
        _paste(scene, template, box, 0)
        taken.append(box)
    noise = rng.normal(0.0, 3.0, scene.shape)
    return np.clip(scene + noise, 0, 255).astype(np.uint8), instances, unplaced


# ---------------------------------------------------------------------------
# dataset records and I/O


@dataclass
class ObjectAnnotation:
    box: np.ndarray  # (4,) float64 [x1, y1, x2, y2]
    class_id: int
    difficult: bool
    occlusion: float = 0.0
    rotation_k: int = 0


@dataclass
class SceneRecord:
    name: str
    image_path: Path
    width: int
    height: int
    objects: list[ObjectAnnotation]

    def boxes(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, 4))
        return np.stack([o.box for o in self.objects])

    def class_ids(self) -> np.ndarray:
        return np.array([o.class_id for o in self.objects], dtype=np.int64)

    def difficult_flags(self) -> np.ndarray:
        return np.array([o.difficult for o in self.objects], dtype=bool)

    def load_image(self) -> np.ndarray:
        """Scene pixels as float32 (3, H, W) in [0, 1]."""
        return image_to_chw(np.asarray(Image.open(self.image_path).convert("RGB")))


@dataclass
class Dataset:
    root: Path
    manifest: dict
    classes: dict[int, np.ndarray]  # class id -> (h, w, 3) uint8 template
    splits: dict[str, list[SceneRecord]] = field(default_factory=dict)

    @property
    def dataset_scale(self) -> int:
        return int(self.manifest["dataset_scale"])

    @property
    def train_class_ids(self) -> list[int]:
        return list(self.manifest["train_class_ids"])

    @property
    def unseen_class_ids(self) -> list[int]:
        return list(self.manifest["unseen_class_ids"])

    @property
    def normalization(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.manifest["normalization"]
        return np.asarray(n["mean"], dtype=np.float64), np.asarray(n["std"], dtype=np.float64)

    def class_image(self, class_id: int) -> np.ndarray:
        return image_to_chw(self.classes[class_id])


def image_to_chw(arr: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
    return np.ascontiguousarray(arr.astype(np.float32).transpose(2, 0, 1) / 255.0)


def compute_dataset_scale(records: list[SceneRecord]) -> int:
    """Rounded eval scale: resize so the mean object larger side spans the match window.

    scale = round(mean scene larger side * TEMPLATE_EXTENT_PX / mean object
    larger side); resizing a scene's larger side to this value puts the
    average object at about TEMPLATE_EXTENT_PX pixels, the span the head
    matches at pyramid level 1.0.
    """
    obj_sides = [max(o.box[2] - o.box[0], o.box[3] - o.box[1])
                 for r in records for o in r.objects]
    if not obj_sides:
        raise DatasetError("cannot compute dataset scale: no annotated objects")
    scene_sides = [max(r.width, r.height) for r in records]
    return int(round(float(np.mean(scene_sides)) * TEMPLATE_EXTENT_PX / float(np.mean(obj_sides))))


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _save_png(path: Path, arr: np.ndarray) -> None:
    tmp = path.with_suffix(".tmp.png")
    Image.fromarray(arr).save(tmp, format="PNG")
    os.replace(tmp, path)


def _class_bag(ids: list[int], rng: np.random.Generator, total: int) -> list[int]:
    """Shuffled draw order covering every id once up front, then uniformly."""
    head = np.array(ids, dtype=np.int64)
    rng.shuffle(head)
    reps = max(int(np.ceil(max(total - len(ids), 0) / len(ids))), 1)
    tail = np.tile(ids, reps)
    rng.shuffle(tail)
    return [int(v) for v in head] + [int(v) for v in tail]


def generate_dataset(out_dir, n_classes: int = 40, n_train_images: int = 120,
                     n_val_images: int = 30, n_val_old_images: int = 12,
                     seed: int = 0, rotated: bool = False,
                     scene_size: int = SCENE_SIZE) -> Path:
    """Write a complete dataset under out_dir and return its root path.

    Class ids split 70/30 into train and unseen sets; "train" and "val_old"
    scenes use train classes only, "val_new" scenes use unseen classes only.
    With rotated=True every pasted instance gets a random 0/90/180/270
    rotation (the class templates stay upright).
    """
    if n_classes < 10:
        raise ValueError("n_classes must be >= 10")
    root = Path(out_dir)
    for sub in ("classes", "images", "annotations"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    glyphs = make_glyph_classes(n_classes, seed, tag=0)
    templates = {g.class_id: g.template for g in glyphs}
    distractors = [g.template for g in make_glyph_classes(_N_DISTRACTOR_GLYPHS, seed, tag=1)]

    split_rng = np.random.default_rng(np.random.SeedSequence((seed, 3)))
    ids = np.arange(n_classes)
    split_rng.shuffle(ids)
    n_train_cls = int(round(0.7 * n_classes))
    train_ids = sorted(int(i) for i in ids[:n_train_cls])
    unseen_ids = sorted(int(i) for i in ids[n_train_cls:])

    class_files = {}
    for g in glyphs:
        rel = f"classes/class_{g.class_id:04d}.png"
        _save_png(root / rel, g.template)
        class_files[str(g.class_id)] = rel

    plan = [("train", 0, n_train_images, train_ids),
            ("val_new", 1, n_val_images, unseen_ids),
            ("val_old", 2, n_val_old_images, train_ids)]
    splits: dict[str, list[str]] = {}
    train_records: list[SceneRecord] = []
    px_sum = np.zeros(3)
    px_sqsum = np.zeros(3)
    px_count = 0

    for split, tag, count, id_pool in plan:
        bag_rng = np.random.default_rng(np.random.SeedSequence((seed, 4, tag)))
        bag = _class_bag(id_pool, bag_rng, total=count * 4)
        names = []
        for i in range(count):
            rng = np.random.default_rng(np.random.SeedSequence((seed, 2, tag, i)))
            n_obj = int(rng.integers(2, 5))
            slots = [bag.pop(0) for _ in range(min(n_obj, len(bag)))]
            scene, instances, unplaced = render_scene(rng, templates, slots, distractors,
                                                      size=scene_size, rotated=rotated)
            bag.extend(unplaced)  # retry classes that did not fit in a later scene
            name = f"{split}_{i:04d}"
            _save_png(root / "images" / f"{name}.png", scene)
            objects = [{
                "box": [float(v) for v in inst.box],
                "class_id": inst.class_id,
                "difficult": inst.difficult,
                "occlusion": round(inst.occlusion, 6),
                "rotation_k": inst.rotation_k,
            } for inst in instances]
            doc = {"image": f"images/{name}.png", "width": scene_size,
                   "height": scene_size, "objects": objects}
            payload = json.dumps(doc, indent=1, sort_keys=True).encode()
            _atomic_write_bytes(root / "annotations" / f"{name}.json", payload)
            names.append(name)
            if split == "train":
                record = SceneRecord(name, root / "images" / f"{name}.png", scene_size,
                                     scene_size,
                                     [ObjectAnnotation(np.array(o["box"]), o["class_id"],
                                                       o["difficult"], o["occlusion"],
                                                       o["rotation_k"]) for o in objects])
                train_records.append(record)
                x = scene.reshape(-1, 3).astype(np.float64) / 255.0
                px_sum += x.sum(axis=0)
                px_sqsum += (x * x).sum(axis=0)
                px_count += x.shape[0]
        splits[split] = names

    mean = px_sum / px_count
    std = np.sqrt(np.maximum(px_sqsum / px_count - mean * mean, 1e-8))
    manifest = {
        "schema": SCHEMA,
        "seed": seed,
        "scene_size": scene_size,
        "rotated": rotated,
        "n_classes": n_classes,
        "train_class_ids": train_ids,
        "unseen_class_ids": unseen_ids,
        "class_files": class_files,
        "splits": splits,
        "dataset_scale": compute_dataset_scale(train_records),
        "normalization": {"mean": [round(v, 8) for v in mean],
                          "std": [round(v, 8) for v in std]},
    }
    _atomic_write_bytes(root / "manifest.json",
                        json.dumps(manifest, indent=1, sort_keys=True).encode())
    return root


def _load_annotation(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: line {e.lineno}: {e.msg}") from e


def load_dataset(path) -> Dataset:
    """Load a generated dataset; validates schema, files, and every box."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"{manifest_path}: manifest not found")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{manifest_path}: line {e.lineno}: {e.msg}") from e
    if manifest.get("schema") != SCHEMA:
        raise DatasetError(f"{manifest_path}: schema {manifest.get('schema')!r}, expected {SCHEMA!r}")

    classes: dict[int, np.ndarray] = {}
    for cid_str, rel in manifest["class_files"].items():
        p = root / rel
        if not p.is_file():
            raise DatasetError(f"{p}: class template missing")
        classes[int(cid_str)] = np.asarray(Image.open(p).convert("RGB"))

    splits: dict[str, list[SceneRecord]] = {}
    for split, names in manifest["splits"].items():
        records = []
        for name in names:
            img_path = root / "images" / f"{name}.png"
            ann_path = root / "annotations" / f"{name}.json"
            if not img_path.is_file():
                raise DatasetError(f"{img_path}: scene image missing")
            if not ann_path.is_file():
                raise DatasetError(f"{ann_path}: annotation missing")
            doc = _load_annotation(ann_path)
            w, h = int(doc["width"]), int(doc["height"])
            objects = []
            for i, o in enumerate(doc.get("objects", [])):
                box = np.asarray(o["box"], dtype=np.float64)
                if box.shape != (4,) or not (0 <= box[0] < box[2] <= w and 0 <= box[1] < box[3] <= h):
                    raise DatasetError(f"{ann_path}: object {i}: invalid box {o['box']}")
                objects.append(ObjectAnnotation(box, int(o["class_id"]), bool(o["difficult"]),
                                                float(o.get("occlusion", 0.0)),
                                                int(o.get("rotation_k", 0))))
            records.append(SceneRecord(name, img_path, w, h, objects))
        splits[split] = records
    return Dataset(root=root, manifest=manifest, classes=classes, splits=splits)

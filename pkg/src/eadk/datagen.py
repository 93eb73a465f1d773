"""Synthetic cluttered-scene generator, manifest JSON and PPM raster I/O.

Rasterization is integer-only so scenes are byte-identical everywhere.
Shape masks are evaluated on doubled pixel-centre coordinates relative
to the box centre, which keeps every test exact.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError

SCHEMA_VERSION = 1
SHAPES = ("disc", "square", "triangle", "cross", "ring", "bar")
SPLITS = ("base-train", "base-val", "novel-train", "novel-test")


@dataclass(frozen=True)
class CategorySpec:
    name: str
    shape: str
    color: tuple = ((0, 255), (0, 255), (0, 255))  # inclusive RGB intervals
    size: tuple = (0.12, 0.3)  # side length as a fraction of the image

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ContractError(f"unknown shape kind {self.shape!r}")
        lo, hi = self.size
        if not 0 < lo <= hi < 1:
            raise ContractError(f"size range {self.size} must lie inside (0, 1)")
        for a, b in self.color:
            if not 0 <= a <= b <= 255:
                raise ContractError(f"bad color interval {(a, b)}")

    def similar_to(self, other, overlap):
        """Copy whose color range is pulled toward ``other``'s by ``overlap`` in [0, 1]."""
        mixed = tuple(
            (round(a + (c - a) * overlap), round(b + (d - b) * overlap))
            for (a, b), (c, d) in zip(self.color, other.color)
        )
        return CategorySpec(self.name, self.shape, mixed, self.size)


# Base classes cover a cool and a warm colour family so the pretrained
# features see the hues the novel classes use.  Every range keeps clear
# contrast with the brown background.
BASE_CATEGORIES = (
    CategorySpec("disc", "disc", ((0, 70), (90, 255), (110, 255))),
    CategorySpec("square", "square", ((190, 255), (0, 210), (0, 60))),
)
NOVEL_CATEGORIES = (
    CategorySpec("triangle", "triangle", ((200, 250), (40, 110), (10, 50))),
    CategorySpec("cross", "cross", ((20, 60), (100, 170), (190, 250))),
)


# -- rasterization -------------------------------------------------------
def shape_extent(kind, side):
    """(width, height) in pixels for a shape of nominal ``side``."""
    if kind == "bar":
        return side, max(2, side // 3)
    return side, side


def shape_mask(kind, w, h):
    """Boolean (h, w) mask whose tight bounding box is the full (w, h) extent."""
    xs = 2 * np.arange(w, dtype=np.int64) + 1 - w  # doubled offsets from the centre
    ys = 2 * np.arange(h, dtype=np.int64) + 1 - h
    px, py = np.meshgrid(xs, ys)
    if kind in ("square", "bar"):
        return np.ones((h, w), dtype=bool)
    r2 = px * px + py * py
    if kind == "disc":
        return r2 <= w * w
    if kind == "ring":
        return (r2 <= w * w) & (4 * r2 >= w * w)
    if kind == "triangle":
        rows = np.arange(h, dtype=np.int64)[:, None]
        return np.abs(px) * h <= (rows + 1) * w
    if kind == "cross":
        return (3 * np.abs(px) <= w) | (3 * np.abs(py) <= h)
    raise ContractError(f"unknown shape kind {kind!r}")


def _background(rng, size):
    base = np.array([120, 90, 60], dtype=np.int64) + rng.integers(-15, 16, size=3)
    noise = rng.integers(-18, 19, size=(size, size, 1))
    speck = rng.integers(-8, 9, size=(size, size, 3))
    return np.clip(base + noise + speck, 0, 255)


def _box_iou_px(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union else 0.0


def generate_scene(categories, max_objects, occlusion_level, rng, image_size=64, max_attempts=100):
    """Draw a textured background and 1..max_objects shapes in z-order.

    Returns ``(raster uint8 HxWx3, annotations)`` where each annotation is
    ``(category_index, [x, y, w, h])`` in pixels covering the full shape
    extent even when later shapes occlude it.
    """
    if max_objects < 1:
        raise ContractError("max_objects must be >= 1")
    if not 0.0 <= occlusion_level <= 1.0:
        raise ContractError("occlusion_level must lie in [0, 1]")
    S = image_size
    canvas = _background(rng, S)
    owner = np.full((S, S), -1, dtype=np.int64)
    boxes, masks_area, cats = [], [], []
    wanted = int(rng.integers(1, max_objects + 1))
    attempts = 0
    while len(boxes) < wanted and attempts < max_attempts:
        attempts += 1
        c = int(rng.integers(len(categories)))
        spec = categories[c]
        lo = max(3, int(round(spec.size[0] * S)))
        hi = max(lo, int(round(spec.size[1] * S)))
        w, h = shape_extent(spec.shape, int(rng.integers(lo, hi + 1)))
        overlap = boxes and rng.random() < occlusion_level
        if overlap:
            ox, oy, ow, oh = boxes[int(rng.integers(len(boxes)))]
            cx = int(rng.integers(ox, ox + ow))
            cy = int(rng.integers(oy, oy + oh))
            x = int(np.clip(cx - w // 2, 0, S - w))
            y = int(np.clip(cy - h // 2, 0, S - h))
        else:
            x = int(rng.integers(0, S - w + 1))
            y = int(rng.integers(0, S - h + 1))
        box = (x, y, w, h)
        if not overlap and any(_box_iou_px(box, b) > 0 for b in boxes):
            continue
        mask = shape_mask(spec.shape, w, h)
        trial = owner.copy()
        region = trial[y:y + h, x:x + w]
        region[mask] = len(boxes)
        visible = np.bincount(trial[trial >= 0], minlength=len(boxes) + 1)
        if any(visible[k] * 10 < masks_area[k] for k in range(len(boxes))):
            continue  # an earlier object would be more than 90% hidden
        color = np.array([int(rng.integers(a, b + 1)) for a, b in spec.color], dtype=np.int64)
        shade = rng.integers(-10, 11, size=(h, w, 1))
        patch = canvas[y:y + h, x:x + w]
        patch[mask] = np.clip(color + shade, 0, 255)[mask]
        owner = trial
        boxes.append(box)
        masks_area.append(int(mask.sum()))
        cats.append(c)
    return canvas.astype(np.uint8), [(c, list(b)) for c, b in zip(cats, boxes)]


# -- PPM -----------------------------------------------------------------
def write_ppm(path, raster):
    """Write a P6 file; float rasters in [0, 1] are scaled by 255 and rounded."""
    arr = np.asarray(raster)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ContractError(f"raster must be H x W x 3, got {arr.shape}")
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _ppm_tokens(data, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PPM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # single whitespace byte ends the header


def read_ppm_bytes(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P6":
        raise ParseError(f"{path}: not a binary PPM (magic {data[:2]!r})")
    (magic, w, h, maxval), offset = _ppm_tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ParseError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise ParseError(f"{path}: only maxval 255 is supported, got {maxval}")
    payload = data[offset:offset + w * h * 3]
    if len(payload) != w * h * 3:
        raise ParseError(f"{path}: truncated payload ({len(payload)} of {w * h * 3} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def read_ppm(path):
    """Read a P6 file into an H x W x 3 float array in [0, 1]."""
    return read_ppm_bytes(path).astype(np.float64) / 255.0


# -- manifest ------------------------------------------------------------
@dataclass
class ImageRecord:
    id: int
    file: str
    width: int
    height: int


@dataclass
class Annotation:
    id: int
    image_id: int
    category_id: int
    bbox: list


@dataclass
class Category:
    id: int
    name: str


@dataclass
class Manifest:
    images: list = field(default_factory=list)
    annotations: list = field(default_factory=list)
    categories: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def validate(self):
        _unique([im.id for im in self.images], "image")
        _unique([a.id for a in self.annotations], "annotation")
        _unique([c.id for c in self.categories], "category")
        images = {im.id: im for im in self.images}
        cat_ids = {c.id for c in self.categories}
        for a in self.annotations:
            if a.image_id not in images:
                raise ParseError(f"annotation {a.id} references missing image id {a.image_id}")
            if a.category_id not in cat_ids:
                raise ParseError(f"annotation {a.id} references missing category id {a.category_id}")
            if len(a.bbox) != 4:
                raise ParseError(f"annotation {a.id}: bbox must have 4 numbers")
            x, y, w, h = a.bbox
            im = images[a.image_id]
            if w < 0 or h < 0 or x < 0 or y < 0 or x + w > im.width or y + h > im.height:
                raise ParseError(f"annotation {a.id}: bbox {a.bbox} outside image {im.id} bounds")
        return self

    def class_index(self):
        """category id -> contiguous class index, in manifest order."""
        return {c.id: i for i, c in enumerate(self.categories)}

    def annotations_by_image(self):
        out = {im.id: [] for im in self.images}
        for a in self.annotations:
            out[a.image_id].append(a)
        return out


def _unique(ids, what):
    seen = set()
    for i in ids:
        if i in seen:
            raise ParseError(f"duplicate {what} id {i}")
        seen.add(i)


_FIELDS = {
    "manifest": {"schema_version", "images", "annotations", "categories"},
    "images": {"id", "file", "width", "height"},
    "annotations": {"id", "image_id", "category_id", "bbox"},
    "categories": {"id", "name"},
}
_TYPES = {"images": ImageRecord, "annotations": Annotation, "categories": Category}


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: expected an object")
    for key in obj:
        if key not in allowed:
            raise ParseError(f"{where}: unknown field {key!r}")
    missing = allowed - set(obj)
    if missing:
        raise ParseError(f"{where}: missing field {sorted(missing)[0]!r}")


def manifest_from_dict(obj, where="manifest"):
    _check_keys(obj, _FIELDS["manifest"], where)
    if obj["schema_version"] != SCHEMA_VERSION:
        raise ParseError(f"{where}: unsupported schema_version {obj['schema_version']}")
    parts = {}
    for key, cls in _TYPES.items():
        items = obj[key]
        if not isinstance(items, list):
            raise ParseError(f"{where}.{key}: expected a list")
        recs = []
        for i, item in enumerate(items):
            _check_keys(item, _FIELDS[key], f"{where}.{key}[{i}]")
            recs.append(cls(**item))
        parts[key] = recs
    return Manifest(schema_version=obj["schema_version"], **parts).validate()


def read_manifest(path):
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}") from None
    return manifest_from_dict(obj, where=str(path))


def write_manifest(path, manifest):
    manifest.validate()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(asdict(manifest), fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- benchmark -----------------------------------------------------------
@dataclass(frozen=True)
class SplitPlan:
    name: str
    categories: tuple
    scenes: int


def benchmark_plan(train_scenes=None, eval_scenes=None):
    """Default splits: 400/100 base scenes, 64/100 novel scenes."""
    return (
        SplitPlan("base-train", BASE_CATEGORIES, train_scenes or 400),
        SplitPlan("base-val", BASE_CATEGORIES, eval_scenes or 100),
        SplitPlan("novel-train", NOVEL_CATEGORIES, train_scenes or 64),
        SplitPlan("novel-test", NOVEL_CATEGORIES, eval_scenes or 100),
    )


def scene_rng(seed, split_index, scene_index):
    return np.random.default_rng([int(seed), int(split_index), int(scene_index)])


def write_split(root, split_index, plan, seed, occlusion=0.3, max_objects=4, image_size=64):
    out = Path(root) / plan.name
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = Manifest(categories=[Category(i + 1, c.name) for i, c in enumerate(plan.categories)])
    ann_id = 1
    for k in range(plan.scenes):
        raster, anns = generate_scene(
            plan.categories, max_objects, occlusion, scene_rng(seed, split_index, k), image_size
        )
        fname = f"images/{k:05d}.ppm"
        write_ppm(out / fname, raster)
        manifest.images.append(ImageRecord(k + 1, fname, image_size, image_size))
        for c, bbox in anns:
            manifest.annotations.append(Annotation(ann_id, k + 1, c + 1, bbox))
            ann_id += 1
    write_manifest(out / "manifest.json", manifest)
    return manifest


def build_benchmark(root, seed=7, occlusion=0.3, train_scenes=None, eval_scenes=None, max_objects=4,
                    image_size=64):
    """Write the four fixed splits under ``root``; returns {split: Manifest}."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        return {
            plan.name: write_split(root, i, plan, seed, occlusion, max_objects, image_size)
            for i, plan in enumerate(benchmark_plan(train_scenes, eval_scenes))
        }
    except OSError as exc:
        raise OSError(f"cannot write benchmark under {root}: {exc}") from exc


# -- loading -------------------------------------------------------------
@dataclass
class Split:
    """A manifest with its rasters and normalized cxcywh targets."""

    manifest: Manifest
    images: np.ndarray  # (N, H, W, 3) float in [0, 1]
    boxes: list  # per image (M, 4) cxcywh fractions
    classes: list  # per image (M,) contiguous class indices
    root: Path = None

    def __len__(self):
        return len(self.images)

    @property
    def category_names(self):
        return [c.name for c in self.manifest.categories]

    @property
    def num_classes(self):
        return len(self.manifest.categories)

    def targets(self, i):
        return self.boxes[i], self.classes[i]

    def subset(self, indices):
        idx = list(indices)
        return Split(self.manifest, self.images[idx], [self.boxes[i] for i in idx],
                     [self.classes[i] for i in idx], self.root)


def pixel_to_cxcywh(bbox, width, height):
    x, y, w, h = bbox
    return [(x + w / 2) / width, (y + h / 2) / height, w / width, h / height]


def load_split(root, split=None):
    """Load ``{root}/{split}/manifest.json`` (or ``root`` itself when split is None)."""
    base = Path(root) if split is None else Path(root) / split
    manifest = read_manifest(base / "manifest.json")
    cls_index = manifest.class_index()
    by_image = manifest.annotations_by_image()
    images, boxes, classes = [], [], []
    for im in manifest.images:
        raster = read_ppm(base / im.file)
        if raster.shape[:2] != (im.height, im.width):
            raise ParseError(f"{base / im.file}: raster size {raster.shape[:2]} disagrees with manifest")
        images.append(raster)
        anns = by_image[im.id]
        boxes.append(np.array([pixel_to_cxcywh(a.bbox, im.width, im.height) for a in anns],
                              dtype=np.float64).reshape(-1, 4))
        classes.append(np.array([cls_index[a.category_id] for a in anns], dtype=np.intp))
    stack = np.stack(images) if images else np.zeros((0, 0, 0, 3))
    return Split(manifest, stack, boxes, classes, base)


def env_threads():
    try:
        return max(1, int(os.environ.get("EADK_THREADS", "1")))
    except ValueError:
        return 1

"""Data plane: seeded synthetic ore scenes, COCO ingestion, episodes.

Synthetic scenes render textured convex blobs (the novel "ore" class)
among distractor shapes (rectangle / triangle / ring) on a dark speckled
background, with density-controlled overlap and tight boxes derived from
the rendered masks. Scenes regenerate bit-identically from their seed.
Datasets materialize to a COCO-style layout (annotations.json + PNG
images) and load back through one ingestion path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import _bilinear_matrix

CLASS_IDS = {"ore": 1, "rectangle": 2, "triangle": 3, "ring": 4}
CLASS_NAMES = {v: k for k, v in CLASS_IDS.items()}
BASE_CLASSES = (2, 3, 4)
NOVEL_CLASS = 1

# density -> (min objects, max objects, max allowed pairwise box IoU)
DENSITIES = {
    "sparse": (2, 4, 0.0),
    "medium": (3, 7, 0.4),
    "dense": (6, 12, 0.6),
}

SUPPORT_SIZE = 240
SUPPORT_MARGIN = 16
QUERY_SHORT_SIDE = 320
QUERY_LONG_CAP = 1000


class DataError(Exception):
    """Malformed or insufficient data; message names the offending record."""


@dataclass
class Scene:
    """One rendered or loaded image with its annotations."""
    scene_id: int
    width: int
    height: int
    boxes: list            # (x1, y1, x2, y2) floats, inside bounds, area > 0
    classes: list          # class id per box
    seed: int = 0
    _image_u8: np.ndarray = field(default=None, repr=False)
    _path: Path = field(default=None, repr=False)

    @property
    def image(self):
        """(3,H,W) float32 in [0,1]; loaded or regenerated lazily, cached."""
        if self._image_u8 is None:
            if self._path is None:
                raise DataError(f"scene {self.scene_id} has no image source")
            if not self._path.exists():
                raise DataError(f"image file missing: {self._path}")
            with Image.open(self._path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            self._image_u8 = arr.transpose(2, 0, 1)
        return self._image_u8.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# rendering

def _value_noise(rng, h, w, grid, amp):
    coarse = rng.random((grid, grid)).astype(np.float32)
    rh = _bilinear_matrix(grid, h, np.float32)
    rw = _bilinear_matrix(grid, w, np.float32)
    return (rh @ coarse @ rw.T - 0.5) * (2 * amp)


def _convex_hull(points):
    """Andrew monotone chain; points (n,2) -> CCW hull vertices."""
    pts = sorted(map(tuple, points))

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.float64)


def _polygon_mask(verts, h, w):
    # convex polygon: inside iff all edge cross products share a sign
    ys, xs = np.mgrid[0:h, 0:w]
    pos = np.ones((h, w), dtype=bool)
    neg = np.ones((h, w), dtype=bool)
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
        pos &= cross >= 0
        neg &= cross <= 0
    return pos | neg


def _render_object(rng, cls, ph, pw):
    """Mask (ph,pw) and texture (3,ph,pw) for one object patch."""
    noise = _value_noise(rng, ph, pw, grid=5, amp=0.12)
    speckle = (rng.random((ph, pw)).astype(np.float32) - 0.5) * 0.08
    if cls == CLASS_IDS["ore"]:
        angles = np.sort(rng.uniform(0, 2 * math.pi, 11))
        radii = rng.uniform(0.55, 1.0, 11)
        px = pw / 2 + (pw / 2 - 1) * radii * np.cos(angles)
        py = ph / 2 + (ph / 2 - 1) * radii * np.sin(angles)
        verts = _convex_hull(np.stack([px, py], axis=1))
        mask = _polygon_mask(verts, ph, pw)
        base = rng.uniform(0.40, 0.68)
        tint = np.array([1.0, rng.uniform(0.86, 0.97), rng.uniform(0.72, 0.88)],
                        dtype=np.float32)
        tex = base * tint[:, None, None] + noise + speckle
    elif cls == CLASS_IDS["rectangle"]:
        mask = np.ones((ph, pw), dtype=bool)
        period = rng.uniform(6, 14)
        stripes = 0.5 + 0.2 * np.sin(2 * math.pi * np.arange(pw) / period)
        base = np.broadcast_to(stripes.astype(np.float32), (ph, pw))
        tint = np.array([rng.uniform(0.3, 0.6), rng.uniform(0.5, 0.9), 1.0],
                        dtype=np.float32)
        tex = base * tint[:, None, None] + speckle
    elif cls == CLASS_IDS["triangle"]:
        apex_x = rng.uniform(0.25, 0.75) * (pw - 1)
        verts = np.array([[0, ph - 1], [pw - 1, ph - 1], [apex_x, 0]], dtype=np.float64)
        mask = _polygon_mask(verts, ph, pw)
        checker = (((np.arange(ph)[:, None] // 5) + (np.arange(pw)[None, :] // 5)) % 2)
        base = (0.45 + 0.18 * checker).astype(np.float32)
        tint = np.array([1.0, rng.uniform(0.4, 0.7), rng.uniform(0.4, 0.7)],
                        dtype=np.float32)
        tex = base * tint[:, None, None] + speckle
    elif cls == CLASS_IDS["ring"]:
        ys, xs = np.mgrid[0:ph, 0:pw]
        dist = np.sqrt(((xs - (pw - 1) / 2) / (pw / 2)) ** 2
                       + ((ys - (ph - 1) / 2) / (ph / 2)) ** 2)
        inner = rng.uniform(0.35, 0.6)
        mask = (dist <= 0.98) & (dist >= inner)
        base = (0.5 + 0.25 * np.cos(8 * dist)).astype(np.float32)
        tint = np.array([rng.uniform(0.5, 0.8), 1.0, rng.uniform(0.5, 0.8)],
                        dtype=np.float32)
        tex = base * tint[:, None, None] + speckle
    else:
        raise ValueError(f"unknown class id {cls}")
    return mask, np.clip(tex, 0.0, 1.0)


def _box_iou(a, b):
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    if inter == 0:
        return 0.0
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


def synth_scene(seed, density="medium", size=320, class_mix=("ore", "rectangle", "triangle")):
    """Render one scene; bit-identical for identical arguments."""
    if size < 64:
        raise ValueError("scene size must be >= 64")
    if density not in DENSITIES:
        raise ValueError(f"unknown density {density!r}")
    n_min, n_max, iou_cap = DENSITIES[density]
    rng = np.random.default_rng([int(seed), 9151])
    img = np.empty((3, size, size), dtype=np.float32)
    bg = 0.12 + _value_noise(rng, size, size, grid=7, amp=0.05)
    img[:] = bg + (rng.random((size, size)).astype(np.float32) - 0.5) * 0.04
    n_objects = int(rng.integers(n_min, n_max + 1))
    class_ids = [CLASS_IDS[c] for c in class_mix]

    boxes, classes = [], []
    for _ in range(n_objects):
        cls = int(rng.choice(class_ids))
        placed = False
        for _attempt in range(60):
            pw = int(rng.integers(48, 131))
            ph = int(rng.integers(48, 131))
            x0 = int(rng.integers(2, size - pw - 2))
            y0 = int(rng.integers(2, size - ph - 2))
            cand = (float(x0), float(y0), float(x0 + pw), float(y0 + ph))
            if all(_box_iou(cand, b) <= iou_cap for b in boxes):
                placed = True
                break
        if not placed:
            continue
        mask, tex = _render_object(rng, cls, ph, pw)
        region = img[:, y0:y0 + ph, x0:x0 + pw]
        region[:, mask] = tex[:, mask]
        rows = np.nonzero(mask.any(axis=1))[0]
        cols = np.nonzero(mask.any(axis=0))[0]
        tight = (float(x0 + cols[0]), float(y0 + rows[0]),
                 float(x0 + cols[-1] + 1), float(y0 + rows[-1] + 1))
        boxes.append(tight)
        classes.append(cls)

    u8 = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    return Scene(scene_id=int(seed), width=size, height=size,
                 boxes=boxes, classes=classes, seed=int(seed), _image_u8=u8)


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    scenes: list
    categories: dict = field(default_factory=lambda: dict(CLASS_NAMES))

    def __len__(self):
        return len(self.scenes)

    def class_instances(self, class_id):
        """All (scene index, box index) pairs carrying the class."""
        out = []
        for si, scene in enumerate(self.scenes):
            for bi, cls in enumerate(scene.classes):
                if cls == class_id:
                    out.append((si, bi))
        return out

    def scenes_with_class(self, class_id):
        return [si for si, s in enumerate(self.scenes) if class_id in s.classes]


def synth_dataset(seed, n_scenes, density="medium", size=320,
                  class_mix=("ore", "rectangle", "triangle"), id_offset=0):
    scenes = []
    for i in range(n_scenes):
        scene = synth_scene(seed * 100_000 + id_offset + i, density, size, class_mix)
        scene.scene_id = id_offset + i
        scenes.append(scene)
    return Dataset(scenes)


def materialize(dataset, out_dir):
    """Write a dataset as PNG images plus a COCO-style annotation document."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for scene in dataset.scenes:
        name = f"images/{scene.scene_id:06d}.png"
        arr = (scene.image * 255.0).round().astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr).save(out / name)
        images.append({"id": scene.scene_id, "file_name": name,
                       "width": scene.width, "height": scene.height})
        for box, cls in zip(scene.boxes, scene.classes):
            x1, y1, x2, y2 = box
            annotations.append({"id": ann_id, "image_id": scene.scene_id,
                                "bbox": [x1, y1, x2 - x1, y2 - y1],
                                "category_id": cls})
            ann_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": cid, "name": name}
                       for cid, name in sorted(dataset.categories.items())],
    }
    with open(out / "annotations.json", "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)
    return out / "annotations.json"


def ingest_coco(path):
    """Load a COCO-style annotation document; images load lazily by name.

    Boxes convert losslessly from [x,y,w,h] to (x1,y1,x2,y2). Malformed
    records raise :class:`DataError` naming the offending id.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "annotations.json"
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise DataError(f"annotation file not found: {path}")
    except json.JSONDecodeError as e:
        raise DataError(f"not valid JSON: {path}: {e}")

    root = path.parent
    scenes_by_id = {}
    for rec in doc.get("images", []):
        for key in ("id", "file_name", "width", "height"):
            if key not in rec:
                raise DataError(f"image record {rec.get('id', '?')}: missing {key!r}")
        scenes_by_id[rec["id"]] = Scene(
            scene_id=rec["id"], width=rec["width"], height=rec["height"],
            boxes=[], classes=[], _path=root / rec["file_name"])
    for rec in doc.get("annotations", []):
        rid = rec.get("id", "?")
        for key in ("image_id", "bbox", "category_id"):
            if key not in rec:
                raise DataError(f"annotation {rid}: missing {key!r}")
        if rec["image_id"] not in scenes_by_id:
            raise DataError(f"annotation {rid}: unknown image_id {rec['image_id']}")
        bbox = rec["bbox"]
        if len(bbox) != 4 or bbox[2] <= 0 or bbox[3] <= 0:
            raise DataError(f"annotation {rid}: degenerate bbox {bbox}")
        scene = scenes_by_id[rec["image_id"]]
        x, y, w, h = map(float, bbox)
        scene.boxes.append((x, y, x + w, y + h))
        scene.classes.append(int(rec["category_id"]))
    categories = {c["id"]: c["name"] for c in doc.get("categories", [])}
    scenes = [scenes_by_id[k] for k in sorted(scenes_by_id)]
    return Dataset(scenes, categories or dict(CLASS_NAMES))


# ---------------------------------------------------------------------------
# episodes

@dataclass
class Episode:
    """One few-shot task: a resized query plus K zero-padded support crops."""
    query_image: np.ndarray      # (3,H,W) float32, short side 320 (long <= 1000)
    query_boxes: list            # gt boxes of the episode class, query scale
    supports: list               # K arrays (3,240,240) float32
    class_id: int
    query_scene: int             # provenance (scene index in the dataset)
    scale: float = 1.0


def _resize_image(img, oh, ow):
    c, h, w = img.shape
    rh = _bilinear_matrix(h, oh, np.float32)
    rw = _bilinear_matrix(w, ow, np.float32)
    return np.einsum("ih,chw,jw->cij", rh, img, rw, optimize=True)


def query_scale(width, height):
    """Short side to 320 unless the long side would exceed 1000."""
    short, long = min(width, height), max(width, height)
    scale = QUERY_SHORT_SIDE / short
    if long * scale > QUERY_LONG_CAP:
        scale = QUERY_LONG_CAP / long
    return scale


def resize_query(scene):
    """(image, scaled boxes, scale) for one scene under the query rule."""
    scale = query_scale(scene.width, scene.height)
    oh = int(round(scene.height * scale))
    ow = int(round(scene.width * scale))
    img = scene.image
    if (oh, ow) != (scene.height, scene.width):
        img = _resize_image(img, oh, ow)
    boxes = [tuple(v * scale for v in b) for b in scene.boxes]
    return img, boxes, scale


def support_crop(scene, box):
    """Instance crop with a 16 px context margin, scaled to fit 240x240
    (aspect preserved) and centered on a zero pad."""
    x1, y1, x2, y2 = box
    cx1 = max(0, int(math.floor(x1 - SUPPORT_MARGIN)))
    cy1 = max(0, int(math.floor(y1 - SUPPORT_MARGIN)))
    cx2 = min(scene.width, int(math.ceil(x2 + SUPPORT_MARGIN)))
    cy2 = min(scene.height, int(math.ceil(y2 + SUPPORT_MARGIN)))
    crop = scene.image[:, cy1:cy2, cx1:cx2]
    ch, cw = crop.shape[1], crop.shape[2]
    scale = min(SUPPORT_SIZE / cw, SUPPORT_SIZE / ch)
    nh = max(1, int(round(ch * scale)))
    nw = max(1, int(round(cw * scale)))
    resized = _resize_image(crop, nh, nw)
    out = np.zeros((3, SUPPORT_SIZE, SUPPORT_SIZE), dtype=np.float32)
    oy = (SUPPORT_SIZE - nh) // 2
    ox = (SUPPORT_SIZE - nw) // 2
    out[:, oy:oy + nh, ox:ox + nw] = resized
    return out


def sample_episode(dataset, class_id, k_shot, seed, query_pool=None,
                   support_pool=None):
    """Assemble one episode; pure function of its arguments.

    The query is drawn from scenes containing the class (or ``query_pool``);
    supports are instance crops of the class drawn from scenes other than
    the query. Raises :class:`DataError` when fewer than ``k_shot``
    instances exist outside the query scene.
    """
    if k_shot < 1:
        raise ValueError("k_shot must be >= 1")
    rng = np.random.default_rng([int(seed), 40459, int(class_id), int(k_shot)])
    candidates = query_pool if query_pool is not None else dataset.scenes_with_class(class_id)
    if not candidates:
        raise DataError(f"no scene contains class {class_id}")
    query_idx = int(candidates[rng.integers(0, len(candidates))])

    instances = support_pool if support_pool is not None else dataset.class_instances(class_id)
    usable = [inst for inst in instances if inst[0] != query_idx]
    if len(usable) < k_shot:
        raise DataError(
            f"class {class_id}: only {len(usable)} support instances outside "
            f"scene {query_idx}, need {k_shot}")
    picks = rng.choice(len(usable), size=k_shot, replace=False)
    supports = []
    for p in sorted(int(v) for v in picks):
        si, bi = usable[p]
        scene = dataset.scenes[si]
        supports.append(support_crop(scene, scene.boxes[bi]))

    scene = dataset.scenes[query_idx]
    img, boxes, scale = resize_query(scene)
    cls_boxes = [b for b, c in zip(boxes, scene.classes) if c == class_id]
    return Episode(query_image=img, query_boxes=cls_boxes, supports=supports,
                   class_id=class_id, query_scene=query_idx, scale=scale)


def kshot_pool(dataset, class_id, k_shot):
    """Smallest scene prefix that leaves >= k_shot instances outside any
    member scene (so every episode query has a full support set)."""
    counts = []
    for scene in dataset.scenes:
        counts.append(sum(1 for c in scene.classes if c == class_id))
    chosen = []
    total = 0
    for si, n in enumerate(counts):
        if n == 0:
            continue
        chosen.append(si)
        total += n
        if total - max(counts[i] for i in chosen) >= k_shot:
            break
    else:
        raise DataError(f"dataset too small for {k_shot}-shot pool of class {class_id}")
    return chosen

"""Synthetic few-shot detection corpus, episodic sampling and AP evaluation.

Classes are shape/fill-pattern combinations (disc, square, cross, ring x
solid, horizontal stripes, vertical stripes) drawn in a class-specific hue on
cluttered low-saturation backgrounds.  Images are stored as binary PPM (P6);
annotations are one ASCII line per box: ``image_path class_id x1 y1 x2 y2``;
the class split file lists ``base:`` and ``novel:`` ids.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .boxes import Box, as_box_array, iou_matrix

SHAPES = ("disc", "square", "cross", "ring")
FILLS = ("solid", "hstripe", "vstripe")
NUM_CLASSES = len(SHAPES) * len(FILLS)
# every novel shape and fill also occurs among the base classes
DEFAULT_NOVEL = (1, 5, 6, 11)


# -- PPM files -----------------------------------------------------------------


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError(f"unsupported PPM header in {path}: {fields}")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)


def read_ppm_size(path):
    with open(path, "rb") as f:
        head = f.read(64).split()
    return int(head[1]), int(head[2])  # width, height


# -- rendering -----------------------------------------------------------------


def _hsv_to_rgb(h, s, v):
    h = (h % 1.0) * 6.0
    i = int(h)
    f = h - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]


def class_color(class_id, n_classes=NUM_CLASSES, jitter=0.0):
    return _hsv_to_rgb(class_id / n_classes + jitter, 0.85, 0.95)


def _instance_mask(shape, box, size):
    x1, y1, x2, y2 = box
    ys, xs = np.mgrid[0:size, 0:size]
    cy, cx = (y1 + y2) / 2.0, (x1 + x2) / 2.0
    ry, rx = (y2 - y1) / 2.0, (x2 - x1) / 2.0
    px, py = xs + 0.5, ys + 0.5
    inside_box = (px > x1) & (px < x2) & (py > y1) & (py < y2)
    if shape == "square":
        return inside_box
    if shape == "disc":
        return ((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 <= 1.0
    if shape == "ring":
        d = ((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2
        return (d <= 1.0) & (d >= 0.45)
    if shape == "cross":
        bar_w = max(2.0, 0.34 * (x2 - x1))
        bar_h = max(2.0, 0.34 * (y2 - y1))
        horiz = inside_box & (np.abs(py - cy) < bar_h / 2.0)
        vert = inside_box & (np.abs(px - cx) < bar_w / 2.0)
        return horiz | vert
    raise ValueError(f"unknown shape {shape!r}")


def _fill_colors(class_id, fill, ys, xs, jitter):
    bright = np.array(class_color(class_id, jitter=jitter))
    dark = bright * 0.55
    if fill == "solid":
        return np.broadcast_to(bright, ys.shape + (3,))
    stripes = (ys // 3) % 2 if fill == "hstripe" else (xs // 3) % 2
    return np.where(stripes[..., None] == 0, bright, dark)


def render_image(rng, size, instance_classes, min_side=20, max_side=36):
    """One synthetic image: cluttered background plus the requested shapes.

    ``instance_classes`` lists the class id of every instance to draw (an
    instance is silently skipped if no non-overlapping placement is found).
    Returns (uint8 image, [(class_id, Box, bool mask)]); masks are as drawn,
    before any later instance paints over them.
    """
    ys, xs = np.mgrid[0:size, 0:size]
    base = np.array(_hsv_to_rgb(rng.uniform(), rng.uniform(0.05, 0.2), rng.uniform(0.35, 0.6)))
    img = np.broadcast_to(base, (size, size, 3)).copy()
    img += (xs[..., None] / size - 0.5) * rng.uniform(-0.16, 0.16)
    img += (ys[..., None] / size - 0.5) * rng.uniform(-0.16, 0.16)

    # scribble distractors: small low-saturation blobs, below anchor scale
    for _ in range(rng.integers(3, 7)):
        d = rng.integers(2, 6)
        x0 = rng.integers(0, size - d)
        y0 = rng.integers(0, size - d)
        color = np.array(_hsv_to_rgb(rng.uniform(), 0.3, rng.uniform(0.3, 0.7)))
        img[y0 : y0 + d, x0 : x0 + d] = color

    instances = []
    placed = []
    for class_id in instance_classes:
        for _ in range(20):
            w = int(rng.integers(min_side, min(max_side, size - 4) + 1))
            h = int(rng.integers(min_side, min(max_side, size - 4) + 1))
            x1 = int(rng.integers(2, size - w - 1))
            y1 = int(rng.integers(2, size - h - 1))
            box = np.array([x1, y1, x1 + w, y1 + h], dtype=np.float64)
            if not placed or iou_matrix(box[None], np.stack(placed)).max() <= 0.25:
                break
        else:
            continue
        placed.append(box)
        class_id = int(class_id)
        shape = SHAPES[class_id // len(FILLS)]
        fill = FILLS[class_id % len(FILLS)]
        mask = _instance_mask(shape, box, size)
        colors = _fill_colors(class_id, fill, ys, xs, jitter=rng.uniform(-0.015, 0.015))
        img = np.where(mask[..., None], colors, img)
        instances.append((class_id, Box(*box.tolist()), mask))

    img += rng.uniform(-0.03, 0.03, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8), instances


# -- dataset index ----------------------------------------------------------------


@dataclass(frozen=True)
class ImageRecord:
    id: int
    path: str        # relative to the dataset root
    width: int
    height: int


@dataclass(frozen=True)
class Annotation:
    image_id: int
    class_id: int
    box: Box


@dataclass
class DatasetIndex:
    root: str
    images: list
    annotations: list
    base_classes: list
    novel_classes: list

    def __post_init__(self):
        overlap = set(self.base_classes) & set(self.novel_classes)
        if overlap:
            raise ValueError(f"base and novel classes overlap: {sorted(overlap)}")
        ids = {im.id for im in self.images}
        for a in self.annotations:
            if a.image_id not in ids:
                raise ValueError(f"annotation references missing image {a.image_id}")

    @property
    def all_classes(self):
        return sorted(self.base_classes) + sorted(self.novel_classes)

    def image_by_id(self, image_id) -> ImageRecord:
        return self._by_id()[image_id]

    def _by_id(self):
        if not hasattr(self, "_id_map"):
            self._id_map = {im.id: im for im in self.images}
        return self._id_map

    def annotations_for(self, image_id, class_id=None):
        return [
            a for a in self.annotations
            if a.image_id == image_id and (class_id is None or a.class_id == class_id)
        ]

    def instances_of(self, class_id):
        return [a for a in self.annotations if a.class_id == class_id]

    def images_with(self, class_id):
        seen, out = set(), []
        for a in self.annotations:
            if a.class_id == class_id and a.image_id not in seen:
                seen.add(a.image_id)
                out.append(a.image_id)
        return out


def save_annotations(index: DatasetIndex) -> None:
    with open(os.path.join(index.root, "annotations.txt"), "w") as f:
        by_id = {im.id: im for im in index.images}
        for a in index.annotations:
            b = a.box
            f.write(
                f"{by_id[a.image_id].path} {a.class_id} "
                f"{int(b.x1)} {int(b.y1)} {int(b.x2)} {int(b.y2)}\n"
            )
    with open(os.path.join(index.root, "split.txt"), "w") as f:
        f.write("base: " + " ".join(str(c) for c in index.base_classes) + "\n")
        f.write("novel: " + " ".join(str(c) for c in index.novel_classes) + "\n")


def load_dataset(root) -> DatasetIndex:
    images, annotations = [], []
    path_ids = {}
    with open(os.path.join(root, "annotations.txt")) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            rel, class_id, x1, y1, x2, y2 = parts
            if rel not in path_ids:
                w, h = read_ppm_size(os.path.join(root, rel))
                path_ids[rel] = len(images)
                images.append(ImageRecord(len(images), rel, w, h))
            annotations.append(
                Annotation(path_ids[rel], int(class_id), Box(float(x1), float(y1), float(x2), float(y2)))
            )
    split = {}
    with open(os.path.join(root, "split.txt")) as f:
        for line in f:
            if ":" in line:
                name, rest = line.split(":", 1)
                split[name.strip()] = [int(t) for t in rest.split()]
    return DatasetIndex(str(root), images, annotations, split["base"], split["novel"])


def generate_synthetic_corpus(out_dir, seed, n_images, classes=NUM_CLASSES,
                              novel_classes=DEFAULT_NOVEL, image_size=64,
                              max_instances=3) -> DatasetIndex:
    """Render and write a corpus; fully deterministic for a given seed."""
    class_pool = list(range(classes)) if isinstance(classes, int) else list(classes)
    novel = [c for c in novel_classes if c in class_pool]
    base = [c for c in class_pool if c not in novel]
    rng = np.random.default_rng(seed)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)

    # deal classes from a reshuffled deck so per-class counts stay balanced
    deck = []

    def next_class():
        if not deck:
            deck.extend(rng.permutation(class_pool).tolist())
        return deck.pop()

    images, annotations = [], []
    for i in range(n_images):
        wanted = [next_class() for _ in range(int(rng.integers(1, max_instances + 1)))]
        img, instances = render_image(rng, image_size, wanted)
        rel = os.path.join("images", f"img_{i:05d}.ppm")
        write_ppm(os.path.join(out_dir, rel), img)
        images.append(ImageRecord(i, rel, image_size, image_size))
        for class_id, box, _ in instances:
            annotations.append(Annotation(i, class_id, box))
    index = DatasetIndex(str(out_dir), images, annotations, base, novel)
    save_annotations(index)
    return index


class ImageStore:
    """Lazy cache of float images in [-0.5, 0.5], keyed by image id."""

    def __init__(self, index: DatasetIndex):
        self.index = index
        self._cache = {}

    def get(self, image_id) -> np.ndarray:
        if image_id not in self._cache:
            rec = self.index.image_by_id(image_id)
            raw = read_ppm(os.path.join(self.index.root, rec.path))
            self._cache[image_id] = raw.astype(np.float64) / 255.0 - 0.5
        return self._cache[image_id]


# -- episodes ---------------------------------------------------------------------


@dataclass
class EpisodeBatch:
    class_id: int
    query_image: np.ndarray      # [1, H, W, 3]
    gt_boxes: np.ndarray         # [G, 4] boxes of class_id in the query image
    support_images: np.ndarray   # [B_s, S, S, 3]
    query_id: int = -1


def bilinear_resize(img: np.ndarray, out_h, out_w) -> np.ndarray:
    h, w, _ = img.shape
    uy = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    ux = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(uy).astype(int)
    x0 = np.floor(ux).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (uy - y0)[:, None, None]
    fx = (ux - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def crop_support(image: np.ndarray, box: Box, out_size, expand=0.05) -> np.ndarray:
    """Tight box expanded by ``expand`` per side, clipped, resized square."""
    h, w, _ = image.shape
    bw, bh = box.x2 - box.x1, box.y2 - box.y1
    x1 = max(0, int(np.floor(box.x1 - expand * bw)))
    y1 = max(0, int(np.floor(box.y1 - expand * bh)))
    x2 = min(w, int(np.ceil(box.x2 + expand * bw)))
    y2 = min(h, int(np.ceil(box.y2 + expand * bh)))
    return bilinear_resize(image[y1:y2, x1:x2], out_size, out_size)


def sample_episode(index: DatasetIndex, store: ImageStore, class_id, b_s, rng,
                   support_size=32, allow_same_image=False,
                   query_id=None) -> EpisodeBatch:
    """Query image with >= 1 instance of the class plus b_s support crops.

    Supports come from other images unless ``allow_same_image`` (needed for
    1-shot fine-tuning, where a class may exist in a single image).
    """
    image_ids = index.images_with(class_id)
    if not image_ids:
        raise ValueError(f"class {class_id} has no annotated instances")
    if query_id is None:
        query_id = int(rng.choice(image_ids))
    instances = index.instances_of(class_id)
    pool = [a for a in instances if a.image_id != query_id]
    if len(pool) < b_s:
        if not allow_same_image:
            raise ValueError(
                f"class {class_id}: {len(pool)} support candidates outside the query "
                f"image, need {b_s} (pass allow_same_image for k-shot fine-tuning)"
            )
        pool = instances
    picks = [pool[i] for i in rng.choice(len(pool), size=b_s, replace=len(pool) < b_s)]
    supports = np.stack([crop_support(store.get(a.image_id), a.box, support_size) for a in picks])
    gt = as_box_array([a.box for a in index.annotations_for(query_id, class_id)])
    return EpisodeBatch(class_id, store.get(query_id)[None], gt, supports, query_id)


def make_k_shot_subset(index: DatasetIndex, k, seed) -> DatasetIndex:
    """Exactly k annotations per class (base and novel), deterministic."""
    rng = np.random.default_rng(seed)
    chosen = []
    for class_id in index.all_classes:
        candidates = index.instances_of(class_id)
        if len(candidates) < k:
            raise ValueError(f"class {class_id} has {len(candidates)} boxes, need {k}")
        picks = rng.choice(len(candidates), size=k, replace=False)
        chosen.extend(candidates[i] for i in sorted(picks))
    used = {a.image_id for a in chosen}
    images = [im for im in index.images if im.id in used]
    return DatasetIndex(index.root, images, chosen, list(index.base_classes), list(index.novel_classes))


# -- evaluation --------------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    image_id: int
    class_id: int
    score: float
    box: np.ndarray

    def as_line(self):
        b = self.box
        return f"{self.image_id} {self.class_id} {self.score:.6f} " \
               f"{b[0]:.2f} {b[1]:.2f} {b[2]:.2f} {b[3]:.2f}"


def average_precision(recall, precision):
    """Area under the step-interpolated PR curve."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_ap50(detections, index: DatasetIndex, class_ids, iou_thresh=0.5):
    """Greedy IoU matching per image; returns ({class: AP}, mean over scored).

    Classes without any ground truth are reported as None and excluded from
    the mean.
    """
    per_class = {}
    for c in class_ids:
        gts = {}
        for a in index.annotations:
            if a.class_id == c:
                gts.setdefault(a.image_id, []).append(a.box)
        n_gt = sum(len(v) for v in gts.values())
        if n_gt == 0:
            per_class[c] = None
            continue
        dets = sorted(
            (d for d in detections if d.class_id == c),
            key=lambda d: -d.score,
        )
        matched = {img: np.zeros(len(v), dtype=bool) for img, v in gts.items()}
        tp = np.zeros(len(dets))
        fp = np.zeros(len(dets))
        for i, d in enumerate(dets):
            boxes = gts.get(d.image_id)
            if not boxes:
                fp[i] = 1
                continue
            ious = iou_matrix(d.box[None], boxes)[0]
            order = np.argsort(-ious)
            hit = -1
            for j in order:
                if ious[j] >= iou_thresh and not matched[d.image_id][j]:
                    hit = j
                    break
            if hit >= 0:
                matched[d.image_id][hit] = True
                tp[i] = 1
            else:
                fp[i] = 1
        ctp, cfp = np.cumsum(tp), np.cumsum(fp)
        recall = ctp / n_gt
        precision = ctp / np.maximum(ctp + cfp, 1e-12)
        per_class[c] = average_precision(recall, precision)
    scored = [v for v in per_class.values() if v is not None]
    mean = float(np.mean(scored)) if scored else 0.0
    return per_class, mean


def summarize_runs(values):
    """Mean and standard deviation over repeated seeded runs."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())

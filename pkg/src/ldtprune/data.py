"""Deterministic synthetic shape-detection dataset.

Class identity is the shape's geometry (circle / square / triangle / cross),
while colour, scale and position are randomized, so classes are not
separable by colour alone.  Every sample is a pure function of
(master seed, sample index) via a counter-based generator, so samples can be
produced independently and in parallel.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

SHAPE_NAMES = ("circle", "square", "triangle", "cross")


@dataclass
class DatasetConfig:
    image_size: int = 64
    num_classes: int = 4
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 12          # smallest shape extent in px
    max_size: int = 44
    min_box: int = 8            # minimum bbox side
    noise: float = 0.05
    max_overlap: float = 0.2    # pairwise IoU limit
    n_train: int = 256
    n_val: int = 96
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes for between-class scatter")
        if self.num_classes > len(SHAPE_NAMES):
            raise ValueError(f"at most {len(SHAPE_NAMES)} shape classes available")


@dataclass
class DetectionSample:
    image: Tensor                       # [3,H,W], values in [0,1]
    objects: list = field(default_factory=list)  # (x1,y1,x2,y2,class_id)
    # (kind, size, cx, cy) per object, kept so shapes can be re-rasterized
    shape_params: list = field(default_factory=list)

    def boxes(self):
        return [(o[0], o[1], o[2], o[3]) for o in self.objects]

    def class_ids(self):
        return [o[4] for o in self.objects]


def _shape_mask(kind, size, img_size, cx, cy):
    """Rasterize one shape; returns a boolean [H,W] mask."""
    yy, xx = np.mgrid[0:img_size, 0:img_size]
    dx = xx - cx + 0.5
    dy = yy - cy + 0.5
    h = size / 2.0
    if kind == 0:  # circle
        return dx * dx + dy * dy <= h * h
    if kind == 1:  # square
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if kind == 2:  # upward triangle
        # apex at cy-h, base at cy+h
        inside_y = (dy >= -h) & (dy <= h)
        halfwidth = (dy + h) / 2.0
        return inside_y & (np.abs(dx) <= halfwidth)
    if kind == 3:  # plus-shaped cross
        t = max(h / 3.0, 1.5)
        return ((np.abs(dx) <= t) & (np.abs(dy) <= h)) | (
            (np.abs(dy) <= t) & (np.abs(dx) <= h)
        )
    raise ValueError(f"unknown shape kind {kind}")


def box_iou(a, b):
    ix1 = max(a[0], b[0])
    iy1 = max(a[1], b[1])
    ix2 = min(a[2], b[2])
    iy2 = min(a[3], b[3])
    iw = max(0.0, ix2 - ix1)
    ih = max(0.0, iy2 - iy1)
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def _rng_for(config, index):
    # Philox is counter based: sample `index` never depends on predecessors.
    return np.random.Generator(np.random.Philox(key=(config.seed, index)))


def generate_sample(config, index):
    """Generate sample ``index``; bit-identical across calls."""
    if index < 0:
        raise ValueError("index must be >= 0")
    rng = _rng_for(config, index)
    n = config.image_size
    bg = rng.uniform(0.1, 0.35)
    img = np.full((3, n, n), bg, dtype=np.float64)
    n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))

    objects = []
    shape_params = []
    for _ in range(n_obj):
        placed = False
        for _attempt in range(100):
            kind = int(rng.integers(0, config.num_classes))
            size = float(rng.uniform(config.min_size, config.max_size))
            half = size / 2.0
            cx = float(rng.uniform(half, n - half))
            cy = float(rng.uniform(half, n - half))
            color = rng.uniform(0.45, 1.0, size=3)
            mask = _shape_mask(kind, size, n, cx, cy)
            ys, xs = np.nonzero(mask)
            if len(xs) == 0:
                continue
            # tight bbox around the rendered extent (exclusive upper edge)
            x1, x2 = int(xs.min()), int(xs.max()) + 1
            y1, y2 = int(ys.min()), int(ys.max()) + 1
            if x2 - x1 < config.min_box or y2 - y1 < config.min_box:
                continue
            if (x2 - x1) * (y2 - y1) < config.min_box * config.min_box:
                continue
            box = (x1, y1, x2, y2)
            if any(box_iou(box, o[:4]) > config.max_overlap for o in objects):
                continue
            img[:, mask] = color[:, None]
            objects.append((x1, y1, x2, y2, kind))
            shape_params.append((kind, size, cx, cy))
            placed = True
            break
        if not placed:
            continue  # emit fewer objects rather than fail

    if config.noise > 0:
        img += rng.uniform(-config.noise, config.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return DetectionSample(
        image=Tensor(img.astype(np.float32)),
        objects=objects,
        shape_params=shape_params,
    )


def generate_split(config, split):
    """Materialize the train or val split; index ranges are disjoint."""
    if split == "train":
        lo, hi = 0, config.n_train
    elif split == "val":
        lo, hi = config.n_train, config.n_train + config.n_val
    else:
        raise ValueError(f"unknown split {split!r}")
    return [generate_sample(config, i) for i in range(lo, hi)]


def export_split(config, split, out_dir):
    """Dump a split as raw float32 blobs plus a plain-text annotation file.

    Annotation lines: ``index class x1 y1 x2 y2``.
    """
    os.makedirs(out_dir, exist_ok=True)
    samples = generate_split(config, split)
    lines = []
    for i, s in enumerate(samples):
        s.image.data.tofile(os.path.join(out_dir, f"{split}_{i:05d}.f32"))
        for (x1, y1, x2, y2, cid) in s.objects:
            lines.append(f"{i} {cid} {x1} {y1} {x2} {y2}")
    with open(os.path.join(out_dir, f"{split}_annotations.txt"), "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    return samples

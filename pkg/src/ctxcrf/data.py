"""Samples, binary Netpbm I/O, tab-separated manifests and the synthetic context task."""
from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np

VOID = 255


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray   # (H, W, 3) float64 in [0, 1]
    mask: np.ndarray    # (H, W) int, class index or VOID
    id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DatasetError(f"image must be (H, W, 3), got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise DatasetError(f"mask {self.mask.shape} does not match image {self.image.shape[:2]}")


# ---------------------------------------------------------------------------
# Netpbm (P5 graymap / P6 pixmap, maxval <= 255)

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def read_netpbm(path) -> np.ndarray:
    """Return uint8 array (H, W) for P5 or (H, W, 3) for P6."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos, fields = 0, []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise DatasetError(f"{path}: malformed Netpbm header")
        fields.append(m.group(1))
        pos = m.end()
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise DatasetError(f"{path}: unsupported Netpbm magic {magic!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise DatasetError(f"{path}: malformed Netpbm header") from exc
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise DatasetError(f"{path}: unsupported size or maxval")
    pos += 1   # single whitespace byte after maxval
    ch = 3 if magic == b"P6" else 1
    n = w * h * ch
    if len(data) - pos < n:
        raise DatasetError(f"{path}: truncated pixel data")
    arr = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos)
    return arr.reshape((h, w, 3) if ch == 3 else (h, w)).copy()


def write_netpbm(path, arr):
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise DatasetError("Netpbm writer expects uint8 data")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise DatasetError(f"cannot write array of shape {arr.shape} as Netpbm")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr).tobytes())


def image_to_bytes(image):
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_sample(sample: Sample, image_path, mask_path):
    write_netpbm(image_path, image_to_bytes(sample.image))
    write_netpbm(mask_path, np.asarray(sample.mask).astype(np.uint8))


def load_sample(image_path, mask_path, num_classes=None, sample_id=""):
    img = read_netpbm(image_path)
    mask = read_netpbm(mask_path)
    if img.ndim != 3:
        raise DatasetError(f"{image_path}: expected a color (P6) image")
    if mask.ndim != 2:
        raise DatasetError(f"{mask_path}: expected a graymap (P5) mask")
    if mask.shape != img.shape[:2]:
        raise DatasetError(f"{sample_id}: image {img.shape[:2]} and mask {mask.shape} differ in size")
    if num_classes is not None:
        bad = (mask >= num_classes) & (mask != VOID)
        if bad.any():
            raise DatasetError(f"{mask_path}: class index {int(mask[bad].max())} >= {num_classes}")
    return Sample(img.astype(np.float64) / 255.0, mask.astype(np.int64), sample_id)


# ---------------------------------------------------------------------------
# manifests: one "id<TAB>image<TAB>mask" line per sample, paths relative to the manifest

def read_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetError(f"{path}:{lineno}: expected 3 tab-separated fields")
            sid, img, mask = parts
            rows.append((sid, os.path.join(base, img), os.path.join(base, mask)))
    return rows


def load_dataset(manifest_path, num_classes=None):
    return [load_sample(img, mask, num_classes, sid) for sid, img, mask in read_manifest(manifest_path)]


def save_dataset(samples, out_dir, manifest_name="manifest.tsv"):
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    lines = []
    for s in samples:
        img_rel = os.path.join("images", f"{s.id}.ppm")
        mask_rel = os.path.join("masks", f"{s.id}.pgm")
        save_sample(s, os.path.join(out_dir, img_rel), os.path.join(out_dir, mask_rel))
        lines.append(f"{s.id}\t{img_rel}\t{mask_rel}\n")
    path = os.path.join(out_dir, manifest_name)
    with open(path, "w") as fh:
        fh.writelines(lines)
    return path


# ---------------------------------------------------------------------------
# synthetic context task

WATER, ROAD, BOAT, CAR, SKY, TREE = range(6)
CLASS_NAMES = ("water", "road", "boat", "car", "sky", "tree")
AMBIGUOUS = (BOAT, CAR)


@dataclass
class SynthSpec:
    """Block-world scenes: ground blocks along the bottom, objects standing on them.

    ``boat`` and ``car`` blocks are drawn from one appearance model; a boat
    always stands on water, a car on road.  Ground type is chosen per column,
    so both kinds of ground usually appear side by side in one image.  An
    object is 1 to ``max_object_height`` blocks tall, so its upper part can be
    well away from the ground that identifies it.  Classes from index 4 up
    fill the remaining blocks, one class per image when ``scene_background``
    is set; with ``num_classes == 4`` those blocks are void.
    """
    image_size: int = 32
    block: int = 8
    num_classes: int = 6
    object_prob: float = 0.7
    noise: float = 0.04          # per-pixel std of ground and object classes
    background_noise: float = 0.10
    jitter: int = 2              # random shift of interior block boundaries, pixels
    max_object_height: int = 1   # in blocks
    scene_background: bool = False

    def __post_init__(self):
        if self.num_classes < 4:
            raise ValueError("the synthetic task needs K >= 4 (two ambiguous + two context classes)")
        if self.num_classes > 255:
            raise ValueError("at most 255 classes fit a graymap mask")
        if self.image_size % self.block:
            raise ValueError("image_size must be a multiple of block")
        if self.max_object_height < 1:
            raise ValueError("max_object_height must be >= 1")


# mean colors; boat and car share theirs, sky and tree differ only slightly
_COLORS = np.array([
    [0.15, 0.30, 0.65],   # water
    [0.35, 0.35, 0.35],   # road
    [0.80, 0.30, 0.20],   # boat
    [0.80, 0.30, 0.20],   # car
    [0.55, 0.70, 0.85],   # sky
    [0.50, 0.64, 0.78],   # tree
])


def _texture(cls, shape, spec: SynthSpec, rng):
    """Pixel colors for a block of class ``cls``; boat and car use the same distribution."""
    k = int(cls)
    if k == VOID:
        return 0.5 + spec.background_noise * rng.standard_normal(shape + (3,))
    if k < len(_COLORS):
        base = _COLORS[k]
    else:
        base = np.array([(37 * k % 100) / 100, (61 * k % 100) / 100, (83 * k % 100) / 100])
    noise = spec.noise if k < SKY else spec.background_noise
    img = base + noise * rng.standard_normal(shape + (3,))
    if k == WATER:
        rows = np.arange(shape[0])[:, None, None]
        img = img + 0.06 * np.sin(rows * 1.6)
    elif k == ROAD:
        cols = np.arange(shape[1])[None, :, None]
        img = img + 0.05 * ((cols // 2) % 2)
    return img


def _block_label_grid(spec: SynthSpec, rng):
    g = spec.image_size // spec.block
    if spec.num_classes == 4:
        labels = np.full((g, g), VOID)
    elif spec.scene_background:
        labels = np.full((g, g), rng.integers(SKY, spec.num_classes))
    else:
        labels = rng.integers(SKY, spec.num_classes, size=(g, g))
    for c in range(g):
        ground = WATER if rng.random() < 0.5 else ROAD
        labels[g - 1, c] = ground
        if g > 1 and rng.random() < spec.object_prob:
            height = rng.integers(1, min(spec.max_object_height, g - 1) + 1)
            labels[g - 1 - height:g - 1, c] = BOAT if ground == WATER else CAR
    return labels


def _render(labels, spec: SynthSpec, rng):
    g = labels.shape[0]
    n, b = spec.image_size, spec.block
    edges = np.arange(g + 1) * b
    if spec.jitter:
        edges[1:-1] += rng.integers(-spec.jitter, spec.jitter + 1, size=g - 1)
    row_edges = edges.copy()
    col_edges = np.arange(g + 1) * b
    if spec.jitter:
        col_edges[1:-1] += rng.integers(-spec.jitter, spec.jitter + 1, size=g - 1)
    mask = np.zeros((n, n), dtype=np.int64)
    image = np.zeros((n, n, 3))
    for i in range(g):
        for j in range(g):
            r0, r1, c0, c1 = row_edges[i], row_edges[i + 1], col_edges[j], col_edges[j + 1]
            mask[r0:r1, c0:c1] = labels[i, j]
            image[r0:r1, c0:c1] = _texture(labels[i, j], (r1 - r0, c1 - c0), spec, rng)
    return np.clip(image, 0.0, 1.0), mask


def gen_synthetic(spec: SynthSpec, n: int, rng, prefix="synth"):
    samples = []
    for i in range(n):
        labels = _block_label_grid(spec, rng)
        image, mask = _render(labels, spec, rng)
        samples.append(Sample(image, mask, f"{prefix}{i:04d}"))
    return samples


# ---------------------------------------------------------------------------
# resampling helpers

def nearest_resize_mask(mask, out_h, out_w):
    h, w = mask.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return mask[rows[:, None], cols[None, :]]


def node_labels(mask, height, width):
    """Ground truth per feature-map node: the mask pixel under each cell's center."""
    return nearest_resize_mask(np.asarray(mask), height, width).reshape(-1)

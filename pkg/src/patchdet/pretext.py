"""Data pipeline for random query patch detection pretraining.

Images are numpy arrays of shape (height, width, 3), dtype uint8, row-major.
Boxes are (cx, cy, w, h) normalized to [0, 1] relative to their image.

Every sampling function takes a seed or an ``np.random.Generator``; the same
seed always produces bitwise-identical output regardless of worker layout,
because each sample owns its generator.
"""

import os
from dataclasses import dataclass, field

import numpy as np

MIN_IMAGE_SIDE = 16


def sample_seed(global_seed, *indices):
    """Derive a stable 64-bit seed from a global seed plus index parts."""
    ss = np.random.SeedSequence([int(global_seed)] + [int(i) for i in indices])
    return int(ss.generate_state(1, np.uint64)[0])


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for synthetic detection scenes.

    Shapes are drawn fully inside the canvas, later ones over earlier ones.
    The class index of an object is its position in ``shapes``.
    """

    canvas: int = 64
    shapes: tuple = ("circle", "square", "triangle")
    min_shapes: int = 1
    max_shapes: int = 6
    size_range: tuple = (0.15, 0.5)  # shape extent as fraction of canvas
    bg_range: tuple = (0, 80)
    fg_range: tuple = (96, 255)


@dataclass
class DetectionSample:
    image: np.ndarray
    objects: list  # (class_index, (cx, cy, w, h)) pairs


@dataclass
class PretextSample:
    image: np.ndarray
    patches: list
    gt_boxes: np.ndarray  # (M, 4) float64
    dropped: np.ndarray  # (M,) bool
    seed: int


def _pixel_centers(canvas):
    ys, xs = np.mgrid[0:canvas, 0:canvas].astype(np.float64) + 0.5
    return ys, xs


def _shape_mask(kind, cx, cy, w, h, ys, xs):
    if kind == "circle":
        r = w / 2.0
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if kind == "square":
        return (np.abs(xs - cx) <= w / 2.0) & (np.abs(ys - cy) <= h / 2.0)
    if kind == "triangle":
        # upright isosceles: apex on top, base at the bottom of the box
        top = cy - h / 2.0
        inside_y = (ys >= top) & (ys <= cy + h / 2.0)
        half_width = (w / 2.0) * (ys - top) / h
        return inside_y & (np.abs(xs - cx) <= half_width)
    raise ValueError(f"unknown shape kind {kind!r}")


def synth_image(seed, spec=SynthSpec()):
    """Rasterize a random scene of shapes with exact ground-truth boxes."""
    rng = _as_rng(seed)
    c = spec.canvas
    ys, xs = _pixel_centers(c)
    image = np.empty((c, c, 3), dtype=np.uint8)
    image[:] = rng.integers(spec.bg_range[0], spec.bg_range[1] + 1, size=3)

    count = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    objects = []
    for _ in range(count):
        kind_index = int(rng.integers(len(spec.shapes)))
        kind = spec.shapes[kind_index]
        lo, hi = spec.size_range
        w = rng.uniform(lo, hi) * c
        h = w if kind in ("circle", "square") else rng.uniform(lo, hi) * c
        cx = rng.uniform(w / 2.0, c - w / 2.0)
        cy = rng.uniform(h / 2.0, c - h / 2.0)
        color = rng.integers(spec.fg_range[0], spec.fg_range[1] + 1, size=3)
        image[_shape_mask(kind, cx, cy, w, h, ys, xs)] = color
        objects.append((kind_index, (cx / c, cy / c, w / c, h / c)))
    return DetectionSample(image=image, objects=objects)


def resize_bilinear(image, out_h, out_w):
    """Resample to (out_h, out_w) with bilinear interpolation, pixel-center aligned."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    in_h, in_w = image.shape[:2]
    if (out_h, out_w) == (in_h, in_w):
        return image.copy()

    def axis_coords(out_n, in_n):
        src = (np.arange(out_n, dtype=np.float64) + 0.5) * (in_n / out_n) - 0.5
        lo = np.clip(np.floor(src).astype(np.intp), 0, in_n - 1)
        hi = np.minimum(lo + 1, in_n - 1)
        frac = np.clip(src - lo, 0.0, 1.0)
        return lo, hi, frac

    y0, y1, fy = axis_coords(out_h, in_h)
    x0, x1, fx = axis_coords(out_w, in_w)
    img = image.astype(np.float64)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize_policy(image, short_range, long_max, seed):
    """Resize so the shorter side lands uniformly in short_range, longer side capped."""
    lo, hi = short_range
    if not (lo <= hi <= long_max):
        raise ValueError("short_range must satisfy lo <= hi <= long_max")
    h, w = image.shape[:2]
    short, long = min(h, w), max(h, w)
    rng = _as_rng(seed)
    target = int(rng.integers(lo, hi + 1))
    scale = target / short
    if long * scale > long_max:
        scale = long_max / long
    out_h = max(1, int(round(h * scale)))
    out_w = max(1, int(round(w * scale)))
    # rounding must never push the longer side past the cap
    if max(out_h, out_w) > long_max:
        if out_h >= out_w:
            out_h = long_max
        else:
            out_w = long_max
    return resize_bilinear(image, out_h, out_w)


def crop_queries(image, num_patches, seed, patch_side=16, min_frac=0.125,
                 max_queries=None):
    """Crop num_patches random rectangles and resize each to a square patch.

    Rectangle sides are uniform in [min_frac, 1] of the image side, positions
    uniform subject to containment. Returns (patches, gt_boxes) where gt_boxes
    are the exact crop rectangles normalized to the image size.
    """
    if num_patches < 1:
        raise ValueError("need at least one patch")
    if max_queries is not None and num_patches > max_queries:
        raise ValueError(
            f"{num_patches} patches exceed query capacity {max_queries}")
    h, w = image.shape[:2]
    rng = _as_rng(seed)
    patches = []
    boxes = np.empty((num_patches, 4), dtype=np.float64)
    for k in range(num_patches):
        cw = int(rng.integers(max(1, int(np.ceil(w * min_frac))), w + 1))
        ch = int(rng.integers(max(1, int(np.ceil(h * min_frac))), h + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        crop = image[y0:y0 + ch, x0:x0 + cw]
        patches.append(resize_bilinear(crop, patch_side, patch_side))
        boxes[k] = ((x0 + cw / 2.0) / w, (y0 + ch / 2.0) / h, cw / w, ch / h)
    return patches, boxes


_LUMA = np.array([0.299, 0.587, 0.114])


def augment(patch, seed, jitter=0.4, gray_p=0.2):
    """Random brightness/contrast/saturation jitter plus probabilistic grayscale.

    Never flips. jitter=0 and gray_p=0 is the identity.
    """
    rng = _as_rng(seed)
    b, c, s = rng.uniform(1.0 - jitter, 1.0 + jitter, size=3)
    img = patch.astype(np.float64)
    img = img * b
    img = img.mean() + (img - img.mean()) * c
    luma = img @ _LUMA
    img = luma[..., None] + (img - luma[..., None]) * s
    if rng.random() < gray_p:
        img = np.repeat((img @ _LUMA)[..., None], 3, axis=-1)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def patch_dropout(patches, rate, seed):
    """Independently zero each patch with the given probability."""
    if not (0.0 <= rate < 1.0):
        raise ValueError("dropout rate must be in [0, 1)")
    rng = _as_rng(seed)
    dropped = rng.random(len(patches)) < rate
    out = [np.zeros_like(p) if hit else p for p, hit in zip(patches, dropped)]
    return out, dropped


def make_pretext_sample(image, num_patches, seed, short_range=(48, 64),
                        long_max=80, patch_side=16, min_frac=0.125,
                        jitter=0.4, gray_p=0.2, dropout_rate=0.1,
                        max_queries=None):
    """Assemble one pretext sample: resize, crop, augment, drop out.

    Patch order is preserved end-to-end; patch k's target is gt_boxes[k].
    Targets are the raw crop rectangles: augmentation touches only the
    query patches, never the boxes.
    """
    rng = np.random.default_rng(seed)
    resized = resize_policy(image, short_range, long_max, rng)
    crops, gt_boxes = crop_queries(resized, num_patches, rng, patch_side,
                                   min_frac, max_queries)
    patches = [augment(p, rng, jitter, gray_p) for p in crops]
    patches, dropped = patch_dropout(patches, dropout_rate, rng)
    return PretextSample(image=resized, patches=patches, gt_boxes=gt_boxes,
                         dropped=dropped, seed=int(seed))


# ---------------------------------------------------------------------------
# binary PPM (P6) and dataset layout


def write_ppm(path, image):
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("expected (H, W, 3) uint8 image")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image).tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        data = f.read()

    # header is ASCII tokens (magic, width, height, maxval) with '#' comments,
    # terminated by exactly one whitespace byte before the raster
    tokens = []
    i = 0
    while len(tokens) < 4:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(data) and not data[i:i + 1].isspace():
            i += 1
        if start == i:
            raise ValueError(f"{path}: truncated header")
        tokens.append(data[start:i])
    i += 1  # single whitespace after maxval

    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    raster = data[i:i + w * h * 3]
    if len(raster) != w * h * 3:
        raise ValueError(f"{path}: truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


MANIFEST_NAME = "manifest.txt"
BOXES_NAME = "boxes.txt"


def write_detection_dataset(root, samples):
    """Write PPMs plus manifest and a ground-truth file.

    The ground-truth file has one line per object:
    ``image_path class cx cy w h`` with 6-decimal floats.
    """
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    manifest, box_lines = [], []
    for i, sample in enumerate(samples):
        rel = f"images/{i:06d}.ppm"
        write_ppm(os.path.join(root, rel), sample.image)
        manifest.append(rel)
        for cls, (cx, cy, w, h) in sample.objects:
            box_lines.append(f"{rel} {cls} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}")
    with open(os.path.join(root, MANIFEST_NAME), "w") as f:
        f.write("".join(line + "\n" for line in manifest))
    with open(os.path.join(root, BOXES_NAME), "w") as f:
        f.write("".join(line + "\n" for line in box_lines))


def read_detection_dataset(root):
    """Load a dataset written by write_detection_dataset, in manifest order."""
    with open(os.path.join(root, MANIFEST_NAME)) as f:
        rels = [line.strip() for line in f if line.strip()]
    objects = {rel: [] for rel in rels}
    boxes_path = os.path.join(root, BOXES_NAME)
    if os.path.exists(boxes_path):
        with open(boxes_path) as f:
            for line in f:
                parts = line.split()
                if not parts:
                    continue
                rel, cls = parts[0], int(parts[1])
                box = tuple(float(v) for v in parts[2:6])
                objects[rel].append((cls, box))
    return [DetectionSample(image=read_ppm(os.path.join(root, rel)),
                            objects=objects[rel]) for rel in rels]


def build_synth_dataset(root, count, spec=SynthSpec(), global_seed=0):
    """Generate count synthetic scenes and write them as a dataset."""
    samples = [synth_image(sample_seed(global_seed, i), spec)
               for i in range(count)]
    write_detection_dataset(root, samples)
    return samples
